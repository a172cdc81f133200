//! Descriptive cohort statistics split by outcome, in the shape of the
//! published cohort-characteristics table: count rows carry within-row
//! percentages, continuous rows carry mean (SD) with observed counts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::catalog::{Encoding, FeatureCatalog, Matcher};
use super::window::{apply_time_filter, windows_for};
use super::SubjectRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub feature: String,
    pub n: usize,
    pub survived: usize,
    pub died: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContinuousSummary {
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation (n-1); absent when fewer than two values.
    pub sd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousRow {
    pub feature: String,
    pub all: ContinuousSummary,
    pub survived: ContinuousSummary,
    pub died: ContinuousSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StatsRow {
    Count(CountRow),
    Continuous(ContinuousRow),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsTable {
    pub n_total: usize,
    pub n_survived: usize,
    pub n_died: usize,
    pub rows: Vec<StatsRow>,
}

fn summarize(values: &[f64]) -> ContinuousSummary {
    let n = values.len();
    if n == 0 {
        return ContinuousSummary {
            n,
            mean: None,
            sd: None,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (n >= 2).then(|| {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    });
    ContinuousSummary {
        n,
        mean: Some(mean),
        sd,
    }
}

fn continuous_row(feature: &str, values: &[(f64, bool)]) -> StatsRow {
    let all: Vec<f64> = values.iter().map(|&(v, _)| v).collect();
    let survived: Vec<f64> = values.iter().filter(|&&(_, d)| !d).map(|&(v, _)| v).collect();
    let died: Vec<f64> = values.iter().filter(|&&(_, d)| d).map(|&(v, _)| v).collect();
    StatsRow::Continuous(ContinuousRow {
        feature: feature.to_string(),
        all: summarize(&all),
        survived: summarize(&survived),
        died: summarize(&died),
    })
}

fn count_row(feature: &str, flags: &[(bool, bool)]) -> StatsRow {
    let n = flags.iter().filter(|&&(hit, _)| hit).count();
    let died = flags.iter().filter(|&&(hit, d)| hit && d).count();
    StatsRow::Count(CountRow {
        feature: feature.to_string(),
        n,
        survived: n - died,
        died,
    })
}

/// Builds the outcome-split descriptive table for every catalog feature.
///
/// Vitals are summarized over the same two-week-window extraction used for
/// encoding; windowed conditions produce one count row per window.
pub fn descriptive_stats(subjects: &[SubjectRecord], catalog: &FeatureCatalog) -> StatsTable {
    let died_flags: Vec<bool> = subjects.iter().map(|s| s.outcome.died).collect();
    let n_total = subjects.len();
    let n_died = died_flags.iter().filter(|&&d| d).count();

    // windowed/vital extraction per subject, reused across features
    let filtered: Vec<_> = subjects
        .iter()
        .map(|s| apply_time_filter(s, catalog))
        .collect();

    let mut rows = Vec::new();
    for entry in catalog.entries() {
        match (&entry.encoding, &entry.matcher) {
            (Encoding::Continuous, Matcher::Baseline(field)) => {
                let values: Vec<(f64, bool)> = subjects
                    .iter()
                    .zip(&died_flags)
                    .filter_map(|(s, &d)| {
                        let v = if field == "age_years" {
                            Some(s.age_years)
                        } else {
                            s.continuous_baseline.get(field).and_then(|v| *v)
                        };
                        v.map(|v| (v, d))
                    })
                    .collect();
                rows.push(continuous_row(&entry.feature_name, &values));
            }
            (Encoding::Continuous, Matcher::Vital(_)) => {
                let values: Vec<(f64, bool)> = filtered
                    .iter()
                    .zip(&died_flags)
                    .filter_map(|(f, &d)| {
                        f.iter()
                            .find(|wv| wv.feature_name == entry.feature_name && wv.window.is_none())
                            .map(|wv| (wv.value, d))
                    })
                    .collect();
                rows.push(continuous_row(&entry.feature_name, &values));
            }
            (Encoding::OneHotCategory, Matcher::Baseline(field)) => {
                let labels: Vec<Option<String>> = subjects
                    .iter()
                    .map(|s| {
                        if field == "sex" {
                            Some(s.sex.label().to_string())
                        } else {
                            s.categorical_baseline.get(field).and_then(|v| v.clone())
                        }
                    })
                    .collect();
                let mut levels: Vec<&String> = labels.iter().flatten().collect();
                levels.sort();
                levels.dedup();
                for level in levels {
                    let flags: Vec<(bool, bool)> = labels
                        .iter()
                        .zip(&died_flags)
                        .map(|(l, &d)| (l.as_ref() == Some(level), d))
                        .collect();
                    rows.push(count_row(&format!("{}={}", entry.feature_name, level), &flags));
                }
            }
            (Encoding::BinaryPresence, _) => {
                let class = entry.feature_class.expect("validated");
                for w in 0..windows_for(class).len() {
                    let flags: Vec<(bool, bool)> = filtered
                        .iter()
                        .zip(&died_flags)
                        .map(|(f, &d)| {
                            let hit = f.iter().any(|wv| {
                                wv.feature_name == entry.feature_name && wv.window == Some(w)
                            });
                            (hit, d)
                        })
                        .collect();
                    rows.push(count_row(&format!("{}@{}", entry.feature_name, w), &flags));
                }
            }
            _ => unreachable!("catalog validation admits no other combination"),
        }
    }

    StatsTable {
        n_total,
        n_survived: n_total - n_died,
        n_died,
        rows,
    }
}

/// `"424 (8)"`-style cell: count with within-row percentage to one decimal,
/// trailing `.0` trimmed.
pub fn format_count_cell(count: usize, row_total: usize) -> String {
    if row_total == 0 {
        return format!("{count} (-)");
    }
    let pct = 100.0 * count as f64 / row_total as f64;
    let mut rendered = format!("{pct:.1}");
    if let Some(stripped) = rendered.strip_suffix(".0") {
        rendered = stripped.to_string();
    }
    format!("{count} ({rendered})")
}

/// `"66.9 (8.7) [11245]"`-style cell; SD omitted when undefined.
pub fn format_continuous_cell(s: &ContinuousSummary) -> String {
    match (s.mean, s.sd) {
        (Some(m), Some(sd)) => format!("{m:.1} ({sd:.1}) [{}]", s.n),
        (Some(m), None) => format!("{m:.1} (-) [{}]", s.n),
        _ => "-".to_string(),
    }
}

impl StatsTable {
    /// CSV rendering: one row per feature with formatted cells.
    pub fn to_csv(&self, writer: impl Write) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["feature", "all", "survived", "died"])?;
        wtr.write_record([
            "total".to_string(),
            self.n_total.to_string(),
            format_count_cell(self.n_survived, self.n_total),
            format_count_cell(self.n_died, self.n_total),
        ])?;
        for row in &self.rows {
            match row {
                StatsRow::Count(c) => {
                    wtr.write_record([
                        c.feature.clone(),
                        c.n.to_string(),
                        format_count_cell(c.survived, c.n),
                        format_count_cell(c.died, c.n),
                    ])?;
                }
                StatsRow::Continuous(c) => {
                    wtr.write_record([
                        c.feature.clone(),
                        format_continuous_cell(&c.all),
                        format_continuous_cell(&c.survived),
                        format_continuous_cell(&c.died),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }
}
