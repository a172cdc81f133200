//! Dense feature-matrix construction: windowed binary presence columns,
//! one-hot categoricals, mean-imputed continuous columns, optional z-score
//! normalization, and survival-time computation.
//!
//! Column naming: windowed binary features are `<feature>@<window>`,
//! one-hot levels are `<feature>=<level>`, continuous features keep the
//! catalog name.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::catalog::{Encoding, FeatureCatalog, Matcher};
use super::window::{apply_time_filter_with, windows_for};
use super::{Sex, SubjectRecord};

pub const LABEL_COLUMN: &str = "__label";
pub const SURVIVAL_COLUMN: &str = "__survival_days";
pub const SUBJECT_ID_COLUMN: &str = "__subject_id";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    None,
    ZScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std_dev: f64,
    pub observed_count: usize,
}

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("need at least 2 subjects, got {0}")]
    TooFewSubjects(usize),
    #[error("cohort contains a single outcome class")]
    SingleClass,
    #[error("subject {0:?}: death date precedes index test date")]
    DeathBeforeTest(String),
    #[error("subject {0:?}: censor date precedes index test date")]
    CensorBeforeTest(String),
    #[error("subject {0:?}: censored on the index test day (no follow-up)")]
    CensoredOnTestDay(String),
    #[error("subject {0:?}: died without a death date")]
    MissingDeathDate(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("encoded csv: {0}")]
    Csv(String),
}

/// The dense, fully imputed cohort matrix with labels and survival times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedCohort {
    pub feature_names: Vec<String>,
    pub column_kinds: Vec<ColumnKind>,
    /// Row-major `n_subjects x n_features`.
    pub matrix: Vec<Vec<f64>>,
    pub subject_ids: Vec<String>,
    /// true = died.
    pub labels: Vec<bool>,
    /// Days from index test to death or censoring.
    pub survival_days: Vec<u32>,
    pub column_stats: Vec<ColumnStats>,
    pub normalization: Normalization,
    /// Continuous columns left unscaled under z-score because their
    /// observed variance was zero.
    pub zero_variance: Vec<String>,
    /// Columns dropped because every value was missing.
    pub dropped_columns: Vec<String>,
    /// Per column: row indices whose value was imputed (continuous only).
    pub missing_cells: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
enum Source {
    AgeYears,
    SexLevel(Sex),
    BaselineContinuous(String),
    BaselineLevel { field: String, level: String },
    VitalValue(String),
    WindowPresence { feature: String, window: usize },
}

struct ColumnPlan {
    name: String,
    kind: ColumnKind,
    source: Source,
}

fn build_plan(
    subjects: &[SubjectRecord],
    catalog: &FeatureCatalog,
    dropped: &mut Vec<String>,
) -> Vec<ColumnPlan> {
    let mut plan = Vec::new();
    for entry in catalog.entries() {
        match (&entry.encoding, &entry.matcher) {
            (Encoding::Continuous, Matcher::Baseline(field)) if field == "age_years" => {
                plan.push(ColumnPlan {
                    name: entry.feature_name.clone(),
                    kind: ColumnKind::Continuous,
                    source: Source::AgeYears,
                });
            }
            (Encoding::Continuous, Matcher::Baseline(field)) => {
                plan.push(ColumnPlan {
                    name: entry.feature_name.clone(),
                    kind: ColumnKind::Continuous,
                    source: Source::BaselineContinuous(field.clone()),
                });
            }
            (Encoding::Continuous, Matcher::Vital(_)) => {
                plan.push(ColumnPlan {
                    name: entry.feature_name.clone(),
                    kind: ColumnKind::Continuous,
                    source: Source::VitalValue(entry.feature_name.clone()),
                });
            }
            (Encoding::OneHotCategory, Matcher::Baseline(field)) if field == "sex" => {
                let mut sexes: Vec<Sex> = subjects.iter().map(|s| s.sex).collect();
                sexes.sort_by_key(|s| s.label());
                sexes.dedup();
                for sex in sexes {
                    plan.push(ColumnPlan {
                        name: format!("{}={}", entry.feature_name, sex.label()),
                        kind: ColumnKind::Binary,
                        source: Source::SexLevel(sex),
                    });
                }
            }
            (Encoding::OneHotCategory, Matcher::Baseline(field)) => {
                let levels: BTreeSet<&String> = subjects
                    .iter()
                    .filter_map(|s| s.categorical_baseline.get(field).and_then(|v| v.as_ref()))
                    .collect();
                if levels.is_empty() {
                    dropped.push(entry.feature_name.clone());
                }
                for level in levels {
                    plan.push(ColumnPlan {
                        name: format!("{}={}", entry.feature_name, level),
                        kind: ColumnKind::Binary,
                        source: Source::BaselineLevel {
                            field: field.clone(),
                            level: level.clone(),
                        },
                    });
                }
            }
            (Encoding::BinaryPresence, Matcher::CodePrefixes(_)) => {
                let class = entry.feature_class.expect("validated");
                for window in 0..windows_for(class).len() {
                    plan.push(ColumnPlan {
                        name: format!("{}@{}", entry.feature_name, window),
                        kind: ColumnKind::Binary,
                        source: Source::WindowPresence {
                            feature: entry.feature_name.clone(),
                            window,
                        },
                    });
                }
            }
            _ => unreachable!("catalog validation admits no other combination"),
        }
    }
    plan
}

fn survival_days(subject: &SubjectRecord) -> Result<u32, EncodeError> {
    let test = subject.index_test_date;
    if subject.outcome.died {
        let death = subject
            .outcome
            .death_date
            .ok_or_else(|| EncodeError::MissingDeathDate(subject.subject_id.clone()))?;
        let days = (death - test).num_days();
        if days < 0 {
            return Err(EncodeError::DeathBeforeTest(subject.subject_id.clone()));
        }
        Ok(days as u32)
    } else {
        let days = (subject.outcome.censor_date - test).num_days();
        if days < 0 {
            return Err(EncodeError::CensorBeforeTest(subject.subject_id.clone()));
        }
        // zero survival is only meaningful for a death on the test day
        if days == 0 {
            return Err(EncodeError::CensoredOnTestDay(subject.subject_id.clone()));
        }
        Ok(days as u32)
    }
}

/// Encoding knobs beyond the normalization scheme.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EncodeOptions {
    pub normalization: Normalization,
    /// Externally supplied imputation means (e.g. from the source database
    /// before any cohort subsetting); columns without an entry fall back to
    /// the cohort's observed mean.
    pub reference_means: Option<BTreeMap<String, f64>>,
    /// Drop symptom/vital records dated after the test.
    pub exclude_post_test_symptoms: bool,
}

/// Encodes subjects into the dense matrix.
///
/// Missing continuous values are imputed with the column mean of the
/// observed values; missing categoricals encode as all-zero one-hot rows.
/// Columns where every value is missing are dropped with a warning record.
pub fn encode_cohort(
    subjects: &[SubjectRecord],
    catalog: &FeatureCatalog,
    normalization: Normalization,
) -> Result<EncodedCohort, EncodeError> {
    encode_cohort_with(
        subjects,
        catalog,
        &EncodeOptions {
            normalization,
            ..Default::default()
        },
    )
}

/// [`encode_cohort`] with explicit imputation source and symptom-window
/// options.
pub fn encode_cohort_with(
    subjects: &[SubjectRecord],
    catalog: &FeatureCatalog,
    options: &EncodeOptions,
) -> Result<EncodedCohort, EncodeError> {
    let normalization = options.normalization;
    if subjects.len() < 2 {
        return Err(EncodeError::TooFewSubjects(subjects.len()));
    }
    let labels: Vec<bool> = subjects.iter().map(|s| s.outcome.died).collect();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(EncodeError::SingleClass);
    }

    let mut dropped_columns = Vec::new();
    let plan = build_plan(subjects, catalog, &mut dropped_columns);

    let mut survival = Vec::with_capacity(subjects.len());
    let mut matrix: Vec<Vec<f64>> = Vec::with_capacity(subjects.len());
    for subject in subjects {
        survival.push(survival_days(subject)?);

        let filtered =
            apply_time_filter_with(subject, catalog, !options.exclude_post_test_symptoms);
        let mut window_of: BTreeMap<&str, usize> = BTreeMap::new();
        let mut vital_value: BTreeMap<&str, f64> = BTreeMap::new();
        for wv in &filtered {
            match wv.window {
                Some(w) => {
                    window_of.insert(wv.feature_name.as_str(), w);
                }
                None => {
                    vital_value.insert(wv.feature_name.as_str(), wv.value);
                }
            }
        }

        let row: Vec<f64> = plan
            .iter()
            .map(|col| match &col.source {
                Source::AgeYears => subject.age_years,
                Source::SexLevel(sex) => (subject.sex == *sex) as u8 as f64,
                Source::BaselineContinuous(field) => subject
                    .continuous_baseline
                    .get(field)
                    .and_then(|v| *v)
                    .unwrap_or(f64::NAN),
                Source::BaselineLevel { field, level } => {
                    let hit = subject
                        .categorical_baseline
                        .get(field)
                        .and_then(|v| v.as_ref())
                        .is_some_and(|l| l == level);
                    hit as u8 as f64
                }
                Source::VitalValue(feature) => vital_value
                    .get(feature.as_str())
                    .copied()
                    .unwrap_or(f64::NAN),
                Source::WindowPresence { feature, window } => {
                    (window_of.get(feature.as_str()) == Some(window)) as u8 as f64
                }
            })
            .collect();
        matrix.push(row);
    }

    // per-column imputation and statistics
    let n = subjects.len();
    let mut keep = vec![true; plan.len()];
    let mut stats = Vec::with_capacity(plan.len());
    let mut missing_cells: Vec<Vec<usize>> = vec![Vec::new(); plan.len()];
    for (j, col) in plan.iter().enumerate() {
        let observed: Vec<f64> = (0..n)
            .map(|i| matrix[i][j])
            .filter(|v| !v.is_nan())
            .collect();
        if observed.is_empty() {
            keep[j] = false;
            dropped_columns.push(col.name.clone());
            stats.push(ColumnStats {
                mean: 0.0,
                std_dev: 0.0,
                observed_count: 0,
            });
            continue;
        }
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        let std_dev = if observed.len() >= 2 {
            let ss: f64 = observed.iter().map(|v| (v - mean) * (v - mean)).sum();
            (ss / (observed.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        let fill = options
            .reference_means
            .as_ref()
            .and_then(|m| m.get(&col.name))
            .copied()
            .unwrap_or(mean);
        for i in 0..n {
            if matrix[i][j].is_nan() {
                matrix[i][j] = fill;
                missing_cells[j].push(i);
            }
        }
        stats.push(ColumnStats {
            mean,
            std_dev,
            observed_count: observed.len(),
        });
    }

    // drop all-missing columns
    let retained: Vec<usize> = (0..plan.len()).filter(|&j| keep[j]).collect();
    let feature_names: Vec<String> = retained.iter().map(|&j| plan[j].name.clone()).collect();
    let column_kinds: Vec<ColumnKind> = retained.iter().map(|&j| plan[j].kind).collect();
    let column_stats: Vec<ColumnStats> = retained.iter().map(|&j| stats[j]).collect();
    let missing_cells: Vec<Vec<usize>> = retained.iter().map(|&j| missing_cells[j].clone()).collect();
    let mut matrix: Vec<Vec<f64>> = matrix
        .into_iter()
        .map(|row| retained.iter().map(|&j| row[j]).collect())
        .collect();

    // z-score continuous columns; zero-variance ones stay unscaled
    let mut zero_variance = Vec::new();
    if normalization == Normalization::ZScore {
        for (j, kind) in column_kinds.iter().enumerate() {
            if *kind != ColumnKind::Continuous {
                continue;
            }
            let ColumnStats { mean, std_dev, .. } = column_stats[j];
            if std_dev > 0.0 {
                for row in matrix.iter_mut() {
                    row[j] = (row[j] - mean) / std_dev;
                }
            } else {
                zero_variance.push(feature_names[j].clone());
            }
        }
    }

    Ok(EncodedCohort {
        feature_names,
        column_kinds,
        matrix,
        subject_ids: subjects.iter().map(|s| s.subject_id.clone()).collect(),
        labels,
        survival_days: survival,
        column_stats,
        normalization,
        zero_variance,
        dropped_columns,
        missing_cells,
    })
}

impl EncodedCohort {
    pub fn n_subjects(&self) -> usize {
        self.matrix.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Removes named columns; unknown names are an error.
    pub fn drop_columns(&self, names: &[String]) -> Result<EncodedCohort, EncodeError> {
        for name in names {
            if self.column_index(name).is_none() {
                return Err(EncodeError::UnknownColumn(name.clone()));
            }
        }
        let keep: Vec<usize> = (0..self.n_features())
            .filter(|&j| !names.contains(&self.feature_names[j]))
            .collect();
        Ok(self.project(&keep))
    }

    /// Keeps only the named columns (cohort order preserved). Names absent
    /// from the cohort are ignored.
    pub fn select_columns(&self, names: &BTreeSet<String>) -> EncodedCohort {
        let keep: Vec<usize> = (0..self.n_features())
            .filter(|&j| names.contains(&self.feature_names[j]))
            .collect();
        self.project(&keep)
    }

    fn project(&self, keep: &[usize]) -> EncodedCohort {
        EncodedCohort {
            feature_names: keep.iter().map(|&j| self.feature_names[j].clone()).collect(),
            column_kinds: keep.iter().map(|&j| self.column_kinds[j]).collect(),
            matrix: self
                .matrix
                .iter()
                .map(|row| keep.iter().map(|&j| row[j]).collect())
                .collect(),
            subject_ids: self.subject_ids.clone(),
            labels: self.labels.clone(),
            survival_days: self.survival_days.clone(),
            column_stats: keep.iter().map(|&j| self.column_stats[j]).collect(),
            normalization: self.normalization,
            zero_variance: self.zero_variance.clone(),
            dropped_columns: self.dropped_columns.clone(),
            missing_cells: keep.iter().map(|&j| self.missing_cells[j].clone()).collect(),
        }
    }

    /// CSV export: feature columns followed by `__label`, `__survival_days`,
    /// `__subject_id`.
    pub fn to_csv(&self, writer: impl Write) -> Result<(), EncodeError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(LABEL_COLUMN);
        header.push(SURVIVAL_COLUMN);
        header.push(SUBJECT_ID_COLUMN);
        wtr.write_record(&header).map_err(|e| EncodeError::Csv(e.to_string()))?;
        for i in 0..self.n_subjects() {
            let mut record: Vec<String> =
                self.matrix[i].iter().map(|v| format!("{v}")).collect();
            record.push(if self.labels[i] { "1".into() } else { "0".into() });
            record.push(self.survival_days[i].to_string());
            record.push(self.subject_ids[i].clone());
            wtr.write_record(&record).map_err(|e| EncodeError::Csv(e.to_string()))?;
        }
        wtr.flush().map_err(|e| EncodeError::Csv(e.to_string()))?;
        Ok(())
    }

    /// Loads a matrix previously written by [`EncodedCohort::to_csv`].
    ///
    /// Provenance that is not part of the CSV (normalization mode, missing
    /// cells, drop warnings) comes back empty; column statistics are
    /// recomputed from the stored values.
    pub fn from_csv(reader: impl Read) -> Result<EncodedCohort, EncodeError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| EncodeError::Csv(e.to_string()))?
            .clone();
        let names: Vec<String> = header.iter().map(String::from).collect();
        let label_at = names
            .iter()
            .position(|n| n == LABEL_COLUMN)
            .ok_or_else(|| EncodeError::Csv(format!("missing {LABEL_COLUMN} column")))?;
        if names.get(label_at + 1).map(String::as_str) != Some(SURVIVAL_COLUMN)
            || names.get(label_at + 2).map(String::as_str) != Some(SUBJECT_ID_COLUMN)
        {
            return Err(EncodeError::Csv(
                "expected __label,__survival_days,__subject_id tail columns".into(),
            ));
        }
        let feature_names: Vec<String> = names[..label_at].to_vec();

        let mut matrix = Vec::new();
        let mut labels = Vec::new();
        let mut survival_days = Vec::new();
        let mut subject_ids = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| EncodeError::Csv(e.to_string()))?;
            let parse = |s: &str, what: &str| -> Result<f64, EncodeError> {
                s.parse::<f64>()
                    .map_err(|_| EncodeError::Csv(format!("row {}: bad {what}: {s:?}", i + 2)))
            };
            let row: Vec<f64> = record
                .iter()
                .take(label_at)
                .map(|s| parse(s, "value"))
                .collect::<Result<_, _>>()?;
            if row.len() != feature_names.len() {
                return Err(EncodeError::Csv(format!("row {}: wrong width", i + 2)));
            }
            labels.push(parse(&record[label_at], "label")? != 0.0);
            survival_days.push(parse(&record[label_at + 1], "survival_days")? as u32);
            subject_ids.push(record[label_at + 2].to_string());
            matrix.push(row);
        }

        let n = matrix.len();
        let p = feature_names.len();
        let mut column_kinds = Vec::with_capacity(p);
        let mut column_stats = Vec::with_capacity(p);
        for j in 0..p {
            let col: Vec<f64> = (0..n).map(|i| matrix[i][j]).collect();
            let binary = col.iter().all(|&v| v == 0.0 || v == 1.0);
            let mean = col.iter().sum::<f64>() / n.max(1) as f64;
            let std_dev = if n >= 2 {
                (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            column_kinds.push(if binary { ColumnKind::Binary } else { ColumnKind::Continuous });
            column_stats.push(ColumnStats {
                mean,
                std_dev,
                observed_count: n,
            });
        }

        Ok(EncodedCohort {
            feature_names,
            column_kinds,
            matrix,
            subject_ids,
            labels,
            survival_days,
            column_stats,
            normalization: Normalization::None,
            zero_variance: Vec::new(),
            dropped_columns: Vec::new(),
            missing_cells: vec![Vec::new(); p],
        })
    }
}
