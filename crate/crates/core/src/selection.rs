//! Two-stage feature funnel: data-driven importance ranking out of the LOO
//! experiment, then a reviewed exclusion/grouping pass expressed as
//! configuration so the human step stays reproducible and auditable.
//!
//! Review order is: truncate to the screened top-k, apply exclusions, then
//! apply groupings (group importance = sum of surviving members), then
//! re-rank. Names consumed by a pass are recorded on the shortlist itself,
//! which is what makes a second application of the same config a no-op.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::catalog::{CatalogEntry, Encoding, FeatureCatalog, Matcher};

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("no iterations supplied")]
    EmptyInput,
    #[error("importance vector {index} has {got} entries, expected {expected}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("review config references unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("shortlist feature {0:?} cannot be resolved in the original catalog")]
    Unresolvable(String),
    #[error("review config parse: {0}")]
    Parse(String),
    #[error("catalog: {0}")]
    Catalog(#[from] crate::cohort::catalog::CatalogError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFeature {
    pub feature_name: String,
    pub mean_importance: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RankedFeatureList {
    pub entries: Vec<RankedFeature>,
    /// All importances were zero; ordering is purely lexicographic.
    pub degenerate: bool,
    /// Names consumed by an earlier review pass (excluded features and
    /// grouped members).
    #[serde(default)]
    pub review_applied: Vec<String>,
    /// Groupings applied so far; needed to rebuild a catalog.
    #[serde(default)]
    pub groups: Vec<Grouping>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    NotSelfReportable,
    ConfoundedWithHigherRanked,
    DatabaseBias,
}

impl ExclusionReason {
    pub fn name(self) -> &'static str {
        match self {
            ExclusionReason::NotSelfReportable => "not_self_reportable",
            ExclusionReason::ConfoundedWithHigherRanked => "confounded_with_higher_ranked",
            ExclusionReason::DatabaseBias => "database_bias",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub feature_name: String,
    pub reason: ExclusionReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub group_name: String,
    pub members: Vec<String>,
}

fn default_top_k() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewConfig {
    #[serde(default = "default_top_k")]
    pub screen_top_k: usize,
    #[serde(default)]
    pub exclusions: Vec<Exclusion>,
    #[serde(default)]
    pub groupings: Vec<Grouping>,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            screen_top_k: default_top_k(),
            exclusions: Vec::new(),
            groupings: Vec::new(),
        }
    }
}

impl ReviewConfig {
    pub fn from_toml_reader(mut reader: impl Read) -> Result<ReviewConfig, SelectionError> {
        let mut text = String::new();
        reader
            .read_to_string(&mut text)
            .map_err(|e| SelectionError::Parse(e.to_string()))?;
        toml::from_str(&text).map_err(|e| SelectionError::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("review config serializes")
    }
}

/// One audited review action. The timestamp is caller-provided so runs can
/// stay byte-reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub feature: String,
    pub action: String,
    pub reason: String,
    pub timestamp: String,
}

impl AuditEntry {
    pub fn render(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}",
            self.feature, self.action, self.reason, self.timestamp
        )
    }
}

fn rank_entries(mut pairs: Vec<(String, f64)>) -> Vec<RankedFeature> {
    pairs.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite importances")
            .then_with(|| a.0.cmp(&b.0))
    });
    pairs
        .into_iter()
        .enumerate()
        .map(|(i, (feature_name, mean_importance))| RankedFeature {
            feature_name,
            mean_importance,
            rank: i + 1,
        })
        .collect()
}

/// Arithmetic mean of per-iteration importance vectors, ranked descending
/// (ties broken lexicographically by feature name).
pub fn aggregate_importance(
    per_iteration: &[Vec<f64>],
    feature_names: &[String],
) -> Result<RankedFeatureList, SelectionError> {
    if per_iteration.is_empty() {
        return Err(SelectionError::EmptyInput);
    }
    let p = feature_names.len();
    for (index, v) in per_iteration.iter().enumerate() {
        if v.len() != p {
            return Err(SelectionError::DimensionMismatch {
                index,
                expected: p,
                got: v.len(),
            });
        }
    }
    let mut means = vec![0.0; p];
    for v in per_iteration {
        for (acc, x) in means.iter_mut().zip(v) {
            *acc += x;
        }
    }
    for m in means.iter_mut() {
        *m /= per_iteration.len() as f64;
    }
    let degenerate = means.iter().all(|&m| m == 0.0);
    if degenerate {
        log::warn!("all mean importances are zero; ranking is lexicographic only");
    }
    let entries = rank_entries(feature_names.iter().cloned().zip(means).collect());
    Ok(RankedFeatureList {
        entries,
        degenerate,
        review_applied: Vec::new(),
        groups: Vec::new(),
    })
}

/// Applies the reviewed exclusion/grouping pass to a ranking.
///
/// Returns the shortlist plus one audit entry per action actually applied.
/// Config names that are neither present nor recorded as consumed by an
/// earlier pass are configuration errors.
pub fn apply_review(
    ranking: &RankedFeatureList,
    config: &ReviewConfig,
    timestamp: &str,
) -> Result<(RankedFeatureList, Vec<AuditEntry>), SelectionError> {
    let present: BTreeSet<&str> = ranking
        .entries
        .iter()
        .map(|e| e.feature_name.as_str())
        .collect();
    let consumed: BTreeSet<&str> = ranking.review_applied.iter().map(String::as_str).collect();

    for excl in &config.exclusions {
        let name = excl.feature_name.as_str();
        if !present.contains(name) && !consumed.contains(name) {
            return Err(SelectionError::UnknownFeature(excl.feature_name.clone()));
        }
    }
    for group in &config.groupings {
        let any_member = group.members.iter().any(|m| present.contains(m.as_str()));
        let all_consumed = group
            .members
            .iter()
            .all(|m| consumed.contains(m.as_str()));
        let group_present = present.contains(group.group_name.as_str());
        if !any_member && !(group_present || all_consumed) {
            let first_unknown = group
                .members
                .iter()
                .find(|m| !consumed.contains(m.as_str()))
                .cloned()
                .unwrap_or_else(|| group.group_name.clone());
            return Err(SelectionError::UnknownFeature(first_unknown));
        }
    }

    // 1. screen the top-k
    let mut kept: Vec<(String, f64)> = ranking
        .entries
        .iter()
        .take(config.screen_top_k)
        .map(|e| (e.feature_name.clone(), e.mean_importance))
        .collect();

    let mut audit = Vec::new();
    let mut review_applied = ranking.review_applied.clone();

    // 2. exclusions
    for excl in &config.exclusions {
        let before = kept.len();
        kept.retain(|(name, _)| name != &excl.feature_name);
        if kept.len() < before {
            audit.push(AuditEntry {
                feature: excl.feature_name.clone(),
                action: "excluded".into(),
                reason: excl.reason.name().into(),
                timestamp: timestamp.to_string(),
            });
            review_applied.push(excl.feature_name.clone());
        }
    }

    // 3. groupings: sum surviving member importances
    let mut groups = ranking.groups.clone();
    for group in &config.groupings {
        let members: Vec<usize> = kept
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| group.members.contains(name))
            .map(|(i, _)| i)
            .collect();
        if members.is_empty() {
            continue; // applied earlier, or everything excluded
        }
        let total: f64 = members.iter().map(|&i| kept[i].1).sum();
        for &i in members.iter().rev() {
            review_applied.push(kept[i].0.clone());
            kept.remove(i);
        }
        kept.push((group.group_name.clone(), total));
        if !groups.iter().any(|g| g.group_name == group.group_name) {
            groups.push(group.clone());
        }
        audit.push(AuditEntry {
            feature: group.group_name.clone(),
            action: "grouped".into(),
            reason: format!("members={}", group.members.join("|")),
            timestamp: timestamp.to_string(),
        });
    }

    Ok((
        RankedFeatureList {
            entries: rank_entries(kept),
            degenerate: ranking.degenerate,
            review_applied,
            groups,
        },
        audit,
    ))
}

fn base_name(column: &str) -> &str {
    let column = column.split_once('@').map_or(column, |(b, _)| b);
    column.split_once('=').map_or(column, |(b, _)| b)
}

impl RankedFeatureList {
    /// Whether an encoded column belongs to this shortlist: exact entry
    /// match, or a windowed/one-hot expansion of an entry or group name.
    pub fn column_allowed(&self, column: &str) -> bool {
        let base = base_name(column);
        self.entries
            .iter()
            .any(|e| e.feature_name == column || e.feature_name == base)
    }

    /// CSV export `(rank, feature, mean_importance)`.
    pub fn to_csv(&self, writer: impl Write) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["rank", "feature", "mean_importance"])?;
        for e in &self.entries {
            wtr.write_record([
                e.rank.to_string(),
                e.feature_name.clone(),
                format!("{}", e.mean_importance),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn from_csv(reader: impl Read) -> Result<RankedFeatureList, SelectionError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let mut entries = Vec::new();
        for record in rdr.records() {
            let record = record?;
            entries.push(RankedFeature {
                rank: record[0]
                    .parse()
                    .map_err(|_| SelectionError::Parse(format!("bad rank {:?}", &record[0])))?,
                feature_name: record[1].to_string(),
                mean_importance: record[2].parse().map_err(|_| {
                    SelectionError::Parse(format!("bad importance {:?}", &record[2]))
                })?,
            });
        }
        let degenerate = entries.iter().all(|e| e.mean_importance == 0.0);
        Ok(RankedFeatureList {
            entries,
            degenerate,
            review_applied: Vec::new(),
            groups: Vec::new(),
        })
    }
}

/// Reduced catalog encoding only the shortlisted (possibly grouped)
/// features, for re-encoding ahead of the final model fits.
///
/// A group whose members are all windowed binary entries of one feature
/// class collapses into a single entry matching the union of the members'
/// code prefixes; mixed groups keep their member entries, tagged with the
/// group label.
pub fn rebuild_catalog(
    shortlist: &RankedFeatureList,
    original: &FeatureCatalog,
) -> Result<FeatureCatalog, SelectionError> {
    let mut out: Vec<CatalogEntry> = Vec::new();
    let push_unique = |entry: CatalogEntry, out: &mut Vec<CatalogEntry>| {
        if !out.iter().any(|e| e.feature_name == entry.feature_name) {
            out.push(entry);
        }
    };

    for ranked in &shortlist.entries {
        let name = ranked.feature_name.as_str();
        if let Some(group) = shortlist.groups.iter().find(|g| g.group_name == name) {
            let mut member_entries = Vec::new();
            for member in &group.members {
                let entry = original
                    .entry(base_name(member))
                    .ok_or_else(|| SelectionError::Unresolvable(member.clone()))?;
                member_entries.push(entry);
            }
            let all_binary = member_entries
                .iter()
                .all(|e| matches!(e.encoding, Encoding::BinaryPresence));
            let shared_class = member_entries
                .first()
                .and_then(|e| e.feature_class)
                .filter(|&c| member_entries.iter().all(|e| e.feature_class == Some(c)));
            match (all_binary, shared_class) {
                (true, Some(class)) => {
                    let mut prefixes: Vec<String> = member_entries
                        .iter()
                        .flat_map(|e| match &e.matcher {
                            Matcher::CodePrefixes(p) => p.clone(),
                            _ => unreachable!("binary entries carry code matchers"),
                        })
                        .collect();
                    prefixes.sort();
                    prefixes.dedup();
                    let refs: Vec<&str> = prefixes.iter().map(String::as_str).collect();
                    push_unique(
                        CatalogEntry::binary(&group.group_name, &refs, class).with_group(&group.group_name),
                        &mut out,
                    );
                }
                _ => {
                    for entry in member_entries {
                        push_unique(entry.clone().with_group(&group.group_name), &mut out);
                    }
                }
            }
        } else {
            let entry = original
                .entry(base_name(name))
                .ok_or_else(|| SelectionError::Unresolvable(ranked.feature_name.clone()))?;
            push_unique(entry.clone(), &mut out);
        }
    }
    Ok(FeatureCatalog::new(out)?)
}
