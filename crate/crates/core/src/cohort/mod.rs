//! Cohort data model and the ingestion front of the pipeline.
//!
//! Subjects arrive as line-delimited JSON records (one subject per line,
//! UTF-8, ISO 8601 dates). Ingestion sanitizes them: subjects without an
//! index test date or outcome are dropped and counted, vital observations
//! outside the configured physiological plausibility ranges are removed,
//! and events/vitals are sorted by date.

pub mod catalog;
pub mod encode;
pub mod stats;
pub mod window;

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
}

impl Sex {
    pub fn label(self) -> &'static str {
        match self {
            Sex::Male => "male",
            Sex::Female => "female",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventSource {
    Hospital,
    PrimaryCare,
    SelfReport,
}

/// A dated diagnosis/treatment code (ICD-10-style prefixes are matched
/// against these).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEvent {
    pub code: String,
    pub date: NaiveDate,
    pub source: EventSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VitalKind {
    SystolicBp,
    DiastolicBp,
    HeartRate,
    BodyTemperature,
    OxygenSaturation,
    RespiratoryRate,
}

impl VitalKind {
    pub const ALL: [VitalKind; 6] = [
        VitalKind::SystolicBp,
        VitalKind::DiastolicBp,
        VitalKind::HeartRate,
        VitalKind::BodyTemperature,
        VitalKind::OxygenSaturation,
        VitalKind::RespiratoryRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VitalKind::SystolicBp => "systolic_bp",
            VitalKind::DiastolicBp => "diastolic_bp",
            VitalKind::HeartRate => "heart_rate",
            VitalKind::BodyTemperature => "body_temperature",
            VitalKind::OxygenSaturation => "oxygen_saturation",
            VitalKind::RespiratoryRate => "respiratory_rate",
        }
    }

    pub fn parse(s: &str) -> Option<VitalKind> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitalObservation {
    pub kind: VitalKind,
    pub value: f64,
    pub date: NaiveDate,
}

/// Survival outcome. `death_date` is present iff `died`; `censor_date` is
/// the records-end date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub died: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death_date: Option<NaiveDate>,
    pub censor_date: NaiveDate,
}

/// One participant: demographics, baseline measurements, dated clinical
/// events and vital observations, the index (first positive) test date,
/// and the survival outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age_years: f64,
    pub sex: Sex,
    #[serde(default)]
    pub continuous_baseline: BTreeMap<String, Option<f64>>,
    #[serde(default)]
    pub categorical_baseline: BTreeMap<String, Option<String>>,
    #[serde(default)]
    pub events: Vec<ClinicalEvent>,
    #[serde(default)]
    pub vitals: Vec<VitalObservation>,
    pub index_test_date: NaiveDate,
    pub outcome: Outcome,
}

/// Parse-stage mirror of [`SubjectRecord`] where droppable fields are
/// optional.
#[derive(Debug, Deserialize)]
struct RawSubject {
    subject_id: String,
    age_years: f64,
    sex: Sex,
    #[serde(default)]
    continuous_baseline: BTreeMap<String, Option<f64>>,
    #[serde(default)]
    categorical_baseline: BTreeMap<String, Option<String>>,
    #[serde(default)]
    events: Vec<ClinicalEvent>,
    #[serde(default)]
    vitals: Vec<VitalObservation>,
    index_test_date: Option<NaiveDate>,
    outcome: Option<Outcome>,
}

const KNOWN_FIELDS: [&str; 9] = [
    "subject_id",
    "age_years",
    "sex",
    "continuous_baseline",
    "categorical_baseline",
    "events",
    "vitals",
    "index_test_date",
    "outcome",
];

pub const AGE_RANGE: (f64, f64) = (18.0, 120.0);

/// Per-kind physiological plausibility ranges (inclusive) used during
/// sanitisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlausibilityConfig {
    pub ranges: BTreeMap<VitalKind, (f64, f64)>,
}

impl Default for PlausibilityConfig {
    fn default() -> Self {
        let mut ranges = BTreeMap::new();
        ranges.insert(VitalKind::SystolicBp, (50.0, 300.0));
        ranges.insert(VitalKind::DiastolicBp, (20.0, 200.0));
        ranges.insert(VitalKind::HeartRate, (20.0, 300.0));
        ranges.insert(VitalKind::BodyTemperature, (30.0, 45.0));
        ranges.insert(VitalKind::OxygenSaturation, (50.0, 100.0));
        ranges.insert(VitalKind::RespiratoryRate, (4.0, 80.0));
        PlausibilityConfig { ranges }
    }
}

impl PlausibilityConfig {
    pub fn is_plausible(&self, obs: &VitalObservation) -> bool {
        match self.ranges.get(&obs.kind) {
            Some(&(lo, hi)) => obs.value.is_finite() && obs.value >= lo && obs.value <= hi,
            None => obs.value.is_finite(),
        }
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: malformed subject record: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: duplicate subject_id {id:?}")]
    DuplicateSubject { id: String, line: usize },
    #[error("read error at line {line}: {source}")]
    Io {
        line: usize,
        #[source]
        source: std::io::Error,
    },
}

/// Drop/sanitisation counters accumulated during ingestion.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestCounts {
    pub lines: usize,
    pub ingested: usize,
    pub dropped_missing_index_test_date: usize,
    pub dropped_missing_outcome: usize,
    pub dropped_age_out_of_range: usize,
    pub dropped_inconsistent_outcome: usize,
    pub vitals_dropped_implausible: usize,
    pub events_dropped_invalid: usize,
    pub unknown_fields: usize,
}

#[derive(Debug)]
pub struct IngestReport {
    pub subjects: Vec<SubjectRecord>,
    pub counts: IngestCounts,
}

/// Reads line-delimited subject records, returning sanitized, date-sorted
/// subjects plus drop counters.
pub fn ingest_cohort(
    source: impl BufRead,
    plausibility: &PlausibilityConfig,
) -> Result<IngestReport, IngestError> {
    let mut subjects = Vec::new();
    let mut counts = IngestCounts::default();
    let mut seen_ids: BTreeSet<String> = BTreeSet::new();

    for (idx, line) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| IngestError::Io {
            line: line_no,
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        counts.lines += 1;

        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|source| IngestError::Parse {
                line: line_no,
                source,
            })?;
        if let Some(obj) = value.as_object() {
            counts.unknown_fields += obj
                .keys()
                .filter(|k| !KNOWN_FIELDS.contains(&k.as_str()))
                .count();
        }
        let raw: RawSubject =
            serde_json::from_value(value).map_err(|source| IngestError::Parse {
                line: line_no,
                source,
            })?;

        if !seen_ids.insert(raw.subject_id.clone()) {
            return Err(IngestError::DuplicateSubject {
                id: raw.subject_id,
                line: line_no,
            });
        }

        let Some(index_test_date) = raw.index_test_date else {
            counts.dropped_missing_index_test_date += 1;
            continue;
        };
        let Some(outcome) = raw.outcome else {
            counts.dropped_missing_outcome += 1;
            continue;
        };
        if outcome.died != outcome.death_date.is_some() {
            counts.dropped_inconsistent_outcome += 1;
            continue;
        }
        if !(AGE_RANGE.0..=AGE_RANGE.1).contains(&raw.age_years) {
            counts.dropped_age_out_of_range += 1;
            continue;
        }

        let records_end = outcome.censor_date;
        let mut events: Vec<ClinicalEvent> = Vec::with_capacity(raw.events.len());
        for ev in raw.events {
            if ev.code.is_empty() || ev.date > records_end {
                counts.events_dropped_invalid += 1;
            } else {
                events.push(ev);
            }
        }
        let mut vitals: Vec<VitalObservation> = Vec::with_capacity(raw.vitals.len());
        for obs in raw.vitals {
            if plausibility.is_plausible(&obs) {
                vitals.push(obs);
            } else {
                counts.vitals_dropped_implausible += 1;
            }
        }
        events.sort_by_key(|e| e.date);
        vitals.sort_by_key(|v| v.date);

        counts.ingested += 1;
        subjects.push(SubjectRecord {
            subject_id: raw.subject_id,
            age_years: raw.age_years,
            sex: raw.sex,
            continuous_baseline: raw.continuous_baseline,
            categorical_baseline: raw.categorical_baseline,
            events,
            vitals,
            index_test_date,
            outcome,
        });
    }

    Ok(IngestReport { subjects, counts })
}

/// Serializes subjects to the line-delimited record format.
pub fn write_cohort(
    subjects: &[SubjectRecord],
    mut out: impl std::io::Write,
) -> std::io::Result<()> {
    for s in subjects {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
