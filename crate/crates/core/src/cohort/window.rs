//! Time filtering of dated records relative to the index test date.
//!
//! Every non-symptom record dated less than 7 days before the test is
//! excluded: a patient may already have been admitted for severe disease
//! before being tested, and such records would leak outcome information.
//! Windows are measured in whole days before the test (`test - date`),
//! half-open `[lo, hi)`:
//!
//! * acute:   `[7, 30)`, `[30, 365)`, `[365, inf)`
//! * cancer:  `[7, 365)`, `[365, 1825)`, `[1825, inf)`
//! * chronic: `[7, inf)`
//! * symptoms and vitals: a single two-week window either side of the
//!   test, `[-14, +14]` days (i.e. `[-14, 15)` in half-open form).

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::catalog::{Encoding, FeatureCatalog, Matcher};
use super::SubjectRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureClass {
    Acute,
    Cancer,
    Chronic,
    SymptomOrVital,
}

impl FeatureClass {
    pub fn name(self) -> &'static str {
        match self {
            FeatureClass::Acute => "acute",
            FeatureClass::Cancer => "cancer",
            FeatureClass::Chronic => "chronic",
            FeatureClass::SymptomOrVital => "symptom_or_vital",
        }
    }

    pub fn parse(s: &str) -> Option<FeatureClass> {
        match s {
            "acute" => Some(FeatureClass::Acute),
            "cancer" => Some(FeatureClass::Cancer),
            "chronic" => Some(FeatureClass::Chronic),
            "symptom_or_vital" => Some(FeatureClass::SymptomOrVital),
            _ => None,
        }
    }
}

const UNBOUNDED: i64 = i64::MAX;

const ACUTE_WINDOWS: [(i64, i64); 3] = [(7, 30), (30, 365), (365, UNBOUNDED)];
const CANCER_WINDOWS: [(i64, i64); 3] = [(7, 365), (365, 1825), (1825, UNBOUNDED)];
const CHRONIC_WINDOWS: [(i64, i64); 1] = [(7, UNBOUNDED)];
const SYMPTOM_WINDOWS: [(i64, i64); 1] = [(-14, 15)];

/// The ordered half-open day windows for a feature class.
pub fn windows_for(class: FeatureClass) -> &'static [(i64, i64)] {
    match class {
        FeatureClass::Acute => &ACUTE_WINDOWS,
        FeatureClass::Cancer => &CANCER_WINDOWS,
        FeatureClass::Chronic => &CHRONIC_WINDOWS,
        FeatureClass::SymptomOrVital => &SYMPTOM_WINDOWS,
    }
}

/// Window index for a record `days_before` days before the test, or `None`
/// when the record is excluded (e.g. inside the 7-day blackout).
pub fn window_index(class: FeatureClass, days_before: i64) -> Option<usize> {
    windows_for(class)
        .iter()
        .position(|&(lo, hi)| days_before >= lo && days_before < hi)
}

/// Whole days between a record date and the test date; positive = before
/// the test.
pub fn days_before_test(index_test_date: NaiveDate, record_date: NaiveDate) -> i64 {
    (index_test_date - record_date).num_days()
}

/// A dated record resolved against the catalog's window rules.
///
/// Binary presence features come out as `window = Some(idx)` with value 1;
/// vital measurements come out as `window = None` with the measured value.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedValue {
    pub feature_name: String,
    pub window: Option<usize>,
    pub value: f64,
}

/// Assigns a subject's events and vitals to their class windows.
///
/// When several events map to the same feature, the most recent qualifying
/// event decides the window. When several vital observations fall inside
/// the two-week window, the one nearest the test date wins (the earlier one
/// on an exact-distance tie). Excluded records simply produce nothing.
pub fn apply_time_filter(subject: &SubjectRecord, catalog: &FeatureCatalog) -> Vec<WindowedValue> {
    apply_time_filter_with(subject, catalog, true)
}

/// [`apply_time_filter`], optionally restricting symptoms and vitals to
/// records dated on or before the test (whether post-test records belong in
/// a pre-admission model is a modeling choice, so both modes exist).
pub fn apply_time_filter_with(
    subject: &SubjectRecord,
    catalog: &FeatureCatalog,
    include_post_test: bool,
) -> Vec<WindowedValue> {
    let test = subject.index_test_date;
    let admissible = |days_before: i64| include_post_test || days_before >= 0;
    let mut out = Vec::new();

    for entry in catalog.entries() {
        match (&entry.encoding, &entry.matcher) {
            (Encoding::BinaryPresence, Matcher::CodePrefixes(_)) => {
                let class = entry
                    .feature_class
                    .expect("validated: binary entries carry a class");
                // events sorted by date; iterate most recent first
                let hit = subject
                    .events
                    .iter()
                    .rev()
                    .filter(|ev| catalog.match_event(&ev.code).map(|e| e.feature_name.as_str())
                        == Some(entry.feature_name.as_str()))
                    .find_map(|ev| {
                        let d = days_before_test(test, ev.date);
                        if class == FeatureClass::SymptomOrVital && !admissible(d) {
                            return None;
                        }
                        window_index(class, d)
                    });
                if let Some(w) = hit {
                    out.push(WindowedValue {
                        feature_name: entry.feature_name.clone(),
                        window: Some(w),
                        value: 1.0,
                    });
                }
            }
            (Encoding::Continuous, Matcher::Vital(kind)) => {
                let best = subject
                    .vitals
                    .iter()
                    .filter(|v| v.kind == *kind)
                    .filter_map(|v| {
                        let d = days_before_test(test, v.date);
                        if !admissible(d) {
                            return None;
                        }
                        window_index(FeatureClass::SymptomOrVital, d).map(|_| (d.abs(), -d, v))
                    })
                    // nearest to the test; ties resolved toward the earlier
                    // (pre-test) observation via larger days_before
                    .min_by_key(|&(dist, neg_days, _)| (dist, neg_days));
                if let Some((_, _, obs)) = best {
                    out.push(WindowedValue {
                        feature_name: entry.feature_name.clone(),
                        window: None,
                        value: obs.value,
                    });
                }
            }
            _ => {} // baseline entries carry no dates
        }
    }
    out
}
