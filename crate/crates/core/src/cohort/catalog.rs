//! Declarative feature catalog: maps event codes, vital kinds, and baseline
//! fields to named features.
//!
//! The on-disk form is a CSV table with columns
//! `feature_name,matcher,feature_class,group_label,encoding`. Matchers:
//!
//! * `code:N17|J96` — event-code prefix set (binary presence, windowed)
//! * `vital:heart_rate` — vital measurement kind (continuous, two-week window)
//! * `baseline:bmi` — baseline field; `age_years` and `sex` address the
//!   demographic struct fields, anything else the baseline maps
//!
//! Event codes resolve to the first matching entry in declaration order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::window::FeatureClass;
use super::VitalKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    BinaryPresence,
    Continuous,
    OneHotCategory,
}

impl Encoding {
    fn name(self) -> &'static str {
        match self {
            Encoding::BinaryPresence => "binary_presence",
            Encoding::Continuous => "continuous",
            Encoding::OneHotCategory => "one_hot_category",
        }
    }

    fn parse(s: &str) -> Option<Encoding> {
        match s {
            "binary_presence" => Some(Encoding::BinaryPresence),
            "continuous" => Some(Encoding::Continuous),
            "one_hot_category" => Some(Encoding::OneHotCategory),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Matcher {
    CodePrefixes(Vec<String>),
    Vital(VitalKind),
    Baseline(String),
}

impl Matcher {
    fn render(&self) -> String {
        match self {
            Matcher::CodePrefixes(p) => format!("code:{}", p.join("|")),
            Matcher::Vital(k) => format!("vital:{}", k.name()),
            Matcher::Baseline(f) => format!("baseline:{f}"),
        }
    }

    fn parse(s: &str) -> Option<Matcher> {
        let (kind, rest) = s.split_once(':')?;
        match kind {
            "code" => {
                let prefixes: Vec<String> = rest
                    .split('|')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(String::from)
                    .collect();
                (!prefixes.is_empty()).then_some(Matcher::CodePrefixes(prefixes))
            }
            "vital" => VitalKind::parse(rest).map(Matcher::Vital),
            "baseline" => (!rest.is_empty()).then(|| Matcher::Baseline(rest.to_string())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub feature_name: String,
    pub matcher: Matcher,
    pub feature_class: Option<FeatureClass>,
    pub group_label: Option<String>,
    pub encoding: Encoding,
}

impl CatalogEntry {
    pub fn binary(name: &str, prefixes: &[&str], class: FeatureClass) -> CatalogEntry {
        CatalogEntry {
            feature_name: name.to_string(),
            matcher: Matcher::CodePrefixes(prefixes.iter().map(|s| s.to_string()).collect()),
            feature_class: Some(class),
            group_label: None,
            encoding: Encoding::BinaryPresence,
        }
    }

    pub fn vital(name: &str, kind: VitalKind) -> CatalogEntry {
        CatalogEntry {
            feature_name: name.to_string(),
            matcher: Matcher::Vital(kind),
            feature_class: Some(FeatureClass::SymptomOrVital),
            group_label: None,
            encoding: Encoding::Continuous,
        }
    }

    pub fn baseline_continuous(name: &str, field: &str) -> CatalogEntry {
        CatalogEntry {
            feature_name: name.to_string(),
            matcher: Matcher::Baseline(field.to_string()),
            feature_class: None,
            group_label: None,
            encoding: Encoding::Continuous,
        }
    }

    pub fn baseline_category(name: &str, field: &str) -> CatalogEntry {
        CatalogEntry {
            feature_name: name.to_string(),
            matcher: Matcher::Baseline(field.to_string()),
            feature_class: None,
            group_label: None,
            encoding: Encoding::OneHotCategory,
        }
    }

    pub fn with_group(mut self, group: &str) -> CatalogEntry {
        self.group_label = Some(group.to_string());
        self
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("duplicate feature_name {0:?}")]
    DuplicateFeature(String),
    #[error("feature {0:?}: binary_presence requires a code matcher and a feature class")]
    InvalidBinaryEntry(String),
    #[error("feature {0:?}: vital matcher requires continuous encoding in the symptom/vital class")]
    InvalidVitalEntry(String),
    #[error("feature {0:?}: {1} encoding requires a baseline matcher")]
    InvalidBaselineEntry(String, &'static str),
    #[error("row {row}: bad {column}: {value:?}")]
    BadField {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Ordered, validated feature declarations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCatalog {
    entries: Vec<CatalogEntry>,
}

impl FeatureCatalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<FeatureCatalog, CatalogError> {
        let mut seen = std::collections::BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.feature_name.clone()) {
                return Err(CatalogError::DuplicateFeature(e.feature_name.clone()));
            }
            match e.encoding {
                Encoding::BinaryPresence => {
                    if !matches!(e.matcher, Matcher::CodePrefixes(_)) || e.feature_class.is_none() {
                        return Err(CatalogError::InvalidBinaryEntry(e.feature_name.clone()));
                    }
                }
                Encoding::Continuous => match e.matcher {
                    Matcher::Vital(_) => {
                        if e.feature_class
                            .is_some_and(|c| c != FeatureClass::SymptomOrVital)
                        {
                            return Err(CatalogError::InvalidVitalEntry(e.feature_name.clone()));
                        }
                    }
                    Matcher::Baseline(_) => {}
                    Matcher::CodePrefixes(_) => {
                        return Err(CatalogError::InvalidBaselineEntry(
                            e.feature_name.clone(),
                            "continuous",
                        ))
                    }
                },
                Encoding::OneHotCategory => {
                    if !matches!(e.matcher, Matcher::Baseline(_)) {
                        return Err(CatalogError::InvalidBaselineEntry(
                            e.feature_name.clone(),
                            "one_hot_category",
                        ));
                    }
                }
            }
        }
        Ok(FeatureCatalog { entries })
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn entry(&self, feature_name: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.feature_name == feature_name)
    }

    /// First binary entry (declaration order) owning this event code.
    pub fn match_event(&self, code: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| {
            matches!(e.encoding, Encoding::BinaryPresence)
                && match &e.matcher {
                    Matcher::CodePrefixes(prefixes) => {
                        prefixes.iter().any(|p| code.starts_with(p.as_str()))
                    }
                    _ => false,
                }
        })
    }

    pub fn from_csv(reader: impl Read) -> Result<FeatureCatalog, CatalogError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut entries = Vec::new();
        for (i, record) in rdr.deserialize::<CatalogRow>().enumerate() {
            let row = i + 2; // header is row 1
            let rec = record?;
            let matcher = Matcher::parse(&rec.matcher).ok_or(CatalogError::BadField {
                row,
                column: "matcher",
                value: rec.matcher.clone(),
            })?;
            let feature_class = match rec.feature_class.as_deref() {
                None | Some("") => None,
                Some(s) => Some(FeatureClass::parse(s).ok_or(CatalogError::BadField {
                    row,
                    column: "feature_class",
                    value: s.to_string(),
                })?),
            };
            let encoding = Encoding::parse(&rec.encoding).ok_or(CatalogError::BadField {
                row,
                column: "encoding",
                value: rec.encoding.clone(),
            })?;
            entries.push(CatalogEntry {
                feature_name: rec.feature_name,
                matcher,
                feature_class,
                group_label: rec.group_label.filter(|g| !g.is_empty()),
                encoding,
            });
        }
        FeatureCatalog::new(entries)
    }

    pub fn to_csv(&self, writer: impl Write) -> Result<(), CatalogError> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["feature_name", "matcher", "feature_class", "group_label", "encoding"])?;
        for e in &self.entries {
            wtr.write_record([
                e.feature_name.as_str(),
                &e.matcher.render(),
                e.feature_class.map(FeatureClass::name).unwrap_or(""),
                e.group_label.as_deref().unwrap_or(""),
                e.encoding.name(),
            ])?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct CatalogRow {
    feature_name: String,
    matcher: String,
    #[serde(default)]
    feature_class: Option<String>,
    #[serde(default)]
    group_label: Option<String>,
    encoding: String,
}
