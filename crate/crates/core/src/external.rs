//! Externally supplied per-stratum risk equations evaluated on an encoded
//! cohort with the shared metrics.
//!
//! The equation file is TOML: one `[[stratum]]` block per stratum with a
//! `selector` naming a binary cohort column (a subject belongs to the
//! stratum whose selector column is 1), term rows `(variable, coefficient)`,
//! a `[mapping]` table from equation variables to cohort feature names or
//! the literal `MISSING`, and optional `[reference_means]` used when the
//! missing policy is `impute_mean`. No published coefficients ship here;
//! the harness is equation-agnostic.

use std::collections::BTreeMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::encode::EncodedCohort;

pub const MISSING_SENTINEL: &str = "MISSING";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    LinearPredictor,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingPolicy {
    DropTerm,
    ImputeMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub label: String,
    /// Binary cohort column selecting members; a missing selector makes
    /// this the catch-all stratum (only valid alone).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<String>,
    #[serde(default)]
    pub intercept: f64,
    pub terms: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalRiskEquation {
    pub transform: Transform,
    pub missing_policy: MissingPolicy,
    #[serde(rename = "stratum")]
    pub strata: Vec<Stratum>,
    /// variable -> cohort feature name, or "MISSING".
    pub mapping: BTreeMap<String, String>,
    #[serde(default)]
    pub reference_means: BTreeMap<String, f64>,
}

/// Which declared variables actually map onto the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub declared: usize,
    pub mapped: usize,
    pub missing_variables: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("equation parse: {0}")]
    Parse(String),
    #[error("term variable {0:?} has no mapping entry")]
    UnmappedVariable(String),
    #[error("equation has no strata")]
    NoStrata,
    #[error("stratum {0:?}: catch-all (no selector) is only valid in a single-stratum equation")]
    AmbiguousCatchAll(String),
    #[error("variable {variable:?} maps to {feature:?} which is not a cohort column")]
    UnknownFeature { variable: String, feature: String },
    #[error("stratum {label:?}: selector {selector:?} is not a cohort column")]
    UnknownSelector { label: String, selector: String },
    #[error("missing policy impute_mean requires a reference mean for {0:?}")]
    MissingReferenceMean(String),
    #[error("subject {0:?} matches no stratum")]
    NoStratumMatch(String),
    #[error("subject {0:?} matches {1} strata; selectors must partition the cohort")]
    MultipleStrataMatch(String, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalScores {
    pub scores: Vec<f64>,
    /// Index into the equation's strata for each subject.
    pub stratum_of: Vec<usize>,
}

/// Parses and structurally validates an equation, reporting coverage of
/// the declared variables.
pub fn load_equation(
    mut reader: impl Read,
) -> Result<(ExternalRiskEquation, CoverageReport), ExternalError> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| ExternalError::Parse(e.to_string()))?;
    let equation: ExternalRiskEquation =
        toml::from_str(&text).map_err(|e| ExternalError::Parse(e.to_string()))?;

    if equation.strata.is_empty() {
        return Err(ExternalError::NoStrata);
    }
    if equation.strata.len() > 1 {
        if let Some(s) = equation.strata.iter().find(|s| s.selector.is_none()) {
            return Err(ExternalError::AmbiguousCatchAll(s.label.clone()));
        }
    }

    let mut declared: Vec<&String> = equation
        .strata
        .iter()
        .flat_map(|s| s.terms.iter().map(|(v, _)| v))
        .collect();
    declared.sort();
    declared.dedup();
    let mut missing_variables = Vec::new();
    for var in &declared {
        match equation.mapping.get(*var) {
            None => return Err(ExternalError::UnmappedVariable((*var).clone())),
            Some(target) if target == MISSING_SENTINEL => {
                if equation.missing_policy == MissingPolicy::ImputeMean
                    && !equation.reference_means.contains_key(*var)
                {
                    return Err(ExternalError::MissingReferenceMean((*var).clone()));
                }
                missing_variables.push((*var).clone());
            }
            Some(_) => {}
        }
    }

    let coverage = CoverageReport {
        declared: declared.len(),
        mapped: declared.len() - missing_variables.len(),
        missing_variables,
    };
    Ok((equation, coverage))
}

impl ExternalRiskEquation {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("equation serializes")
    }

    /// Checks every mapped feature and selector against the cohort columns.
    pub fn validate_against(&self, cohort: &EncodedCohort) -> Result<(), ExternalError> {
        for (variable, target) in &self.mapping {
            if target != MISSING_SENTINEL && cohort.column_index(target).is_none() {
                return Err(ExternalError::UnknownFeature {
                    variable: variable.clone(),
                    feature: target.clone(),
                });
            }
        }
        for stratum in &self.strata {
            if let Some(selector) = &stratum.selector {
                if cohort.column_index(selector).is_none() {
                    return Err(ExternalError::UnknownSelector {
                        label: stratum.label.clone(),
                        selector: selector.clone(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Scores every subject under its stratum's equation.
pub fn evaluate_external(
    equation: &ExternalRiskEquation,
    cohort: &EncodedCohort,
) -> Result<ExternalScores, ExternalError> {
    equation.validate_against(cohort)?;

    let selector_cols: Vec<Option<usize>> = equation
        .strata
        .iter()
        .map(|s| s.selector.as_ref().map(|sel| cohort.column_index(sel).expect("validated")))
        .collect();

    let mut scores = Vec::with_capacity(cohort.n_subjects());
    let mut stratum_of = Vec::with_capacity(cohort.n_subjects());
    for (i, row) in cohort.matrix.iter().enumerate() {
        let matches: Vec<usize> = equation
            .strata
            .iter()
            .enumerate()
            .filter(|(k, _)| match selector_cols[*k] {
                Some(col) => row[col] == 1.0,
                None => true,
            })
            .map(|(k, _)| k)
            .collect();
        let k = match matches.as_slice() {
            [k] => *k,
            [] => return Err(ExternalError::NoStratumMatch(cohort.subject_ids[i].clone())),
            many => {
                return Err(ExternalError::MultipleStrataMatch(
                    cohort.subject_ids[i].clone(),
                    many.len(),
                ))
            }
        };

        let stratum = &equation.strata[k];
        let mut lp = stratum.intercept;
        for (variable, coefficient) in &stratum.terms {
            let target = &equation.mapping[variable];
            if target == MISSING_SENTINEL {
                match equation.missing_policy {
                    MissingPolicy::DropTerm => {}
                    MissingPolicy::ImputeMean => {
                        let mean = equation
                            .reference_means
                            .get(variable)
                            .ok_or_else(|| ExternalError::MissingReferenceMean(variable.clone()))?;
                        lp += coefficient * mean;
                    }
                }
            } else {
                let col = cohort.column_index(target).expect("validated");
                lp += coefficient * row[col];
            }
        }
        scores.push(match equation.transform {
            Transform::LinearPredictor => lp,
            Transform::Logistic => 1.0 / (1.0 + (-lp).exp()),
        });
        stratum_of.push(k);
    }

    Ok(ExternalScores { scores, stratum_of })
}
