//! Synthetic cohorts with planted hazard structure.
//!
//! Survival times are exponential with hazard
//! `calibrated_scale * exp(sum(log_hr * x))`; a subject dies when the drawn
//! time falls inside the censoring horizon. The baseline scale is
//! calibrated by bisection on a 100k-draw pilot so the expected event rate
//! matches `target_event_rate`. Everything is reproducible from the seed
//! via per-subject derived RNG streams.
//!
//! Binary features materialize as clinical events (code = feature name)
//! dated 60-300 days before the index test, which places them in the
//! single chronic window; continuous features go to the baseline map. The
//! matching catalog comes from [`catalog_for`].

use std::collections::BTreeSet;

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::catalog::{CatalogEntry, FeatureCatalog};
use crate::cohort::window::FeatureClass;
use crate::cohort::{ClinicalEvent, EventSource, Outcome, Sex, SubjectRecord};
use crate::seeding::{derive_seed, rng_for};

const PILOT_DRAWS: usize = 100_000;
const CALIBRATION_TOLERANCE: f64 = 0.002;
/// Prevalence of the generated pure-noise binary features.
pub const NOISE_PREVALENCE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Binary { prevalence: f64 },
    Continuous { mean: f64, sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub feature_name: String,
    pub log_hazard_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_subjects: usize,
    pub target_event_rate: f64,
    pub planted_effects: Vec<PlantedEffect>,
    pub feature_specs: Vec<FeatureSpec>,
    #[serde(default)]
    pub noise_features: usize,
    /// Starting point for the hazard-scale bisection bracket.
    pub baseline_hazard_scale: f64,
    pub censor_horizon_days: u32,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("config field {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("planted effect references unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("duplicate feature name {0:?}")]
    DuplicateFeature(String),
    #[error("hazard calibration failed: target event rate {target} unreachable (best rate {best})")]
    CalibrationFailed { target: f64, best: f64 },
    #[error("subject {0:?} lacks a value for planted feature {1:?}")]
    MissingValue(String, String),
    #[error("config parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEntry {
    pub subject_id: String,
    pub linear_predictor: f64,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub subjects: Vec<SubjectRecord>,
    pub ground_truth: Vec<GroundTruthEntry>,
    pub calibrated_hazard_scale: f64,
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<GeneratorConfig, SynthError> {
        let config: GeneratorConfig =
            toml::from_str(text).map_err(|e| SynthError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_subjects < 2 {
            return Err(SynthError::InvalidConfig {
                field: "n_subjects",
                reason: format!("must be at least 2, got {}", self.n_subjects),
            });
        }
        if !(self.target_event_rate > 0.0 && self.target_event_rate < 1.0) {
            return Err(SynthError::InvalidConfig {
                field: "target_event_rate",
                reason: format!("must lie in (0,1), got {}", self.target_event_rate),
            });
        }
        if self.planted_effects.is_empty() {
            return Err(SynthError::InvalidConfig {
                field: "planted_effects",
                reason: "at least one planted effect is required".into(),
            });
        }
        if !(self.baseline_hazard_scale > 0.0) {
            return Err(SynthError::InvalidConfig {
                field: "baseline_hazard_scale",
                reason: "must be positive".into(),
            });
        }
        if self.censor_horizon_days == 0 {
            return Err(SynthError::InvalidConfig {
                field: "censor_horizon_days",
                reason: "must be positive".into(),
            });
        }
        let mut names = BTreeSet::new();
        for spec in self.all_features() {
            if !names.insert(spec.name.clone()) {
                return Err(SynthError::DuplicateFeature(spec.name.clone()));
            }
            match spec.kind {
                FeatureKind::Binary { prevalence } => {
                    if !(prevalence > 0.0 && prevalence < 1.0) {
                        return Err(SynthError::InvalidConfig {
                            field: "feature_specs",
                            reason: format!("{}: prevalence must lie in (0,1)", spec.name),
                        });
                    }
                }
                FeatureKind::Continuous { sd, .. } => {
                    if !(sd > 0.0) {
                        return Err(SynthError::InvalidConfig {
                            field: "feature_specs",
                            reason: format!("{}: sd must be positive", spec.name),
                        });
                    }
                }
            }
        }
        for effect in &self.planted_effects {
            if !names.contains(&effect.feature_name) {
                return Err(SynthError::UnknownFeature(effect.feature_name.clone()));
            }
        }
        Ok(())
    }

    /// Declared features followed by the generated noise features.
    pub fn all_features(&self) -> Vec<FeatureSpec> {
        let mut specs = self.feature_specs.clone();
        for i in 0..self.noise_features {
            specs.push(FeatureSpec {
                name: format!("noise_{i:02}"),
                kind: FeatureKind::Binary {
                    prevalence: NOISE_PREVALENCE,
                },
            });
        }
        specs
    }
}

/// Encoded-matrix column name a feature spec will produce.
pub fn encoded_column_name(spec: &FeatureSpec) -> String {
    match spec.kind {
        // chronic class has a single window
        FeatureKind::Binary { .. } => format!("{}@0", spec.name),
        FeatureKind::Continuous { .. } => spec.name.clone(),
    }
}

/// Catalog that encodes exactly the generator's feature space.
pub fn catalog_for(config: &GeneratorConfig) -> FeatureCatalog {
    let entries = config
        .all_features()
        .iter()
        .map(|spec| match spec.kind {
            FeatureKind::Binary { .. } => {
                CatalogEntry::binary(&spec.name, &[spec.name.as_str()], FeatureClass::Chronic)
            }
            FeatureKind::Continuous { .. } => {
                CatalogEntry::baseline_continuous(&spec.name, &spec.name)
            }
        })
        .collect();
    FeatureCatalog::new(entries).expect("generator feature names are unique")
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Box-Muller; u1 bounded away from zero
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn draw_features(specs: &[FeatureSpec], rng: &mut impl Rng) -> Vec<f64> {
    specs
        .iter()
        .map(|spec| match spec.kind {
            FeatureKind::Binary { prevalence } => (rng.gen::<f64>() < prevalence) as u8 as f64,
            FeatureKind::Continuous { mean, sd } => mean + sd * standard_normal(rng),
        })
        .collect()
}

fn linear_predictor(
    config: &GeneratorConfig,
    specs: &[FeatureSpec],
    values: &[f64],
) -> f64 {
    config
        .planted_effects
        .iter()
        .map(|effect| {
            let idx = specs
                .iter()
                .position(|s| s.name == effect.feature_name)
                .expect("validated");
            effect.log_hazard_ratio * values[idx]
        })
        .sum()
}

/// Expected event rate at hazard scale `lambda` over the pilot predictors.
fn expected_rate(lambda: f64, pilot_lps: &[f64], horizon_days: f64) -> f64 {
    let sum: f64 = pilot_lps
        .iter()
        .map(|lp| 1.0 - (-lambda * lp.exp() * horizon_days).exp())
        .sum();
    sum / pilot_lps.len() as f64
}

fn calibrate_hazard_scale(config: &GeneratorConfig, specs: &[FeatureSpec]) -> Result<f64, SynthError> {
    let pilot_base = derive_seed(config.seed, 2);
    let pilot_lps: Vec<f64> = (0..PILOT_DRAWS)
        .map(|k| {
            let mut rng = rng_for(pilot_base, k as u64);
            let values = draw_features(specs, &mut rng);
            linear_predictor(config, specs, &values)
        })
        .collect();

    let horizon = config.censor_horizon_days as f64;
    let target = config.target_event_rate;
    let mut lo = config.baseline_hazard_scale * 1e-12;
    let mut hi = config.baseline_hazard_scale * 1e12;
    if expected_rate(lo, &pilot_lps, horizon) > target
        || expected_rate(hi, &pilot_lps, horizon) < target
    {
        let best = expected_rate(hi, &pilot_lps, horizon);
        return Err(SynthError::CalibrationFailed { target, best });
    }
    let mut mid = config.baseline_hazard_scale;
    for _ in 0..200 {
        mid = (lo * hi).sqrt();
        let rate = expected_rate(mid, &pilot_lps, horizon);
        if (rate - target).abs() <= CALIBRATION_TOLERANCE * 0.5 {
            return Ok(mid);
        }
        if rate < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = expected_rate(mid, &pilot_lps, horizon);
    if (best - target).abs() <= CALIBRATION_TOLERANCE {
        Ok(mid)
    } else {
        Err(SynthError::CalibrationFailed { target, best })
    }
}

const INDEX_TEST_DATE: &str = "2020-06-01";

/// Generates the cohort and its ground-truth linear predictors.
pub fn generate_cohort(config: &GeneratorConfig) -> Result<SynthCohort, SynthError> {
    config.validate()?;
    let specs = config.all_features();
    let lambda = calibrate_hazard_scale(config, &specs)?;

    let test_date: NaiveDate = INDEX_TEST_DATE.parse().expect("valid date literal");
    let subject_base = derive_seed(config.seed, 1);
    let horizon = config.censor_horizon_days;

    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut ground_truth = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let mut rng = rng_for(subject_base, i as u64);
        let values = draw_features(&specs, &mut rng);
        let lp = linear_predictor(config, &specs, &values);

        // inverse-CDF exponential draw in days
        let u: f64 = 1.0 - rng.gen::<f64>();
        let t_days = -u.ln() / (lambda * lp.exp());
        let died = t_days < horizon as f64;

        let subject_id = format!("synth-{i:06}");
        let mut continuous_baseline = std::collections::BTreeMap::new();
        let mut events = Vec::new();
        for (spec, &value) in specs.iter().zip(&values) {
            match spec.kind {
                FeatureKind::Binary { .. } => {
                    if value == 1.0 {
                        let offset = rng.gen_range(60..=300);
                        events.push(ClinicalEvent {
                            code: spec.name.clone(),
                            date: test_date - chrono::Duration::days(offset),
                            source: EventSource::Hospital,
                        });
                    }
                }
                FeatureKind::Continuous { .. } => {
                    continuous_baseline.insert(spec.name.clone(), Some(value));
                }
            }
        }
        events.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.code.cmp(&b.code)));

        let age_years = 51.0 + 34.0 * rng.gen::<f64>();
        let sex = if rng.gen::<bool>() { Sex::Male } else { Sex::Female };
        let censor_date = test_date + chrono::Duration::days(horizon as i64);
        let outcome = if died {
            Outcome {
                died: true,
                death_date: Some(test_date + chrono::Duration::days(t_days.floor() as i64)),
                censor_date,
            }
        } else {
            Outcome {
                died: false,
                death_date: None,
                censor_date,
            }
        };

        subjects.push(SubjectRecord {
            subject_id: subject_id.clone(),
            age_years,
            sex,
            continuous_baseline,
            categorical_baseline: std::collections::BTreeMap::new(),
            events,
            vitals: Vec::new(),
            index_test_date: test_date,
            outcome,
        });
        ground_truth.push(GroundTruthEntry {
            subject_id,
            linear_predictor: lp,
        });
    }

    Ok(SynthCohort {
        subjects,
        ground_truth,
        calibrated_hazard_scale: lambda,
    })
}

/// True linear predictor of a generated subject, recomputed from its
/// record. Strictly monotone in the subject's true risk.
pub fn oracle_score(config: &GeneratorConfig, subject: &SubjectRecord) -> Result<f64, SynthError> {
    let specs = config.all_features();
    let mut total = 0.0;
    for effect in &config.planted_effects {
        let spec = specs
            .iter()
            .find(|s| s.name == effect.feature_name)
            .ok_or_else(|| SynthError::UnknownFeature(effect.feature_name.clone()))?;
        let value = match spec.kind {
            FeatureKind::Binary { .. } => subject
                .events
                .iter()
                .any(|e| e.code == spec.name) as u8 as f64,
            FeatureKind::Continuous { .. } => subject
                .continuous_baseline
                .get(&spec.name)
                .and_then(|v| *v)
                .ok_or_else(|| {
                    SynthError::MissingValue(subject.subject_id.clone(), spec.name.clone())
                })?,
        };
        total += effect.log_hazard_ratio * value;
    }
    Ok(total)
}
