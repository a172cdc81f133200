//! Model evaluation: leave-one-out cross-validation with per-iteration
//! class balancing, and the shared ROC/AUC/F-β metrics.
//!
//! Each LOO iteration holds out one sample, draws a class-balanced training
//! set from the rest (undersampling the majority class to the minority
//! count, without replacement), trains a fresh model, scores the held-out
//! sample, and discards the model. Iterations run in parallel under
//! per-iteration derived seeds, so results are independent of thread count.

pub mod metrics;

pub use metrics::{
    auc_pair_oracle, f_beta, f_beta_curve, roc_curve, FBetaCurve, MetricError, RocCurve, RocPoint,
    DEFAULT_BETAS,
};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::encode::EncodedCohort;
use crate::cox::{fit_cox, CoxOptions, SurvivalSample};
use crate::forest::{train_forest, ForestParams};
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum LooError {
    #[error("cohort labels contain a single class")]
    SingleClass,
    #[error("{failures} of {total} LOO iterations failed (more than 1%); first: {first}")]
    TooManyFailures {
        failures: usize,
        total: usize,
        first: String,
    },
}

#[derive(Debug, Error)]
#[error("a class emptied after excluding the held-out sample")]
pub struct ClassEmptied;

/// Balanced training indices: `m` per class where `m` is the smaller
/// class's size after excluding `heldout_index`. Sampling is without
/// replacement; the held-out index is never returned.
pub fn balance_classes(
    labels: &[bool],
    heldout_index: usize,
    seed: u64,
) -> Result<Vec<usize>, ClassEmptied> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, &label) in labels.iter().enumerate() {
        if i == heldout_index {
            continue;
        }
        if label {
            pos.push(i);
        } else {
            neg.push(i);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(ClassEmptied);
    }
    let m = pos.len().min(neg.len());
    let mut rng = crate::seeding::rng_for(seed, 0);
    let take = |from: &[usize], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<usize> {
        rand::seq::index::sample(rng, from.len(), m)
            .into_iter()
            .map(|k| from[k])
            .collect()
    };
    let mut chosen = take(&pos, &mut rng);
    chosen.extend(take(&neg, &mut rng));
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeldOutScore {
    pub subject_index: usize,
    pub true_label: bool,
    pub heldout_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IterationOutcome {
    Scored,
    Skipped(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStat {
    pub heldout_index: usize,
    /// Training samples drawn per class (the balanced count).
    pub per_class_count: usize,
    pub outcome: IterationOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub per_sample: Vec<HeldOutScore>,
    /// Mean per-feature importance over iterations (model strategies that
    /// expose importances only).
    pub mean_importances: Option<Vec<f64>>,
    pub n_iterations: usize,
    pub iteration_stats: Vec<IterationStat>,
    /// Iterations whose training set contained the held-out index. Must be
    /// zero; instrumented rather than assumed.
    pub leak_violations: usize,
    pub failures: usize,
}

impl LooResult {
    pub fn scores(&self) -> Vec<f64> {
        self.per_sample.iter().map(|s| s.heldout_score).collect()
    }

    pub fn labels(&self) -> Vec<bool> {
        self.per_sample.iter().map(|s| s.true_label).collect()
    }

    /// CSV export `(subject_id, label, score)`.
    pub fn to_scores_csv(
        &self,
        subject_ids: &[String],
        writer: impl std::io::Write,
    ) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["subject_id", "label", "score"])?;
        for s in &self.per_sample {
            wtr.write_record([
                subject_ids[s.subject_index].as_str(),
                if s.true_label { "1" } else { "0" },
                &format!("{}", s.heldout_score),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ScoredIteration {
    pub score: f64,
    pub importances: Option<Vec<f64>>,
}

/// A model strategy trainable inside one LOO iteration.
pub trait LooTrainer: Sync {
    fn name(&self) -> &'static str;

    fn train_and_score(
        &self,
        x: &[Vec<f64>],
        labels: &[bool],
        survival_days: &[u32],
        test_x: &[f64],
        seed: u64,
    ) -> Result<ScoredIteration, String>;
}

/// Random-forest strategy; the per-iteration seed overrides `params.seed`.
pub struct ForestTrainer {
    pub params: ForestParams,
    pub feature_names: Vec<String>,
}

impl LooTrainer for ForestTrainer {
    fn name(&self) -> &'static str {
        "random_forest"
    }

    fn train_and_score(
        &self,
        x: &[Vec<f64>],
        labels: &[bool],
        _survival_days: &[u32],
        test_x: &[f64],
        seed: u64,
    ) -> Result<ScoredIteration, String> {
        let params = ForestParams {
            seed,
            ..self.params.clone()
        };
        let forest =
            train_forest(x, labels, &self.feature_names, &params).map_err(|e| e.to_string())?;
        let score = forest.predict_likelihood(test_x).map_err(|e| e.to_string())?;
        Ok(ScoredIteration {
            score,
            importances: Some(forest.importances),
        })
    }
}

/// Cox strategy scoring by linear predictor. Exposes no importances.
pub struct CoxTrainer {
    pub options: CoxOptions,
    pub feature_names: Vec<String>,
}

impl LooTrainer for CoxTrainer {
    fn name(&self) -> &'static str {
        "cox"
    }

    fn train_and_score(
        &self,
        x: &[Vec<f64>],
        labels: &[bool],
        survival_days: &[u32],
        test_x: &[f64],
        _seed: u64,
    ) -> Result<ScoredIteration, String> {
        let samples: Vec<SurvivalSample> = x
            .iter()
            .zip(labels)
            .zip(survival_days)
            .map(|((row, &event), &time_days)| SurvivalSample {
                x: row.clone(),
                time_days,
                event,
            })
            .collect();
        let model =
            fit_cox(&samples, &self.feature_names, &self.options).map_err(|e| e.to_string())?;
        let score = model.risk_score(test_x).map_err(|e| e.to_string())?;
        Ok(ScoredIteration {
            score,
            importances: None,
        })
    }
}

/// Where imputed continuous cells take their fill value from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputePolicy {
    /// Keep the whole-cohort means baked in at encoding time (the published
    /// procedure; leaks across folds).
    Cohort,
    /// Re-impute from the iteration's training rows only. Normalization
    /// scaling, when applied at encode time, stays cohort-level.
    Fold,
}

fn fold_imputed_rows(
    cohort: &EncodedCohort,
    train_idx: &[usize],
    heldout: usize,
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut train: Vec<Vec<f64>> = train_idx.iter().map(|&i| cohort.matrix[i].clone()).collect();
    let mut test = cohort.matrix[heldout].clone();
    for (j, missing) in cohort.missing_cells.iter().enumerate() {
        if missing.is_empty() {
            continue;
        }
        let missing: std::collections::BTreeSet<usize> = missing.iter().copied().collect();
        let observed: Vec<f64> = train_idx
            .iter()
            .filter(|&&i| !missing.contains(&i))
            .map(|&i| cohort.matrix[i][j])
            .collect();
        if observed.is_empty() {
            continue; // nothing to re-impute from; keep cohort fill
        }
        let fold_mean = observed.iter().sum::<f64>() / observed.len() as f64;
        for (row, &i) in train.iter_mut().zip(train_idx) {
            if missing.contains(&i) {
                row[j] = fold_mean;
            }
        }
        if missing.contains(&heldout) {
            test[j] = fold_mean;
        }
    }
    (train, test)
}

/// Runs the full leave-one-out protocol.
///
/// Per-iteration seeds derive from `(master_seed, heldout_index)`, making
/// the result independent of scheduling. Training sets are checked for
/// held-out leakage on every iteration. The run aborts when more than 1%
/// of iterations fail.
pub fn run_loo(
    cohort: &EncodedCohort,
    trainer: &dyn LooTrainer,
    master_seed: u64,
    impute: ImputePolicy,
) -> Result<LooResult, LooError> {
    let labels = &cohort.labels;
    let n = labels.len();
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(LooError::SingleClass);
    }

    struct IterOut {
        stat: IterationStat,
        score: Option<f64>,
        importances: Option<Vec<f64>>,
        leaked: bool,
    }

    let outcomes: Vec<IterOut> = (0..n)
        .into_par_iter()
        .map(|i| {
            let iter_seed = derive_seed(master_seed, i as u64);
            let balance_seed = derive_seed(iter_seed, 0);
            let trainer_seed = derive_seed(iter_seed, 1);

            let train_idx = match balance_classes(labels, i, balance_seed) {
                Ok(idx) => idx,
                Err(e) => {
                    return IterOut {
                        stat: IterationStat {
                            heldout_index: i,
                            per_class_count: 0,
                            outcome: IterationOutcome::Skipped(e.to_string()),
                        },
                        score: None,
                        importances: None,
                        leaked: false,
                    }
                }
            };
            let leaked = train_idx.contains(&i);
            let per_class_count = train_idx.len() / 2;

            let (x, test_x) = match impute {
                ImputePolicy::Cohort => (
                    train_idx.iter().map(|&k| cohort.matrix[k].clone()).collect::<Vec<_>>(),
                    cohort.matrix[i].clone(),
                ),
                ImputePolicy::Fold => fold_imputed_rows(cohort, &train_idx, i),
            };
            let y: Vec<bool> = train_idx.iter().map(|&k| labels[k]).collect();
            let surv: Vec<u32> = train_idx.iter().map(|&k| cohort.survival_days[k]).collect();

            match trainer.train_and_score(&x, &y, &surv, &test_x, trainer_seed) {
                Ok(scored) => IterOut {
                    stat: IterationStat {
                        heldout_index: i,
                        per_class_count,
                        outcome: IterationOutcome::Scored,
                    },
                    score: Some(scored.score),
                    importances: scored.importances,
                    leaked,
                },
                Err(msg) => IterOut {
                    stat: IterationStat {
                        heldout_index: i,
                        per_class_count,
                        outcome: IterationOutcome::Failed(msg),
                    },
                    score: None,
                    importances: None,
                    leaked,
                },
            }
        })
        .collect();

    // fixed-order aggregation
    let mut per_sample = Vec::with_capacity(n);
    let mut iteration_stats = Vec::with_capacity(n);
    let mut importance_sum: Option<Vec<f64>> = None;
    let mut importance_count = 0usize;
    let mut leak_violations = 0usize;
    let mut failures = 0usize;
    let mut first_failure = None;
    for out in outcomes {
        if out.leaked {
            leak_violations += 1;
        }
        match &out.stat.outcome {
            IterationOutcome::Scored => {
                per_sample.push(HeldOutScore {
                    subject_index: out.stat.heldout_index,
                    true_label: labels[out.stat.heldout_index],
                    heldout_score: out.score.expect("scored iteration has a score"),
                });
            }
            IterationOutcome::Failed(msg) => {
                failures += 1;
                first_failure.get_or_insert_with(|| msg.clone());
            }
            IterationOutcome::Skipped(_) => {}
        }
        if let Some(imp) = out.importances {
            match &mut importance_sum {
                Some(acc) => {
                    for (a, v) in acc.iter_mut().zip(&imp) {
                        *a += v;
                    }
                }
                None => importance_sum = Some(imp),
            }
            importance_count += 1;
        }
        iteration_stats.push(out.stat);
    }

    if failures * 100 > n {
        return Err(LooError::TooManyFailures {
            failures,
            total: n,
            first: first_failure.unwrap_or_default(),
        });
    }

    let mean_importances = importance_sum.map(|mut acc| {
        for v in acc.iter_mut() {
            *v /= importance_count as f64;
        }
        acc
    });

    Ok(LooResult {
        per_sample,
        mean_importances,
        n_iterations: n,
        iteration_stats,
        leak_violations,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::encode::{encode_cohort, Normalization};
    use crate::synth::{self, generate_cohort, FeatureKind, FeatureSpec, GeneratorConfig, PlantedEffect};

    #[test]
    fn balancing_undersamples_majority() {
        // 3 positives, 10 negatives, held-out a negative -> 3 + 3
        let mut labels = vec![true; 3];
        labels.extend(vec![false; 10]);
        let chosen = balance_classes(&labels, 5, 42).unwrap();
        assert_eq!(chosen.len(), 6);
        let pos = chosen.iter().filter(|&&i| labels[i]).count();
        assert_eq!(pos, 3);
        assert!(!chosen.contains(&5));
    }

    #[test]
    fn balanced_input_keeps_min_class_size() {
        let labels = vec![true, false, true, false, true, false];
        // held-out positive: 2 pos remain, 3 neg -> m = 2
        let chosen = balance_classes(&labels, 0, 7).unwrap();
        assert_eq!(chosen.len(), 4);
    }

    #[test]
    fn heldout_never_sampled_across_seeds() {
        let mut labels = vec![true; 5];
        labels.extend(vec![false; 7]);
        for seed in 0..1000 {
            let chosen = balance_classes(&labels, 3, seed).unwrap();
            assert!(!chosen.contains(&3), "seed {seed} leaked the held-out index");
            // without replacement: no duplicates
            let mut dedup = chosen.clone();
            dedup.dedup();
            assert_eq!(dedup, chosen);
        }
    }

    #[test]
    fn class_emptying_signals_skip() {
        let labels = vec![true, false, false, false];
        assert!(balance_classes(&labels, 0, 1).is_err());
        assert!(balance_classes(&labels, 1, 1).is_ok());
    }

    fn small_cohort(n: usize, seed: u64) -> (crate::cohort::encode::EncodedCohort, GeneratorConfig) {
        let config = GeneratorConfig {
            n_subjects: n,
            target_event_rate: 0.35,
            planted_effects: vec![PlantedEffect {
                feature_name: "flag".into(),
                log_hazard_ratio: 1.5,
            }],
            feature_specs: vec![
                FeatureSpec {
                    name: "flag".into(),
                    kind: FeatureKind::Binary { prevalence: 0.4 },
                },
                FeatureSpec {
                    name: "level".into(),
                    kind: FeatureKind::Continuous { mean: 0.0, sd: 1.0 },
                },
            ],
            noise_features: 2,
            baseline_hazard_scale: 0.001,
            censor_horizon_days: 365,
            seed,
        };
        let cohort = generate_cohort(&config).unwrap();
        let catalog = synth::catalog_for(&config);
        let enc = encode_cohort(&cohort.subjects, &catalog, Normalization::None).unwrap();
        (enc, config)
    }

    fn forest_trainer(enc: &crate::cohort::encode::EncodedCohort) -> ForestTrainer {
        ForestTrainer {
            params: ForestParams {
                n_trees: 15,
                ..Default::default()
            },
            feature_names: enc.feature_names.clone(),
        }
    }

    #[test]
    fn loo_scores_every_sample_exactly_once() {
        let (enc, _) = small_cohort(40, 5);
        let result = run_loo(&enc, &forest_trainer(&enc), 17, ImputePolicy::Cohort).unwrap();
        assert_eq!(result.per_sample.len(), 40);
        assert_eq!(result.n_iterations, 40);
        let mut seen: Vec<usize> = result.per_sample.iter().map(|s| s.subject_index).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        assert_eq!(result.leak_violations, 0);
        assert_eq!(result.failures, 0);
    }

    #[test]
    fn loo_is_deterministic_for_a_seed() {
        let (enc, _) = small_cohort(30, 9);
        let trainer = forest_trainer(&enc);
        let a = run_loo(&enc, &trainer, 123, ImputePolicy::Cohort).unwrap();
        let b = run_loo(&enc, &trainer, 123, ImputePolicy::Cohort).unwrap();
        assert_eq!(a, b);
        let c = run_loo(&enc, &trainer, 124, ImputePolicy::Cohort).unwrap();
        assert_ne!(a.scores(), c.scores());
    }

    #[test]
    fn per_iteration_counts_match_minority_after_exclusion() {
        let (enc, _) = small_cohort(36, 3);
        let n_pos = enc.labels.iter().filter(|&&l| l).count();
        let n_neg = enc.labels.len() - n_pos;
        let result = run_loo(&enc, &forest_trainer(&enc), 8, ImputePolicy::Cohort).unwrap();
        for stat in &result.iteration_stats {
            let heldout_pos = enc.labels[stat.heldout_index];
            let expected = if heldout_pos {
                (n_pos - 1).min(n_neg)
            } else {
                n_pos.min(n_neg - 1)
            };
            assert_eq!(stat.per_class_count, expected);
            assert_eq!(stat.outcome, IterationOutcome::Scored);
        }
    }

    #[test]
    fn forest_importances_average_across_iterations() {
        let (enc, _) = small_cohort(30, 11);
        let result = run_loo(&enc, &forest_trainer(&enc), 2, ImputePolicy::Cohort).unwrap();
        let imp = result.mean_importances.unwrap();
        assert_eq!(imp.len(), enc.n_features());
        assert!(imp.iter().all(|&v| v >= 0.0));
        // each per-iteration vector sums to 1, so the mean does too
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cox_trainer_runs_loo_without_importances() {
        let (enc, _) = small_cohort(40, 21);
        let trainer = CoxTrainer {
            options: CoxOptions::default(),
            feature_names: enc.feature_names.clone(),
        };
        let result = run_loo(&enc, &trainer, 5, ImputePolicy::Cohort).unwrap();
        assert!(result.mean_importances.is_none());
        assert_eq!(result.per_sample.len(), 40);
        assert_eq!(result.leak_violations, 0);
    }

    #[test]
    fn abort_when_trainer_always_fails() {
        struct AlwaysFails;
        impl LooTrainer for AlwaysFails {
            fn name(&self) -> &'static str {
                "broken"
            }
            fn train_and_score(
                &self,
                _: &[Vec<f64>],
                _: &[bool],
                _: &[u32],
                _: &[f64],
                _: u64,
            ) -> Result<ScoredIteration, String> {
                Err("nope".into())
            }
        }
        let (enc, _) = small_cohort(20, 2);
        assert!(matches!(
            run_loo(&enc, &AlwaysFails, 1, ImputePolicy::Cohort),
            Err(LooError::TooManyFailures { .. })
        ));
    }

    #[test]
    fn fold_imputation_changes_only_missing_cells() {
        use crate::cohort::catalog::{CatalogEntry, FeatureCatalog};
        use crate::cohort::{Outcome, Sex, SubjectRecord};
        use std::collections::BTreeMap;

        let date = |s: &str| s.parse::<chrono::NaiveDate>().unwrap();
        let mk = |id: &str, died: bool, v: Option<f64>| SubjectRecord {
            subject_id: id.into(),
            age_years: 60.0,
            sex: Sex::Male,
            continuous_baseline: [("m".to_string(), v)].into_iter().collect(),
            categorical_baseline: BTreeMap::new(),
            events: vec![],
            vitals: vec![],
            index_test_date: date("2020-06-01"),
            outcome: Outcome {
                died,
                death_date: died.then(|| date("2020-07-01")),
                censor_date: date("2021-02-16"),
            },
        };
        let subjects = vec![
            mk("a", true, Some(10.0)),
            mk("b", false, Some(20.0)),
            mk("c", true, None),
            mk("d", false, Some(30.0)),
        ];
        let catalog =
            FeatureCatalog::new(vec![CatalogEntry::baseline_continuous("m", "m")]).unwrap();
        let enc = encode_cohort(&subjects, &catalog, Normalization::None).unwrap();
        // cohort imputation filled subject c with 20
        assert_eq!(enc.matrix[2][0], 20.0);
        // fold = {a, b} (observed 10, 20): subject c as training member of a
        // fold {b, c} should get mean of b only
        let (train, test) = fold_imputed_rows(&enc, &[1, 2], 0);
        assert_eq!(train[0][0], 20.0); // b observed, untouched
        assert_eq!(train[1][0], 20.0); // c re-imputed from {b}
        assert_eq!(test[0], 10.0); // heldout a observed, untouched
        let (train, test) = fold_imputed_rows(&enc, &[0, 3], 2);
        assert_eq!(train[0][0], 10.0);
        assert_eq!(train[1][0], 30.0);
        assert_eq!(test[0], 20.0); // heldout c re-imputed from {a, d}
    }

    #[test]
    fn scores_csv_has_one_row_per_sample() {
        let (enc, _) = small_cohort(20, 13);
        let result = run_loo(&enc, &forest_trainer(&enc), 3, ImputePolicy::Cohort).unwrap();
        let mut buf = Vec::new();
        result.to_scores_csv(&enc.subject_ids, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 21);
        assert!(text.starts_with("subject_id,label,score"));
    }
}
