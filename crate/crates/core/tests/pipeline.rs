//! End-to-end pipeline integration: generate -> ingest -> encode -> LOO ->
//! rank -> review -> rebuild -> re-encode -> final models.

use std::collections::BTreeSet;

use dynrisk_core::cohort::encode::{encode_cohort, Normalization};
use dynrisk_core::cohort::{ingest_cohort, write_cohort, PlausibilityConfig};
use dynrisk_core::cox::{fit_cox, CoxOptions};
use dynrisk_core::eval::{roc_curve, run_loo, CoxTrainer, ForestTrainer, ImputePolicy};
use dynrisk_core::forest::ForestParams;
use dynrisk_core::selection::{
    aggregate_importance, apply_review, rebuild_catalog, Exclusion, ExclusionReason, Grouping,
    ReviewConfig,
};
use dynrisk_core::synth::{
    self, generate_cohort, FeatureKind, FeatureSpec, GeneratorConfig, PlantedEffect,
};

fn pipeline_config(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        n_subjects: 260,
        target_event_rate: 0.3,
        planted_effects: vec![
            PlantedEffect { feature_name: "risk_a".into(), log_hazard_ratio: 1.4 },
            PlantedEffect { feature_name: "risk_b".into(), log_hazard_ratio: 1.0 },
        ],
        feature_specs: vec![
            FeatureSpec { name: "risk_a".into(), kind: FeatureKind::Binary { prevalence: 0.3 } },
            FeatureSpec { name: "risk_b".into(), kind: FeatureKind::Binary { prevalence: 0.35 } },
            FeatureSpec { name: "marker".into(), kind: FeatureKind::Continuous { mean: 10.0, sd: 3.0 } },
        ],
        noise_features: 3,
        baseline_hazard_scale: 1e-3,
        censor_horizon_days: 365,
        seed,
    }
}

#[test]
fn review_pipeline_never_reencodes_excluded_features() {
    let config = pipeline_config(41);
    let cohort = generate_cohort(&config).unwrap();
    let catalog = synth::catalog_for(&config);

    // through the file format, as the real pipeline would
    let mut buf = Vec::new();
    write_cohort(&cohort.subjects, &mut buf).unwrap();
    let report = ingest_cohort(buf.as_slice(), &PlausibilityConfig::default()).unwrap();
    let enc = encode_cohort(&report.subjects, &catalog, Normalization::None).unwrap();

    let trainer = ForestTrainer {
        params: ForestParams { n_trees: 30, ..Default::default() },
        feature_names: enc.feature_names.clone(),
    };
    let loo = run_loo(&enc, &trainer, 7, ImputePolicy::Cohort).unwrap();
    assert_eq!(loo.leak_violations, 0);

    let per_iteration: Vec<Vec<f64>> = vec![loo.mean_importances.clone().unwrap()];
    let ranking = aggregate_importance(&per_iteration, &enc.feature_names).unwrap();

    // exclude one noise column outright, group the two risk flags
    let review = ReviewConfig {
        screen_top_k: 1000,
        exclusions: vec![Exclusion {
            feature_name: "noise_00@0".into(),
            reason: ExclusionReason::DatabaseBias,
        }],
        groupings: vec![Grouping {
            group_name: "risk_any".into(),
            members: vec!["risk_a@0".into(), "risk_b@0".into()],
        }],
    };
    let (shortlist, audit) = apply_review(&ranking, &review, "run-0").unwrap();
    assert_eq!(audit.len(), 2);

    let reduced_catalog = rebuild_catalog(&shortlist, &catalog).unwrap();
    let reduced = encode_cohort(&report.subjects, &reduced_catalog, Normalization::None).unwrap();
    let reduced = reduced.select_columns(
        &reduced
            .feature_names
            .iter()
            .filter(|name| shortlist.column_allowed(name))
            .cloned()
            .collect::<BTreeSet<String>>(),
    );

    assert!(!reduced.feature_names.iter().any(|n| n.starts_with("noise_00")));
    assert!(reduced.feature_names.contains(&"risk_any@0".to_string()));
    assert!(!reduced.feature_names.iter().any(|n| n.starts_with("risk_a@")));

    // grouped column is the OR of its members
    let full_a = enc.column_index("risk_a@0").unwrap();
    let full_b = enc.column_index("risk_b@0").unwrap();
    let merged = reduced.column_index("risk_any@0").unwrap();
    for i in 0..enc.n_subjects() {
        let expected = (enc.matrix[i][full_a] == 1.0 || enc.matrix[i][full_b] == 1.0) as u8 as f64;
        assert_eq!(reduced.matrix[i][merged], expected);
    }

    // the reduced cohort still supports a full LOO run
    let trainer = ForestTrainer {
        params: ForestParams { n_trees: 30, ..Default::default() },
        feature_names: reduced.feature_names.clone(),
    };
    let loo2 = run_loo(&reduced, &trainer, 8, ImputePolicy::Cohort).unwrap();
    assert_eq!(loo2.per_sample.len(), reduced.n_subjects());
}

#[test]
fn cox_on_shortlisted_features_recovers_planted_direction() {
    let config = pipeline_config(42);
    let cohort = generate_cohort(&config).unwrap();
    let catalog = synth::catalog_for(&config);
    let enc = encode_cohort(&cohort.subjects, &catalog, Normalization::ZScore).unwrap();

    let samples: Vec<dynrisk_core::cox::SurvivalSample> = enc
        .matrix
        .iter()
        .zip(&enc.labels)
        .zip(&enc.survival_days)
        .map(|((x, &event), &time_days)| dynrisk_core::cox::SurvivalSample {
            x: x.clone(),
            time_days,
            event,
        })
        .collect();
    let model = fit_cox(&samples, &enc.feature_names, &CoxOptions::default()).unwrap();
    assert!(model.converged);

    let report = model.hazard_ratio_report(0.95).unwrap();
    assert_eq!(report.len(), enc.n_features());
    let risk_a = report.iter().find(|r| r.feature == "risk_a@0").unwrap();
    assert!(risk_a.hr > 1.0, "planted positive effect must raise the hazard");

    // risk scores feed the shared ROC machinery
    let scores: Vec<f64> = enc
        .matrix
        .iter()
        .map(|x| model.risk_score(x).unwrap())
        .collect();
    let auc = roc_curve(&scores, &enc.labels).unwrap().auc;
    assert!(auc > 0.6, "in-sample Cox AUC {auc} unexpectedly weak");
}

#[test]
fn null_covariate_stays_within_wald_bounds() {
    // a covariate with zero planted effect: the fitted coefficient lands
    // within 1.96 SE of zero in at least 93 of 100 seeds
    let mut within = 0;
    for seed in 0..100u64 {
        let config = GeneratorConfig {
            n_subjects: 5000,
            target_event_rate: 0.3,
            planted_effects: vec![PlantedEffect {
                feature_name: "inert".into(),
                log_hazard_ratio: 0.0,
            }],
            feature_specs: vec![FeatureSpec {
                name: "inert".into(),
                kind: FeatureKind::Binary { prevalence: 0.5 },
            }],
            noise_features: 0,
            baseline_hazard_scale: 1e-3,
            censor_horizon_days: 365,
            seed: dynrisk_core::seeding::derive_seed(0xA0, seed),
        };
        let cohort = generate_cohort(&config).unwrap();
        let catalog = synth::catalog_for(&config);
        let enc = encode_cohort(&cohort.subjects, &catalog, Normalization::None).unwrap();
        let samples: Vec<dynrisk_core::cox::SurvivalSample> = enc
            .matrix
            .iter()
            .zip(&enc.labels)
            .zip(&enc.survival_days)
            .map(|((x, &event), &time_days)| dynrisk_core::cox::SurvivalSample {
                x: x.clone(),
                time_days,
                event,
            })
            .collect();
        let model = fit_cox(&samples, &enc.feature_names, &CoxOptions::default()).unwrap();
        let se = model.covariance[0][0].sqrt();
        if model.beta[0].abs() <= 1.96 * se {
            within += 1;
        }
    }
    assert!(within >= 93, "null coefficient within 1.96 SE in only {within}/100 seeds");
}

#[test]
fn cohort_and_fold_imputation_agree_on_complete_data() {
    let config = pipeline_config(43); // generator never omits values
    let cohort = generate_cohort(&config).unwrap();
    let catalog = synth::catalog_for(&config);
    let enc = encode_cohort(&cohort.subjects, &catalog, Normalization::None).unwrap();
    let trainer = CoxTrainer {
        options: CoxOptions::default(),
        feature_names: enc.feature_names.clone(),
    };
    let a = run_loo(&enc, &trainer, 11, ImputePolicy::Cohort).unwrap();
    let b = run_loo(&enc, &trainer, 11, ImputePolicy::Fold).unwrap();
    assert_eq!(a, b);
}
