//! `dynrisk` — command-line driver for the dynamic mortality-risk pipeline.
//!
//! Every command takes all randomness from `--seed`, writes its artifacts
//! into `--out`, and finishes the directory with a `manifest.json` holding
//! input/output digests. Log verbosity comes from the `DYNRISK_LOG`
//! environment variable; logs go to stderr.

mod manifest;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use dynrisk_core::cohort::catalog::FeatureCatalog;
use dynrisk_core::cohort::encode::{encode_cohort, EncodedCohort, Normalization};
use dynrisk_core::cohort::stats::descriptive_stats;
use dynrisk_core::cohort::{ingest_cohort, write_cohort, PlausibilityConfig};
use dynrisk_core::cox::{fit_cox, CoxOptions, SurvivalSample, TiesMethod};
use dynrisk_core::eval::{
    f_beta_curve, roc_curve, run_loo, CoxTrainer, FBetaCurve, ForestTrainer, ImputePolicy,
    LooResult, RocCurve, DEFAULT_BETAS,
};
use dynrisk_core::external::{evaluate_external, load_equation};
use dynrisk_core::forest::ForestParams;
use dynrisk_core::selection::{aggregate_importance, apply_review, rebuild_catalog, RankedFeatureList, ReviewConfig};
use dynrisk_core::synth::{catalog_for, generate_cohort, GeneratorConfig};

use manifest::OutDir;

#[derive(Parser)]
#[command(name = "dynrisk", version, about = "Dynamic mortality-risk modeling pipeline")]
struct Cli {
    /// Worker threads for forest training and LOO iterations; results do
    /// not depend on this
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum NormalizeArg {
    None,
    Zscore,
}

impl From<NormalizeArg> for Normalization {
    fn from(v: NormalizeArg) -> Normalization {
        match v {
            NormalizeArg::None => Normalization::None,
            NormalizeArg::Zscore => Normalization::ZScore,
        }
    }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ImputeArg {
    Cohort,
    Fold,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum TiesArg {
    Efron,
    Breslow,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ScoreArg {
    Insample,
    Loo,
}

/// Cohort source: a pre-encoded matrix, or raw subjects plus a catalog.
#[derive(Args)]
struct CohortInput {
    /// Encoded cohort CSV (as written by `encode`)
    #[arg(long, conflicts_with_all = ["subjects", "catalog"])]
    cohort: Option<PathBuf>,

    /// Raw subject records (one JSON object per line); requires --catalog
    #[arg(long, requires = "catalog")]
    subjects: Option<PathBuf>,

    /// Feature catalog CSV
    #[arg(long)]
    catalog: Option<PathBuf>,

    /// Normalization applied when encoding raw subjects
    #[arg(long, value_enum, default_value = "none")]
    normalize: NormalizeArg,
}

impl CohortInput {
    fn load(&self, out: &mut OutDir) -> Result<EncodedCohort> {
        match (&self.cohort, &self.subjects, &self.catalog) {
            (Some(path), None, None) => {
                out.record_input(path)?;
                let file = fs::File::open(path)
                    .with_context(|| format!("opening cohort file {}", path.display()))?;
                Ok(EncodedCohort::from_csv(file)?)
            }
            (None, Some(subjects), Some(catalog)) => {
                out.record_input(subjects)?;
                out.record_input(catalog)?;
                let report = ingest_cohort(
                    std::io::BufReader::new(fs::File::open(subjects).with_context(|| {
                        format!("opening subjects file {}", subjects.display())
                    })?),
                    &PlausibilityConfig::default(),
                )?;
                log::info!(
                    "ingested {} subjects ({:?})",
                    report.subjects.len(),
                    report.counts
                );
                let catalog = load_catalog(catalog)?;
                Ok(encode_cohort(
                    &report.subjects,
                    &catalog,
                    self.normalize.into(),
                )?)
            }
            _ => bail!("provide either --cohort, or --subjects with --catalog"),
        }
    }
}

fn load_catalog(path: &Path) -> Result<FeatureCatalog> {
    let file =
        fs::File::open(path).with_context(|| format!("opening catalog {}", path.display()))?;
    Ok(FeatureCatalog::from_csv(file)?)
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted hazard structure
    Synth {
        /// Generator config (TOML)
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Encode subjects into the dense feature-matrix CSV
    Encode {
        #[arg(long)]
        subjects: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long, value_enum, default_value = "none")]
        normalize: NormalizeArg,
        #[arg(long)]
        out: PathBuf,
    },

    /// Leave-one-out evaluation with the random-forest strategy
    LooRf {
        #[command(flatten)]
        input: CohortInput,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Trees per forest
        #[arg(long, default_value_t = 500)]
        trees: usize,
        /// Features sampled per split (default: floor(sqrt(p)))
        #[arg(long)]
        mtry: Option<usize>,
        /// Drop named columns before training (sensitivity analysis)
        #[arg(long, num_args = 1..)]
        exclude_features: Vec<String>,
        #[arg(long, value_enum, default_value = "cohort")]
        impute: ImputeArg,
        #[arg(long)]
        out: PathBuf,
    },

    /// Fit a Cox proportional-hazards model; write the hazard-ratio report
    FitCox {
        #[command(flatten)]
        input: CohortInput,
        /// Restrict the fit to the named columns (one per line)
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "efron")]
        ties: TiesArg,
        /// Score subjects in-sample or by leave-one-out refitting
        #[arg(long, value_enum, default_value = "insample")]
        score: ScoreArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },

    /// Apply the reviewed feature funnel to an importance ranking
    Select {
        /// Ranking CSV (rank,feature,mean_importance)
        #[arg(long)]
        ranking: PathBuf,
        /// Review config (TOML): screen_top_k, exclusions, groupings
        #[arg(long)]
        review: PathBuf,
        /// Original catalog to rebuild from
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Evaluate an external risk equation on the cohort
    Compare {
        #[command(flatten)]
        input: CohortInput,
        /// Equation file (TOML)
        #[arg(long)]
        equation: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },

    /// Descriptive characteristics table split by outcome
    Stats {
        #[arg(long)]
        subjects: PathBuf,
        #[arg(long)]
        catalog: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn roc_csv(curve: &RocCurve) -> Vec<u8> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["fpr", "tpr", "threshold"]).unwrap();
    for p in &curve.points {
        wtr.write_record([
            format!("{}", p.fpr),
            format!("{}", p.tpr),
            format!("{}", p.threshold),
        ])
        .unwrap();
    }
    wtr.into_inner().unwrap()
}

fn fbeta_csv(curve: &FBetaCurve) -> Vec<u8> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["beta", "threshold", "f_score"]).unwrap();
    for (beta, sweep) in curve.betas.iter().zip(&curve.per_beta) {
        for (threshold, f) in sweep {
            wtr.write_record([
                format!("{beta}"),
                format!("{threshold}"),
                format!("{f}"),
            ])
            .unwrap();
        }
    }
    wtr.into_inner().unwrap()
}

fn scores_csv(result: &LooResult, ids: &[String]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    result.to_scores_csv(ids, &mut buf)?;
    Ok(buf)
}

fn cmd_synth(config_path: &Path, out_path: &Path) -> Result<()> {
    let mut out = OutDir::create(out_path, "synth", 0)?;
    out.record_input(config_path)?;
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading config {}", config_path.display()))?;
    let config = GeneratorConfig::from_toml(&text)?;
    let cohort = generate_cohort(&config)?;

    let mut subjects = Vec::new();
    write_cohort(&cohort.subjects, &mut subjects)?;
    out.write("subjects.jsonl", &subjects)?;

    let mut truth = csv::Writer::from_writer(Vec::new());
    truth.write_record(["subject_id", "linear_predictor"])?;
    for entry in &cohort.ground_truth {
        truth.write_record([
            entry.subject_id.clone(),
            format!("{}", entry.linear_predictor),
        ])?;
    }
    out.write("ground_truth.csv", &truth.into_inner()?)?;

    let mut catalog = Vec::new();
    catalog_for(&config).to_csv(&mut catalog)?;
    out.write("catalog.csv", &catalog)?;

    let deaths = cohort.subjects.iter().filter(|s| s.outcome.died).count();
    log::info!(
        "generated {} subjects, {deaths} deaths, hazard scale {:.6e}",
        config.n_subjects,
        cohort.calibrated_hazard_scale
    );
    out.finalize(json!({
        "generator": config,
        "calibrated_hazard_scale": cohort.calibrated_hazard_scale,
        "deaths": deaths,
    }))
}

fn cmd_encode(
    subjects: &Path,
    catalog_path: &Path,
    normalize: NormalizeArg,
    out_path: &Path,
) -> Result<()> {
    let mut out = OutDir::create(out_path, "encode", 0)?;
    out.record_input(subjects)?;
    out.record_input(catalog_path)?;
    let report = ingest_cohort(
        std::io::BufReader::new(
            fs::File::open(subjects)
                .with_context(|| format!("opening subjects file {}", subjects.display()))?,
        ),
        &PlausibilityConfig::default(),
    )?;
    let catalog = load_catalog(catalog_path)?;
    let encoded = encode_cohort(&report.subjects, &catalog, normalize.into())?;
    let mut buf = Vec::new();
    encoded.to_csv(&mut buf)?;
    out.write("cohort.csv", &buf)?;
    out.finalize(json!({
        "normalize": matches!(normalize, NormalizeArg::Zscore).then_some("zscore").unwrap_or("none"),
        "ingest_counts": report.counts,
        "n_subjects": encoded.n_subjects(),
        "n_features": encoded.n_features(),
        "dropped_columns": encoded.dropped_columns,
        "zero_variance": encoded.zero_variance,
    }))
}

#[allow(clippy::too_many_arguments)]
fn cmd_loo_rf(
    input: &CohortInput,
    seed: u64,
    trees: usize,
    mtry: Option<usize>,
    exclude_features: &[String],
    impute: ImputeArg,
    out_path: &Path,
) -> Result<()> {
    let mut out = OutDir::create(out_path, "loo-rf", seed)?;
    let mut cohort = input.load(&mut out)?;
    if !exclude_features.is_empty() {
        cohort = cohort.drop_columns(exclude_features)?;
        log::info!("excluded {} columns", exclude_features.len());
    }
    if impute == ImputeArg::Fold && input.cohort.is_some() {
        bail!("--impute fold needs missingness provenance; supply --subjects and --catalog instead of --cohort");
    }

    let trainer = ForestTrainer {
        params: ForestParams {
            n_trees: trees,
            mtry,
            ..Default::default()
        },
        feature_names: cohort.feature_names.clone(),
    };
    let policy = match impute {
        ImputeArg::Cohort => ImputePolicy::Cohort,
        ImputeArg::Fold => ImputePolicy::Fold,
    };
    let result = run_loo(&cohort, &trainer, seed, policy)?;
    if result.leak_violations > 0 {
        bail!("internal leak check failed: {} violations", result.leak_violations);
    }

    out.write("scores.csv", &scores_csv(&result, &cohort.subject_ids)?)?;

    let importances = result
        .mean_importances
        .clone()
        .context("forest runs always produce importances")?;
    let ranking = aggregate_importance(&[importances], &cohort.feature_names)?;
    let mut ranking_buf = Vec::new();
    ranking.to_csv(&mut ranking_buf)?;
    out.write("ranking.csv", &ranking_buf)?;

    let scores = result.scores();
    let labels = result.labels();
    let roc = roc_curve(&scores, &labels)?;
    out.write("roc.csv", &roc_csv(&roc))?;
    let fbeta = f_beta_curve(&scores, &labels, &DEFAULT_BETAS)?;
    out.write("fbeta.csv", &fbeta_csv(&fbeta))?;
    log::info!("LOO-RF AUC {:.4} over {} iterations", roc.auc, result.n_iterations);

    out.finalize(json!({
        "seed": seed,
        "trees": trees,
        "mtry": mtry,
        "exclude_features": exclude_features,
        "impute": match impute { ImputeArg::Cohort => "cohort", ImputeArg::Fold => "fold" },
        "auc": roc.auc,
        "n_iterations": result.n_iterations,
        "failures": result.failures,
        "leak_violations": result.leak_violations,
    }))
}

fn cmd_fit_cox(
    input: &CohortInput,
    features: Option<&Path>,
    ties: TiesArg,
    score: ScoreArg,
    seed: u64,
    out_path: &Path,
) -> Result<()> {
    let mut out = OutDir::create(out_path, "fit-cox", seed)?;
    let mut cohort = input.load(&mut out)?;

    if let Some(path) = features {
        out.record_input(path)?;
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading feature list {}", path.display()))?;
        let wanted: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        for name in &wanted {
            if cohort.column_index(name).is_none() {
                bail!("feature list names unknown column {name:?}");
            }
        }
        cohort = cohort.select_columns(&wanted.iter().cloned().collect::<BTreeSet<_>>());
    }

    let options = CoxOptions {
        ties_method: match ties {
            TiesArg::Efron => TiesMethod::Efron,
            TiesArg::Breslow => TiesMethod::Breslow,
        },
        ..Default::default()
    };

    let samples: Vec<SurvivalSample> = cohort
        .matrix
        .iter()
        .zip(&cohort.labels)
        .zip(&cohort.survival_days)
        .map(|((x, &event), &time_days)| SurvivalSample {
            x: x.clone(),
            time_days,
            event,
        })
        .collect();
    let model = fit_cox(&samples, &cohort.feature_names, &options)?;

    let mut model_buf = Vec::new();
    model.save(&mut model_buf)?;
    out.write("cox_model.json", &model_buf)?;

    let report = model.hazard_ratio_report(0.95)?;
    let mut hr = csv::Writer::from_writer(Vec::new());
    hr.write_record(["feature", "hr", "ci_low", "ci_high"])?;
    for row in &report {
        hr.write_record([
            row.feature.clone(),
            format!("{}", row.hr),
            format!("{}", row.ci_low),
            format!("{}", row.ci_high),
        ])?;
    }
    out.write("hr_report.csv", &hr.into_inner()?)?;

    // risk scores: in-sample from the fitted model, or held-out by
    // refitting under the LOO protocol; outputs are labeled accordingly
    let (scores, labels, score_file) = match score {
        ScoreArg::Insample => {
            let scores: Vec<f64> = cohort
                .matrix
                .iter()
                .map(|x| model.risk_score(x))
                .collect::<Result<_, _>>()?;
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record(["subject_id", "label", "score"])?;
            for (i, s) in scores.iter().enumerate() {
                wtr.write_record([
                    cohort.subject_ids[i].clone(),
                    if cohort.labels[i] { "1".into() } else { "0".to_string() },
                    format!("{s}"),
                ])?;
            }
            out.write("scores_insample.csv", &wtr.into_inner()?)?;
            (scores, cohort.labels.clone(), "scores_insample.csv")
        }
        ScoreArg::Loo => {
            let trainer = CoxTrainer {
                options: options.clone(),
                feature_names: cohort.feature_names.clone(),
            };
            let result = run_loo(&cohort, &trainer, seed, ImputePolicy::Cohort)?;
            out.write("scores_loo.csv", &scores_csv(&result, &cohort.subject_ids)?)?;
            (result.scores(), result.labels(), "scores_loo.csv")
        }
    };
    let roc = roc_curve(&scores, &labels)?;
    out.write("roc.csv", &roc_csv(&roc))?;
    log::info!("cox AUC {:.4} ({score_file})", roc.auc);

    out.finalize(json!({
        "seed": seed,
        "ties": match ties { TiesArg::Efron => "efron", TiesArg::Breslow => "breslow" },
        "scoring": match score { ScoreArg::Insample => "insample", ScoreArg::Loo => "loo" },
        "converged": model.converged,
        "n_iterations": model.n_iterations,
        "log_partial_likelihood": model.log_partial_likelihood,
        "auc": roc.auc,
        "score_file": score_file,
    }))
}

fn cmd_select(ranking_path: &Path, review_path: &Path, catalog_path: &Path, out_path: &Path) -> Result<()> {
    let mut out = OutDir::create(out_path, "select", 0)?;
    out.record_input(ranking_path)?;
    out.record_input(review_path)?;
    out.record_input(catalog_path)?;

    let ranking = RankedFeatureList::from_csv(
        fs::File::open(ranking_path)
            .with_context(|| format!("opening ranking {}", ranking_path.display()))?,
    )?;
    let review = ReviewConfig::from_toml_reader(
        fs::File::open(review_path)
            .with_context(|| format!("opening review config {}", review_path.display()))?,
    )?;
    let catalog = load_catalog(catalog_path)?;

    let run_id = out.run_id();
    let (shortlist, audit) = apply_review(&ranking, &review, &run_id)?;
    let reduced = rebuild_catalog(&shortlist, &catalog)?;

    let mut shortlist_buf = Vec::new();
    shortlist.to_csv(&mut shortlist_buf)?;
    out.write("shortlist.csv", &shortlist_buf)?;

    let mut catalog_buf = Vec::new();
    reduced.to_csv(&mut catalog_buf)?;
    out.write("catalog.csv", &catalog_buf)?;

    let audit_text: String = audit.iter().map(|e| e.render() + "\n").collect();
    out.write("audit.log", audit_text.as_bytes())?;

    out.finalize(json!({
        "screen_top_k": review.screen_top_k,
        "exclusions": review.exclusions.len(),
        "groupings": review.groupings.len(),
        "shortlist_size": shortlist.entries.len(),
        "catalog_entries": reduced.entries().len(),
        "run_id": run_id,
    }))
}

fn cmd_compare(input: &CohortInput, equation_path: &Path, out_path: &Path) -> Result<()> {
    let mut out = OutDir::create(out_path, "compare", 0)?;
    let cohort = input.load(&mut out)?;
    out.record_input(equation_path)?;

    let (equation, coverage) = load_equation(
        fs::File::open(equation_path)
            .with_context(|| format!("opening equation {}", equation_path.display()))?,
    )?;
    let scored = evaluate_external(&equation, &cohort)?;

    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["subject_id", "label", "stratum", "score"])?;
    for i in 0..cohort.n_subjects() {
        wtr.write_record([
            cohort.subject_ids[i].clone(),
            if cohort.labels[i] { "1".into() } else { "0".to_string() },
            equation.strata[scored.stratum_of[i]].label.clone(),
            format!("{}", scored.scores[i]),
        ])?;
    }
    out.write("scores.csv", &wtr.into_inner()?)?;

    let mut cov = csv::Writer::from_writer(Vec::new());
    cov.write_record(["variable", "status"])?;
    for (variable, target) in &equation.mapping {
        let status = if target == dynrisk_core::external::MISSING_SENTINEL {
            "missing"
        } else {
            "mapped"
        };
        cov.write_record([variable.as_str(), status])?;
    }
    out.write("coverage.csv", &cov.into_inner()?)?;

    // pooled metrics, then per-stratum where both classes are present
    let pooled = roc_curve(&scored.scores, &cohort.labels)?;
    out.write("roc_pooled.csv", &roc_csv(&pooled))?;
    let mut metrics = csv::Writer::from_writer(Vec::new());
    metrics.write_record(["stratum", "n", "auc"])?;
    metrics.write_record([
        "pooled".to_string(),
        cohort.n_subjects().to_string(),
        format!("{}", pooled.auc),
    ])?;
    for (k, stratum) in equation.strata.iter().enumerate() {
        let idx: Vec<usize> = (0..cohort.n_subjects())
            .filter(|&i| scored.stratum_of[i] == k)
            .collect();
        let scores: Vec<f64> = idx.iter().map(|&i| scored.scores[i]).collect();
        let labels: Vec<bool> = idx.iter().map(|&i| cohort.labels[i]).collect();
        match roc_curve(&scores, &labels) {
            Ok(curve) => {
                out.write(&format!("roc_{}.csv", stratum.label), &roc_csv(&curve))?;
                metrics.write_record([
                    stratum.label.clone(),
                    idx.len().to_string(),
                    format!("{}", curve.auc),
                ])?;
            }
            Err(e) => {
                log::warn!("stratum {:?}: no ROC ({e})", stratum.label);
                metrics.write_record([stratum.label.clone(), idx.len().to_string(), String::new()])?;
            }
        }
    }
    out.write("metrics.csv", &metrics.into_inner()?)?;
    log::info!("pooled external AUC {:.4}", pooled.auc);

    out.finalize(json!({
        "coverage": coverage,
        "pooled_auc": pooled.auc,
    }))
}

fn cmd_stats(subjects: &Path, catalog_path: &Path, out_path: &Path) -> Result<()> {
    let mut out = OutDir::create(out_path, "stats", 0)?;
    out.record_input(subjects)?;
    out.record_input(catalog_path)?;
    let report = ingest_cohort(
        std::io::BufReader::new(
            fs::File::open(subjects)
                .with_context(|| format!("opening subjects file {}", subjects.display()))?,
        ),
        &PlausibilityConfig::default(),
    )?;
    let catalog = load_catalog(catalog_path)?;
    let table = descriptive_stats(&report.subjects, &catalog);
    let mut buf = Vec::new();
    table.to_csv(&mut buf)?;
    out.write("stats.csv", &buf)?;
    out.finalize(json!({
        "n_total": table.n_total,
        "n_survived": table.n_survived,
        "n_died": table.n_died,
        "ingest_counts": report.counts,
    }))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DYNRISK_LOG", "warn"))
        .target(env_logger::Target::Stderr)
        .init();

    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }

    match &cli.command {
        Command::Synth { config, out } => cmd_synth(config, out),
        Command::Encode {
            subjects,
            catalog,
            normalize,
            out,
        } => cmd_encode(subjects, catalog, *normalize, out),
        Command::LooRf {
            input,
            seed,
            trees,
            mtry,
            exclude_features,
            impute,
            out,
        } => cmd_loo_rf(input, *seed, *trees, *mtry, exclude_features, *impute, out),
        Command::FitCox {
            input,
            features,
            ties,
            score,
            seed,
            out,
        } => cmd_fit_cox(input, features.as_deref(), *ties, *score, *seed, out),
        Command::Select {
            ranking,
            review,
            catalog,
            out,
        } => cmd_select(ranking, review, catalog, out),
        Command::Compare {
            input,
            equation,
            out,
        } => cmd_compare(input, equation, out),
        Command::Stats {
            subjects,
            catalog,
            out,
        } => cmd_stats(subjects, catalog, out),
    }
}
