//! Bagged decision-tree classifier built from scratch.
//!
//! Each tree trains on a bootstrap resample (size n, with replacement)
//! using a seed derived from the master seed and the tree index, so the
//! fitted forest is identical regardless of thread count. The prediction
//! is a soft vote: the mean over trees of the leaf positive-class
//! proportion. Feature importances are mean decrease in Gini impurity,
//! normalized to sum 1.

mod tree;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::rng_for;

pub use tree::{best_split, gini_impurity, DecisionTree, Node, Split};

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("node has no samples; Gini impurity undefined")]
    EmptyNode,
    #[error("training data is empty")]
    EmptyTrainingSet,
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("model io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features sampled per split; defaults to `floor(sqrt(p))`.
    pub mtry: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 500,
            max_depth: None,
            min_samples_leaf: 1,
            mtry: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    pub feature_names: Vec<String>,
    /// Mean decrease in Gini impurity per feature, normalized to sum 1
    /// (all zero when no tree ever split).
    pub importances: Vec<f64>,
}

/// A likelihood with its Monte Carlo confidence interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionWithCi {
    pub likelihood: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub n_resamples: usize,
    /// Set when the interval is structurally width-zero (single-tree forest).
    pub degenerate: bool,
}

/// Trains `params.n_trees` trees on bootstrap resamples.
pub fn train_forest(
    matrix: &[Vec<f64>],
    labels: &[bool],
    feature_names: &[String],
    params: &ForestParams,
) -> Result<Forest, ForestError> {
    let n = matrix.len();
    if n < 2 {
        return Err(ForestError::EmptyTrainingSet);
    }
    if labels.len() != n {
        return Err(ForestError::DimensionMismatch {
            expected: n,
            got: labels.len(),
        });
    }
    let p = matrix[0].len();
    if feature_names.len() != p || matrix.iter().any(|r| r.len() != p) {
        return Err(ForestError::DimensionMismatch {
            expected: p,
            got: feature_names.len(),
        });
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(ForestError::SingleClass);
    }
    if params.n_trees == 0 {
        return Err(ForestError::InvalidParams("n_trees must be >= 1".into()));
    }
    if params.min_samples_leaf == 0 {
        return Err(ForestError::InvalidParams(
            "min_samples_leaf must be >= 1".into(),
        ));
    }
    let mtry = params.mtry.unwrap_or_else(|| (p as f64).sqrt().floor() as usize).max(1);
    if mtry > p {
        return Err(ForestError::InvalidParams(format!(
            "mtry {mtry} exceeds feature count {p}"
        )));
    }

    let grow = tree::GrowParams {
        max_depth: params.max_depth,
        min_samples_leaf: params.min_samples_leaf,
        mtry,
    };

    // one independent rng per tree; collection keeps tree order
    let per_tree: Vec<(DecisionTree, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(params.seed, t as u64);
            let rows: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.gen_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            let mut importances = vec![0.0; p];
            let tree = DecisionTree::grow(matrix, labels, rows, &grow, &mut rng, &mut importances);
            (tree, importances)
        })
        .collect();

    // fixed-order reduction keeps the sum independent of scheduling
    let mut importances = vec![0.0; p];
    let mut trees = Vec::with_capacity(params.n_trees);
    for (tree, imp) in per_tree {
        for (acc, v) in importances.iter_mut().zip(&imp) {
            *acc += v;
        }
        trees.push(tree);
    }
    for v in importances.iter_mut() {
        *v /= params.n_trees as f64;
    }
    let total: f64 = importances.iter().sum();
    if total > 0.0 {
        for v in importances.iter_mut() {
            *v /= total;
        }
    }

    Ok(Forest {
        trees,
        params: params.clone(),
        feature_names: feature_names.to_vec(),
        importances,
    })
}

impl Forest {
    fn check_dimension(&self, x: &[f64]) -> Result<(), ForestError> {
        if x.len() != self.feature_names.len() {
            return Err(ForestError::DimensionMismatch {
                expected: self.feature_names.len(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Soft-vote likelihood: mean over trees of the leaf positive-class
    /// proportion.
    pub fn predict_likelihood(&self, x: &[f64]) -> Result<f64, ForestError> {
        self.check_dimension(x)?;
        let sum: f64 = self.trees.iter().map(|t| t.leaf_proportion(x)).sum();
        Ok(sum / self.trees.len() as f64)
    }

    /// Percentile-bootstrap interval over tree resamples.
    ///
    /// Draws `n_resamples` with-replacement tree subsets; each resample's
    /// mean likelihood is one Monte Carlo draw, and the interval is the
    /// `(1 +/- level) / 2` empirical percentile pair.
    pub fn predict_with_ci(
        &self,
        x: &[f64],
        level: f64,
        n_resamples: usize,
        seed: u64,
    ) -> Result<PredictionWithCi, ForestError> {
        self.check_dimension(x)?;
        if !(0.0..1.0).contains(&level) || level <= 0.0 {
            return Err(ForestError::InvalidParams(format!(
                "confidence level must lie in (0,1), got {level}"
            )));
        }
        if n_resamples < 100 {
            return Err(ForestError::InvalidParams(format!(
                "need at least 100 resamples, got {n_resamples}"
            )));
        }

        let per_tree: Vec<f64> = self.trees.iter().map(|t| t.leaf_proportion(x)).collect();
        let likelihood = per_tree.iter().sum::<f64>() / per_tree.len() as f64;
        let k = per_tree.len();

        let mut rng = rng_for(seed, 0);
        let mut means: Vec<f64> = (0..n_resamples)
            .map(|_| {
                let sum: f64 = (0..k).map(|_| per_tree[rng.gen_range(0..k)]).sum();
                sum / k as f64
            })
            .collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());

        let ci_low = percentile(&means, (1.0 - level) / 2.0);
        let ci_high = percentile(&means, (1.0 + level) / 2.0);
        Ok(PredictionWithCi {
            likelihood,
            ci_low,
            ci_high,
            level,
            n_resamples,
            degenerate: k == 1,
        })
    }

    /// Ranked `(feature_name, importance)` pairs, descending.
    pub fn ranked_importances(&self) -> Vec<(String, f64)> {
        let mut pairs: Vec<(String, f64)> = self
            .feature_names
            .iter()
            .cloned()
            .zip(self.importances.iter().copied())
            .collect();
        pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        pairs
    }

    pub fn save(&self, writer: impl std::io::Write) -> Result<(), ForestError> {
        serde_json::to_writer(writer, self).map_err(|e| ForestError::Io(e.to_string()))
    }

    pub fn load(reader: impl std::io::Read) -> Result<Forest, ForestError> {
        serde_json::from_reader(reader).map_err(|e| ForestError::Io(e.to_string()))
    }
}

/// Empirical percentile with linear interpolation between order statistics.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}
