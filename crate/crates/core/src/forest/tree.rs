//! CART-style decision trees: Gini impurity, midpoint thresholds between
//! consecutive distinct sorted values, deterministic tie-breaking by
//! (lowest feature index, lowest threshold).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ForestError;

/// `1 - sum(p_c^2)` over the two class proportions; 0 for a pure node,
/// 0.5 at the symmetric maximum.
pub fn gini_impurity(class_counts: (usize, usize)) -> Result<f64, ForestError> {
    let (neg, pos) = class_counts;
    let n = neg + pos;
    if n == 0 {
        return Err(ForestError::EmptyNode);
    }
    let p0 = neg as f64 / n as f64;
    let p1 = pos as f64 / n as f64;
    Ok(1.0 - p0 * p0 - p1 * p1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature_index: usize,
    pub threshold: f64,
    pub impurity_decrease: f64,
}

/// Best Gini-decrease split over the candidate features, or `None` when no
/// split has positive decrease (e.g. a pure node).
///
/// Candidates are scanned in ascending order and thresholds in ascending
/// order, replacing the incumbent only on strictly greater decrease, which
/// realizes the documented tie-break.
pub fn best_split(
    matrix: &[Vec<f64>],
    labels: &[bool],
    rows: &[usize],
    candidate_features: &[usize],
    min_samples_leaf: usize,
) -> Option<Split> {
    let n = rows.len();
    if n < 2 {
        return None;
    }
    let total_pos = rows.iter().filter(|&&r| labels[r]).count();
    let parent = gini_impurity((n - total_pos, total_pos)).expect("n >= 2");
    if parent == 0.0 {
        return None;
    }

    let mut best: Option<Split> = None;
    let mut order: Vec<usize> = Vec::with_capacity(n);
    for &feature in candidate_features {
        order.clear();
        order.extend_from_slice(rows);
        order.sort_by(|&a, &b| {
            matrix[a][feature]
                .partial_cmp(&matrix[b][feature])
                .expect("finite feature values")
        });

        let mut left_n = 0usize;
        let mut left_pos = 0usize;
        for k in 0..n - 1 {
            let row = order[k];
            left_n += 1;
            if labels[row] {
                left_pos += 1;
            }
            let v = matrix[row][feature];
            let next = matrix[order[k + 1]][feature];
            if v == next {
                continue;
            }
            let right_n = n - left_n;
            if left_n < min_samples_leaf || right_n < min_samples_leaf {
                continue;
            }
            let right_pos = total_pos - left_pos;
            let gini_left = gini_impurity((left_n - left_pos, left_pos)).unwrap();
            let gini_right = gini_impurity((right_n - right_pos, right_pos)).unwrap();
            let decrease = parent
                - (left_n as f64 / n as f64) * gini_left
                - (right_n as f64 / n as f64) * gini_right;
            if decrease > 0.0 && best.map_or(true, |b| decrease > b.impurity_decrease) {
                best = Some(Split {
                    feature_index: feature,
                    threshold: (v + next) / 2.0,
                    impurity_decrease: decrease,
                });
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t")]
pub enum Node {
    #[serde(rename = "split")]
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    #[serde(rename = "leaf")]
    Leaf { counts: [u32; 2] },
}

/// A fitted tree stored as a node arena; index 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

pub(super) struct GrowParams {
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    pub mtry: usize,
}

impl DecisionTree {
    /// Grows a tree on `rows`, charging each split's weighted impurity
    /// decrease to `importances`.
    pub(super) fn grow(
        matrix: &[Vec<f64>],
        labels: &[bool],
        rows: Vec<usize>,
        params: &GrowParams,
        rng: &mut impl Rng,
        importances: &mut [f64],
    ) -> DecisionTree {
        let mut tree = DecisionTree { nodes: Vec::new() };
        let n_root = rows.len();
        let n_features = matrix[0].len();
        tree.grow_node(matrix, labels, rows, 0, n_root, n_features, params, rng, importances);
        tree
    }

    #[allow(clippy::too_many_arguments)]
    fn grow_node(
        &mut self,
        matrix: &[Vec<f64>],
        labels: &[bool],
        rows: Vec<usize>,
        depth: usize,
        n_root: usize,
        n_features: usize,
        params: &GrowParams,
        rng: &mut impl Rng,
        importances: &mut [f64],
    ) -> usize {
        let pos = rows.iter().filter(|&&r| labels[r]).count();
        let counts = [(rows.len() - pos) as u32, pos as u32];

        let depth_ok = params.max_depth.map_or(true, |d| depth < d);
        let split = if depth_ok && pos != 0 && pos != rows.len() {
            let mut candidates = rand::seq::index::sample(rng, n_features, params.mtry).into_vec();
            candidates.sort_unstable();
            best_split(matrix, labels, &rows, &candidates, params.min_samples_leaf)
        } else {
            None
        };

        let Some(split) = split else {
            let idx = self.nodes.len();
            self.nodes.push(Node::Leaf { counts });
            return idx;
        };

        importances[split.feature_index] +=
            rows.len() as f64 / n_root as f64 * split.impurity_decrease;

        let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
            .into_iter()
            .partition(|&r| matrix[r][split.feature_index] <= split.threshold);

        let idx = self.nodes.len();
        self.nodes.push(Node::Split {
            feature: split.feature_index,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let left = self.grow_node(
            matrix, labels, left_rows, depth + 1, n_root, n_features, params, rng, importances,
        );
        let right = self.grow_node(
            matrix, labels, right_rows, depth + 1, n_root, n_features, params, rng, importances,
        );
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[idx]
        {
            *l = left;
            *r = right;
        }
        idx
    }

    /// Positive-class proportion at the leaf this sample routes to.
    pub fn leaf_proportion(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
                Node::Leaf { counts } => {
                    let n = counts[0] + counts[1];
                    return counts[1] as f64 / n as f64;
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match &nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}
