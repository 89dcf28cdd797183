//! Binary decision trees shared by the CART, random forest and boosting trainers.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::features::N_FEATURES;

pub type Row = [f64; N_FEATURES];

/// A tree node. Routing: `x[feature] < threshold` goes left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        value: f64,
        n_samples: usize,
    },
    Split {
        feature: usize,
        threshold: f64,
        /// Impurity decrease (CART) or variance gain (boosting) of this split.
        gain: f64,
        n_samples: usize,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn leaf(value: f64) -> Self {
        TreeNode::Leaf {
            value,
            n_samples: 0,
        }
    }

    pub fn predict(&self, x: &Row) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value, .. } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if x[*feature] < *threshold {
                        left
                    } else {
                        right
                    };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    /// Adds each split's gain to `acc[feature]`.
    pub fn accumulate_gain(&self, acc: &mut [f64; N_FEATURES]) {
        if let TreeNode::Split {
            feature,
            gain,
            left,
            right,
            ..
        } = self
        {
            acc[*feature] += gain;
            left.accumulate_gain(acc);
            right.accumulate_gain(acc);
        }
    }

    pub(crate) fn is_valid(&self) -> bool {
        match self {
            TreeNode::Leaf { value, .. } => value.is_finite(),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                *feature < N_FEATURES
                    && threshold.is_finite()
                    && left.is_valid()
                    && right.is_valid()
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per split; `N_FEATURES` disables subsampling.
    pub max_features: usize,
}

/// Node statistics and the split score they induce. The gain of a split is
/// `score(left) + score(right) - score(parent)`.
pub(crate) trait Criterion {
    type Stats: Copy + Default;

    fn push(&self, stats: &mut Self::Stats, i: usize);
    fn remove(&self, stats: &mut Self::Stats, i: usize);
    fn score(&self, stats: &Self::Stats, n: usize) -> f64;
    fn leaf_value(&self, stats: &Self::Stats, n: usize) -> f64;
    fn is_pure(&self, _stats: &Self::Stats, _n: usize) -> bool {
        false
    }
}

/// Gini impurity on boolean labels; leaves hold the positive fraction.
pub(crate) struct Gini<'a> {
    pub labels: &'a [bool],
}

impl Criterion for Gini<'_> {
    type Stats = usize;

    fn push(&self, pos: &mut usize, i: usize) {
        *pos += usize::from(self.labels[i]);
    }

    fn remove(&self, pos: &mut usize, i: usize) {
        *pos -= usize::from(self.labels[i]);
    }

    /// `-n * gini`, so the gain is the count-weighted impurity decrease.
    fn score(&self, pos: &usize, n: usize) -> f64 {
        if n == 0 {
            return 0.0;
        }
        let p = *pos as f64;
        let q = (n - pos) as f64;
        (p * p + q * q) / n as f64 - n as f64
    }

    fn leaf_value(&self, pos: &usize, n: usize) -> f64 {
        *pos as f64 / n as f64
    }

    fn is_pure(&self, pos: &usize, n: usize) -> bool {
        *pos == 0 || *pos == n
    }
}

/// Variance reduction on gradients with Newton leaf values
/// `sum(g) / (sum(h) + l2)`.
pub(crate) struct NewtonVariance<'a> {
    pub grad: &'a [f64],
    pub hess: &'a [f64],
    pub l2: f64,
}

impl Criterion for NewtonVariance<'_> {
    type Stats = (f64, f64);

    fn push(&self, s: &mut (f64, f64), i: usize) {
        s.0 += self.grad[i];
        s.1 += self.hess[i];
    }

    fn remove(&self, s: &mut (f64, f64), i: usize) {
        s.0 -= self.grad[i];
        s.1 -= self.hess[i];
    }

    fn score(&self, s: &(f64, f64), n: usize) -> f64 {
        if n == 0 {
            0.0
        } else {
            s.0 * s.0 / n as f64
        }
    }

    fn leaf_value(&self, s: &(f64, f64), _n: usize) -> f64 {
        s.0 / (s.1 + self.l2)
    }
}

const MIN_GAIN: f64 = 1e-12;

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Grows a tree over the rows listed in `indices` (duplicates allowed, as
/// produced by bootstrap sampling).
pub(crate) fn grow<C: Criterion, R: Rng>(
    x: &[Row],
    indices: Vec<usize>,
    criterion: &C,
    params: &TreeParams,
    rng: &mut R,
) -> TreeNode {
    grow_node(x, indices, criterion, params, 0, rng)
}

fn grow_node<C: Criterion, R: Rng>(
    x: &[Row],
    indices: Vec<usize>,
    criterion: &C,
    params: &TreeParams,
    depth: usize,
    rng: &mut R,
) -> TreeNode {
    let n = indices.len();
    let mut stats = C::Stats::default();
    for &i in &indices {
        criterion.push(&mut stats, i);
    }
    let leaf = TreeNode::Leaf {
        value: criterion.leaf_value(&stats, n),
        n_samples: n,
    };
    let min_leaf = params.min_leaf.max(1);
    if depth >= params.max_depth || n < 2 * min_leaf || criterion.is_pure(&stats, n) {
        return leaf;
    }

    let features = candidate_features(params.max_features, rng);
    let Some(best) = best_split(x, &indices, &stats, criterion, &features, min_leaf) else {
        return leaf;
    };

    let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
        .into_iter()
        .partition(|&i| x[i][best.feature] < best.threshold);
    TreeNode::Split {
        feature: best.feature,
        threshold: best.threshold,
        gain: best.gain,
        n_samples: n,
        left: Box::new(grow_node(x, left_idx, criterion, params, depth + 1, rng)),
        right: Box::new(grow_node(x, right_idx, criterion, params, depth + 1, rng)),
    }
}

/// Ascending list of features to examine at one split.
fn candidate_features<R: Rng>(max_features: usize, rng: &mut R) -> Vec<usize> {
    if max_features == 0 || max_features >= N_FEATURES {
        return (0..N_FEATURES).collect();
    }
    let mut picked = index::sample(rng, N_FEATURES, max_features).into_vec();
    picked.sort_unstable();
    picked
}

/// Best split by gain; ties keep the lowest feature, then the lowest threshold.
fn best_split<C: Criterion>(
    x: &[Row],
    indices: &[usize],
    parent: &C::Stats,
    criterion: &C,
    features: &[usize],
    min_leaf: usize,
) -> Option<BestSplit> {
    let n = indices.len();
    let parent_score = criterion.score(parent, n);
    let mut best: Option<BestSplit> = None;
    let mut order: Vec<usize> = indices.to_vec();

    for &f in features {
        order.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]));
        let mut left = C::Stats::default();
        let mut right = *parent;
        for k in 1..n {
            let moved = order[k - 1];
            criterion.push(&mut left, moved);
            criterion.remove(&mut right, moved);
            let lo = x[moved][f];
            let hi = x[order[k]][f];
            if lo == hi || k < min_leaf || n - k < min_leaf {
                continue;
            }
            let gain = criterion.score(&left, k) + criterion.score(&right, n - k) - parent_score;
            if gain > MIN_GAIN && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: midpoint(lo, hi),
                    gain,
                });
            }
        }
    }
    best
}

/// A threshold `t` with `lo < t <= hi`, so `lo` routes left and `hi` right.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}
