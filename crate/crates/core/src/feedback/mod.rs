//! Implicit-feedback classifiers over behavior features.
//!
//! Trainers: single-feature baseline, logistic regression, CART, random
//! forest and gradient boosting. All are deterministic in their inputs and
//! seed. Models serialize to versioned JSON.

pub mod linear;
pub mod tree;

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::features::{BehaviorFeatures, FEATURE_NAMES, FEATURE_ORDER_VERSION, N_FEATURES};
use crate::session::{ImpressionSignals, IMPRESSION_ORDER_VERSION, IMPRESSION_VECTOR_LEN};
use linear::{sigmoid, softplus, Standardizer};
use tree::{grow, Gini, NewtonVariance, Row, TreeNode, TreeParams};

pub use linear::{logistic_objective, LogisticGradient};

const _: () = assert!(IMPRESSION_VECTOR_LEN == N_FEATURES);

pub const MODEL_FORMAT_VERSION: u32 = 1;

pub const IMPRESSION_FEATURE_NAMES: [&str; N_FEATURES] = [
    "reformulated",
    "answer_click",
    "answer_only",
    "answer_sat_click",
    "answer_exp_click",
    "ot_answer_click",
    "ot_only",
    "ot_sat_click",
    "both_click",
    "related_click",
    "no_click",
    "abandoned",
    "source_dwell_ms",
    "serp_dwell_ms",
];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("DegenerateLabels: training data needs both classes")]
    DegenerateLabels,
    #[error("EmptyDataset: no training rows")]
    EmptyDataset,
    #[error("BadFeatureIndex: {0} is not in 0..{N_FEATURES}")]
    BadFeatureIndex(usize),
    #[error("FeatureOrderMismatch: model expects {expected}, input is {found}")]
    FeatureOrderMismatch { expected: String, found: String },
    #[error("EmptyGroup: no impressions to aggregate")]
    EmptyGroup,
    #[error("UnsupportedModel: {0} models do not support this operation")]
    UnsupportedModel(&'static str),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One labelled pair for feedback-model training.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackRow {
    pub qp_id: String,
    pub features: BehaviorFeatures,
    pub label: bool,
}

/// Training matrix plus the layout tag of its columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub x: Vec<Row>,
    pub y: Vec<bool>,
    pub feature_order: String,
}

impl Samples {
    pub fn from_rows(rows: &[FeedbackRow]) -> Self {
        Samples {
            x: rows.iter().map(|r| r.features.values).collect(),
            y: rows.iter().map(|r| r.label).collect(),
            feature_order: FEATURE_ORDER_VERSION.to_string(),
        }
    }

    /// Per-impression samples for label aggregation; each impression carries
    /// the label of its pair.
    pub fn from_impressions<'a>(
        impressions: impl IntoIterator<Item = (&'a ImpressionSignals, bool)>,
    ) -> Self {
        let (x, y) = impressions
            .into_iter()
            .map(|(imp, label)| (imp.to_vector(), label))
            .unzip();
        Samples {
            x,
            y,
            feature_order: IMPRESSION_ORDER_VERSION.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Samples {
        Samples {
            x: indices.iter().map(|&i| self.x[i]).collect(),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            feature_order: self.feature_order.clone(),
        }
    }

    fn positives(&self) -> usize {
        self.y.iter().filter(|&&l| l).count()
    }

    fn require_rows(&self) -> Result<(), ModelError> {
        if self.is_empty() {
            Err(ModelError::EmptyDataset)
        } else {
            Ok(())
        }
    }

    fn require_both_classes(&self) -> Result<(), ModelError> {
        self.require_rows()?;
        let pos = self.positives();
        if pos == 0 || pos == self.len() {
            Err(ModelError::DegenerateLabels)
        } else {
            Ok(())
        }
    }
}

/// Learned parameters, tagged by model kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelParams {
    Baseline {
        feature_index: usize,
        min: f64,
        max: f64,
    },
    Lr {
        weights: Vec<f64>,
        bias: f64,
        standardization: Standardizer,
    },
    Dt {
        tree: TreeNode,
    },
    Rf {
        trees: Vec<TreeNode>,
        tree_seeds: Vec<u64>,
    },
    Gbdt {
        trees: Vec<TreeNode>,
        learning_rate: f64,
        base_score: f64,
    },
}

impl ModelParams {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelParams::Baseline { .. } => "baseline",
            ModelParams::Lr { .. } => "lr",
            ModelParams::Dt { .. } => "dt",
            ModelParams::Rf { .. } => "rf",
            ModelParams::Gbdt { .. } => "gbdt",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub n_rows: usize,
    pub hyperparameters: BTreeMap<String, Value>,
    /// Training loss per iteration, including the starting point.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackModel {
    pub format_version: u32,
    pub feature_order_version: String,
    pub model: ModelParams,
    pub training: TrainingMeta,
    /// Provenance (tool version, stage, input digests); not used for scoring.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for LrConfig {
    fn default() -> Self {
        LrConfig {
            epochs: 300,
            learning_rate: 0.1,
            l2: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig {
            max_depth: 5,
            min_leaf: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RfConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub feature_subsample: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for RfConfig {
    fn default() -> Self {
        RfConfig {
            n_trees: 100,
            max_depth: 5,
            min_leaf: 20,
            // ceil(sqrt(14))
            feature_subsample: 4,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub l2_leaf: f64,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        GbdtConfig {
            n_trees: 200,
            learning_rate: 0.1,
            max_depth: 3,
            min_leaf: 20,
            l2_leaf: 1.0,
            seed: 0,
        }
    }
}

fn hp(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

fn build(samples: &Samples, model: ModelParams, training: TrainingMeta) -> FeedbackModel {
    FeedbackModel {
        format_version: MODEL_FORMAT_VERSION,
        feature_order_version: samples.feature_order.clone(),
        model,
        training,
        metadata: BTreeMap::new(),
    }
}

/// Scores by one raw feature, min-max scaled over the training rows.
pub fn train_baseline(
    samples: &Samples,
    feature_index: usize,
) -> Result<FeedbackModel, ModelError> {
    if feature_index >= N_FEATURES {
        return Err(ModelError::BadFeatureIndex(feature_index));
    }
    samples.require_rows()?;
    let (min, max) = samples
        .x
        .iter()
        .map(|r| r[feature_index])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
    Ok(build(
        samples,
        ModelParams::Baseline {
            feature_index,
            min,
            max,
        },
        TrainingMeta {
            seed: 0,
            n_rows: samples.len(),
            hyperparameters: hp(&[("feature_index", feature_index.into())]),
            loss_trace: Vec::new(),
        },
    ))
}

pub fn train_lr(samples: &Samples, cfg: &LrConfig) -> Result<FeedbackModel, ModelError> {
    samples.require_both_classes()?;
    if !(cfg.learning_rate >= 0.0 && cfg.l2 >= 0.0) {
        return Err(ModelError::InvalidHyperparameter(
            "learning_rate and l2 must be non-negative".into(),
        ));
    }
    let fit = linear::fit(
        &samples.x,
        &samples.y,
        cfg.epochs,
        cfg.learning_rate,
        cfg.l2,
    );
    Ok(build(
        samples,
        ModelParams::Lr {
            weights: fit.weights,
            bias: fit.bias,
            standardization: fit.standardizer,
        },
        TrainingMeta {
            seed: cfg.seed,
            n_rows: samples.len(),
            hyperparameters: hp(&[
                ("epochs", cfg.epochs.into()),
                ("learning_rate", cfg.learning_rate.into()),
                ("l2", cfg.l2.into()),
                ("standardized", true.into()),
            ]),
            loss_trace: fit.loss_trace,
        },
    ))
}

pub fn train_dt(samples: &Samples, cfg: &DtConfig) -> Result<FeedbackModel, ModelError> {
    samples.require_rows()?;
    let params = TreeParams {
        max_depth: cfg.max_depth,
        min_leaf: cfg.min_leaf,
        max_features: N_FEATURES,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tree = grow(
        &samples.x,
        (0..samples.len()).collect(),
        &Gini { labels: &samples.y },
        &params,
        &mut rng,
    );
    Ok(build(
        samples,
        ModelParams::Dt { tree },
        TrainingMeta {
            seed: cfg.seed,
            n_rows: samples.len(),
            hyperparameters: hp(&[
                ("max_depth", cfg.max_depth.into()),
                ("min_leaf", cfg.min_leaf.into()),
            ]),
            loss_trace: Vec::new(),
        },
    ))
}

pub fn train_rf(samples: &Samples, cfg: &RfConfig) -> Result<FeedbackModel, ModelError> {
    samples.require_rows()?;
    if cfg.n_trees == 0 {
        return Err(ModelError::InvalidHyperparameter(
            "n_trees must be at least 1".into(),
        ));
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let tree_seeds: Vec<u64> = (0..cfg.n_trees).map(|_| master.random()).collect();
    let params = TreeParams {
        max_depth: cfg.max_depth,
        min_leaf: cfg.min_leaf,
        max_features: cfg.feature_subsample,
    };
    let n = samples.len();
    let criterion = Gini { labels: &samples.y };
    let trees: Vec<TreeNode> = tree_seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let indices: Vec<usize> = if cfg.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            grow(&samples.x, indices, &criterion, &params, &mut rng)
        })
        .collect();
    Ok(build(
        samples,
        ModelParams::Rf { trees, tree_seeds },
        TrainingMeta {
            seed: cfg.seed,
            n_rows: n,
            hyperparameters: hp(&[
                ("n_trees", cfg.n_trees.into()),
                ("max_depth", cfg.max_depth.into()),
                ("min_leaf", cfg.min_leaf.into()),
                ("feature_subsample", cfg.feature_subsample.into()),
                ("bootstrap", cfg.bootstrap.into()),
            ]),
            loss_trace: Vec::new(),
        },
    ))
}

fn mean_log_loss(margins: &[f64], y: &[bool]) -> f64 {
    let total: f64 = margins
        .iter()
        .zip(y)
        .map(|(&m, &label)| if label { softplus(-m) } else { softplus(m) })
        .sum();
    total / margins.len() as f64
}

/// Gradient boosting on logistic loss with Newton-step leaves.
pub fn train_gbdt(samples: &Samples, cfg: &GbdtConfig) -> Result<FeedbackModel, ModelError> {
    samples.require_both_classes()?;
    if !(cfg.learning_rate > 0.0 && cfg.l2_leaf >= 0.0) {
        return Err(ModelError::InvalidHyperparameter(
            "learning_rate must be positive and l2_leaf non-negative".into(),
        ));
    }
    let n = samples.len();
    let pos_rate = samples.positives() as f64 / n as f64;
    let base_score = (pos_rate / (1.0 - pos_rate)).ln();
    let params = TreeParams {
        max_depth: cfg.max_depth,
        min_leaf: cfg.min_leaf,
        max_features: N_FEATURES,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut loss_trace = vec![mean_log_loss(&margins, &samples.y)];

    for _ in 0..cfg.n_trees {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = if samples.y[i] { 1.0 - p } else { -p };
            hess[i] = p * (1.0 - p);
        }
        let criterion = NewtonVariance {
            grad: &grad,
            hess: &hess,
            l2: cfg.l2_leaf,
        };
        let tree = grow(&samples.x, (0..n).collect(), &criterion, &params, &mut rng);
        for (m, x) in margins.iter_mut().zip(&samples.x) {
            *m += cfg.learning_rate * tree.predict(x);
        }
        loss_trace.push(mean_log_loss(&margins, &samples.y));
        trees.push(tree);
    }

    Ok(build(
        samples,
        ModelParams::Gbdt {
            trees,
            learning_rate: cfg.learning_rate,
            base_score,
        },
        TrainingMeta {
            seed: cfg.seed,
            n_rows: n,
            hyperparameters: hp(&[
                ("n_trees", cfg.n_trees.into()),
                ("learning_rate", cfg.learning_rate.into()),
                ("max_depth", cfg.max_depth.into()),
                ("min_leaf", cfg.min_leaf.into()),
                ("l2_leaf", cfg.l2_leaf.into()),
            ]),
            loss_trace,
        },
    ))
}

impl FeedbackModel {
    /// Scores a raw vector laid out per `feature_order_version`. Non-finite
    /// inputs are not rejected here; the result is still clamped to [0, 1].
    pub fn score_vector(&self, x: &Row) -> f64 {
        let s = match &self.model {
            ModelParams::Baseline {
                feature_index,
                min,
                max,
            } => {
                if max > min {
                    (x[*feature_index] - min) / (max - min)
                } else {
                    0.5
                }
            }
            ModelParams::Lr {
                weights,
                bias,
                standardization,
            } => {
                let z = standardization.apply(x);
                sigmoid(bias + z.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>())
            }
            ModelParams::Dt { tree } => tree.predict(x),
            ModelParams::Rf { trees, .. } => {
                trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64
            }
            ModelParams::Gbdt {
                trees,
                learning_rate,
                base_score,
            } => {
                let raw: f64 = trees.iter().map(|t| t.predict(x)).sum();
                sigmoid(base_score + learning_rate * raw)
            }
        };
        if s.is_nan() {
            0.5
        } else {
            s.clamp(0.0, 1.0)
        }
    }

    fn expect_order(&self, found: &str) -> Result<(), ModelError> {
        if self.feature_order_version == found {
            Ok(())
        } else {
            Err(ModelError::FeatureOrderMismatch {
                expected: self.feature_order_version.clone(),
                found: found.to_string(),
            })
        }
    }

    pub fn predict(&self, features: &BehaviorFeatures) -> Result<f64, ModelError> {
        self.expect_order(FEATURE_ORDER_VERSION)?;
        Ok(self.score_vector(&features.values))
    }

    pub fn predict_impression(&self, imp: &ImpressionSignals) -> Result<f64, ModelError> {
        self.expect_order(IMPRESSION_ORDER_VERSION)?;
        Ok(self.score_vector(&imp.to_vector()))
    }

    pub fn feature_names(&self) -> &'static [&'static str; N_FEATURES] {
        if self.feature_order_version == IMPRESSION_ORDER_VERSION {
            &IMPRESSION_FEATURE_NAMES
        } else {
            &FEATURE_NAMES
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("model serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let model: FeedbackModel = serde_json::from_str(text)?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<(), ModelError> {
        let invalid = |msg: &str| Err(ModelError::InvalidModel(msg.to_string()));
        if self.format_version != MODEL_FORMAT_VERSION {
            return invalid("unsupported format_version");
        }
        if self.feature_order_version != FEATURE_ORDER_VERSION
            && self.feature_order_version != IMPRESSION_ORDER_VERSION
        {
            return invalid("unknown feature_order_version");
        }
        let ok = match &self.model {
            ModelParams::Baseline { feature_index, .. } => *feature_index < N_FEATURES,
            ModelParams::Lr {
                weights,
                standardization,
                ..
            } => {
                weights.len() == N_FEATURES
                    && standardization.mean.len() == N_FEATURES
                    && standardization.std.len() == N_FEATURES
            }
            ModelParams::Dt { tree } => tree.is_valid(),
            ModelParams::Rf { trees, .. } => {
                !trees.is_empty() && trees.iter().all(TreeNode::is_valid)
            }
            ModelParams::Gbdt { trees, .. } => trees.iter().all(TreeNode::is_valid),
        };
        if ok {
            Ok(())
        } else {
            invalid("parameters do not match the feature layout")
        }
    }
}

/// Label-aggregation: averages per-impression scores of a model trained on
/// impression vectors and thresholds the mean at 0.5.
pub fn predict_label_aggregated(
    model: &FeedbackModel,
    impressions: &[ImpressionSignals],
) -> Result<bool, ModelError> {
    if impressions.is_empty() {
        return Err(ModelError::EmptyGroup);
    }
    let mut total = 0.0;
    for imp in impressions {
        total += model.predict_impression(imp)?;
    }
    Ok(total / impressions.len() as f64 >= 0.5)
}

/// Gain per feature summed over all splits, normalized to sum to one and
/// sorted by weight (descending), then index.
pub fn feature_importance(model: &FeedbackModel) -> Result<Vec<(usize, f64)>, ModelError> {
    let mut acc = [0.0; N_FEATURES];
    match &model.model {
        ModelParams::Dt { tree } => tree.accumulate_gain(&mut acc),
        ModelParams::Rf { trees, .. } | ModelParams::Gbdt { trees, .. } => {
            trees.iter().for_each(|t| t.accumulate_gain(&mut acc))
        }
        other => return Err(ModelError::UnsupportedModel(other.kind_name())),
    }
    let total: f64 = acc.iter().sum();
    let mut ranked: Vec<(usize, f64)> = acc
        .iter()
        .enumerate()
        .map(|(i, g)| (i, if total > 0.0 { g / total } else { 0.0 }))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Below,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub feature: usize,
    pub comparison: Comparison,
    pub threshold: f64,
}

/// One root-to-leaf path of a decision tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Rule {
    pub conditions: Vec<Condition>,
    pub relevant: bool,
    pub purity: f64,
    pub support: usize,
    names: &'static [&'static str; N_FEATURES],
}

impl Rule {
    pub fn mentions(&self, feature: usize, comparison: Comparison) -> bool {
        self.conditions
            .iter()
            .any(|c| c.feature == feature && c.comparison == comparison)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.conditions.is_empty() {
            f.write_str("true")?;
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if i > 0 {
                f.write_str(" ∧ ")?;
            }
            let op = match c.comparison {
                Comparison::Below => "<",
                Comparison::AtLeast => "≥",
            };
            write!(f, "{} {} {:.6}", self.names[c.feature], op, c.threshold)?;
        }
        write!(
            f,
            " → {} (purity {:.3}, support {})",
            if self.relevant {
                "relevant"
            } else {
                "irrelevant"
            },
            self.purity,
            self.support
        )
    }
}

/// Root-to-leaf paths of a decision tree whose leaf purity reaches
/// `min_leaf_purity`, left branches first.
pub fn extract_rules(model: &FeedbackModel, min_leaf_purity: f64) -> Result<Vec<Rule>, ModelError> {
    let ModelParams::Dt { tree } = &model.model else {
        return Err(ModelError::UnsupportedModel(model.model.kind_name()));
    };
    let names = model.feature_names();
    let mut rules = Vec::new();
    let mut path = Vec::new();
    collect_rules(tree, &mut path, min_leaf_purity, names, &mut rules);
    Ok(rules)
}

fn collect_rules(
    node: &TreeNode,
    path: &mut Vec<Condition>,
    min_purity: f64,
    names: &'static [&'static str; N_FEATURES],
    out: &mut Vec<Rule>,
) {
    match node {
        TreeNode::Leaf { value, n_samples } => {
            let purity = value.max(1.0 - value);
            if purity >= min_purity {
                out.push(Rule {
                    conditions: path.clone(),
                    relevant: *value >= 0.5,
                    purity,
                    support: *n_samples,
                    names,
                });
            }
        }
        TreeNode::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } => {
            for (child, comparison) in [(left, Comparison::Below), (right, Comparison::AtLeast)] {
                path.push(Condition {
                    feature: *feature,
                    comparison,
                    threshold: *threshold,
                });
                collect_rules(child, path, min_purity, names, out);
                path.pop();
            }
        }
    }
}

/// Seeded train/dev/test split in proportions 7:1:1.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 7 / 9;
    let n_dev = n / 9;
    let test = idx.split_off(n_train + n_dev);
    let dev = idx.split_off(n_train);
    (idx, dev, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(rows: &[(f64, bool)]) -> Samples {
        Samples {
            x: rows
                .iter()
                .map(|&(v, _)| {
                    let mut r = [0.0; N_FEATURES];
                    r[0] = v;
                    r
                })
                .collect(),
            y: rows.iter().map(|r| r.1).collect(),
            feature_order: FEATURE_ORDER_VERSION.to_string(),
        }
    }

    fn bf(values: [f64; N_FEATURES]) -> BehaviorFeatures {
        BehaviorFeatures {
            qp_id: "x".into(),
            n_impressions: 1,
            values,
        }
    }

    #[test]
    fn baseline_constant_feature_scores_half() {
        let s = samples(&[(3.0, true), (3.0, false)]);
        let m = train_baseline(&s, 0).unwrap();
        assert_eq!(m.predict(&bf([3.0; N_FEATURES])).unwrap(), 0.5);
        assert!(matches!(
            train_baseline(&s, 14),
            Err(ModelError::BadFeatureIndex(14))
        ));
    }

    #[test]
    fn baseline_clamps_out_of_range() {
        let s = samples(&[(0.0, true), (2.0, false)]);
        let m = train_baseline(&s, 0).unwrap();
        assert_eq!(m.score_vector(&[5.0; N_FEATURES]), 1.0);
        assert_eq!(m.score_vector(&[1.0; N_FEATURES]), 0.5);
    }

    #[test]
    fn lr_zero_epochs_scores_half() {
        let s = samples(&[(0.0, true), (2.0, false)]);
        let m = train_lr(
            &s,
            &LrConfig {
                epochs: 0,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(m.predict(&bf([7.0; N_FEATURES])).unwrap(), 0.5);
        let single = samples(&[(0.0, true)]);
        assert!(matches!(
            train_lr(&single, &LrConfig::default()),
            Err(ModelError::DegenerateLabels)
        ));
    }

    #[test]
    fn lr_separates_one_dimensional_data() {
        let rows: Vec<(f64, bool)> = (0..20).map(|i| (i as f64, i >= 10)).collect();
        let s = samples(&rows);
        let cfg = LrConfig {
            epochs: 500,
            learning_rate: 0.5,
            l2: 0.0,
            seed: 0,
        };
        let m = train_lr(&s, &cfg).unwrap();
        let correct =
            s.x.iter()
                .zip(&s.y)
                .filter(|(x, &y)| (m.score_vector(x) >= 0.5) == y)
                .count();
        assert_eq!(correct, 20);
    }

    #[test]
    fn dt_pure_and_depth_zero() {
        let pure = samples(&[(1.0, true), (2.0, true), (3.0, true)]);
        let m = train_dt(&pure, &DtConfig::default()).unwrap();
        assert_eq!(
            m.model,
            ModelParams::Dt {
                tree: TreeNode::Leaf {
                    value: 1.0,
                    n_samples: 3
                }
            }
        );

        let mixed = samples(&[(1.0, true), (2.0, false), (3.0, false), (4.0, false)]);
        let cfg = DtConfig {
            max_depth: 0,
            ..Default::default()
        };
        let m = train_dt(&mixed, &cfg).unwrap();
        assert_eq!(m.predict(&bf([0.0; N_FEATURES])).unwrap(), 0.25);
    }

    #[test]
    fn dt_single_split_at_midpoint() {
        let rows: Vec<(f64, bool)> = (0..10).map(|i| (i as f64, i >= 6)).collect();
        let cfg = DtConfig {
            min_leaf: 1,
            ..Default::default()
        };
        let m = train_dt(&samples(&rows), &cfg).unwrap();
        let ModelParams::Dt { tree } = &m.model else {
            unreachable!()
        };
        assert_eq!(tree.depth(), 1);
        assert!(matches!(tree, TreeNode::Split { feature: 0, threshold, .. } if *threshold == 5.5));
        assert_eq!(feature_importance(&m).unwrap()[0], (0, 1.0));
    }

    #[test]
    fn single_leaf_gives_one_unconditional_rule() {
        let m = train_dt(
            &samples(&[(1.0, false), (2.0, false)]),
            &DtConfig::default(),
        )
        .unwrap();
        let rules = extract_rules(&m, 0.5).unwrap();
        assert_eq!(rules.len(), 1);
        assert!(rules[0].conditions.is_empty());
        assert_eq!(
            rules[0].to_string(),
            "true → irrelevant (purity 1.000, support 2)"
        );
    }

    #[test]
    fn rules_render_paths_left_to_right() {
        let mut rows = Vec::new();
        for i in 0..40 {
            rows.push((i as f64, (20..30).contains(&i)));
        }
        let cfg = DtConfig {
            max_depth: 2,
            min_leaf: 5,
            seed: 0,
        };
        let m = train_dt(&samples(&rows), &cfg).unwrap();
        let rules = extract_rules(&m, 0.0).unwrap();
        assert!(rules.len() <= 4 && rules.len() >= 2);
        assert!(rules[0].to_string().starts_with("rf_rate < "));
        for r in &rules {
            assert!(r.conditions.len() <= 2);
        }
    }

    #[test]
    fn importance_rejects_linear_models() {
        let s = samples(&[(0.0, true), (2.0, false)]);
        let m = train_lr(&s, &LrConfig::default()).unwrap();
        assert!(matches!(
            feature_importance(&m),
            Err(ModelError::UnsupportedModel("lr"))
        ));
        assert!(matches!(
            extract_rules(&m, 0.5),
            Err(ModelError::UnsupportedModel("lr"))
        ));
    }

    #[test]
    fn gbdt_zero_trees_predicts_positive_rate() {
        let s = samples(&[(0.0, true), (1.0, false), (2.0, false), (3.0, false)]);
        let cfg = GbdtConfig {
            n_trees: 0,
            ..Default::default()
        };
        let m = train_gbdt(&s, &cfg).unwrap();
        assert!((m.score_vector(&s.x[0]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn order_mismatch_is_rejected() {
        let imp = ImpressionSignals {
            qp_id: "a".into(),
            answer_click: false,
            answer_exp_click: false,
            ot_answer_click: false,
            related_click: false,
            answer_only: false,
            ot_only: false,
            both_click: false,
            no_click: true,
            answer_sat_click: false,
            ot_sat_click: false,
            reformulated: false,
            abandoned: true,
            serp_dwell_ms: 0,
            source_dwell_ms: None,
        };
        let s = samples(&[(0.0, true), (2.0, false)]);
        let m = train_baseline(&s, 0).unwrap();
        assert!(matches!(
            predict_label_aggregated(&m, &[imp]),
            Err(ModelError::FeatureOrderMismatch { .. })
        ));
        assert!(matches!(
            predict_label_aggregated(&m, &[]),
            Err(ModelError::EmptyGroup)
        ));
    }

    #[test]
    fn split_proportions() {
        let (train, dev, test) = split_indices(18_000, 3);
        assert_eq!((train.len(), dev.len(), test.len()), (14_000, 2_000, 2_000));
        let mut all: Vec<usize> = train.iter().chain(&dev).chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..18_000).collect::<Vec<_>>());
    }

    #[test]
    fn model_json_rejects_bad_layout() {
        let s = samples(&[(0.0, true), (2.0, false)]);
        let m = train_lr(&s, &LrConfig::default()).unwrap();
        let text = m.to_json().replace("behavior-v1", "behavior-v9");
        assert!(FeedbackModel::from_json(&text).is_err());
        assert_eq!(FeedbackModel::from_json(&m.to_json()).unwrap(), m);
    }
}
