//! Question-passage relevance model over hashed lexical-interaction features,
//! trained by mini-batch SGD with cross-entropy or MSE loss.
//!
//! The same parameters can be trained in two stages: first on weak labels
//! mined from behavior logs, then on gold labels.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{self, MetricsError, ScoredLabel};

/// Number of hash buckets for interaction features (2^18).
pub const HASH_DIM: usize = 1 << 18;
pub const N_SCALARS: usize = 4;
pub const TOKENIZER_VERSION: &str = "lower-alnum-v1";
pub const QA_MODEL_FORMAT_VERSION: u32 = 1;

/// Outputs are clipped to this band before taking logarithms.
pub const PROB_CLIP: f64 = 1e-7;

/// Margins are clamped here so the model never emits exactly 0 or 1.
const MAX_MARGIN: f64 = 30.0;

#[derive(Debug, Error)]
pub enum QaError {
    #[error("EmptyText: {0} has no tokens")]
    EmptyText(String),
    #[error("LengthMismatch: {0} targets vs {1} outputs")]
    LengthMismatch(usize, usize),
    #[error("EmptyDataset: nothing to train or evaluate on")]
    EmptyDataset,
    #[error("LossTargetMismatch: {0}")]
    LossTargetMismatch(String),
    #[error("pair {0} has no gold label")]
    MissingLabel(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("malformed pairs row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub fn bucket_of(key: &str) -> u32 {
    (fnv1a64(key.as_bytes()) % HASH_DIM as u64) as u32
}

/// Lowercases and splits on every run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QaPair {
    pub qp_id: String,
    pub question: Vec<String>,
    pub passage: Vec<String>,
    pub label: Option<bool>,
}

impl QaPair {
    pub fn new(qp_id: impl Into<String>, question: &str, passage: &str) -> Result<Self, QaError> {
        let qp_id = qp_id.into();
        let question = tokenize(question);
        let passage = tokenize(passage);
        if question.is_empty() {
            return Err(QaError::EmptyText(format!("question of {qp_id}")));
        }
        if passage.is_empty() {
            return Err(QaError::EmptyText(format!("passage of {qp_id}")));
        }
        Ok(QaPair {
            qp_id,
            question,
            passage,
            label: None,
        })
    }

    pub fn with_label(mut self, label: bool) -> Self {
        self.label = Some(label);
        self
    }
}

/// Hashed interaction buckets (sorted, merged) plus the dense scalars:
/// unigram overlap, bigram overlap, `ln(1+|P|)/10`, `ln(1+|Q|)/10`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatures {
    pub buckets: Vec<(u32, f64)>,
    pub scalars: [f64; N_SCALARS],
}

fn bigram_keys(tokens: &[String]) -> BTreeSet<String> {
    tokens
        .windows(2)
        .map(|w| format!("{} {}", w[0], w[1]))
        .collect()
}

pub fn featurize(pair: &QaPair) -> Result<SparseFeatures, QaError> {
    if pair.question.is_empty() || pair.passage.is_empty() {
        return Err(QaError::EmptyText(pair.qp_id.clone()));
    }
    let q_set: BTreeSet<&str> = pair.question.iter().map(String::as_str).collect();
    let p_set: HashSet<&str> = pair.passage.iter().map(String::as_str).collect();
    let shared: Vec<&str> = q_set
        .iter()
        .copied()
        .filter(|t| p_set.contains(t))
        .collect();

    let q_bigrams = bigram_keys(&pair.question);
    let p_bigrams: HashSet<String> = bigram_keys(&pair.passage).into_iter().collect();
    let shared_bigrams: Vec<&String> = q_bigrams
        .iter()
        .filter(|b| p_bigrams.contains(*b))
        .collect();

    let mut buckets: BTreeMap<u32, f64> = BTreeMap::new();
    for key in shared
        .iter()
        .copied()
        .chain(shared_bigrams.iter().map(|s| s.as_str()))
    {
        *buckets.entry(bucket_of(key)).or_default() += 1.0;
    }

    let bigram_overlap = if q_bigrams.is_empty() {
        0.0
    } else {
        shared_bigrams.len() as f64 / q_bigrams.len() as f64
    };
    Ok(SparseFeatures {
        buckets: buckets.into_iter().collect(),
        scalars: [
            shared.len() as f64 / q_set.len() as f64,
            bigram_overlap,
            (1.0 + pair.passage.len() as f64).ln() / 10.0,
            (1.0 + pair.question.len() as f64).ln() / 10.0,
        ],
    })
}

/// Mean binary cross-entropy of `outputs` against `labels` (both in [0, 1]),
/// with outputs clipped to `[1e-7, 1 - 1e-7]`.
pub fn ce_loss(labels: &[f64], outputs: &[f64]) -> Result<f64, QaError> {
    if labels.len() != outputs.len() {
        return Err(QaError::LengthMismatch(labels.len(), outputs.len()));
    }
    if labels.is_empty() {
        return Err(QaError::EmptyDataset);
    }
    let total: f64 = labels
        .iter()
        .zip(outputs)
        .map(|(&t, &y)| {
            let y = y.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(t * y.ln() + (1.0 - t) * (1.0 - y).ln())
        })
        .sum();
    Ok(total / labels.len() as f64)
}

/// Mean squared error between model outputs and target scores.
pub fn mse_loss(outputs: &[f64], targets: &[f64]) -> Result<f64, QaError> {
    if outputs.len() != targets.len() {
        return Err(QaError::LengthMismatch(targets.len(), outputs.len()));
    }
    if outputs.is_empty() {
        return Err(QaError::EmptyDataset);
    }
    let total: f64 = outputs
        .iter()
        .zip(targets)
        .map(|(y, t)| (y - t) * (y - t))
        .sum();
    Ok(total / outputs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Ce,
    Mse,
}

impl std::str::FromStr for Loss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ce" => Ok(Loss::Ce),
            "mse" => Ok(Loss::Mse),
            other => Err(format!("unknown loss {other:?}")),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Ce => "ce",
            Loss::Mse => "mse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Label(bool),
    Score(f64),
}

impl Target {
    fn value(self) -> f64 {
        match self {
            Target::Label(l) => f64::from(u8::from(l)),
            Target::Score(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaExample {
    pub pair: QaPair,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: Loss,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.2,
            l2: 1e-6,
            batch_size: 32,
            seed: 0,
            loss: Loss::Ce,
        }
    }

    pub fn finetune_default() -> Self {
        TrainConfig {
            epochs: 20,
            learning_rate: 0.1,
            batch_size: 4,
            ..Self::pretrain_default()
        }
    }

    fn validate(&self) -> Result<(), QaError> {
        if self.batch_size == 0 {
            return Err(QaError::InvalidConfig("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.l2 >= 0.0) {
            return Err(QaError::InvalidConfig(
                "learning_rate and l2 must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Untrained,
    Pretrained,
    Finetuned,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Untrained => "untrained",
            StageTag::Pretrained => "pretrained",
            StageTag::Finetuned => "finetuned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStage {
    Pretrain,
    Finetune,
}

impl std::str::FromStr for TrainStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pretrain" => Ok(TrainStage::Pretrain),
            "finetune" => Ok(TrainStage::Finetune),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceModel {
    pub weights: Vec<f64>,
    pub scalar_weights: [f64; N_SCALARS],
    pub bias: f64,
    pub stage: StageTag,
    /// Provenance written alongside the parameters; ignored by scoring.
    pub metadata: BTreeMap<String, String>,
}

impl Default for RelevanceModel {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of the training objective with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct QaGradient {
    pub weights: Vec<f64>,
    pub scalars: [f64; N_SCALARS],
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    crate::feedback::linear::sigmoid(z)
}

impl RelevanceModel {
    pub fn new() -> Self {
        RelevanceModel {
            weights: vec![0.0; HASH_DIM],
            scalar_weights: [0.0; N_SCALARS],
            bias: 0.0,
            stage: StageTag::Untrained,
            metadata: BTreeMap::new(),
        }
    }

    pub fn margin(&self, f: &SparseFeatures) -> f64 {
        let sparse: f64 = f
            .buckets
            .iter()
            .map(|&(b, v)| self.weights[b as usize] * v)
            .sum();
        let dense: f64 = f
            .scalars
            .iter()
            .zip(&self.scalar_weights)
            .map(|(a, b)| a * b)
            .sum();
        (sparse + dense + self.bias).clamp(-MAX_MARGIN, MAX_MARGIN)
    }

    /// Relevance in (0, 1).
    pub fn score(&self, f: &SparseFeatures) -> f64 {
        sigmoid(self.margin(f))
    }

    pub fn score_pair(&self, pair: &QaPair) -> Result<f64, QaError> {
        Ok(self.score(&featurize(pair)?))
    }

    /// Mean loss over the examples plus `l2 / 2` times the squared norm of
    /// all weights (bias excluded), with its exact gradient.
    pub fn objective(
        &self,
        features: &[SparseFeatures],
        targets: &[Target],
        loss: Loss,
        l2: f64,
    ) -> Result<(f64, QaGradient), QaError> {
        if features.len() != targets.len() {
            return Err(QaError::LengthMismatch(targets.len(), features.len()));
        }
        let outputs: Vec<f64> = features.iter().map(|f| self.score(f)).collect();
        let values: Vec<f64> = targets.iter().map(|t| t.value()).collect();
        let data_loss = match loss {
            Loss::Ce => ce_loss(&values, &outputs)?,
            Loss::Mse => mse_loss(&outputs, &values)?,
        };
        let mut grad = QaGradient {
            weights: self.weights.iter().map(|w| l2 * w).collect(),
            scalars: [0.0; N_SCALARS],
            bias: 0.0,
        };
        for (s, w) in grad.scalars.iter_mut().zip(&self.scalar_weights) {
            *s = l2 * w;
        }
        let n = features.len() as f64;
        for ((f, &p), &t) in features.iter().zip(&outputs).zip(&values) {
            let dz = margin_gradient(loss, p, t) / n;
            accumulate(&mut grad.weights, &mut grad.scalars, &mut grad.bias, f, dz);
        }
        let norm: f64 = self.weights.iter().map(|w| w * w).sum::<f64>()
            + self.scalar_weights.iter().map(|w| w * w).sum::<f64>();
        Ok((data_loss + l2 / 2.0 * norm, grad))
    }

    pub fn to_json(&self) -> String {
        let file = QaModelFile {
            format_version: QA_MODEL_FORMAT_VERSION,
            tokenizer_version: TOKENIZER_VERSION.to_string(),
            hash_dim: HASH_DIM,
            metadata: self.metadata.clone(),
            stage: self.stage,
            bias: self.bias,
            scalar_weights: self.scalar_weights,
            weights: self
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
        };
        let mut s = serde_json::to_string(&file).expect("model serialization cannot fail");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, QaError> {
        let file: QaModelFile = serde_json::from_str(text)?;
        if file.format_version != QA_MODEL_FORMAT_VERSION
            || file.tokenizer_version != TOKENIZER_VERSION
            || file.hash_dim != HASH_DIM
        {
            return Err(QaError::InvalidModel(
                "format, tokenizer or hash dimension mismatch".into(),
            ));
        }
        let mut weights = vec![0.0; HASH_DIM];
        for (i, w) in file.weights {
            let slot = weights
                .get_mut(i as usize)
                .ok_or_else(|| QaError::InvalidModel(format!("bucket {i} out of range")))?;
            *slot = w;
        }
        Ok(RelevanceModel {
            weights,
            scalar_weights: file.scalar_weights,
            bias: file.bias,
            stage: file.stage,
            metadata: file.metadata,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct QaModelFile {
    format_version: u32,
    tokenizer_version: String,
    hash_dim: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    metadata: BTreeMap<String, String>,
    stage: StageTag,
    bias: f64,
    scalar_weights: [f64; N_SCALARS],
    /// Non-zero bucket weights keyed by bucket index.
    weights: BTreeMap<u32, f64>,
}

/// d(loss)/d(margin) for one example with output `p` and target `t`.
fn margin_gradient(loss: Loss, p: f64, t: f64) -> f64 {
    match loss {
        Loss::Ce => p - t,
        Loss::Mse => 2.0 * (p - t) * p * (1.0 - p),
    }
}

fn accumulate(
    weights: &mut [f64],
    scalars: &mut [f64; N_SCALARS],
    bias: &mut f64,
    f: &SparseFeatures,
    dz: f64,
) {
    for &(b, v) in &f.buckets {
        weights[b as usize] += dz * v;
    }
    for (g, v) in scalars.iter_mut().zip(&f.scalars) {
        *g += dz * v;
    }
    *bias += dz;
}

fn check_targets(examples: &[QaExample], loss: Loss) -> Result<(), QaError> {
    for ex in examples {
        match (loss, ex.target) {
            (Loss::Ce, Target::Label(_)) => {}
            (Loss::Mse, Target::Score(s)) if (0.0..=1.0).contains(&s) => {}
            (Loss::Ce, _) => {
                return Err(QaError::LossTargetMismatch(format!(
                    "cross-entropy needs boolean labels ({})",
                    ex.pair.qp_id
                )))
            }
            (Loss::Mse, _) => {
                return Err(QaError::LossTargetMismatch(format!(
                    "mse needs scores in [0, 1] ({})",
                    ex.pair.qp_id
                )))
            }
        }
    }
    Ok(())
}

pub fn featurize_all(pairs: &[&QaPair]) -> Result<Vec<SparseFeatures>, QaError> {
    pairs.par_iter().map(|p| featurize(p)).collect()
}

/// Seeded mini-batch SGD on the configured loss with L2 decay. Returns the
/// trained copy of `model` with its stage tag advanced.
pub fn train(
    model: &RelevanceModel,
    examples: &[QaExample],
    cfg: &TrainConfig,
    stage: TrainStage,
) -> Result<RelevanceModel, QaError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(QaError::EmptyDataset);
    }
    check_targets(examples, cfg.loss)?;
    let pairs: Vec<&QaPair> = examples.iter().map(|e| &e.pair).collect();
    let features = featurize_all(&pairs)?;
    let targets: Vec<f64> = examples.iter().map(|e| e.target.value()).collect();

    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut grad_w = vec![0.0; HASH_DIM];
    let mut touched: Vec<u32> = Vec::new();
    let decay = 1.0 - cfg.learning_rate * cfg.l2;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len() as f64;
            let mut grad_s = [0.0; N_SCALARS];
            let mut grad_b = 0.0;
            for &i in batch {
                let f = &features[i];
                let dz = margin_gradient(cfg.loss, m.score(f), targets[i]) / n;
                for &(b, _) in &f.buckets {
                    touched.push(b);
                }
                accumulate(&mut grad_w, &mut grad_s, &mut grad_b, f, dz);
            }
            if decay != 1.0 {
                m.weights.iter_mut().for_each(|w| *w *= decay);
                m.scalar_weights.iter_mut().for_each(|w| *w *= decay);
            }
            touched.sort_unstable();
            touched.dedup();
            for &b in &touched {
                let b = b as usize;
                m.weights[b] -= cfg.learning_rate * grad_w[b];
                grad_w[b] = 0.0;
            }
            touched.clear();
            for (w, g) in m.scalar_weights.iter_mut().zip(grad_s) {
                *w -= cfg.learning_rate * g;
            }
            m.bias -= cfg.learning_rate * grad_b;
        }
    }
    m.stage = match stage {
        TrainStage::Pretrain => StageTag::Pretrained,
        TrainStage::Finetune => StageTag::Finetuned,
    };
    Ok(m)
}

/// Weak-label pre-training from a fresh model, then gold fine-tuning of the
/// same parameters.
pub fn two_stage(
    pretrain: &[QaExample],
    finetune: &[QaExample],
    cfg_pre: &TrainConfig,
    cfg_fine: &TrainConfig,
) -> Result<RelevanceModel, QaError> {
    if pretrain.is_empty() || finetune.is_empty() {
        return Err(QaError::EmptyDataset);
    }
    let pre = train(
        &RelevanceModel::new(),
        pretrain,
        cfg_pre,
        TrainStage::Pretrain,
    )?;
    train(&pre, finetune, cfg_fine, TrainStage::Finetune)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QaEval {
    pub auc: f64,
    pub acc: f64,
}

/// AUC and accuracy (threshold 0.5) against the pairs' gold labels.
pub fn evaluate(model: &RelevanceModel, pairs: &[QaPair]) -> Result<QaEval, QaError> {
    if pairs.is_empty() {
        return Err(QaError::EmptyDataset);
    }
    let refs: Vec<&QaPair> = pairs.iter().collect();
    let features = featurize_all(&refs)?;
    let items = pairs
        .iter()
        .zip(&features)
        .map(|(p, f)| {
            let label = p
                .label
                .ok_or_else(|| QaError::MissingLabel(p.qp_id.clone()))?;
            Ok(ScoredLabel::new(model.score(f), label))
        })
        .collect::<Result<Vec<_>, QaError>>()?;
    let auc = metrics::auc(&items)?;
    let acc = metrics::acc_f1(&items, metrics::DEFAULT_THRESHOLD)?.acc;
    Ok(QaEval { auc, acc })
}

/// A row of a pairs file: id, label-or-score, question text, passage text.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub qp_id: String,
    pub value: f64,
    pub question: String,
    pub passage: String,
}

impl PairRecord {
    pub fn to_pair(&self) -> Result<QaPair, QaError> {
        QaPair::new(self.qp_id.clone(), &self.question, &self.passage)
    }

    /// The value as a boolean label, if it is exactly 0 or 1.
    pub fn label(&self) -> Option<bool> {
        if self.value == 1.0 {
            Some(true)
        } else if self.value == 0.0 {
            Some(false)
        } else {
            None
        }
    }
}

fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

fn unescape_field(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

/// `qp_id  label_or_score  question  passage`, text fields backslash-escaped.
pub fn write_pairs_tsv(records: &[PairRecord]) -> String {
    let mut out = String::from("#qp_id\tlabel_or_score\tquestion\tpassage\n");
    for r in records {
        let value = match r.label() {
            Some(l) => u8::from(l).to_string(),
            None => format!("{}", r.value),
        };
        writeln!(
            out,
            "{}\t{}\t{}\t{}",
            escape_field(&r.qp_id),
            value,
            escape_field(&r.question),
            escape_field(&r.passage)
        )
        .unwrap();
    }
    out
}

pub fn read_pairs_tsv(text: &str) -> Result<Vec<PairRecord>, QaError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| QaError::MalformedRow {
            line: idx + 1,
            reason: reason.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let value: f64 = cols[1].parse().map_err(|_| bad("bad label_or_score"))?;
        if !value.is_finite() {
            return Err(bad("non-finite label_or_score"));
        }
        let field = |s: &str| unescape_field(s).ok_or_else(|| bad("bad escape sequence"));
        out.push(PairRecord {
            qp_id: field(cols[0])?,
            value,
            question: field(cols[2])?,
            passage: field(cols[3])?,
        });
    }
    Ok(out)
}

/// `qp_id  question  passage`, text fields backslash-escaped.
pub fn write_texts_tsv(rows: &[(String, String, String)]) -> String {
    let mut out = String::from("#qp_id\tquestion\tpassage\n");
    for (id, q, p) in rows {
        writeln!(
            out,
            "{}\t{}\t{}",
            escape_field(id),
            escape_field(q),
            escape_field(p)
        )
        .unwrap();
    }
    out
}

pub fn read_texts_tsv(text: &str) -> Result<Vec<(String, String, String)>, QaError> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| QaError::MalformedRow {
            line: idx + 1,
            reason: reason.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(bad("expected 3 columns"));
        }
        let field = |s: &str| unescape_field(s).ok_or_else(|| bad("bad escape sequence"));
        out.push((field(cols[0])?, field(cols[1])?, field(cols[2])?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(q: &str, p: &str) -> QaPair {
        QaPair::new("x", q, p).unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("What's the  TEMP? 37°C"),
            ["what", "s", "the", "temp", "37", "c"]
        );
        assert!(matches!(
            QaPair::new("a", "?!", "p"),
            Err(QaError::EmptyText(_))
        ));
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn identical_texts_fully_overlap() {
        let f = featurize(&pair("normal body temperature", "normal body temperature")).unwrap();
        assert_eq!(f.scalars[0], 1.0);
        assert_eq!(f.scalars[1], 1.0);
        assert_eq!(f.buckets.iter().map(|b| b.1).sum::<f64>(), 5.0);
    }

    #[test]
    fn disjoint_texts_have_no_buckets() {
        let f = featurize(&pair("alpha beta", "gamma delta epsilon")).unwrap();
        assert!(f.buckets.is_empty());
        assert_eq!(&f.scalars[..2], &[0.0, 0.0]);
        assert_eq!(f.scalars[2], 4f64.ln() / 10.0);
        assert_eq!(f.scalars[3], 3f64.ln() / 10.0);
    }

    #[test]
    fn losses() {
        assert!((ce_loss(&[1.0], &[0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(
            ce_loss(&[1.0], &[]),
            Err(QaError::LengthMismatch(1, 0))
        ));
        assert_eq!(mse_loss(&[0.3, 0.8], &[0.3, 0.8]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        // clipping keeps a confident mistake finite
        assert!(ce_loss(&[1.0], &[0.0]).unwrap().is_finite());
    }

    #[test]
    fn ce_is_minimized_by_the_labels_themselves() {
        let labels = [1.0, 0.0, 1.0];
        let best = ce_loss(&labels, &labels).unwrap();
        for other in [[0.9, 0.1, 0.9], [0.5, 0.5, 0.5], [1.0, 0.2, 0.99]] {
            assert!(best <= ce_loss(&labels, &other).unwrap());
        }
    }

    #[test]
    fn loss_target_mismatch() {
        let ex = QaExample {
            pair: pair("a b", "a c"),
            target: Target::Score(0.7),
        };
        let cfg = TrainConfig::finetune_default();
        let err = train(
            &RelevanceModel::new(),
            std::slice::from_ref(&ex),
            &cfg,
            TrainStage::Finetune,
        );
        assert!(matches!(err, Err(QaError::LossTargetMismatch(_))));
        let mse = TrainConfig {
            loss: Loss::Mse,
            ..cfg
        };
        assert!(train(&RelevanceModel::new(), &[ex], &mse, TrainStage::Finetune).is_ok());
        assert!(matches!(
            train(&RelevanceModel::new(), &[], &cfg, TrainStage::Finetune),
            Err(QaError::EmptyDataset)
        ));
    }

    #[test]
    fn zero_learning_rate_only_advances_stage() {
        let ex = QaExample {
            pair: pair("a b", "a c"),
            target: Target::Label(true),
        };
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::pretrain_default()
        };
        let m = train(&RelevanceModel::new(), &[ex], &cfg, TrainStage::Pretrain).unwrap();
        assert_eq!(m.stage, StageTag::Pretrained);
        assert_eq!(m.weights, RelevanceModel::new().weights);
        assert_eq!(m.bias, 0.0);
    }

    #[test]
    fn untrained_model_scores_half() {
        let pairs = vec![
            pair("a b", "a b").with_label(true),
            pair("a b", "c d").with_label(false),
        ];
        let e = evaluate(&RelevanceModel::new(), &pairs).unwrap();
        assert_eq!(e.auc, 0.5);
    }

    #[test]
    fn memorizes_two_pairs() {
        let pairs = vec![
            pair("red apple", "red apple pie").with_label(true),
            pair("blue car", "green grass").with_label(false),
        ];
        let examples: Vec<QaExample> = pairs
            .iter()
            .map(|p| QaExample {
                pair: p.clone(),
                target: Target::Label(p.label.unwrap()),
            })
            .collect();
        let m = train(
            &RelevanceModel::new(),
            &examples,
            &TrainConfig::finetune_default(),
            TrainStage::Finetune,
        )
        .unwrap();
        assert_eq!(evaluate(&m, &pairs).unwrap().auc, 1.0);
    }

    #[test]
    fn pairs_tsv_escapes_text() {
        let records = vec![
            PairRecord {
                qp_id: "q1".into(),
                value: 1.0,
                question: "tab\there".into(),
                passage: "line\nbreak \\ slash".into(),
            },
            PairRecord {
                qp_id: "q2".into(),
                value: 0.25,
                question: "a".into(),
                passage: "b".into(),
            },
        ];
        let text = write_pairs_tsv(&records);
        assert_eq!(text.lines().count(), 3);
        assert_eq!(read_pairs_tsv(&text).unwrap(), records);
        assert!(read_pairs_tsv("q\t1\ta\n").is_err());
    }

    #[test]
    fn model_json_is_sparse_and_round_trips() {
        let mut m = RelevanceModel::new();
        m.weights[17] = 0.25;
        m.scalar_weights[0] = 1.5;
        m.stage = StageTag::Finetuned;
        let text = m.to_json();
        assert!(text.contains("\"weights\":{\"17\":0.25}"));
        let back = RelevanceModel::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn texts_tsv_round_trip() {
        let rows = vec![("a\tb".to_string(), "q\\x".to_string(), "p\nq".to_string())];
        let text = write_texts_tsv(&rows);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(read_texts_tsv(&text).unwrap(), rows);
        assert!(read_texts_tsv("a\tb\n").is_err());
    }
}
