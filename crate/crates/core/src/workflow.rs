//! Stage logic shared by the command line and the in-memory experiment
//! runner: feedback training and evaluation, weak-label mining and the
//! two-stage QA run.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::{FeedbackKind, FeedbackSettings, PipelineConfig, WeakTarget};
use crate::features::{quantize, BehaviorFeatures, FeatureError, ANSWER_CTR};
use crate::feedback::{
    split_indices, train_baseline, train_dt, train_gbdt, train_lr, train_rf, FeedbackModel,
    FeedbackRow, ModelError, Samples,
};
use crate::metrics::{self, MetricsError, ScoredLabel};
use crate::qa::{self, PairRecord, QaError, QaEval, QaExample, QaPair, RelevanceModel, Target};
use crate::qa::{TrainConfig, TrainStage};
use crate::sim::{gen_gold_labels, gen_pairs, simulate_features, SimError, SimPair};
use crate::weak::{weak_label, WeakLabel, WeakLabelConfig, WeakLabelError};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error(transparent)]
    Weak(#[from] WeakLabelError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("MissingText: no question/passage text for {0}")]
    MissingText(String),
}

pub fn train_feedback(
    settings: &FeedbackSettings,
    samples: &Samples,
) -> Result<FeedbackModel, ModelError> {
    match settings.kind {
        FeedbackKind::Lr => train_lr(samples, &settings.lr),
        FeedbackKind::Dt => train_dt(samples, &settings.dt),
        FeedbackKind::Rf => train_rf(samples, &settings.rf),
        FeedbackKind::Gbdt => train_gbdt(samples, &settings.gbdt),
        FeedbackKind::Baseline(i) => train_baseline(samples, i),
    }
}

/// Feature rows that have a label, in feature order.
pub fn join_gold(features: &[BehaviorFeatures], gold: &[(String, bool)]) -> Vec<FeedbackRow> {
    let labels: HashMap<&str, bool> = gold.iter().map(|(id, l)| (id.as_str(), *l)).collect();
    features
        .iter()
        .filter_map(|f| {
            labels.get(f.qp_id.as_str()).map(|&label| FeedbackRow {
                qp_id: f.qp_id.clone(),
                features: f.clone(),
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowSplit {
    pub train: Vec<FeedbackRow>,
    pub dev: Vec<FeedbackRow>,
    pub test: Vec<FeedbackRow>,
}

pub fn split_rows(rows: &[FeedbackRow], seed: u64) -> RowSplit {
    let (train, dev, test) = split_indices(rows.len(), seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect();
    RowSplit {
        train: pick(&train),
        dev: pick(&dev),
        test: pick(&test),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierEval {
    pub auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub n: usize,
}

pub fn scored_rows(
    model: &FeedbackModel,
    rows: &[FeedbackRow],
) -> Result<Vec<ScoredLabel>, ModelError> {
    rows.iter()
        .map(|r| Ok(ScoredLabel::new(model.predict(&r.features)?, r.label)))
        .collect()
}

pub fn evaluate_feedback(
    model: &FeedbackModel,
    rows: &[FeedbackRow],
) -> Result<ClassifierEval, WorkflowError> {
    let items = scored_rows(model, rows)?;
    let auc = metrics::auc(&items)?;
    let af = metrics::acc_f1(&items, metrics::DEFAULT_THRESHOLD)?;
    Ok(ClassifierEval {
        auc,
        acc: af.acc,
        f1: af.f1,
        n: items.len(),
    })
}

/// Scores every pair not listed in `exclude`, in input order.
pub fn score_features(
    model: &FeedbackModel,
    features: &[BehaviorFeatures],
    exclude: &HashSet<String>,
) -> Result<Vec<(String, f64)>, ModelError> {
    features
        .iter()
        .filter(|f| !exclude.contains(&f.qp_id))
        .map(|f| Ok((f.qp_id.clone(), model.predict(f)?)))
        .collect()
}

/// Pair records for weak labels, looked up in a text table.
pub fn weak_pair_records(
    labels: &[WeakLabel],
    target: WeakTarget,
    texts: &HashMap<String, (String, String)>,
) -> Result<Vec<PairRecord>, WorkflowError> {
    labels
        .iter()
        .map(|l| {
            let (question, passage) = texts
                .get(&l.qp_id)
                .ok_or_else(|| WorkflowError::MissingText(l.qp_id.clone()))?;
            let value = match target {
                WeakTarget::Label => f64::from(u8::from(l.label)),
                WeakTarget::Score => l.score,
            };
            Ok(PairRecord {
                qp_id: l.qp_id.clone(),
                value,
                question: question.clone(),
                passage: passage.clone(),
            })
        })
        .collect()
}

/// Training examples from a pairs file; values other than 0/1 become score targets.
pub fn examples_from_records(records: &[PairRecord]) -> Result<Vec<QaExample>, QaError> {
    records
        .iter()
        .map(|r| {
            let target = match r.label() {
                Some(l) => Target::Label(l),
                None => Target::Score(r.value),
            };
            Ok(QaExample {
                pair: r.to_pair()?,
                target,
            })
        })
        .collect()
}

/// Labelled pairs for evaluation; every value must be 0 or 1.
pub fn eval_pairs_from_records(records: &[PairRecord]) -> Result<Vec<QaPair>, QaError> {
    records
        .iter()
        .map(|r| {
            let label = r
                .label()
                .ok_or_else(|| QaError::MissingLabel(r.qp_id.clone()))?;
            Ok(r.to_pair()?.with_label(label))
        })
        .collect()
}

/// Seeded draw of `n` items (or all, if fewer); returns `(drawn, rest)`, each
/// in drawn and original order respectively.
pub fn split_pairs<T: Clone>(items: &[T], n: usize, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = n.min(items.len());
    let mut chosen = vec![false; items.len()];
    let drawn = order[..n]
        .iter()
        .map(|&i| {
            chosen[i] = true;
            items[i].clone()
        })
        .collect();
    let rest = items
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| !c)
        .map(|(it, _)| it.clone())
        .collect();
    (drawn, rest)
}

/// Fine-tune-only, pretrain-only and two-stage results on one test set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QaComparison {
    pub finetune_only: QaEval,
    pub pretrain_only: Option<QaEval>,
    pub two_stage: Option<QaEval>,
    pub n_weak: usize,
    pub n_finetune: usize,
    pub n_test: usize,
}

/// Runs the three QA trainings. An empty `weak` set skips the pre-trained
/// variants.
pub fn compare_qa(
    weak: &[QaExample],
    finetune: &[QaExample],
    test: &[QaPair],
    pre: &TrainConfig,
    fine: &TrainConfig,
) -> Result<QaComparison, QaError> {
    let fresh = RelevanceModel::new();
    let ft = qa::train(&fresh, finetune, fine, TrainStage::Finetune)?;
    let finetune_only = qa::evaluate(&ft, test)?;
    let (pretrain_only, two_stage) = if weak.is_empty() {
        (None, None)
    } else {
        let pretrained = qa::train(&fresh, weak, pre, TrainStage::Pretrain)?;
        let both = qa::train(&pretrained, finetune, fine, TrainStage::Finetune)?;
        (
            Some(qa::evaluate(&pretrained, test)?),
            Some(qa::evaluate(&both, test)?),
        )
    };
    Ok(QaComparison {
        finetune_only,
        pretrain_only,
        two_stage,
        n_weak: weak.len(),
        n_finetune: finetune.len(),
        n_test: test.len(),
    })
}

/// Answer-CTR baseline against truth labels: recall of the rule `CTR > 0`
/// and the best precision at any threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrSummary {
    pub recall_at_positive_ctr: f64,
    pub max_precision: f64,
}

pub fn answer_ctr_pr(
    features: &[BehaviorFeatures],
    truth: &[(String, bool)],
) -> Result<PrSummary, MetricsError> {
    let rows = join_gold(features, truth);
    let items: Vec<ScoredLabel> = rows
        .iter()
        .map(|r| ScoredLabel::new(r.features.values[ANSWER_CTR], r.label))
        .collect();
    let curve = metrics::pr_curve(&items)?;
    Ok(PrSummary {
        recall_at_positive_ctr: curve.point_above(0.0).map_or(0.0, |p| p.recall),
        max_precision: curve.max_precision(),
    })
}

/// Pair records of judged pairs carrying their gold labels; `gold` is
/// parallel to `pairs`.
pub fn gold_records(pairs: &[SimPair], gold: &[(String, bool)]) -> Vec<PairRecord> {
    pairs
        .iter()
        .zip(gold)
        .map(|(p, (_, label))| PairRecord {
            qp_id: p.pair.qp_id.clone(),
            value: f64::from(u8::from(*label)),
            question: p.question_text(),
            passage: p.passage_text(),
        })
        .collect()
}

/// Everything the simulator produces for one config, held in memory.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub pairs: Vec<SimPair>,
    pub n_judged: usize,
    /// Gold labels of the judged pairs.
    pub gold: Vec<(String, bool)>,
    /// Features as a file round trip would yield them.
    pub features: Vec<BehaviorFeatures>,
}

impl SimulatedData {
    pub fn generate(cfg: &PipelineConfig) -> Result<Self, WorkflowError> {
        let sim = cfg.full_sim();
        sim.validate()?;
        let pairs = gen_pairs(&sim)?;
        let n_judged = cfg.sim.n_pairs;
        let gold = gen_gold_labels(&pairs[..n_judged], &sim)?;
        let agg = simulate_features(
            &pairs,
            &sim,
            &cfg.extract_config(),
            &cfg.aggregation_config(),
        )?;
        let features = agg.features.iter().map(quantize).collect();
        Ok(SimulatedData {
            pairs,
            n_judged,
            gold,
            features,
        })
    }

    pub fn truth(&self) -> Vec<(String, bool)> {
        self.pairs
            .iter()
            .map(|p| (p.pair.qp_id.clone(), p.truth))
            .collect()
    }

    pub fn texts(&self) -> HashMap<String, (String, String)> {
        self.pairs
            .iter()
            .map(|p| (p.pair.qp_id.clone(), (p.question_text(), p.passage_text())))
            .collect()
    }

    pub fn gold_records(&self) -> Vec<PairRecord> {
        gold_records(&self.pairs[..self.n_judged], &self.gold)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackReport {
    pub model: FeedbackModel,
    pub kind: FeedbackKind,
    pub test: ClassifierEval,
    pub gbdt_auc: f64,
    pub dt_auc: f64,
    pub answer_ctr_auc: f64,
    pub pr: PrSummary,
}

/// Trains the configured model plus the GBDT, DT and answer-CTR comparison
/// models on the gold train split and evaluates them on the test split.
pub fn feedback_stage(
    cfg: &PipelineConfig,
    data: &SimulatedData,
) -> Result<FeedbackReport, WorkflowError> {
    let rows = join_gold(&data.features, &data.gold);
    let split = split_rows(&rows, cfg.seed);
    let train = Samples::from_rows(&split.train);
    let test_auc = |kind: FeedbackKind| -> Result<(FeedbackModel, ClassifierEval), WorkflowError> {
        let model = train_feedback(&cfg.feedback.with_kind(kind), &train)?;
        let eval = evaluate_feedback(&model, &split.test)?;
        Ok((model, eval))
    };
    let (model, test) = test_auc(cfg.feedback.kind)?;
    let gbdt_auc = test_auc(FeedbackKind::Gbdt)?.1.auc;
    let dt_auc = test_auc(FeedbackKind::Dt)?.1.auc;
    let answer_ctr_auc = test_auc(FeedbackKind::Baseline(ANSWER_CTR))?.1.auc;
    let pr = answer_ctr_pr(&data.features, &data.truth())?;
    Ok(FeedbackReport {
        model,
        kind: cfg.feedback.kind,
        test,
        gbdt_auc,
        dt_auc,
        answer_ctr_auc,
        pr,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakReport {
    /// Kept labels after balancing, before the size limit.
    pub labels: Vec<WeakLabel>,
    pub n_scored: usize,
    pub n_discarded: usize,
}

impl WeakReport {
    /// Share of the first `limit` labels that agree with the hidden truth.
    pub fn accuracy(&self, truth: &[(String, bool)], limit: usize) -> f64 {
        let truth: HashMap<&str, bool> = truth.iter().map(|(id, t)| (id.as_str(), *t)).collect();
        let used = &self.labels[..limit.min(self.labels.len())];
        if used.is_empty() {
            return 0.0;
        }
        let hits = used
            .iter()
            .filter(|l| truth.get(l.qp_id.as_str()) == Some(&l.label))
            .count();
        hits as f64 / used.len() as f64
    }
}

/// Scores the mined pairs (everything without a gold label) and thresholds them.
pub fn weak_stage(
    model: &FeedbackModel,
    data: &SimulatedData,
    cfg: &WeakLabelConfig,
) -> Result<WeakReport, WorkflowError> {
    let exclude: HashSet<String> = data.gold.iter().map(|(id, _)| id.clone()).collect();
    let scores = score_features(model, &data.features, &exclude)?;
    let out = weak_label(&scores, cfg)?;
    Ok(WeakReport {
        labels: out.labels,
        n_scored: scores.len(),
        n_discarded: out.discarded.len(),
    })
}

/// QA comparison using the first `limit` weak labels.
pub fn qa_stage(
    cfg: &PipelineConfig,
    data: &SimulatedData,
    weak: &WeakReport,
    limit: usize,
) -> Result<QaComparison, WorkflowError> {
    let texts = data.texts();
    let used = &weak.labels[..limit.min(weak.labels.len())];
    let weak_examples = examples_from_records(&weak_pair_records(used, cfg.weak.target, &texts)?)?;
    let (fine, test) = split_pairs(&data.gold_records(), cfg.qa.n_finetune, cfg.seed);
    let fine = examples_from_records(&fine)?;
    let test = eval_pairs_from_records(&test)?;
    Ok(compare_qa(
        &weak_examples,
        &fine,
        &test,
        &cfg.qa.pretrain,
        &cfg.qa.finetune,
    )?)
}

/// Headline numbers of a full run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub seed: u64,
    pub n_judged: usize,
    pub n_mined: usize,
    pub n_features: usize,
    pub feedback_kind: FeedbackKind,
    pub feedback_test: ClassifierEval,
    pub gbdt_auc: f64,
    pub dt_auc: f64,
    pub answer_ctr_auc: f64,
    pub pr: PrSummary,
    pub n_scored: usize,
    pub n_weak_labels: usize,
    pub n_weak_discarded: usize,
    pub weak_accuracy: f64,
    pub qa: QaComparison,
}

impl ExperimentReport {
    pub fn qa_gap(&self) -> Option<f64> {
        self.qa.two_stage.map(|t| t.auc - self.qa.finetune_only.auc)
    }

    /// `metric  value` rows. Numbers carry 6 fractional digits.
    pub fn to_summary_tsv(&self) -> String {
        let mut out = String::from("#metric\tvalue\n");
        let mut row = |k: &str, v: String| writeln!(out, "{k}\t{v}").unwrap();
        row("seed", self.seed.to_string());
        row("sim.n_judged", self.n_judged.to_string());
        row("sim.n_mined", self.n_mined.to_string());
        row("agg.n_pairs", self.n_features.to_string());
        row("feedback.model", self.feedback_kind.to_string());
        row("feedback.test.n", self.feedback_test.n.to_string());
        row(
            "feedback.test.auc",
            format!("{:.6}", self.feedback_test.auc),
        );
        row(
            "feedback.test.acc",
            format!("{:.6}", self.feedback_test.acc),
        );
        row("feedback.test.f1", format!("{:.6}", self.feedback_test.f1));
        row("feedback.auc.gbdt", format!("{:.6}", self.gbdt_auc));
        row("feedback.auc.dt", format!("{:.6}", self.dt_auc));
        row(
            "feedback.auc.answer_ctr",
            format!("{:.6}", self.answer_ctr_auc),
        );
        row(
            "feedback.auc_gap.gbdt_vs_answer_ctr",
            format!("{:.6}", self.gbdt_auc - self.answer_ctr_auc),
        );
        row(
            "pr.answer_ctr.recall_at_ctr_gt_0",
            format!("{:.6}", self.pr.recall_at_positive_ctr),
        );
        row(
            "pr.answer_ctr.max_precision",
            format!("{:.6}", self.pr.max_precision),
        );
        row("weak.n_scored", self.n_scored.to_string());
        row("weak.n_labels", self.n_weak_labels.to_string());
        row("weak.n_discarded", self.n_weak_discarded.to_string());
        row("weak.n_used", self.qa.n_weak.to_string());
        row(
            "weak.accuracy_vs_truth",
            format!("{:.6}", self.weak_accuracy),
        );
        row("qa.n_finetune", self.qa.n_finetune.to_string());
        row("qa.n_test", self.qa.n_test.to_string());
        row(
            "qa.auc.finetune_only",
            format!("{:.6}", self.qa.finetune_only.auc),
        );
        row(
            "qa.acc.finetune_only",
            format!("{:.6}", self.qa.finetune_only.acc),
        );
        if let (Some(p), Some(t)) = (self.qa.pretrain_only, self.qa.two_stage) {
            row("qa.auc.pretrain_only", format!("{:.6}", p.auc));
            row("qa.auc.two_stage", format!("{:.6}", t.auc));
            row("qa.acc.two_stage", format!("{:.6}", t.acc));
            row(
                "qa.auc_gap.two_stage_vs_finetune_only",
                format!("{:.6}", t.auc - self.qa.finetune_only.auc),
            );
        }
        out
    }
}

/// The whole pipeline in memory.
pub fn run_experiment(cfg: &PipelineConfig) -> Result<ExperimentReport, WorkflowError> {
    let data = SimulatedData::generate(cfg)?;
    let fb = feedback_stage(cfg, &data)?;
    let weak = weak_stage(&fb.model, &data, &cfg.weak.label)?;
    let qa = qa_stage(cfg, &data, &weak, cfg.weak.limit)?;
    Ok(ExperimentReport {
        seed: cfg.seed,
        n_judged: data.n_judged,
        n_mined: cfg.n_mined,
        n_features: data.features.len(),
        feedback_kind: fb.kind,
        feedback_test: fb.test,
        gbdt_auc: fb.gbdt_auc,
        dt_auc: fb.dt_auc,
        answer_ctr_auc: fb.answer_ctr_auc,
        pr: fb.pr,
        n_scored: weak.n_scored,
        n_weak_labels: weak.labels.len(),
        n_weak_discarded: weak.n_discarded,
        weak_accuracy: weak.accuracy(&data.truth(), cfg.weak.limit),
        qa,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_pairs_partitions() {
        let items: Vec<usize> = (0..50).collect();
        let (a, b) = split_pairs(&items, 20, 3);
        assert_eq!(a.len(), 20);
        assert_eq!(b.len(), 30);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, items);
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(split_pairs(&items, 20, 3), (a, b));
        assert_eq!(split_pairs(&items, 80, 3).0.len(), 50);
    }

    #[test]
    fn join_keeps_feature_order_and_skips_unlabelled() {
        let f = |id: &str| BehaviorFeatures {
            qp_id: id.into(),
            n_impressions: 10,
            values: [0.0; crate::features::N_FEATURES],
        };
        let rows = join_gold(
            &[f("b"), f("a"), f("c")],
            &[("a".into(), true), ("b".into(), false)],
        );
        let ids: Vec<&str> = rows.iter().map(|r| r.qp_id.as_str()).collect();
        assert_eq!(ids, ["b", "a"]);
        assert!(rows[1].label);
    }
}
