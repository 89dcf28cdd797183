//! Flat `key=value` pipeline configuration with `section.` prefixes.
//!
//! `sim.profile` names a preset that is applied before any other key, so
//! individual `sim.relevant.*` / `sim.irrelevant.*` entries refine it
//! regardless of their position in the file.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::feedback::{DtConfig, GbdtConfig, LrConfig, RfConfig};
use crate::qa::{Loss, TrainConfig};
use crate::session::TerminalClickPolicy;
use crate::sim::{BehaviorProfile, ClassProfile, SimConfig};
use crate::weak::WeakLabelConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {0}: expected key=value")]
    Syntax(usize),
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key {key}")]
    DuplicateKey { line: usize, key: String },
    #[error("{key}: cannot parse {value:?}")]
    BadValue { key: String, value: String },
    #[error("unknown profile preset {0}")]
    UnknownPreset(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeedbackKind {
    Lr,
    Dt,
    Rf,
    Gbdt,
    /// Single-feature model on the given feature index.
    Baseline(usize),
}

impl FromStr for FeedbackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lr" => Ok(FeedbackKind::Lr),
            "dt" => Ok(FeedbackKind::Dt),
            "rf" => Ok(FeedbackKind::Rf),
            "gbdt" => Ok(FeedbackKind::Gbdt),
            _ => s
                .strip_prefix("baseline:")
                .and_then(|i| i.parse().ok())
                .map(FeedbackKind::Baseline)
                .ok_or_else(|| format!("unknown model kind {s:?}")),
        }
    }
}

impl fmt::Display for FeedbackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeedbackKind::Lr => f.write_str("lr"),
            FeedbackKind::Dt => f.write_str("dt"),
            FeedbackKind::Rf => f.write_str("rf"),
            FeedbackKind::Gbdt => f.write_str("gbdt"),
            FeedbackKind::Baseline(i) => write!(f, "baseline:{i}"),
        }
    }
}

/// Hyperparameters of every feedback model kind plus the one to use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackSettings {
    pub kind: FeedbackKind,
    pub lr: LrConfig,
    pub dt: DtConfig,
    pub rf: RfConfig,
    pub gbdt: GbdtConfig,
}

impl Default for FeedbackSettings {
    fn default() -> Self {
        FeedbackSettings {
            kind: FeedbackKind::Gbdt,
            lr: LrConfig::default(),
            dt: DtConfig::default(),
            rf: RfConfig::default(),
            gbdt: GbdtConfig::default(),
        }
    }
}

impl FeedbackSettings {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.lr.seed = seed;
        self.dt.seed = seed;
        self.rf.seed = seed;
        self.gbdt.seed = seed;
        self
    }

    pub fn with_kind(mut self, kind: FeedbackKind) -> Self {
        self.kind = kind;
        self
    }
}

/// What the weak pairs file carries in its value column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeakTarget {
    Label,
    Score,
}

impl FromStr for WeakTarget {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "label" => Ok(WeakTarget::Label),
            "score" => Ok(WeakTarget::Score),
            _ => Err(format!("unknown weak target {s:?}")),
        }
    }
}

impl fmt::Display for WeakTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeakTarget::Label => "label",
            WeakTarget::Score => "score",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakSettings {
    pub label: WeakLabelConfig,
    pub target: WeakTarget,
    /// Upper bound on the weak pairs used for pre-training.
    pub limit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QaSettings {
    /// Gold pairs drawn for fine-tuning; the remaining gold pairs are the test set.
    pub n_finetune: usize,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub profile_preset: String,
    /// `sim.n_pairs` is the judged set; mined pairs follow it.
    pub sim: SimConfig,
    pub n_mined: usize,
    pub agg_sat_ms: u64,
    pub min_impressions: u64,
    pub terminal_click_policy: TerminalClickPolicy,
    pub feedback: FeedbackSettings,
    pub weak: WeakSettings,
    pub qa: QaSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut cfg = PipelineConfig {
            seed: 7,
            profile_preset: "default".into(),
            sim: SimConfig::default(),
            n_mined: 21_000,
            agg_sat_ms: 30_000,
            min_impressions: 10,
            terminal_click_policy: TerminalClickPolicy::Satisfied,
            feedback: FeedbackSettings::default(),
            weak: WeakSettings {
                label: WeakLabelConfig::default(),
                target: WeakTarget::Label,
                limit: 20_000,
            },
            qa: QaSettings {
                n_finetune: 500,
                pretrain: TrainConfig::pretrain_default(),
                finetune: TrainConfig::finetune_default(),
            },
        };
        cfg.set_seed(7);
        cfg
    }
}

pub fn profile_preset(name: &str) -> Result<BehaviorProfile, ConfigError> {
    match name {
        "default" => Ok(BehaviorProfile::default()),
        "dwell_and_outside" => Ok(BehaviorProfile::dwell_and_outside()),
        "answer_vs_outside" => Ok(BehaviorProfile::answer_vs_outside()),
        _ => Err(ConfigError::UnknownPreset(name.to_string())),
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
    })
}

fn class_entries(prefix: &str, c: &ClassProfile, out: &mut Vec<(String, String)>) {
    let mut put = |k: &str, v: String| out.push((format!("{prefix}.{k}"), v));
    put("p_no_click", c.p_no_click.to_string());
    put("p_answer_only", c.p_answer_only.to_string());
    put("p_ot_only", c.p_ot_only.to_string());
    put("p_both", c.p_both.to_string());
    put("p_other_only", c.p_other_only.to_string());
    put(
        "p_reformulate_given_no_sat",
        c.p_reformulate_given_no_sat.to_string(),
    );
    put("p_related_click", c.p_related_click.to_string());
    put("p_answer_expansion", c.p_answer_expansion.to_string());
    put("serp_dwell_mu", c.serp_dwell.mu.to_string());
    put("serp_dwell_sigma", c.serp_dwell.sigma.to_string());
    put("source_dwell_mu", c.source_dwell.mu.to_string());
    put("source_dwell_sigma", c.source_dwell.sigma.to_string());
    put("answer_click_shape", c.answer_click_shape.to_string());
}

fn set_class(c: &mut ClassProfile, field: &str, key: &str, v: &str) -> Result<bool, ConfigError> {
    let slot: &mut f64 = match field {
        "p_no_click" => &mut c.p_no_click,
        "p_answer_only" => &mut c.p_answer_only,
        "p_ot_only" => &mut c.p_ot_only,
        "p_both" => &mut c.p_both,
        "p_other_only" => &mut c.p_other_only,
        "p_reformulate_given_no_sat" => &mut c.p_reformulate_given_no_sat,
        "p_related_click" => &mut c.p_related_click,
        "p_answer_expansion" => &mut c.p_answer_expansion,
        "serp_dwell_mu" => &mut c.serp_dwell.mu,
        "serp_dwell_sigma" => &mut c.serp_dwell.sigma,
        "source_dwell_mu" => &mut c.source_dwell.mu,
        "source_dwell_sigma" => &mut c.source_dwell.sigma,
        "answer_click_shape" => &mut c.answer_click_shape,
        _ => return Ok(false),
    };
    *slot = parse(key, v)?;
    Ok(true)
}

fn train_entries(prefix: &str, t: &TrainConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.epochs"), t.epochs.to_string()));
    out.push((
        format!("{prefix}.learning_rate"),
        t.learning_rate.to_string(),
    ));
    out.push((format!("{prefix}.l2"), t.l2.to_string()));
    out.push((format!("{prefix}.batch_size"), t.batch_size.to_string()));
    out.push((format!("{prefix}.loss"), t.loss.to_string()));
}

fn set_train(t: &mut TrainConfig, field: &str, key: &str, v: &str) -> Result<bool, ConfigError> {
    match field {
        "epochs" => t.epochs = parse(key, v)?,
        "learning_rate" => t.learning_rate = parse(key, v)?,
        "l2" => t.l2 = parse(key, v)?,
        "batch_size" => t.batch_size = parse(key, v)?,
        "loss" => t.loss = parse::<Loss>(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl PipelineConfig {
    /// Sets the global seed and every seed derived from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sim.seed = seed;
        self.feedback = self.feedback.with_seed(seed);
        self.weak.label.seed = seed;
        self.qa.pretrain.seed = seed;
        self.qa.finetune.seed = seed;
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut seen = BTreeSet::new();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line: i + 1,
                    key: k.to_string(),
                });
            }
            entries.push((i + 1, k, v));
        }
        let mut cfg = PipelineConfig::default();
        if let Some(&(_, _, preset)) = entries.iter().find(|e| e.1 == "sim.profile") {
            cfg.sim.profile = profile_preset(preset)?;
            cfg.profile_preset = preset.to_string();
        }
        for &(line, k, v) in &entries {
            if k != "sim.profile" && !cfg.set(k, v)? {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: k.to_string(),
                });
            }
        }
        Ok(cfg)
    }

    /// Applies one key; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool, ConfigError> {
        let s = &mut self.sim;
        match key {
            "seed" => {
                let seed = parse(key, v)?;
                self.set_seed(seed);
            }
            "sim.profile" => {
                self.sim.profile = profile_preset(v)?;
                self.profile_preset = v.to_string();
            }
            "sim.n_pairs" => s.n_pairs = parse(key, v)?,
            "sim.n_mined" => self.n_mined = parse(key, v)?,
            "sim.positive_rate" => s.positive_rate = parse(key, v)?,
            "sim.impressions_per_pair" => s.impressions_per_pair = parse(key, v)?,
            "sim.judge_error_rate" => s.judge_error_rate = parse(key, v)?,
            "sim.n_judges" => s.n_judges = parse(key, v)?,
            "sim.vocab_size" => s.vocab_size = parse(key, v)?,
            "sim.zipf_exponent" => s.zipf_exponent = parse(key, v)?,
            "sim.question_len_min" => s.question_len.0 = parse(key, v)?,
            "sim.question_len_max" => s.question_len.1 = parse(key, v)?,
            "sim.passage_len_min" => s.passage_len.0 = parse(key, v)?,
            "sim.passage_len_max" => s.passage_len.1 = parse(key, v)?,
            "sim.sat_threshold_ms" => s.sat_threshold_ms = parse(key, v)?,
            "sim.behavior_noise" => s.profile.behavior_noise = parse(key, v)?,
            "agg.sat_ms" => self.agg_sat_ms = parse(key, v)?,
            "agg.min_impressions" => self.min_impressions = parse(key, v)?,
            "agg.terminal_click_policy" => self.terminal_click_policy = parse(key, v)?,
            "feedback.model" => self.feedback.kind = parse(key, v)?,
            "feedback.lr.epochs" => self.feedback.lr.epochs = parse(key, v)?,
            "feedback.lr.learning_rate" => self.feedback.lr.learning_rate = parse(key, v)?,
            "feedback.lr.l2" => self.feedback.lr.l2 = parse(key, v)?,
            "feedback.dt.max_depth" => self.feedback.dt.max_depth = parse(key, v)?,
            "feedback.dt.min_leaf" => self.feedback.dt.min_leaf = parse(key, v)?,
            "feedback.rf.n_trees" => self.feedback.rf.n_trees = parse(key, v)?,
            "feedback.rf.max_depth" => self.feedback.rf.max_depth = parse(key, v)?,
            "feedback.rf.min_leaf" => self.feedback.rf.min_leaf = parse(key, v)?,
            "feedback.rf.feature_subsample" => self.feedback.rf.feature_subsample = parse(key, v)?,
            "feedback.rf.bootstrap" => self.feedback.rf.bootstrap = parse(key, v)?,
            "feedback.gbdt.n_trees" => self.feedback.gbdt.n_trees = parse(key, v)?,
            "feedback.gbdt.learning_rate" => self.feedback.gbdt.learning_rate = parse(key, v)?,
            "feedback.gbdt.max_depth" => self.feedback.gbdt.max_depth = parse(key, v)?,
            "feedback.gbdt.min_leaf" => self.feedback.gbdt.min_leaf = parse(key, v)?,
            "feedback.gbdt.l2_leaf" => self.feedback.gbdt.l2_leaf = parse(key, v)?,
            "weak.tau_high" => self.weak.label.tau_high = parse(key, v)?,
            "weak.tau_low" => self.weak.label.tau_low = parse(key, v)?,
            "weak.balance" => self.weak.label.balance = parse(key, v)?,
            "weak.target" => self.weak.target = parse(key, v)?,
            "weak.limit" => self.weak.limit = parse(key, v)?,
            "qa.n_finetune" => self.qa.n_finetune = parse(key, v)?,
            _ => {
                if let Some(field) = key.strip_prefix("sim.relevant.") {
                    return set_class(&mut self.sim.profile.relevant, field, key, v);
                }
                if let Some(field) = key.strip_prefix("sim.irrelevant.") {
                    return set_class(&mut self.sim.profile.irrelevant, field, key, v);
                }
                if let Some(field) = key.strip_prefix("qa.pre.") {
                    return set_train(&mut self.qa.pretrain, field, key, v);
                }
                if let Some(field) = key.strip_prefix("qa.fine.") {
                    return set_train(&mut self.qa.finetune, field, key, v);
                }
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.sim;
        let f = &self.feedback;
        let mut out: Vec<(String, String)> = [
            ("seed", self.seed.to_string()),
            ("sim.n_pairs", s.n_pairs.to_string()),
            ("sim.n_mined", self.n_mined.to_string()),
            ("sim.positive_rate", s.positive_rate.to_string()),
            (
                "sim.impressions_per_pair",
                s.impressions_per_pair.to_string(),
            ),
            ("sim.judge_error_rate", s.judge_error_rate.to_string()),
            ("sim.n_judges", s.n_judges.to_string()),
            ("sim.vocab_size", s.vocab_size.to_string()),
            ("sim.zipf_exponent", s.zipf_exponent.to_string()),
            ("sim.question_len_min", s.question_len.0.to_string()),
            ("sim.question_len_max", s.question_len.1.to_string()),
            ("sim.passage_len_min", s.passage_len.0.to_string()),
            ("sim.passage_len_max", s.passage_len.1.to_string()),
            ("sim.sat_threshold_ms", s.sat_threshold_ms.to_string()),
            ("sim.profile", self.profile_preset.clone()),
            ("sim.behavior_noise", s.profile.behavior_noise.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        class_entries("sim.relevant", &s.profile.relevant, &mut out);
        class_entries("sim.irrelevant", &s.profile.irrelevant, &mut out);
        let rest = [
            ("agg.sat_ms", self.agg_sat_ms.to_string()),
            ("agg.min_impressions", self.min_impressions.to_string()),
            (
                "agg.terminal_click_policy",
                self.terminal_click_policy.to_string(),
            ),
            ("feedback.model", f.kind.to_string()),
            ("feedback.lr.epochs", f.lr.epochs.to_string()),
            ("feedback.lr.learning_rate", f.lr.learning_rate.to_string()),
            ("feedback.lr.l2", f.lr.l2.to_string()),
            ("feedback.dt.max_depth", f.dt.max_depth.to_string()),
            ("feedback.dt.min_leaf", f.dt.min_leaf.to_string()),
            ("feedback.rf.n_trees", f.rf.n_trees.to_string()),
            ("feedback.rf.max_depth", f.rf.max_depth.to_string()),
            ("feedback.rf.min_leaf", f.rf.min_leaf.to_string()),
            (
                "feedback.rf.feature_subsample",
                f.rf.feature_subsample.to_string(),
            ),
            ("feedback.rf.bootstrap", f.rf.bootstrap.to_string()),
            ("feedback.gbdt.n_trees", f.gbdt.n_trees.to_string()),
            (
                "feedback.gbdt.learning_rate",
                f.gbdt.learning_rate.to_string(),
            ),
            ("feedback.gbdt.max_depth", f.gbdt.max_depth.to_string()),
            ("feedback.gbdt.min_leaf", f.gbdt.min_leaf.to_string()),
            ("feedback.gbdt.l2_leaf", f.gbdt.l2_leaf.to_string()),
            ("weak.tau_high", self.weak.label.tau_high.to_string()),
            ("weak.tau_low", self.weak.label.tau_low.to_string()),
            ("weak.balance", self.weak.label.balance.to_string()),
            ("weak.target", self.weak.target.to_string()),
            ("weak.limit", self.weak.limit.to_string()),
            ("qa.n_finetune", self.qa.n_finetune.to_string()),
        ];
        out.extend(rest.into_iter().map(|(k, v)| (k.to_string(), v)));
        train_entries("qa.pre", &self.qa.pretrain, &mut out);
        train_entries("qa.fine", &self.qa.finetune, &mut out);
        out
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_conf(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn extract_config(&self) -> crate::session::ExtractConfig {
        crate::session::ExtractConfig {
            sat_threshold_ms: self.agg_sat_ms,
            terminal_click_policy: self.terminal_click_policy,
        }
    }

    pub fn aggregation_config(&self) -> crate::features::AggregationConfig {
        crate::features::AggregationConfig {
            sat_threshold_ms: self.agg_sat_ms,
            min_impressions: self.min_impressions,
        }
    }

    /// Simulator settings covering judged and mined pairs.
    pub fn full_sim(&self) -> SimConfig {
        SimConfig {
            n_pairs: self.sim.n_pairs + self.n_mined,
            ..self.sim
        }
    }
}
