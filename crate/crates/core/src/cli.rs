//! Command-line stages. Each subcommand reads files, writes files, and
//! prefixes every output with `#` provenance lines (tool version, stage,
//! seed, input digests). `pipeline` chains the same stage functions.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::config::{FeedbackKind, PipelineConfig, WeakTarget};
use crate::features::{
    aggregate, read_features_tsv, write_features_tsv, BehaviorFeatures, FEATURE_NAMES,
};
use crate::feedback::{extract_rules, feature_importance, FeedbackModel, FeedbackRow, Samples};
use crate::metrics::{self, ScoredLabel};
use crate::qa::{
    self, read_pairs_tsv, read_texts_tsv, write_pairs_tsv, write_texts_tsv, QaEval, RelevanceModel,
    TrainConfig, TrainStage,
};
use crate::session::{impressions_from_events, parse_log, TerminalClickPolicy};
use crate::sim::{gen_gold_labels, gen_pairs, read_label_tsv, write_label_tsv, write_sessions};
use crate::weak::{weak_label, write_discards_tsv, write_labels_tsv, WeakLabelConfig};
use crate::workflow::{
    self, eval_pairs_from_records, evaluate_feedback, examples_from_records, join_gold,
    score_features, split_rows, train_feedback, weak_pair_records, ClassifierEval,
    ExperimentReport, PrSummary, QaComparison, WeakReport,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Caps the global rayon pool when `QAMINE_THREADS` is set.
pub fn init_threads() {
    if let Some(n) = std::env::var("QAMINE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // fails only if a pool already exists, in which case it stays as is
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

/// A failed stage: printed as `stage: cause`.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub stage: &'static str,
    pub cause: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // keep the diagnostic on one line
        let cause = self.cause.replace('\n', " ");
        write!(f, "{}: {}", self.stage, cause)
    }
}

impl std::error::Error for CliError {}

trait AtStage<T> {
    fn at(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> AtStage<T> for Result<T, E> {
    fn at(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            stage,
            cause: e.to_string(),
        })
    }
}

fn fail<T>(stage: &'static str, cause: impl Into<String>) -> Result<T, CliError> {
    Err(CliError {
        stage,
        cause: cause.into(),
    })
}

#[derive(Debug, Parser)]
#[command(
    name = "qamine",
    version,
    about = "Search-log mining, feedback models and weak supervision"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an event log, truth and gold labels, and pair texts.
    Simulate(SimulateArgs),
    /// Aggregate an event log into per-pair behavior features.
    Aggregate(AggregateArgs),
    /// Train a feedback model on a seeded 7:1:1 split.
    TrainFeedback(TrainFeedbackArgs),
    /// AUC, accuracy and F1 of a feedback model.
    EvalFeedback(EvalFeedbackArgs),
    /// Precision-recall curve of a model or a single raw feature.
    PrCurve(PrCurveArgs),
    /// Feature importance of a tree model.
    Importance(ImportanceArgs),
    /// Root-to-leaf rules of a decision tree.
    Rules(RulesArgs),
    /// Score unlabelled pairs and threshold them into weak labels.
    WeakLabel(WeakLabelArgs),
    /// Train the QA relevance model on a pairs file.
    TrainQa(TrainQaArgs),
    /// AUC and accuracy of a QA model on a labelled pairs file.
    EvalQa(EvalQaArgs),
    /// Seeded draw of N pairs from a pairs file.
    SplitPairs(SplitPairsArgs),
    /// Run every stage from a config file and write a summary.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Judged pairs (the ones with gold labels).
    #[arg(long)]
    pub n_pairs: Option<usize>,
    /// Unjudged pairs generated after the judged ones.
    #[arg(long)]
    pub n_mined: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct AggregateArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30_000)]
    pub sat_ms: u64,
    #[arg(long, default_value_t = 10)]
    pub min_impressions: u64,
    #[arg(long, default_value = "satisfied")]
    pub terminal_click_policy: TerminalClickPolicy,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFeedbackArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    /// lr | dt | rf | gbdt | baseline:INDEX
    #[arg(long)]
    pub model: FeedbackKind,
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics per split; stdout when absent.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Hyperparameters from `feedback.*` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    All,
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct EvalFeedbackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub split: SplitName,
    /// Split seed; defaults to the model's training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PrCurveArgs {
    #[arg(long, required_unless_present = "feature", conflicts_with = "feature")]
    pub model: Option<PathBuf>,
    /// Score by this raw feature index instead of a model.
    #[arg(long)]
    pub feature: Option<usize>,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ImportanceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct RulesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 0.9)]
    pub min_purity: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct WeakLabelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Label files whose pairs are not scored (repeatable).
    #[arg(long)]
    pub exclude: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.6)]
    pub tau_high: f64,
    #[arg(long, default_value_t = 0.4)]
    pub tau_low: f64,
    #[arg(long)]
    pub no_balance: bool,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub discards: Option<PathBuf>,
    /// Texts table used to write a pairs file of the weak labels.
    #[arg(long, requires = "pairs_out")]
    pub texts: Option<PathBuf>,
    #[arg(long, requires = "texts")]
    pub pairs_out: Option<PathBuf>,
    #[arg(long, default_value = "label")]
    pub pairs_target: WeakTarget,
    /// Keep only the first N labels in the pairs file.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Args)]
pub struct TrainQaArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_enum)]
    pub stage: StageArg,
    /// Start from this model instead of zero weights.
    #[arg(long)]
    pub model_in: Option<PathBuf>,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Defaults from `qa.pre.*` or `qa.fine.*` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// ce | mse
    #[arg(long)]
    pub loss: Option<qa::Loss>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalQaArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SplitPairsArgs {
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long)]
    pub out_drawn: PathBuf,
    #[arg(long)]
    pub out_rest: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "pipeline-out")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Provenance written at the top of every output.
#[derive(Debug, Clone)]
struct Provenance {
    stage: &'static str,
    seed: Option<u64>,
    inputs: Vec<(String, String)>,
}

fn basename(path: &Path) -> String {
    path.file_name().map_or_else(
        || path.display().to_string(),
        |n| n.to_string_lossy().into_owned(),
    )
}

fn sha256_file(path: &Path) -> io::Result<String> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

impl Provenance {
    fn new(stage: &'static str, seed: Option<u64>) -> Self {
        Provenance {
            stage,
            seed,
            inputs: Vec::new(),
        }
    }

    fn input(mut self, path: &Path) -> Result<Self, CliError> {
        let digest = sha256_file(path)
            .map_err(|e| format!("cannot read {}: {e}", path.display()))
            .at(self.stage)?;
        self.inputs.push((basename(path), digest));
        Ok(self)
    }

    fn seed_text(&self) -> String {
        self.seed
            .map_or_else(|| "none".to_string(), |s| s.to_string())
    }

    fn header(&self) -> String {
        let mut out = format!(
            "# tool=qamine {TOOL_VERSION}\n# stage={}\n# seed={}\n",
            self.stage,
            self.seed_text()
        );
        for (name, digest) in &self.inputs {
            out.push_str(&format!("# input={name} sha256={digest}\n"));
        }
        out
    }

    fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("tool".to_string(), format!("qamine {TOOL_VERSION}"));
        m.insert("stage".to_string(), self.stage.to_string());
        m.insert("seed".to_string(), self.seed_text());
        for (name, digest) in &self.inputs {
            m.insert(format!("input.{name}"), format!("sha256={digest}"));
        }
        m
    }

    fn write(&self, path: &Path, body: &str) -> Result<(), CliError> {
        write_file(self.stage, path, &format!("{}{}", self.header(), body))
    }

    /// Writes to `path`, or stdout when absent.
    fn emit(&self, path: Option<&Path>, body: &str) -> Result<(), CliError> {
        match path {
            Some(p) => self.write(p, body),
            None => {
                print!("{}{}", self.header(), body);
                Ok(())
            }
        }
    }
}

fn write_file(stage: &'static str, path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .map_err(|e| format!("cannot create {}: {e}", dir.display()))
            .at(stage)?;
    }
    fs::write(path, text)
        .map_err(|e| format!("cannot write {}: {e}", path.display()))
        .at(stage)
}

fn read_file(stage: &'static str, path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))
        .at(stage)
}

fn load_config(stage: &'static str, path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        Some(p) => PipelineConfig::parse(&read_file(stage, p)?).at(stage),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_features(stage: &'static str, path: &Path) -> Result<Vec<BehaviorFeatures>, CliError> {
    read_features_tsv(&read_file(stage, path)?).at(stage)
}

fn load_labels(stage: &'static str, path: &Path) -> Result<Vec<(String, bool)>, CliError> {
    read_label_tsv(&read_file(stage, path)?)
        .map_err(|e| format!("{}: {e}", path.display()))
        .at(stage)
}

fn load_feedback_model(stage: &'static str, path: &Path) -> Result<FeedbackModel, CliError> {
    FeedbackModel::from_json(&read_file(stage, path)?).at(stage)
}

fn load_qa_model(stage: &'static str, path: &Path) -> Result<RelevanceModel, CliError> {
    RelevanceModel::from_json(&read_file(stage, path)?).at(stage)
}

fn eval_tsv(rows: &[(&str, ClassifierEval)]) -> String {
    let mut out = String::from("#split\tn\tauc\tacc\tf1\n");
    for (name, e) in rows {
        out.push_str(&format!(
            "{name}\t{}\t{:.6}\t{:.6}\t{:.6}\n",
            e.n, e.auc, e.acc, e.f1
        ));
    }
    out
}

pub fn simulate(args: &SimulateArgs) -> Result<(), CliError> {
    const STAGE: &str = "simulate";
    let mut cfg = load_config(STAGE, args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    if let Some(n) = args.n_pairs {
        cfg.sim.n_pairs = n;
    }
    if let Some(n) = args.n_mined {
        cfg.n_mined = n;
    }
    let sim = cfg.full_sim();
    sim.validate().at(STAGE)?;
    let mut prov = Provenance::new(STAGE, Some(sim.seed));
    if let Some(p) = &args.config {
        prov = prov.input(p)?;
    }
    let pairs = gen_pairs(&sim).at(STAGE)?;
    let judged = &pairs[..cfg.sim.n_pairs];
    let gold = gen_gold_labels(judged, &sim).at(STAGE)?;
    let truth: Vec<(String, bool)> = pairs
        .iter()
        .map(|p| (p.pair.qp_id.clone(), p.truth))
        .collect();
    let texts: Vec<(String, String, String)> = pairs
        .iter()
        .map(|p| (p.pair.qp_id.clone(), p.question_text(), p.passage_text()))
        .collect();

    let dir = &args.out_dir;
    fs::create_dir_all(dir)
        .map_err(|e| format!("cannot create {}: {e}", dir.display()))
        .at(STAGE)?;
    let log_path = dir.join("log.jsonl");
    let io_err = |e: io::Error| format!("cannot write {}: {e}", log_path.display());
    let file = File::create(&log_path).map_err(io_err).at(STAGE)?;
    let mut w = BufWriter::new(file);
    w.write_all(prov.header().as_bytes())
        .map_err(io_err)
        .at(STAGE)?;
    write_sessions(&pairs, &sim, &mut w)
        .map_err(io_err)
        .at(STAGE)?;
    w.flush().map_err(io_err).at(STAGE)?;

    prov.write(&dir.join("truth.tsv"), &write_label_tsv("truth", &truth))?;
    prov.write(&dir.join("gold.tsv"), &write_label_tsv("gold", &gold))?;
    prov.write(&dir.join("texts.tsv"), &write_texts_tsv(&texts))?;
    prov.write(
        &dir.join("gold_pairs.tsv"),
        &write_pairs_tsv(&workflow::gold_records(judged, &gold)),
    )?;
    Ok(())
}

pub fn aggregate_log(args: &AggregateArgs) -> Result<Vec<BehaviorFeatures>, CliError> {
    const STAGE: &str = "aggregate";
    if args.sat_ms == 0 || args.min_impressions == 0 {
        return fail(STAGE, "sat-ms and min-impressions must be positive");
    }
    let prov = Provenance::new(STAGE, None).input(&args.log)?;
    let text = read_file(STAGE, &args.log)?;
    let events = parse_log(text.lines()).at(STAGE)?;
    drop(text);
    let extract = crate::session::ExtractConfig {
        sat_threshold_ms: args.sat_ms,
        terminal_click_policy: args.terminal_click_policy,
    };
    let impressions = impressions_from_events(events, &extract).at(STAGE)?;
    let agg = aggregate(
        &impressions,
        &crate::features::AggregationConfig {
            sat_threshold_ms: args.sat_ms,
            min_impressions: args.min_impressions,
        },
    );
    let body = format!(
        "# sat_ms={} min_impressions={} terminal_click_policy={}\n# dropped_pairs={} dropped_impressions={}\n{}",
        args.sat_ms,
        args.min_impressions,
        args.terminal_click_policy,
        agg.dropped_pairs,
        agg.dropped_impressions,
        write_features_tsv(&agg.features)
    );
    prov.write(&args.out, &body)?;
    Ok(agg.features)
}

/// Test-split metrics of the trained model.
pub fn train_feedback_cmd(args: &TrainFeedbackArgs) -> Result<ClassifierEval, CliError> {
    const STAGE: &str = "train-feedback";
    let cfg = load_config(STAGE, args.config.as_deref())?;
    let seed = args.seed.unwrap_or(cfg.seed);
    let settings = cfg.feedback.with_seed(seed).with_kind(args.model);
    let mut prov = Provenance::new(STAGE, Some(seed))
        .input(&args.features)?
        .input(&args.gold)?;
    if let Some(p) = &args.config {
        prov = prov.input(p)?;
    }
    let rows = join_gold(
        &load_features(STAGE, &args.features)?,
        &load_labels(STAGE, &args.gold)?,
    );
    if rows.is_empty() {
        return fail(STAGE, "EmptyDataset: no feature row has a gold label");
    }
    let split = split_rows(&rows, seed);
    let mut model = train_feedback(&settings, &Samples::from_rows(&split.train)).at(STAGE)?;
    model.metadata = prov.metadata();
    write_file(STAGE, &args.out, &model.to_json())?;
    let mut evals = Vec::new();
    for (name, part) in [
        ("train", &split.train),
        ("dev", &split.dev),
        ("test", &split.test),
    ] {
        evals.push((name, evaluate_feedback(&model, part).at(STAGE)?));
    }
    prov.emit(args.report.as_deref(), &eval_tsv(&evals))?;
    Ok(evals[2].1)
}

fn select_split(rows: Vec<FeedbackRow>, split: SplitName, seed: u64) -> Vec<FeedbackRow> {
    let parts = split_rows(&rows, seed);
    match split {
        SplitName::All => rows,
        SplitName::Train => parts.train,
        SplitName::Dev => parts.dev,
        SplitName::Test => parts.test,
    }
}

pub fn eval_feedback_cmd(args: &EvalFeedbackArgs) -> Result<ClassifierEval, CliError> {
    const STAGE: &str = "eval-feedback";
    let model = load_feedback_model(STAGE, &args.model)?;
    let seed = args.seed.unwrap_or(model.training.seed);
    let prov = Provenance::new(STAGE, Some(seed))
        .input(&args.model)?
        .input(&args.features)?
        .input(&args.gold)?;
    let rows = join_gold(
        &load_features(STAGE, &args.features)?,
        &load_labels(STAGE, &args.gold)?,
    );
    let rows = select_split(rows, args.split, seed);
    let eval = evaluate_feedback(&model, &rows).at(STAGE)?;
    let name = format!("{:?}", args.split).to_lowercase();
    prov.emit(args.out.as_deref(), &eval_tsv(&[(&name, eval)]))?;
    Ok(eval)
}

pub fn pr_curve_cmd(args: &PrCurveArgs) -> Result<PrSummary, CliError> {
    const STAGE: &str = "pr-curve";
    let mut prov = Provenance::new(STAGE, None);
    if let Some(m) = &args.model {
        prov = prov.input(m)?;
    }
    prov = prov.input(&args.features)?.input(&args.gold)?;
    let features = load_features(STAGE, &args.features)?;
    let labels = load_labels(STAGE, &args.gold)?;
    let rows = join_gold(&features, &labels);
    let items: Vec<ScoredLabel> = match (&args.model, args.feature) {
        (Some(path), _) => {
            workflow::scored_rows(&load_feedback_model(STAGE, path)?, &rows).at(STAGE)?
        }
        (None, Some(i)) if i < FEATURE_NAMES.len() => rows
            .iter()
            .map(|r| ScoredLabel::new(r.features.values[i], r.label))
            .collect(),
        (None, Some(i)) => return fail(STAGE, format!("BadFeatureIndex: {i}")),
        (None, None) => return fail(STAGE, "either --model or --feature is required"),
    };
    let curve = metrics::pr_curve(&items).at(STAGE)?;
    prov.write(&args.out, &curve.to_tsv())?;
    Ok(PrSummary {
        recall_at_positive_ctr: curve.point_above(0.0).map_or(0.0, |p| p.recall),
        max_precision: curve.max_precision(),
    })
}

pub fn importance_cmd(args: &ImportanceArgs) -> Result<(), CliError> {
    const STAGE: &str = "importance";
    let prov = Provenance::new(STAGE, None).input(&args.model)?;
    let model = load_feedback_model(STAGE, &args.model)?;
    let ranked = feature_importance(&model).at(STAGE)?;
    let names = model.feature_names();
    let mut body = String::from("#rank\tfeature\tindex\tweight\n");
    for (rank, (i, w)) in ranked.iter().enumerate() {
        body.push_str(&format!("{}\t{}\t{i}\t{w:.6}\n", rank + 1, names[*i]));
    }
    prov.emit(args.out.as_deref(), &body)
}

pub fn rules_cmd(args: &RulesArgs) -> Result<(), CliError> {
    const STAGE: &str = "rules";
    let prov = Provenance::new(STAGE, None).input(&args.model)?;
    let model = load_feedback_model(STAGE, &args.model)?;
    let rules = extract_rules(&model, args.min_purity).at(STAGE)?;
    let mut body = format!("# min_purity={}\n", args.min_purity);
    for r in &rules {
        body.push_str(&format!("{r}\n"));
    }
    prov.emit(args.out.as_deref(), &body)
}

pub fn weak_label_cmd(args: &WeakLabelArgs) -> Result<WeakReport, CliError> {
    const STAGE: &str = "weak-label";
    let mut prov = Provenance::new(STAGE, Some(args.seed))
        .input(&args.model)?
        .input(&args.features)?;
    let mut exclude = HashSet::new();
    for path in &args.exclude {
        prov = prov.input(path)?;
        exclude.extend(load_labels(STAGE, path)?.into_iter().map(|(id, _)| id));
    }
    let model = load_feedback_model(STAGE, &args.model)?;
    let features = load_features(STAGE, &args.features)?;
    let cfg = WeakLabelConfig {
        tau_high: args.tau_high,
        tau_low: args.tau_low,
        balance: !args.no_balance,
        seed: args.seed,
    };
    let scores = score_features(&model, &features, &exclude).at(STAGE)?;
    let out = weak_label(&scores, &cfg).at(STAGE)?;
    let settings = format!(
        "# tau_high={} tau_low={} balance={}\n",
        cfg.tau_high, cfg.tau_low, cfg.balance
    );
    prov.write(
        &args.out,
        &format!("{settings}{}", write_labels_tsv(&out.labels)),
    )?;
    if let Some(p) = &args.discards {
        prov.write(
            p,
            &format!("{settings}{}", write_discards_tsv(&out.discarded)),
        )?;
    }
    if let (Some(texts_path), Some(pairs_out)) = (&args.texts, &args.pairs_out) {
        let texts: HashMap<String, (String, String)> =
            read_texts_tsv(&read_file(STAGE, texts_path)?)
                .at(STAGE)?
                .into_iter()
                .map(|(id, q, p)| (id, (q, p)))
                .collect();
        let limit = args.limit.unwrap_or(usize::MAX).min(out.labels.len());
        let records =
            weak_pair_records(&out.labels[..limit], args.pairs_target, &texts).at(STAGE)?;
        prov.clone()
            .input(texts_path)?
            .write(pairs_out, &write_pairs_tsv(&records))?;
    }
    Ok(WeakReport {
        n_scored: scores.len(),
        n_discarded: out.discarded.len(),
        labels: out.labels,
    })
}

fn train_config(args: &TrainQaArgs, cfg: &PipelineConfig) -> TrainConfig {
    let mut t = match args.stage {
        StageArg::Pretrain => cfg.qa.pretrain,
        StageArg::Finetune => cfg.qa.finetune,
    };
    if let Some(s) = args.seed {
        t.seed = s;
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.l2 {
        t.l2 = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.loss {
        t.loss = v;
    }
    t
}

pub fn train_qa_cmd(args: &TrainQaArgs) -> Result<RelevanceModel, CliError> {
    const STAGE: &str = "train-qa";
    let cfg = load_config(STAGE, args.config.as_deref())?;
    let tc = train_config(args, &cfg);
    let mut prov = Provenance::new(STAGE, Some(tc.seed)).input(&args.pairs)?;
    if let Some(p) = &args.config {
        prov = prov.input(p)?;
    }
    let start = match &args.model_in {
        Some(p) => {
            prov = prov.input(p)?;
            load_qa_model(STAGE, p)?
        }
        None => RelevanceModel::new(),
    };
    let records = read_pairs_tsv(&read_file(STAGE, &args.pairs)?).at(STAGE)?;
    let examples = examples_from_records(&records).at(STAGE)?;
    let stage = match args.stage {
        StageArg::Pretrain => TrainStage::Pretrain,
        StageArg::Finetune => TrainStage::Finetune,
    };
    let mut model = qa::train(&start, &examples, &tc, stage).at(STAGE)?;
    model.metadata = prov.metadata();
    model.metadata.insert(
        "train".to_string(),
        format!(
            "epochs={} learning_rate={} l2={} batch_size={} loss={}",
            tc.epochs, tc.learning_rate, tc.l2, tc.batch_size, tc.loss
        ),
    );
    write_file(STAGE, &args.model_out, &model.to_json())?;
    Ok(model)
}

pub fn eval_qa_cmd(args: &EvalQaArgs) -> Result<QaEval, CliError> {
    const STAGE: &str = "eval-qa";
    let prov = Provenance::new(STAGE, None)
        .input(&args.model)?
        .input(&args.pairs)?;
    let model = load_qa_model(STAGE, &args.model)?;
    let records = read_pairs_tsv(&read_file(STAGE, &args.pairs)?).at(STAGE)?;
    let pairs = eval_pairs_from_records(&records).at(STAGE)?;
    let eval = qa::evaluate(&model, &pairs).at(STAGE)?;
    let body = format!(
        "#metric\tvalue\nn\t{}\nauc\t{:.6}\nacc\t{:.6}\n",
        pairs.len(),
        eval.auc,
        eval.acc
    );
    prov.emit(args.out.as_deref(), &body)?;
    Ok(eval)
}

/// Sizes of the drawn and remaining sets.
pub fn split_pairs_cmd(args: &SplitPairsArgs) -> Result<(usize, usize), CliError> {
    const STAGE: &str = "split-pairs";
    let prov = Provenance::new(STAGE, Some(args.seed)).input(&args.pairs)?;
    let records = read_pairs_tsv(&read_file(STAGE, &args.pairs)?).at(STAGE)?;
    let (drawn, rest) = workflow::split_pairs(&records, args.n, args.seed);
    prov.write(&args.out_drawn, &write_pairs_tsv(&drawn))?;
    prov.write(&args.out_rest, &write_pairs_tsv(&rest))?;
    Ok((drawn.len(), rest.len()))
}

fn kind_file_name(kind: FeedbackKind) -> String {
    kind.to_string().replace(':', "-")
}

/// Runs every stage through files under `out_dir` and returns the report
/// also written to `summary.tsv`.
pub fn pipeline(args: &PipelineArgs) -> Result<ExperimentReport, CliError> {
    const STAGE: &str = "pipeline";
    let mut cfg = load_config(STAGE, args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.set_seed(seed);
    }
    let out = &args.out_dir;
    let conf_path = out.join("config.conf");
    write_file(STAGE, &conf_path, &cfg.to_conf())?;
    let conf = Some(conf_path.clone());

    let sim_dir = out.join("sim");
    simulate(&SimulateArgs {
        out_dir: sim_dir.clone(),
        config: conf.clone(),
        n_pairs: None,
        n_mined: None,
        seed: None,
    })?;
    let features_path = out.join("features.tsv");
    let features = aggregate_log(&AggregateArgs {
        log: sim_dir.join("log.jsonl"),
        out: features_path.clone(),
        sat_ms: cfg.agg_sat_ms,
        min_impressions: cfg.min_impressions,
        terminal_click_policy: cfg.terminal_click_policy,
    })?;

    let gold_path = sim_dir.join("gold.tsv");
    let truth_path = sim_dir.join("truth.tsv");
    let fb_dir = out.join("feedback");
    let model_path = |k: FeedbackKind| fb_dir.join(format!("{}.json", kind_file_name(k)));
    let answer_ctr = FeedbackKind::Baseline(crate::features::ANSWER_CTR);
    let mut kinds = vec![cfg.feedback.kind];
    for k in [FeedbackKind::Gbdt, FeedbackKind::Dt, answer_ctr] {
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    let mut test_eval = BTreeMap::new();
    for &kind in &kinds {
        let eval = train_feedback_cmd(&TrainFeedbackArgs {
            features: features_path.clone(),
            gold: gold_path.clone(),
            model: kind,
            out: model_path(kind),
            report: Some(fb_dir.join(format!("{}.report.tsv", kind_file_name(kind)))),
            config: conf.clone(),
            seed: None,
        })?;
        test_eval.insert(kind.to_string(), eval);
    }
    importance_cmd(&ImportanceArgs {
        model: model_path(FeedbackKind::Gbdt),
        out: Some(fb_dir.join("gbdt.importance.tsv")),
    })?;
    rules_cmd(&RulesArgs {
        model: model_path(FeedbackKind::Dt),
        min_purity: 0.9,
        out: Some(fb_dir.join("dt.rules.txt")),
    })?;
    let pr = pr_curve_cmd(&PrCurveArgs {
        model: None,
        feature: Some(crate::features::ANSWER_CTR),
        features: features_path.clone(),
        gold: truth_path.clone(),
        out: out.join("pr_answer_ctr.tsv"),
    })?;

    let weak_dir = out.join("weak");
    let weak_pairs = weak_dir.join("pairs.tsv");
    let weak = weak_label_cmd(&WeakLabelArgs {
        model: model_path(cfg.feedback.kind),
        features: features_path.clone(),
        out: weak_dir.join("labels.tsv"),
        exclude: vec![gold_path.clone()],
        tau_high: cfg.weak.label.tau_high,
        tau_low: cfg.weak.label.tau_low,
        no_balance: !cfg.weak.label.balance,
        seed: cfg.weak.label.seed,
        discards: Some(weak_dir.join("discards.tsv")),
        texts: Some(sim_dir.join("texts.tsv")),
        pairs_out: Some(weak_pairs.clone()),
        pairs_target: cfg.weak.target,
        limit: Some(cfg.weak.limit),
    })?;
    let truth = load_labels(STAGE, &truth_path)?;
    let weak_accuracy = weak.accuracy(&truth, cfg.weak.limit);

    let qa_dir = out.join("qa");
    let fine_pairs = qa_dir.join("finetune_pairs.tsv");
    let test_pairs = qa_dir.join("test_pairs.tsv");
    let (n_finetune, n_test) = split_pairs_cmd(&SplitPairsArgs {
        pairs: sim_dir.join("gold_pairs.tsv"),
        n: cfg.qa.n_finetune,
        seed: cfg.seed,
        out_drawn: fine_pairs.clone(),
        out_rest: test_pairs.clone(),
    })?;
    let train_qa = |pairs: &Path, stage: StageArg, model_in: Option<PathBuf>, name: &str| {
        train_qa_cmd(&TrainQaArgs {
            pairs: pairs.to_path_buf(),
            stage,
            model_in,
            model_out: qa_dir.join(format!("{name}.json")),
            config: conf.clone(),
            seed: None,
            epochs: None,
            learning_rate: None,
            l2: None,
            batch_size: None,
            loss: None,
        })
        .map(|_| qa_dir.join(format!("{name}.json")))
    };
    let eval_qa = |model: PathBuf, name: &str| {
        eval_qa_cmd(&EvalQaArgs {
            model,
            pairs: test_pairs.clone(),
            out: Some(qa_dir.join(format!("{name}.eval.tsv"))),
        })
    };
    let finetune_only = eval_qa(
        train_qa(&fine_pairs, StageArg::Finetune, None, "finetune_only")?,
        "finetune_only",
    )?;
    let n_weak = weak.labels.len().min(cfg.weak.limit);
    let (pretrain_only, two_stage) = if n_weak == 0 {
        (None, None)
    } else {
        let pre = train_qa(&weak_pairs, StageArg::Pretrain, None, "pretrained")?;
        let both = train_qa(
            &fine_pairs,
            StageArg::Finetune,
            Some(pre.clone()),
            "two_stage",
        )?;
        (
            Some(eval_qa(pre, "pretrained")?),
            Some(eval_qa(both, "two_stage")?),
        )
    };

    let auc_of = |k: FeedbackKind| test_eval[&k.to_string()];
    let report = ExperimentReport {
        seed: cfg.seed,
        n_judged: cfg.sim.n_pairs,
        n_mined: cfg.n_mined,
        n_features: features.len(),
        feedback_kind: cfg.feedback.kind,
        feedback_test: auc_of(cfg.feedback.kind),
        gbdt_auc: auc_of(FeedbackKind::Gbdt).auc,
        dt_auc: auc_of(FeedbackKind::Dt).auc,
        answer_ctr_auc: auc_of(answer_ctr).auc,
        pr,
        n_scored: weak.n_scored,
        n_weak_labels: weak.labels.len(),
        n_weak_discarded: weak.n_discarded,
        weak_accuracy,
        qa: QaComparison {
            finetune_only,
            pretrain_only,
            two_stage,
            n_weak,
            n_finetune,
            n_test,
        },
    };
    Provenance::new(STAGE, Some(cfg.seed))
        .input(&conf_path)?
        .write(&out.join("summary.tsv"), &report.to_summary_tsv())?;
    Ok(report)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Aggregate(a) => aggregate_log(&a).map(drop),
        Command::TrainFeedback(a) => train_feedback_cmd(&a).map(drop),
        Command::EvalFeedback(a) => eval_feedback_cmd(&a).map(drop),
        Command::PrCurve(a) => pr_curve_cmd(&a).map(drop),
        Command::Importance(a) => importance_cmd(&a),
        Command::Rules(a) => rules_cmd(&a),
        Command::WeakLabel(a) => weak_label_cmd(&a).map(drop),
        Command::TrainQa(a) => train_qa_cmd(&a).map(drop),
        Command::EvalQa(a) => eval_qa_cmd(&a).map(drop),
        Command::SplitPairs(a) => split_pairs_cmd(&a).map(drop),
        Command::Pipeline(a) => pipeline(&a).map(drop),
    }
}
