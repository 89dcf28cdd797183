//! Relevance-conditioned synthetic data: question-passage pairs, search
//! sessions whose behavior depends on the hidden relevance, and noisy
//! majority-voted judge labels.
//!
//! Every pair draws from its own ChaCha8 stream derived from the master
//! seed, the stream's purpose and the pair index, so generation can run in
//! parallel and still be reproducible.

use std::fmt::Write as _;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson, Zipf};
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{Aggregated, AggregationConfig, Aggregator};
use crate::qa::QaPair;
use crate::session::{extract_impressions, ClickTarget, ExtractConfig, Session, SessionEvent};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("EvenPanel: majority vote needs an odd number of judges, got {0}")]
    EvenPanel(usize),
    #[error("invalid simulator config: {0}")]
    InvalidConfig(String),
}

/// Minimum share of question tokens placed in a relevant passage.
pub const RELEVANT_OVERLAP: f64 = 0.7;
/// Maximum share of question tokens deliberately placed in an irrelevant passage.
pub const IRRELEVANT_OVERLAP: f64 = 0.2;
/// Delay between a query and its result page.
pub const SERP_DELAY_MS: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

impl LogNormalParams {
    /// Median `median_ms` milliseconds.
    pub fn with_median(median_ms: f64, sigma: f64) -> Self {
        LogNormalParams {
            mu: median_ms.ln(),
            sigma,
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        let d = LogNormal::new(self.mu, self.sigma).expect("validated log-normal");
        (d.sample(rng).round() as u64).max(1)
    }
}

/// Behavior of users shown a pair of one relevance class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassProfile {
    pub p_no_click: f64,
    pub p_answer_only: f64,
    pub p_ot_only: f64,
    pub p_both: f64,
    /// Only answer-expansion or related-query clicks.
    pub p_other_only: f64,
    pub p_reformulate_given_no_sat: f64,
    pub p_related_click: f64,
    pub p_answer_expansion: f64,
    pub serp_dwell: LogNormalParams,
    pub source_dwell: LogNormalParams,
    /// Gamma shape of a per-pair multiplier (mean 1) on the answer-click
    /// probabilities; 0 disables it.
    pub answer_click_shape: f64,
}

impl ClassProfile {
    fn pattern_probs(&self) -> [f64; 5] {
        [
            self.p_no_click,
            self.p_answer_only,
            self.p_ot_only,
            self.p_both,
            self.p_other_only,
        ]
    }

    fn validate(&self, name: &str) -> Result<(), SimError> {
        let probs = [
            self.p_no_click,
            self.p_answer_only,
            self.p_ot_only,
            self.p_both,
            self.p_other_only,
            self.p_reformulate_given_no_sat,
            self.p_related_click,
            self.p_answer_expansion,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(SimError::InvalidConfig(format!(
                "{name}: probabilities must lie in [0, 1]"
            )));
        }
        let total: f64 = self.pattern_probs().iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(SimError::InvalidConfig(format!(
                "{name}: click-pattern probabilities sum to {total}, not 1"
            )));
        }
        for d in [self.serp_dwell, self.source_dwell] {
            if !d.mu.is_finite() || !(d.sigma.is_finite() && d.sigma >= 0.0) {
                return Err(SimError::InvalidConfig(format!(
                    "{name}: bad dwell parameters"
                )));
            }
        }
        if !(self.answer_click_shape.is_finite() && self.answer_click_shape >= 0.0) {
            return Err(SimError::InvalidConfig(format!(
                "{name}: answer_click_shape must be non-negative"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BehaviorProfile {
    pub relevant: ClassProfile,
    pub irrelevant: ClassProfile,
    /// Probability that an impression follows the opposite class's profile.
    pub behavior_noise: f64,
}

impl Default for BehaviorProfile {
    /// Calibrated so that answer clicks are rare and only weakly tied to
    /// relevance, while no-click, outside-click and dwell behavior carry
    /// most of the signal.
    fn default() -> Self {
        BehaviorProfile {
            relevant: ClassProfile {
                p_no_click: 0.62,
                p_answer_only: 0.006,
                p_ot_only: 0.20,
                p_both: 0.002,
                p_other_only: 0.172,
                p_reformulate_given_no_sat: 0.25,
                p_related_click: 0.05,
                p_answer_expansion: 0.15,
                serp_dwell: LogNormalParams::with_median(12_000.0, 0.8),
                source_dwell: LogNormalParams::with_median(40_000.0, 0.8),
                answer_click_shape: 1.0,
            },
            irrelevant: ClassProfile {
                p_no_click: 0.35,
                p_answer_only: 0.012,
                p_ot_only: 0.45,
                p_both: 0.006,
                p_other_only: 0.182,
                p_reformulate_given_no_sat: 0.6,
                p_related_click: 0.12,
                p_answer_expansion: 0.05,
                serp_dwell: LogNormalParams::with_median(6_000.0, 0.8),
                source_dwell: LogNormalParams::with_median(8_000.0, 0.8),
                answer_click_shape: 0.25,
            },
            behavior_noise: 0.25,
        }
    }
}

impl BehaviorProfile {
    /// Classes that differ chiefly in SERP dwell and outside-answer-only
    /// clicks; the no-click share is held equal.
    pub fn dwell_and_outside() -> Self {
        let base = ClassProfile {
            p_no_click: 0.30,
            p_answer_only: 0.05,
            p_ot_only: 0.15,
            p_both: 0.30,
            p_other_only: 0.20,
            p_reformulate_given_no_sat: 1.0,
            p_related_click: 0.08,
            p_answer_expansion: 0.08,
            serp_dwell: LogNormalParams::with_median(12_000.0, 0.8),
            source_dwell: LogNormalParams::with_median(3_000.0, 0.5),
            answer_click_shape: 0.0,
        };
        BehaviorProfile {
            relevant: base,
            irrelevant: ClassProfile {
                p_ot_only: 0.35,
                p_other_only: 0.0,
                serp_dwell: LogNormalParams::with_median(8_000.0, 0.8),
                ..base
            },
            behavior_noise: 0.25,
        }
    }

    /// Classes that differ only in where they click: the answer source for
    /// relevant pairs, outside links for irrelevant ones. Nobody clicks both.
    pub fn answer_vs_outside() -> Self {
        let relevant = ClassProfile {
            p_no_click: 0.40,
            p_answer_only: 0.35,
            p_ot_only: 0.10,
            p_both: 0.0,
            p_other_only: 0.15,
            p_reformulate_given_no_sat: 0.5,
            p_related_click: 0.10,
            p_answer_expansion: 0.10,
            serp_dwell: LogNormalParams::with_median(15_000.0, 0.8),
            source_dwell: LogNormalParams::with_median(20_000.0, 0.8),
            answer_click_shape: 0.0,
        };
        BehaviorProfile {
            relevant,
            irrelevant: ClassProfile {
                p_answer_only: 0.10,
                p_ot_only: 0.35,
                ..relevant
            },
            behavior_noise: 0.25,
        }
    }

    pub fn for_class(&self, relevant: bool) -> &ClassProfile {
        if relevant {
            &self.relevant
        } else {
            &self.irrelevant
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        self.relevant.validate("relevant profile")?;
        self.irrelevant.validate("irrelevant profile")?;
        if !(0.0..=1.0).contains(&self.behavior_noise) {
            return Err(SimError::InvalidConfig(
                "behavior_noise must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub n_pairs: usize,
    pub positive_rate: f64,
    /// Poisson mean of the impressions per pair.
    pub impressions_per_pair: f64,
    pub judge_error_rate: f64,
    pub n_judges: usize,
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub question_len: (usize, usize),
    pub passage_len: (usize, usize),
    /// Dwell at which a simulated user counts a click as satisfying.
    pub sat_threshold_ms: u64,
    pub seed: u64,
    pub profile: BehaviorProfile,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_pairs: 5_000,
            positive_rate: 0.5,
            impressions_per_pair: 50.0,
            judge_error_rate: 0.1,
            n_judges: 3,
            vocab_size: 5_000,
            zipf_exponent: 1.8,
            question_len: (3, 8),
            passage_len: (120, 240),
            sat_threshold_ms: 30_000,
            seed: 7,
            profile: BehaviorProfile::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad("positive_rate must lie in [0, 1]");
        }
        if !(self.impressions_per_pair.is_finite() && self.impressions_per_pair > 0.0) {
            return bad("impressions_per_pair must be positive");
        }
        if !(0.0..0.5).contains(&self.judge_error_rate) {
            return bad("judge_error_rate must lie in [0, 0.5)");
        }
        if self.n_judges.is_multiple_of(2) {
            return Err(SimError::EvenPanel(self.n_judges));
        }
        let (qmin, qmax) = self.question_len;
        let (pmin, pmax) = self.passage_len;
        if qmin == 0 || qmin > qmax || pmin == 0 || pmin > pmax {
            return bad("length ranges must be non-empty and positive");
        }
        if self.vocab_size < 2 * qmax {
            return bad("vocab_size too small for the question length");
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be non-negative");
        }
        if self.sat_threshold_ms == 0 {
            return bad("sat_threshold_ms must be positive");
        }
        self.profile.validate()
    }
}

/// A generated pair with its hidden relevance.
#[derive(Debug, Clone, PartialEq)]
pub struct SimPair {
    pub pair: QaPair,
    pub truth: bool,
}

impl SimPair {
    pub fn question_text(&self) -> String {
        self.pair.question.join(" ")
    }

    pub fn passage_text(&self) -> String {
        self.pair.passage.join(" ")
    }
}

mod stream {
    pub const TEXT: u64 = 0x7465_7874;
    pub const SESSIONS: u64 = 0x7365_7373;
    pub const JUDGES: u64 = 0x6a75_6467;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn pair_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let s = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index as u64);
    ChaCha8Rng::seed_from_u64(s)
}

pub fn qp_id(index: usize) -> String {
    format!("qp{index:06}")
}

fn token(rank: usize) -> String {
    format!("w{rank}")
}

fn gen_pair<R: Rng>(cfg: &SimConfig, index: usize, rng: &mut R) -> SimPair {
    let truth = rng.random_bool(cfg.positive_rate);
    let zipf = Zipf::new(cfg.vocab_size as f64, cfg.zipf_exponent).expect("validated zipf");
    let draw = |rng: &mut R| token(zipf.sample(rng) as usize);

    let q_len = rng.random_range(cfg.question_len.0..=cfg.question_len.1);
    let mut question: Vec<String> = Vec::with_capacity(q_len);
    while question.len() < q_len {
        let t = draw(rng);
        if !question.contains(&t) {
            question.push(t);
        }
    }

    let n_embed = if truth {
        (RELEVANT_OVERLAP * q_len as f64).ceil() as usize
    } else {
        (IRRELEVANT_OVERLAP * q_len as f64).floor() as usize
    };
    let mut chosen: Vec<usize> = (0..q_len).collect();
    chosen.shuffle(rng);
    chosen.truncate(n_embed);
    chosen.sort_unstable();
    let block: Vec<String> = chosen.iter().map(|&i| question[i].clone()).collect();

    let p_len = rng
        .random_range(cfg.passage_len.0..=cfg.passage_len.1)
        .max(n_embed);
    let n_fill = p_len - n_embed;
    let fillers: Vec<String> = (0..n_fill).map(|_| draw(rng)).collect();
    let at = rng.random_range(0..=n_fill);
    let mut passage = Vec::with_capacity(p_len);
    passage.extend_from_slice(&fillers[..at]);
    passage.extend(block);
    passage.extend_from_slice(&fillers[at..]);

    SimPair {
        pair: QaPair {
            qp_id: qp_id(index),
            question,
            passage,
            label: None,
        },
        truth,
    }
}

/// Synthetic pairs `qp000000, qp000001, ...`: relevant passages contain at
/// least 70% of the question tokens as one block in question order,
/// irrelevant ones at most 20%; the rest is Zipf-distributed filler, which
/// may repeat frequent question tokens by chance.
pub fn gen_pairs(cfg: &SimConfig) -> Result<Vec<SimPair>, SimError> {
    cfg.validate()?;
    Ok((0..cfg.n_pairs)
        .into_par_iter()
        .map(|i| gen_pair(cfg, i, &mut pair_rng(cfg.seed, stream::TEXT, i)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pattern {
    NoClick,
    AnswerOnly,
    OtOnly,
    Both,
    OtherOnly,
}

fn sample_pattern<R: Rng>(probs: [f64; 5], rng: &mut R) -> Pattern {
    const ORDER: [Pattern; 5] = [
        Pattern::NoClick,
        Pattern::AnswerOnly,
        Pattern::OtOnly,
        Pattern::Both,
        Pattern::OtherOnly,
    ];
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (p, pattern) in probs.iter().zip(ORDER) {
        acc += p;
        if u < acc {
            return pattern;
        }
    }
    // rounding slack falls to the last pattern with positive mass
    ORDER
        .iter()
        .zip(probs)
        .rev()
        .find(|(_, p)| *p > 0.0)
        .map_or(Pattern::NoClick, |(pattern, _)| *pattern)
}

/// Scales the answer-involving patterns by `multiplier`, moving the
/// difference to or from no-click.
fn scaled_probs(profile: &ClassProfile, multiplier: f64) -> [f64; 5] {
    let [_, ao, ot, both, other] = profile.pattern_probs();
    let room = (1.0 - ot - other).max(0.0);
    let mut answer = (ao + both) * multiplier;
    if answer > room {
        answer = room;
    }
    let (ao, both) = if ao + both > 0.0 {
        (answer * ao / (ao + both), answer * both / (ao + both))
    } else {
        (0.0, 0.0)
    };
    [(1.0 - ot - other - ao - both).max(0.0), ao, ot, both, other]
}

fn gen_session<R: Rng>(
    cfg: &SimConfig,
    session_id: String,
    question: &str,
    qp: &str,
    profile: &ClassProfile,
    probs: [f64; 5],
    rng: &mut R,
) -> Vec<SessionEvent> {
    let mut events = vec![
        SessionEvent::query(session_id.clone(), 0, question),
        SessionEvent::serp(session_id.clone(), SERP_DELAY_MS, qp),
    ];

    let pattern = sample_pattern(probs, rng);
    let mut clicks: Vec<ClickTarget> = match pattern {
        Pattern::NoClick => vec![],
        Pattern::AnswerOnly => vec![ClickTarget::Answer],
        Pattern::OtOnly => vec![ClickTarget::OutsideAnswer],
        Pattern::Both => {
            let mut v = vec![ClickTarget::Answer, ClickTarget::OutsideAnswer];
            v.shuffle(rng);
            v
        }
        Pattern::OtherOnly => {
            let total = profile.p_answer_expansion + profile.p_related_click;
            let p_exp = if total > 0.0 {
                profile.p_answer_expansion / total
            } else {
                0.5
            };
            if rng.random_bool(p_exp) {
                vec![ClickTarget::AnswerExpansion]
            } else {
                vec![ClickTarget::Related]
            }
        }
    };
    if matches!(
        pattern,
        Pattern::AnswerOnly | Pattern::OtOnly | Pattern::Both
    ) {
        if rng.random_bool(profile.p_answer_expansion) {
            clicks.insert(0, ClickTarget::AnswerExpansion);
        }
        if rng.random_bool(profile.p_related_click) {
            clicks.push(ClickTarget::Related);
        }
    }

    let mut t = SERP_DELAY_MS + profile.serp_dwell.sample(rng);
    let mut satisfied = false;
    for target in clicks {
        events.push(SessionEvent::click(session_id.clone(), t, target));
        let dwell = match target {
            ClickTarget::Answer | ClickTarget::OutsideAnswer => {
                let d = profile.source_dwell.sample(rng);
                satisfied |= d >= cfg.sat_threshold_ms;
                d
            }
            ClickTarget::AnswerExpansion | ClickTarget::Related => profile.serp_dwell.sample(rng),
        };
        t += dwell;
    }
    if !satisfied && rng.random_bool(profile.p_reformulate_given_no_sat) {
        events.push(SessionEvent::query(
            session_id,
            t,
            format!("{question} more"),
        ));
    }
    events
}

/// The single-impression sessions of pair `index`: session ids
/// `<qp_id>-<k>`, a Poisson number of them.
pub fn gen_pair_sessions(cfg: &SimConfig, index: usize, pair: &SimPair) -> Vec<Session> {
    let mut rng = pair_rng(cfg.seed, stream::SESSIONS, index);
    let profile = &cfg.profile;
    let own = profile.for_class(pair.truth);
    let multiplier = if own.answer_click_shape > 0.0 {
        Gamma::new(own.answer_click_shape, 1.0 / own.answer_click_shape)
            .expect("validated shape")
            .sample(&mut rng)
    } else {
        1.0
    };
    let probs_for = |relevant: bool| scaled_probs(profile.for_class(relevant), multiplier);
    let own_probs = probs_for(pair.truth);
    let other_probs = probs_for(!pair.truth);

    let n = Poisson::new(cfg.impressions_per_pair)
        .expect("validated mean")
        .sample(&mut rng) as usize;
    let question = pair.question_text();
    (0..n)
        .map(|k| {
            let flipped = rng.random_bool(profile.behavior_noise);
            let class = pair.truth != flipped;
            let probs = if flipped { other_probs } else { own_probs };
            let id = format!("{}-{k}", pair.pair.qp_id);
            let events = gen_session(
                cfg,
                id.clone(),
                &question,
                &pair.pair.qp_id,
                profile.for_class(class),
                probs,
                &mut rng,
            );
            Session::new(id, events).expect("generated sessions start with a query")
        })
        .collect()
}

/// Event log lines for all pairs, ordered by pair then impression.
pub fn gen_sessions(pairs: &[SimPair], cfg: &SimConfig) -> Result<Vec<String>, SimError> {
    let mut buf = Vec::new();
    write_sessions(pairs, cfg, &mut buf).map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(buf)
        .expect("event lines are UTF-8")
        .lines()
        .map(str::to_owned)
        .collect())
}

/// Streams the JSON Lines event log of all pairs to `out`.
pub fn write_sessions<W: Write>(pairs: &[SimPair], cfg: &SimConfig, out: &mut W) -> io::Result<()> {
    cfg.validate()
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    const CHUNK: usize = 256;
    for (c, chunk) in pairs.chunks(CHUNK).enumerate() {
        let texts: Vec<String> = chunk
            .par_iter()
            .enumerate()
            .map(|(j, pair)| {
                let mut s = String::new();
                for session in gen_pair_sessions(cfg, c * CHUNK + j, pair) {
                    for e in session.events() {
                        s.push_str(&e.to_json_line());
                        s.push('\n');
                    }
                }
                s
            })
            .collect();
        for t in texts {
            out.write_all(t.as_bytes())?;
        }
    }
    Ok(())
}

/// Simulates and aggregates without materializing the log; equal to
/// parsing [`gen_sessions`] output and aggregating it.
pub fn simulate_features(
    pairs: &[SimPair],
    cfg: &SimConfig,
    extract: &ExtractConfig,
    agg: &AggregationConfig,
) -> Result<Aggregated, SimError> {
    cfg.validate()?;
    let aggregator = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut a = Aggregator::new();
            for s in gen_pair_sessions(cfg, i, pair) {
                a.extend(&extract_impressions(&s, extract));
            }
            a
        })
        .reduce(Aggregator::new, |mut a, b| {
            a.merge(&b);
            a
        });
    Ok(aggregator.finish(agg))
}

pub fn majority_vote(votes: &[bool]) -> Result<bool, SimError> {
    if votes.len().is_multiple_of(2) {
        return Err(SimError::EvenPanel(votes.len()));
    }
    let yes = votes.iter().filter(|v| **v).count();
    Ok(2 * yes > votes.len())
}

/// Each judge reports the truth flipped with probability `judge_error_rate`;
/// the gold label is their majority.
pub fn gen_gold_labels(
    pairs: &[SimPair],
    cfg: &SimConfig,
) -> Result<Vec<(String, bool)>, SimError> {
    cfg.validate()?;
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = pair_rng(cfg.seed, stream::JUDGES, i);
            let votes: Vec<bool> = (0..cfg.n_judges)
                .map(|_| p.truth != rng.random_bool(cfg.judge_error_rate))
                .collect();
            Ok((p.pair.qp_id.clone(), majority_vote(&votes)?))
        })
        .collect()
}

/// `qp_id  <column>` rows with 0/1 values.
pub fn write_label_tsv(column: &str, labels: &[(String, bool)]) -> String {
    let mut out = format!("#qp_id\t{column}\n");
    for (id, v) in labels {
        writeln!(out, "{id}\t{}", u8::from(*v)).unwrap();
    }
    out
}

/// Reads `qp_id  0|1` rows, skipping `#` lines.
pub fn read_label_tsv(text: &str) -> Result<Vec<(String, bool)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(id), Some(v), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(format!("line {}: expected 2 columns", i + 1));
        };
        let label = match v.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            _ => return Err(format!("line {}: label must be 0 or 1", i + 1)),
        };
        out.push((id.to_string(), label));
    }
    Ok(out)
}
