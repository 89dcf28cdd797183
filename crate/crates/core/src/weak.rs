//! Weak labels from feedback-model scores: two-threshold labelling and
//! class balancing.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum WeakLabelError {
    #[error("InvalidThresholds: need 0 <= tau_low ({low}) <= tau_high ({high}) <= 1")]
    InvalidThresholds { low: f64, high: f64 },
    #[error("score {score} of {qp_id} is outside [0, 1]")]
    ScoreOutOfRange { qp_id: String, score: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakLabelConfig {
    pub tau_high: f64,
    pub tau_low: f64,
    pub balance: bool,
    pub seed: u64,
}

impl Default for WeakLabelConfig {
    fn default() -> Self {
        WeakLabelConfig {
            tau_high: 0.6,
            tau_low: 0.4,
            balance: true,
            seed: 0,
        }
    }
}

impl WeakLabelConfig {
    pub fn validate(&self) -> Result<(), WeakLabelError> {
        let ok = (0.0..=1.0).contains(&self.tau_low)
            && (0.0..=1.0).contains(&self.tau_high)
            && self.tau_low <= self.tau_high;
        if ok {
            Ok(())
        } else {
            Err(WeakLabelError::InvalidThresholds {
                low: self.tau_low,
                high: self.tau_high,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakLabel {
    pub qp_id: String,
    pub score: f64,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Thresholded {
    pub labels: Vec<WeakLabel>,
    /// Pairs whose score fell strictly inside `(tau_low, tau_high)`.
    pub discarded: Vec<(String, f64)>,
}

/// `score >= tau_high` is positive, `score <= tau_low` negative, anything
/// strictly between is discarded. Input order is preserved.
pub fn threshold_labels(
    scores: &[(String, f64)],
    cfg: &WeakLabelConfig,
) -> Result<Thresholded, WeakLabelError> {
    cfg.validate()?;
    let mut out = Thresholded::default();
    for (qp_id, score) in scores {
        let score = *score;
        if !(0.0..=1.0).contains(&score) {
            return Err(WeakLabelError::ScoreOutOfRange {
                qp_id: qp_id.clone(),
                score,
            });
        }
        let label = if score >= cfg.tau_high {
            Some(true)
        } else if score <= cfg.tau_low {
            Some(false)
        } else {
            None
        };
        match label {
            Some(label) => out.labels.push(WeakLabel {
                qp_id: qp_id.clone(),
                score,
                label,
            }),
            None => out.discarded.push((qp_id.clone(), score)),
        }
    }
    Ok(out)
}

/// Downsamples the majority class without replacement so class counts differ
/// by at most one, then shuffles. Deterministic in `seed`.
pub fn balance_sample(labels: &[WeakLabel], seed: u64) -> Vec<WeakLabel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pos, mut neg): (Vec<&WeakLabel>, Vec<&WeakLabel>) =
        labels.iter().partition(|l| l.label);
    let keep = pos.len().min(neg.len());
    for class in [&mut pos, &mut neg] {
        if class.len() > keep {
            class.shuffle(&mut rng);
            class.truncate(keep);
        }
    }
    let mut out: Vec<WeakLabel> = pos.into_iter().chain(neg).cloned().collect();
    out.shuffle(&mut rng);
    out
}

/// Full labelling step: threshold, then optionally balance.
pub fn weak_label(
    scores: &[(String, f64)],
    cfg: &WeakLabelConfig,
) -> Result<Thresholded, WeakLabelError> {
    let mut out = threshold_labels(scores, cfg)?;
    if cfg.balance {
        out.labels = balance_sample(&out.labels, cfg.seed);
    }
    Ok(out)
}

pub fn write_labels_tsv(labels: &[WeakLabel]) -> String {
    let mut out = String::from("#qp_id\tscore\tlabel\n");
    for l in labels {
        writeln!(out, "{}\t{}\t{}", l.qp_id, l.score, u8::from(l.label)).unwrap();
    }
    out
}

pub fn write_discards_tsv(discarded: &[(String, f64)]) -> String {
    let mut out = String::from("#qp_id\tscore\n");
    for (qp_id, score) in discarded {
        writeln!(out, "{qp_id}\t{score}").unwrap();
    }
    out
}
