//! L2-regularized logistic regression on z-scored features.

use serde::{Deserialize, Serialize};

use super::tree::Row;
use crate::features::N_FEATURES;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation per feature; a constant
    /// feature gets a unit scale.
    pub fn fit(x: &[Row]) -> Self {
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; N_FEATURES];
        for r in x {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; N_FEATURES];
        for r in x {
            for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Standardizer { mean, std }
    }

    pub fn apply(&self, x: &Row) -> Row {
        let mut z = [0.0; N_FEATURES];
        for (i, slot) in z.iter_mut().enumerate() {
            *slot = (x[i] - self.mean[i]) / self.std[i];
        }
        z
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Gradient of [`logistic_objective`].
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticGradient {
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Mean logistic loss plus `l2 / 2 * |w|^2` (bias unpenalized), and its gradient.
pub fn logistic_objective(
    weights: &[f64],
    bias: f64,
    z: &[Row],
    y: &[bool],
    l2: f64,
) -> (f64, LogisticGradient) {
    let n = z.len() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = 0.0;
    for (row, &label) in z.iter().zip(y) {
        let margin: f64 = bias + row.iter().zip(weights).map(|(a, b)| a * b).sum::<f64>();
        // -log p(label) = softplus(-m) for positives, softplus(m) for negatives
        loss += if label {
            softplus(-margin)
        } else {
            softplus(margin)
        };
        let residual = sigmoid(margin) - if label { 1.0 } else { 0.0 };
        for (g, v) in gw.iter_mut().zip(row) {
            *g += residual * v;
        }
        gb += residual;
    }
    loss /= n;
    let penalty: f64 = weights.iter().map(|w| w * w).sum::<f64>() * l2 / 2.0;
    for (g, w) in gw.iter_mut().zip(weights) {
        *g = *g / n + l2 * w;
    }
    (
        loss + penalty,
        LogisticGradient {
            weights: gw,
            bias: gb / n,
        },
    )
}

pub(crate) struct LrFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub standardizer: Standardizer,
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent from zero weights.
pub(crate) fn fit(x: &[Row], y: &[bool], epochs: usize, learning_rate: f64, l2: f64) -> LrFit {
    let standardizer = Standardizer::fit(x);
    let z: Vec<Row> = x.iter().map(|r| standardizer.apply(r)).collect();
    let mut weights = vec![0.0; N_FEATURES];
    let mut bias = 0.0;
    let mut loss_trace = Vec::with_capacity(epochs + 1);
    for _ in 0..epochs {
        let (loss, grad) = logistic_objective(&weights, bias, &z, y, l2);
        loss_trace.push(loss);
        for (w, g) in weights.iter_mut().zip(&grad.weights) {
            *w -= learning_rate * g;
        }
        bias -= learning_rate * grad.bias;
    }
    loss_trace.push(logistic_objective(&weights, bias, &z, y, l2).0);
    LrFit {
        weights,
        bias,
        standardizer,
        loss_trace,
    }
}
