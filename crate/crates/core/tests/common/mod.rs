//! Independent brute-force oracles and random fixtures shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use qamine::features::{AggregationConfig, BehaviorFeatures, N_FEATURES};
use qamine::metrics::ScoredLabel;
use qamine::session::{
    ClickTarget, EventKind, ExtractConfig, ImpressionSignals, SessionEvent, TerminalClickPolicy,
};
use rand::Rng;

pub const TARGETS: [ClickTarget; 4] = [
    ClickTarget::Answer,
    ClickTarget::AnswerExpansion,
    ClickTarget::OutsideAnswer,
    ClickTarget::Related,
];

/// A valid session with strictly increasing timestamps: a query first, then
/// a random mix of queries, serps and clicks.
pub fn random_session<R: Rng>(rng: &mut R, id: &str, max_len: usize) -> Vec<SessionEvent> {
    let len = rng.random_range(1..=max_len);
    let mut ts = rng.random_range(0..1_000u64);
    let mut events = vec![SessionEvent::query(id, ts, "q")];
    for _ in 1..len {
        ts += rng.random_range(1..60_000u64);
        let e = match rng.random_range(0..10) {
            0 | 1 => SessionEvent::query(id, ts, "q again"),
            2..=4 => SessionEvent::serp(id, ts, format!("qp{}", rng.random_range(0..5))),
            _ => SessionEvent::click(id, ts, TARGETS[rng.random_range(0..4)]),
        };
        events.push(e);
    }
    events
}

pub fn random_sessions<R: Rng>(rng: &mut R, n: usize, max_len: usize) -> Vec<Vec<SessionEvent>> {
    (0..n)
        .map(|i| random_session(rng, &format!("s{i}"), max_len))
        .collect()
}

/// For every serp, scans the whole session for the first later query and
/// classifies each event in between.
pub fn oracle_impressions(events: &[SessionEvent], cfg: &ExtractConfig) -> Vec<ImpressionSignals> {
    let n = events.len();
    let mut out = Vec::new();
    for i in 0..n {
        let EventKind::SerpShown { qp_id } = &events[i].kind else {
            continue;
        };
        let mut next_query = None;
        for (j, e) in events.iter().enumerate() {
            if j > i && e.is_query() && next_query.is_none() {
                next_query = Some(j);
            }
        }
        let end = next_query.unwrap_or(n);
        let dwell = |j: usize| {
            if j + 1 == n {
                match cfg.terminal_click_policy {
                    TerminalClickPolicy::Satisfied => cfg.sat_threshold_ms,
                    TerminalClickPolicy::Unsatisfied => 0,
                }
            } else {
                events[j + 1].ts_ms - events[j].ts_ms
            }
        };
        let clicks: Vec<(usize, ClickTarget)> = (0..n)
            .filter(|&j| j > i && j < end)
            .filter_map(|j| match events[j].kind {
                EventKind::Click(t) => Some((j, t)),
                _ => None,
            })
            .collect();
        let dwells = |t: ClickTarget| -> Vec<u64> {
            clicks
                .iter()
                .filter(|(_, c)| *c == t)
                .map(|&(j, _)| dwell(j))
                .collect()
        };
        let answer = dwells(ClickTarget::Answer);
        let ot = dwells(ClickTarget::OutsideAnswer);
        let has = |t: ClickTarget| clicks.iter().any(|(_, c)| *c == t);
        let answer_click = !answer.is_empty();
        let ot_click = !ot.is_empty();
        let no_click = clicks.is_empty();
        let reformulated = next_query.is_some();
        let end_ts = match next_query {
            Some(q) => events[q].ts_ms,
            None => events[n - 1].ts_ms,
        };
        out.push(ImpressionSignals {
            qp_id: qp_id.clone(),
            answer_click,
            answer_exp_click: has(ClickTarget::AnswerExpansion),
            ot_answer_click: ot_click,
            related_click: has(ClickTarget::Related),
            answer_only: answer_click && !ot_click,
            ot_only: ot_click && !answer_click,
            both_click: answer_click && ot_click,
            no_click,
            answer_sat_click: answer.iter().any(|&d| d >= cfg.sat_threshold_ms),
            ot_sat_click: ot.iter().any(|&d| d >= cfg.sat_threshold_ms),
            reformulated,
            abandoned: no_click && !reformulated,
            serp_dwell_ms: end_ts - events[i].ts_ms,
            source_dwell_ms: answer.iter().copied().max(),
        });
    }
    out
}

/// Recounts every feature from the impressions of each pair.
pub fn recount(
    impressions: &[ImpressionSignals],
    cfg: &AggregationConfig,
) -> Vec<BehaviorFeatures> {
    let mut groups: BTreeMap<&str, Vec<&ImpressionSignals>> = BTreeMap::new();
    for imp in impressions {
        groups.entry(imp.qp_id.as_str()).or_default().push(imp);
    }
    groups
        .into_iter()
        .filter(|(_, g)| g.len() as u64 >= cfg.min_impressions)
        .map(|(id, g)| {
            let n = g.len() as f64;
            let rate = |f: &dyn Fn(&ImpressionSignals) -> bool| {
                g.iter().filter(|i| f(i)).count() as f64 / n
            };
            let clicked: Vec<f64> = g
                .iter()
                .filter(|i| i.answer_click)
                .map(|i| i.source_dwell_ms.unwrap() as f64)
                .collect();
            let source = if clicked.is_empty() {
                0.0
            } else {
                clicked.iter().sum::<f64>() / clicked.len() as f64
            };
            let serp = g.iter().map(|i| i.serp_dwell_ms as f64).sum::<f64>() / n;
            let values: [f64; N_FEATURES] = [
                rate(&|i| i.reformulated),
                rate(&|i| i.answer_click),
                rate(&|i| i.answer_only),
                rate(&|i| i.answer_sat_click),
                rate(&|i| i.answer_exp_click),
                rate(&|i| i.ot_answer_click),
                rate(&|i| i.ot_only),
                rate(&|i| i.ot_sat_click),
                rate(&|i| i.both_click),
                rate(&|i| i.related_click),
                rate(&|i| i.no_click),
                rate(&|i| i.abandoned),
                source,
                serp,
            ];
            BehaviorFeatures {
                qp_id: id.to_string(),
                n_impressions: g.len() as u64,
                values,
            }
        })
        .collect()
}

/// Fraction of (positive, negative) pairs ordered correctly, ties half.
pub fn pairwise_auc(items: &[ScoredLabel]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for p in items.iter().filter(|i| i.label) {
        for q in items.iter().filter(|i| !i.label) {
            total += 1.0;
            if p.score > q.score {
                wins += 1.0;
            } else if p.score == q.score {
                wins += 0.5;
            }
        }
    }
    wins / total
}

/// Area under the ROC polyline through one point per distinct threshold.
pub fn trapezoid_auc(items: &[ScoredLabel]) -> f64 {
    let n_pos = items.iter().filter(|i| i.label).count() as f64;
    let n_neg = items.len() as f64 - n_pos;
    let mut thresholds: Vec<f64> = items.iter().map(|i| i.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut prev = (0.0, 0.0);
    let mut area = 0.0;
    for t in thresholds {
        let tp = items.iter().filter(|i| i.label && i.score >= t).count() as f64;
        let fp = items.iter().filter(|i| !i.label && i.score >= t).count() as f64;
        let cur = (fp / n_neg, tp / n_pos);
        area += (cur.0 - prev.0) * (cur.1 + prev.1) / 2.0;
        prev = cur;
    }
    area
}

/// `(threshold, precision, recall)` for every distinct score, descending.
pub fn brute_pr(items: &[ScoredLabel]) -> Vec<(f64, f64, f64)> {
    let n_pos = items.iter().filter(|i| i.label).count() as f64;
    let mut thresholds: Vec<f64> = items.iter().map(|i| i.score).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let predicted = items.iter().filter(|i| i.score >= t).count() as f64;
            let tp = items.iter().filter(|i| i.label && i.score >= t).count() as f64;
            (t, tp / predicted, tp / n_pos)
        })
        .collect()
}

pub fn ce_oracle(labels: &[f64], outputs: &[f64]) -> f64 {
    let clip = |p: f64| p.clamp(1e-7, 1.0 - 1e-7);
    -labels
        .iter()
        .zip(outputs)
        .map(|(&y, &p)| y * clip(p).ln() + (1.0 - y) * (1.0 - clip(p)).ln())
        .sum::<f64>()
        / labels.len() as f64
}

pub fn mse_oracle(outputs: &[f64], targets: &[f64]) -> f64 {
    outputs
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / outputs.len() as f64
}

/// Random scores on a coarse grid (so ties occur) with both labels present.
pub fn random_scored<R: Rng>(rng: &mut R, n: usize) -> Vec<ScoredLabel> {
    let mut items: Vec<ScoredLabel> = (0..n)
        .map(|_| {
            ScoredLabel::new(
                f64::from(rng.random_range(0..20u32)) / 20.0,
                rng.random_bool(0.4),
            )
        })
        .collect();
    items[0].label = true;
    items[1].label = false;
    items
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}
