//! Aggregation of impression signals into per-pair behavior features.
//!
//! Counters are kept as exact integers per question-passage pair and divided
//! once when the feature vector is emitted, so any sharding of the input
//! merges to bit-identical output.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::session::ImpressionSignals;

pub const N_FEATURES: usize = 14;

/// Version tag of the aggregated feature layout. Models record it.
pub const FEATURE_ORDER_VERSION: &str = "behavior-v1";

pub const FEATURE_NAMES: [&str; N_FEATURES] = [
    "rf_rate",
    "answer_ctr",
    "answer_only_ctr",
    "answer_sat_ctr",
    "answer_exp_rate",
    "ot_answer_ctr",
    "ot_answer_only_ctr",
    "ot_answer_sat_ctr",
    "both_click_ctr",
    "related_click_rate",
    "no_click_rate",
    "abandon_rate",
    "avg_source_page_dwell_ms",
    "avg_serp_dwell_ms",
];

pub const RF_RATE: usize = 0;
pub const ANSWER_CTR: usize = 1;
pub const ANSWER_ONLY_CTR: usize = 2;
pub const ANSWER_SAT_CTR: usize = 3;
pub const ANSWER_EXP_RATE: usize = 4;
pub const OT_ANSWER_CTR: usize = 5;
pub const OT_ANSWER_ONLY_CTR: usize = 6;
pub const OT_ANSWER_SAT_CTR: usize = 7;
pub const BOTH_CLICK_CTR: usize = 8;
pub const RELATED_CLICK_RATE: usize = 9;
pub const NO_CLICK_RATE: usize = 10;
pub const ABANDON_RATE: usize = 11;
pub const AVG_SOURCE_DWELL: usize = 12;
pub const AVG_SERP_DWELL: usize = 13;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("ZeroImpressions: rate over zero impressions")]
    ZeroImpressions,
    #[error("count {count} exceeds {impressions} impressions")]
    CountExceedsImpressions { count: u64, impressions: u64 },
    #[error("malformed feature row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
}

/// Click-through rate, `n_click / n_impression`.
pub fn ctr(n_click: u64, n_impression: u64) -> Result<f64, FeatureError> {
    if n_impression == 0 {
        return Err(FeatureError::ZeroImpressions);
    }
    if n_click > n_impression {
        return Err(FeatureError::CountExceedsImpressions {
            count: n_click,
            impressions: n_impression,
        });
    }
    Ok(n_click as f64 / n_impression as f64)
}

/// Satisfied click-through rate, `n_sat_click / n_impression`.
pub fn sat_ctr(n_sat_click: u64, n_impression: u64) -> Result<f64, FeatureError> {
    ctr(n_sat_click, n_impression)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AggregationConfig {
    pub sat_threshold_ms: u64,
    pub min_impressions: u64,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            sat_threshold_ms: 30_000,
            min_impressions: 10,
        }
    }
}

/// The fixed-order aggregated feature vector of one question-passage pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorFeatures {
    pub qp_id: String,
    pub n_impressions: u64,
    pub values: [f64; N_FEATURES],
}

impl BehaviorFeatures {
    pub fn get(&self, index: usize) -> f64 {
        self.values[index]
    }

    /// Checks the range invariants of an emitted vector.
    pub fn is_valid(&self) -> bool {
        self.n_impressions > 0
            && self.values.iter().all(|v| v.is_finite())
            && self.values[..AVG_SOURCE_DWELL]
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
            && self.values[AVG_SOURCE_DWELL..].iter().all(|v| *v >= 0.0)
    }
}

/// Exact counters behind one pair's features. Merging is a field-wise sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PairCounters {
    pub n_impressions: u64,
    /// One count per rate feature, indices 0..=11.
    pub counts: [u64; 12],
    pub n_answer_clicked: u64,
    pub source_dwell_sum_ms: u128,
    pub serp_dwell_sum_ms: u128,
}

impl PairCounters {
    pub fn add(&mut self, imp: &ImpressionSignals) {
        self.n_impressions += 1;
        let flags = [
            imp.reformulated,
            imp.answer_click,
            imp.answer_only,
            imp.answer_sat_click,
            imp.answer_exp_click,
            imp.ot_answer_click,
            imp.ot_only,
            imp.ot_sat_click,
            imp.both_click,
            imp.related_click,
            imp.no_click,
            imp.abandoned,
        ];
        for (count, flag) in self.counts.iter_mut().zip(flags) {
            *count += u64::from(flag);
        }
        if imp.answer_click {
            self.n_answer_clicked += 1;
            self.source_dwell_sum_ms += u128::from(imp.source_dwell_ms.unwrap_or(0));
        }
        self.serp_dwell_sum_ms += u128::from(imp.serp_dwell_ms);
    }

    pub fn merge(&mut self, other: &PairCounters) {
        self.n_impressions += other.n_impressions;
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
        self.n_answer_clicked += other.n_answer_clicked;
        self.source_dwell_sum_ms += other.source_dwell_sum_ms;
        self.serp_dwell_sum_ms += other.serp_dwell_sum_ms;
    }

    fn emit(&self, qp_id: &str) -> Result<BehaviorFeatures, FeatureError> {
        let n = self.n_impressions;
        let mut values = [0.0; N_FEATURES];
        for (slot, count) in values.iter_mut().zip(self.counts) {
            *slot = ctr(count, n)?;
        }
        values[AVG_SOURCE_DWELL] = if self.n_answer_clicked == 0 {
            0.0
        } else {
            self.source_dwell_sum_ms as f64 / self.n_answer_clicked as f64
        };
        values[AVG_SERP_DWELL] = self.serp_dwell_sum_ms as f64 / n as f64;
        Ok(BehaviorFeatures {
            qp_id: qp_id.to_string(),
            n_impressions: n,
            values,
        })
    }
}

/// Mergeable aggregation state keyed by pair id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Aggregator {
    pairs: BTreeMap<String, PairCounters>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    /// Sorted by pair id.
    pub features: Vec<BehaviorFeatures>,
    pub dropped_pairs: usize,
    pub dropped_impressions: u64,
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, imp: &ImpressionSignals) {
        // avoid allocating the key on the hot path when the pair is known
        if let Some(counters) = self.pairs.get_mut(&imp.qp_id) {
            counters.add(imp);
        } else {
            self.pairs.entry(imp.qp_id.clone()).or_default().add(imp);
        }
    }

    pub fn extend<'a>(&mut self, imps: impl IntoIterator<Item = &'a ImpressionSignals>) {
        for imp in imps {
            self.add(imp);
        }
    }

    pub fn merge(&mut self, other: &Aggregator) {
        for (qp_id, counters) in &other.pairs {
            self.pairs.entry(qp_id.clone()).or_default().merge(counters);
        }
    }

    pub fn counters(&self, qp_id: &str) -> Option<&PairCounters> {
        self.pairs.get(qp_id)
    }

    pub fn finish(&self, cfg: &AggregationConfig) -> Aggregated {
        let mut features = Vec::with_capacity(self.pairs.len());
        let mut dropped_pairs = 0;
        let mut dropped_impressions = 0;
        for (qp_id, counters) in &self.pairs {
            if counters.n_impressions < cfg.min_impressions.max(1) {
                dropped_pairs += 1;
                dropped_impressions += counters.n_impressions;
                continue;
            }
            features.push(counters.emit(qp_id).expect("counters are consistent"));
        }
        Aggregated {
            features,
            dropped_pairs,
            dropped_impressions,
        }
    }
}

/// Single-pass aggregation of impressions into one vector per pair.
pub fn aggregate(impressions: &[ImpressionSignals], cfg: &AggregationConfig) -> Aggregated {
    let mut agg = Aggregator::new();
    agg.extend(impressions);
    agg.finish(cfg)
}

/// Writes the feature table: `qp_id  n_impressions  f0 … f13`, with a `#`
/// header naming the columns. Values carry 6 fractional digits. Callers
/// prepend their own metadata lines.
pub fn write_features_tsv(features: &[BehaviorFeatures]) -> String {
    let mut out = String::new();
    out.push_str("#qp_id\tn_impressions");
    for name in FEATURE_NAMES {
        out.push('\t');
        out.push_str(name);
    }
    out.push('\n');
    for f in features {
        write!(out, "{}\t{}", f.qp_id, f.n_impressions).unwrap();
        for v in f.values {
            write!(out, "\t{v:.6}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Rounds every value the way a write/read through the TSV would, so
/// in-memory stages see exactly what file-based stages see.
pub fn quantize(f: &BehaviorFeatures) -> BehaviorFeatures {
    let mut out = f.clone();
    for v in &mut out.values {
        *v = format!("{v:.6}").parse().expect("formatted float parses");
    }
    out
}

/// Reads a feature table written by [`write_features_tsv`]. `#` lines are skipped.
pub fn read_features_tsv(text: &str) -> Result<Vec<BehaviorFeatures>, FeatureError> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| FeatureError::MalformedRow {
            line: line_no,
            reason: reason.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != N_FEATURES + 2 {
            return Err(bad("expected 16 columns"));
        }
        let n_impressions: u64 = cols[1].parse().map_err(|_| bad("bad impression count"))?;
        let mut values = [0.0; N_FEATURES];
        for (slot, col) in values.iter_mut().zip(&cols[2..]) {
            let v: f64 = col.parse().map_err(|_| bad("bad feature value"))?;
            if !v.is_finite() {
                return Err(bad("non-finite feature value"));
            }
            *slot = v;
        }
        rows.push(BehaviorFeatures {
            qp_id: cols[0].to_string(),
            n_impressions,
            values,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blank(qp: &str) -> ImpressionSignals {
        ImpressionSignals {
            qp_id: qp.into(),
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
        }
    }

    #[test]
    fn ctr_examples() {
        assert_eq!(ctr(5, 50), Ok(0.1));
        assert_eq!(ctr(0, 50), Ok(0.0));
        assert_eq!(ctr(50, 50), Ok(1.0));
        assert_eq!(sat_ctr(3, 50), Ok(0.06));
        assert_eq!(sat_ctr(0, 1), Ok(0.0));
        assert_eq!(ctr(1, 0), Err(FeatureError::ZeroImpressions));
        assert!(ctr(3, 2).is_err());
    }

    #[test]
    fn two_impression_pair() {
        let mut clicked = blank("a");
        clicked.no_click = false;
        clicked.abandoned = false;
        clicked.answer_click = true;
        clicked.answer_only = true;
        clicked.answer_sat_click = true;
        clicked.serp_dwell_ms = 40_000;
        clicked.source_dwell_ms = Some(35_000);
        let mut idle = blank("a");
        idle.serp_dwell_ms = 20_000;

        let cfg = AggregationConfig {
            min_impressions: 1,
            ..Default::default()
        };
        let out = aggregate(&[clicked, idle], &cfg);
        let f = &out.features[0];
        assert_eq!(f.n_impressions, 2);
        assert_eq!(f.get(ANSWER_CTR), 0.5);
        assert_eq!(f.get(ANSWER_ONLY_CTR), 0.5);
        assert_eq!(f.get(ANSWER_SAT_CTR), 0.5);
        assert_eq!(f.get(BOTH_CLICK_CTR), 0.0);
        assert_eq!(f.get(NO_CLICK_RATE), 0.5);
        assert_eq!(f.get(ABANDON_RATE), 0.5);
        assert_eq!(f.get(AVG_SERP_DWELL), 30_000.0);
        assert_eq!(f.get(AVG_SOURCE_DWELL), 35_000.0);
    }

    #[test]
    fn drops_sparse_pairs() {
        let out = aggregate(&[blank("a")], &AggregationConfig::default());
        assert!(out.features.is_empty());
        assert_eq!(out.dropped_pairs, 1);
        assert_eq!(out.dropped_impressions, 1);
    }

    #[test]
    fn all_no_click_group() {
        let imps = vec![blank("z"); 10];
        let out = aggregate(&imps, &AggregationConfig::default());
        let f = &out.features[0];
        for idx in [ANSWER_CTR, ANSWER_ONLY_CTR, OT_ANSWER_CTR, BOTH_CLICK_CTR] {
            assert_eq!(f.get(idx), 0.0);
        }
        assert_eq!(f.get(NO_CLICK_RATE), 1.0);
        assert_eq!(f.get(AVG_SOURCE_DWELL), 0.0);
        assert!(f.is_valid());
    }

    #[test]
    fn tsv_round_trip_matches_quantize() {
        let mut f = BehaviorFeatures {
            qp_id: "qp1".into(),
            n_impressions: 3,
            values: [1.0 / 3.0; N_FEATURES],
        };
        f.values[AVG_SERP_DWELL] = 12_345_678.987_654_32;
        let text = write_features_tsv(&[f.clone()]);
        assert!(text.starts_with("#qp_id\tn_impressions\trf_rate"));
        assert!(text.contains("\t0.333333\t"));
        let back = read_features_tsv(&text).unwrap();
        assert_eq!(back[0].values[0], 0.333333);
        assert_eq!(back, vec![quantize(&f)]);
        assert_eq!(write_features_tsv(&back), text);
    }

    #[test]
    fn rejects_short_rows() {
        assert!(matches!(
            read_features_tsv("qp\t3\t0.1\n"),
            Err(FeatureError::MalformedRow { line: 1, .. })
        ));
    }
}
