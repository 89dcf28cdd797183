use qamine::features::{aggregate, AggregationConfig, NO_CLICK_RATE};
use qamine::feedback::{train_gbdt, GbdtConfig, Samples};
use qamine::qa::{
    ce_loss, featurize, train, QaExample, RelevanceModel, Target, TrainConfig, TrainStage,
};
use qamine::session::{impressions_from_events, parse_log, ExtractConfig};
use qamine::sim::{
    gen_gold_labels, gen_pair_sessions, gen_pairs, gen_sessions, simulate_features,
    BehaviorProfile, ClassProfile, LogNormalParams, SimConfig,
};
use qamine::workflow::{evaluate_feedback, join_gold, split_rows};

fn agg() -> AggregationConfig {
    AggregationConfig {
        sat_threshold_ms: 30_000,
        min_impressions: 1,
    }
}

/// Relevant users never click and linger; irrelevant users click an outside
/// link and leave quickly.
fn disjoint_profile() -> BehaviorProfile {
    let relevant = ClassProfile {
        p_no_click: 1.0,
        p_answer_only: 0.0,
        p_ot_only: 0.0,
        p_both: 0.0,
        p_other_only: 0.0,
        p_reformulate_given_no_sat: 0.0,
        p_related_click: 0.0,
        p_answer_expansion: 0.0,
        serp_dwell: LogNormalParams::with_median(60_000.0, 0.3),
        source_dwell: LogNormalParams::with_median(60_000.0, 0.3),
        answer_click_shape: 0.0,
    };
    BehaviorProfile {
        relevant,
        irrelevant: ClassProfile {
            p_no_click: 0.0,
            p_ot_only: 1.0,
            p_reformulate_given_no_sat: 1.0,
            serp_dwell: LogNormalParams::with_median(2_000.0, 0.3),
            source_dwell: LogNormalParams::with_median(2_000.0, 0.3),
            ..relevant
        },
        behavior_noise: 0.0,
    }
}

fn gbdt_test_auc(cfg: &SimConfig) -> f64 {
    let pairs = gen_pairs(cfg).unwrap();
    let gold = gen_gold_labels(&pairs, cfg).unwrap();
    let features = simulate_features(
        &pairs,
        cfg,
        &ExtractConfig::new(cfg.sat_threshold_ms),
        &agg(),
    )
    .unwrap()
    .features;
    let split = split_rows(&join_gold(&features, &gold), cfg.seed);
    let model = train_gbdt(
        &Samples::from_rows(&split.train),
        &GbdtConfig {
            seed: cfg.seed,
            ..GbdtConfig::default()
        },
    )
    .unwrap();
    evaluate_feedback(&model, &split.test).unwrap().auc
}

#[test]
fn generated_log_round_trips_through_the_parser() {
    let cfg = SimConfig {
        n_pairs: 700,
        ..SimConfig::default()
    };
    let pairs = gen_pairs(&cfg).unwrap();
    let lines = gen_sessions(&pairs, &cfg).unwrap();
    assert!(lines.len() >= 100_000, "only {} lines", lines.len());
    let events = parse_log(&lines).unwrap();
    assert_eq!(events.len(), lines.len());
    let extract = ExtractConfig::new(cfg.sat_threshold_ms);
    let imps = impressions_from_events(events, &extract).unwrap();
    let from_log = aggregate(&imps, &agg());
    assert_eq!(
        from_log,
        simulate_features(&pairs, &cfg, &extract, &agg()).unwrap()
    );
    assert_eq!(lines, gen_sessions(&pairs, &cfg).unwrap());
}

#[test]
fn impression_counts_have_the_configured_mean() {
    let cfg = SimConfig {
        n_pairs: 2_000,
        ..SimConfig::default()
    };
    let pairs = gen_pairs(&cfg).unwrap();
    let total: usize = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| gen_pair_sessions(&cfg, i, p).len())
        .sum();
    let mean = total as f64 / pairs.len() as f64;
    assert!(
        (mean - cfg.impressions_per_pair).abs() <= 0.05 * cfg.impressions_per_pair,
        "mean {mean}"
    );
}

#[test]
fn judge_majority_agreement_follows_the_binomial() {
    let cfg = SimConfig {
        n_pairs: 10_000,
        judge_error_rate: 0.1,
        ..SimConfig::default()
    };
    let pairs = gen_pairs(&cfg).unwrap();
    let gold = gen_gold_labels(&pairs, &cfg).unwrap();
    let agree = pairs
        .iter()
        .zip(&gold)
        .filter(|(p, (_, g))| p.truth == *g)
        .count() as f64
        / pairs.len() as f64;
    let e: f64 = 0.1;
    let expected = 1.0 - (3.0 * e * e * (1.0 - e) + e.powi(3));
    assert!((agree - expected).abs() <= 0.01, "{agree} vs {expected}");
    assert_eq!(gold, gen_gold_labels(&pairs, &cfg).unwrap());
}

#[test]
fn forced_no_click_profile_yields_full_no_click_rate() {
    let cfg = SimConfig {
        n_pairs: 300,
        profile: disjoint_profile(),
        ..SimConfig::default()
    };
    let pairs = gen_pairs(&cfg).unwrap();
    let features = simulate_features(&pairs, &cfg, &ExtractConfig::new(30_000), &agg())
        .unwrap()
        .features;
    let truth: std::collections::HashMap<_, _> = pairs
        .iter()
        .map(|p| (p.pair.qp_id.clone(), p.truth))
        .collect();
    let mut n_relevant = 0;
    for f in &features {
        if truth[&f.qp_id] {
            n_relevant += 1;
            assert_eq!(f.get(NO_CLICK_RATE), 1.0, "{}", f.qp_id);
        } else {
            assert_eq!(f.get(NO_CLICK_RATE), 0.0, "{}", f.qp_id);
        }
    }
    assert!(n_relevant > 100);
}

#[test]
fn separable_profiles_give_near_perfect_gbdt() {
    let cfg = SimConfig {
        n_pairs: 1_000,
        judge_error_rate: 0.0,
        profile: disjoint_profile(),
        ..SimConfig::default()
    };
    let auc = gbdt_test_auc(&cfg);
    assert!(auc >= 0.99, "auc {auc}");
}

#[test]
fn behavior_noise_does_not_help_gbdt() {
    let noises = [0.0, 0.15, 0.3, 0.45];
    let means: Vec<f64> = noises
        .iter()
        .map(|&noise| {
            (0..5)
                .map(|seed| {
                    let mut cfg = SimConfig {
                        n_pairs: 1_000,
                        seed,
                        ..SimConfig::default()
                    };
                    cfg.profile.behavior_noise = noise;
                    gbdt_test_auc(&cfg)
                })
                .sum::<f64>()
                / 5.0
        })
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0], "mean AUCs by noise: {means:?}");
    }
}

#[test]
fn qa_training_halves_the_loss_on_simulated_pairs() {
    let cfg = SimConfig {
        n_pairs: 200,
        ..SimConfig::default()
    };
    let pairs = gen_pairs(&cfg).unwrap();
    let examples: Vec<QaExample> = pairs
        .iter()
        .map(|p| QaExample {
            pair: p.pair.clone(),
            target: Target::Label(p.truth),
        })
        .collect();
    let labels: Vec<f64> = pairs.iter().map(|p| f64::from(u8::from(p.truth))).collect();
    let features: Vec<_> = pairs.iter().map(|p| featurize(&p.pair).unwrap()).collect();
    let loss = |m: &RelevanceModel| {
        let out: Vec<f64> = features.iter().map(|f| m.score(f)).collect();
        ce_loss(&labels, &out).unwrap()
    };
    let start = RelevanceModel::new();
    let trained = train(
        &start,
        &examples,
        &TrainConfig::finetune_default(),
        TrainStage::Finetune,
    )
    .unwrap();
    let (before, after) = (loss(&start), loss(&trained));
    assert!(after <= 0.5 * before, "{before} -> {after}");
}
