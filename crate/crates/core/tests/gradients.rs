use qamine::features::N_FEATURES;
use qamine::feedback::logistic_objective;
use qamine::feedback::tree::Row;
use qamine::qa::{
    featurize, Loss, QaPair, RelevanceModel, SparseFeatures, StageTag, Target, N_SCALARS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= TOL * analytic.abs().max(numeric.abs()).max(1e-8)
}

fn lr_fixture(seed: u64, n: usize) -> (Vec<f64>, f64, Vec<Row>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = (0..N_FEATURES)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let bias = rng.random_range(-0.5..0.5);
    let z = (0..n)
        .map(|_| {
            let mut row = [0.0; N_FEATURES];
            for v in row.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
            row
        })
        .collect();
    let y = (0..n).map(|_| rng.random_bool(0.5)).collect();
    (weights, bias, z, y)
}

#[test]
fn logistic_gradient_matches_central_differences() {
    for seed in 0..5 {
        for l2 in [0.0, 1e-3, 0.1] {
            let (w, b, z, y) = lr_fixture(seed, 40);
            let (_, grad) = logistic_objective(&w, b, &z, &y, l2);
            for k in 0..w.len() {
                let mut up = w.clone();
                let mut down = w.clone();
                up[k] += H;
                down[k] -= H;
                let numeric = (logistic_objective(&up, b, &z, &y, l2).0
                    - logistic_objective(&down, b, &z, &y, l2).0)
                    / (2.0 * H);
                assert!(
                    close(grad.weights[k], numeric),
                    "w{k}: {} vs {numeric}",
                    grad.weights[k]
                );
            }
            let numeric = (logistic_objective(&w, b + H, &z, &y, l2).0
                - logistic_objective(&w, b - H, &z, &y, l2).0)
                / (2.0 * H);
            assert!(
                close(grad.bias, numeric),
                "bias: {} vs {numeric}",
                grad.bias
            );
        }
    }
}

const QUESTIONS: [&str; 10] = [
    "what is the normal body temperature",
    "how tall is the eiffel tower",
    "when did the first moon landing happen",
    "how many bones are in the human body",
    "what causes rain to fall",
    "who wrote the origin of species",
    "how long do cats live",
    "what is the boiling point of water",
    "why is the sky blue",
    "how far away is the moon",
];

const PASSAGES: [&str; 10] = [
    "normal body temperature is about 37 degrees celsius for most adults",
    "the eiffel tower is 330 metres tall including its antennas",
    "the apollo 11 moon landing happened in july 1969",
    "cats are small carnivorous mammals kept as pets",
    "rain falls when water droplets in clouds grow heavy enough",
    "charles darwin wrote on the origin of species in 1859",
    "the tower was built for the 1889 world fair",
    "water boils at 100 degrees celsius at sea level",
    "bones give the body its shape and protect organs",
    "the moon is about 384400 kilometres away from earth",
];

fn qa_fixture(
    seed: u64,
) -> (
    RelevanceModel,
    Vec<SparseFeatures>,
    Vec<Target>,
    Vec<Target>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let features: Vec<SparseFeatures> = QUESTIONS
        .iter()
        .zip(PASSAGES)
        .enumerate()
        .map(|(i, (q, p))| featurize(&QaPair::new(format!("qp{i}"), q, p).unwrap()).unwrap())
        .collect();
    let mut model = RelevanceModel::new();
    for f in &features {
        for &(b, _) in &f.buckets {
            model.weights[b as usize] = rng.random_range(-0.5..0.5);
        }
    }
    for w in model.scalar_weights.iter_mut() {
        *w = rng.random_range(-1.0..1.0);
    }
    model.bias = rng.random_range(-0.5..0.5);
    let labels = (0..10)
        .map(|_| Target::Label(rng.random_bool(0.5)))
        .collect();
    let scores = (0..10)
        .map(|_| Target::Score(rng.random_range(0.0..=1.0)))
        .collect();
    (model, features, labels, scores)
}

fn check_qa(
    model: &RelevanceModel,
    features: &[SparseFeatures],
    targets: &[Target],
    loss: Loss,
    l2: f64,
) {
    let (_, grad) = model.objective(features, targets, loss, l2).unwrap();
    let eval = |m: &RelevanceModel| m.objective(features, targets, loss, l2).unwrap().0;
    let mut buckets: Vec<usize> = features
        .iter()
        .flat_map(|f| f.buckets.iter().map(|&(b, _)| b as usize))
        .collect();
    buckets.sort_unstable();
    buckets.dedup();
    for &b in &buckets {
        let mut up = model.clone();
        let mut down = model.clone();
        up.weights[b] += H;
        down.weights[b] -= H;
        let numeric = (eval(&up) - eval(&down)) / (2.0 * H);
        assert!(
            close(grad.weights[b], numeric),
            "bucket {b}: {} vs {numeric}",
            grad.weights[b]
        );
    }
    for k in 0..N_SCALARS {
        let mut up = model.clone();
        let mut down = model.clone();
        up.scalar_weights[k] += H;
        down.scalar_weights[k] -= H;
        let numeric = (eval(&up) - eval(&down)) / (2.0 * H);
        assert!(
            close(grad.scalars[k], numeric),
            "scalar {k}: {} vs {numeric}",
            grad.scalars[k]
        );
    }
    let mut up = model.clone();
    let mut down = model.clone();
    up.bias += H;
    down.bias -= H;
    let numeric = (eval(&up) - eval(&down)) / (2.0 * H);
    assert!(
        close(grad.bias, numeric),
        "bias: {} vs {numeric}",
        grad.bias
    );
}

#[test]
fn qa_ce_gradient_matches_central_differences_at_every_stage() {
    for seed in 0..3 {
        let (mut model, features, labels, _) = qa_fixture(seed);
        for stage in [
            StageTag::Untrained,
            StageTag::Pretrained,
            StageTag::Finetuned,
        ] {
            model.stage = stage;
            for l2 in [0.0, 1e-3] {
                check_qa(&model, &features, &labels, Loss::Ce, l2);
            }
        }
    }
}

#[test]
fn qa_mse_gradient_matches_central_differences() {
    for seed in 0..3 {
        let (model, features, _, scores) = qa_fixture(seed);
        check_qa(&model, &features, &scores, Loss::Mse, 1e-3);
    }
}
