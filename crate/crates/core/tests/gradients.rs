use fsdadmm_core::nnmodel::{ModelSpec, ModelState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const CASES: u64 = 20;
const MIN_GRAD: f64 = 1e-8;
const MAX_REL: f64 = 1e-4;

struct Case {
    model: ModelState,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    targets: Vec<Vec<f64>>,
}

fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..8);
    let classes = rng.random_range(2..6);
    let depth = rng.random_range(1..3);
    let hidden = (0..depth).map(|_| rng.random_range(3..9)).collect();
    let mut spec = ModelSpec::new(dim, hidden, classes).unwrap();
    if seed % 2 == 1 {
        spec = spec.with_layer_norm();
    }
    let mut model = ModelState::init(spec, seed).unwrap();
    // move off the initializer's zero biases so every coordinate is exercised
    for w in model.params.iter_mut() {
        *w += rng.random_range(-0.1..0.1);
    }
    let batch = rng.random_range(1..4);
    let inputs = (0..batch)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let labels = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let targets = (0..batch)
        .map(|_| (0..classes).map(|_| rng.random_range(-0.5..1.5)).collect())
        .collect();
    Case {
        model,
        inputs,
        labels,
        targets,
    }
}

fn central_difference(model: &ModelState, loss: impl Fn(&ModelState) -> f64) -> Vec<f64> {
    let mut probe = model.clone();
    (0..model.params.len())
        .map(|k| {
            let w = model.params[k];
            probe.params[k] = w + H;
            let up = loss(&probe);
            probe.params[k] = w - H;
            let down = loss(&probe);
            probe.params[k] = w;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(g, _)| g.abs() > MIN_GRAD)
        .map(|(g, n)| (g - n).abs() / g.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let c = random_case(seed);
        let batch: Vec<(&[f64], usize)> = c.inputs.iter().map(Vec::as_slice).zip(c.labels.iter().copied()).collect();
        let g = c.model.grad_local_loss(&batch).unwrap();
        let fd = central_difference(&c.model, |m| m.total_local_loss(&batch).unwrap());
        let err = max_relative_error(&g, &fd);
        assert!(err < MAX_REL, "case {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    println!("cross-entropy worst relative error {worst:e}");
}

#[test]
fn distillation_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..CASES {
        let c = random_case(100 + seed);
        let batch: Vec<(&[f64], &[f64])> = c.inputs.iter().map(Vec::as_slice).zip(c.targets.iter().map(Vec::as_slice)).collect();
        let g = c.model.grad_distill_loss(&batch).unwrap();
        let fd = central_difference(&c.model, |m| m.total_distill_loss(&batch).unwrap());
        let err = max_relative_error(&g, &fd);
        assert!(err < MAX_REL, "case {seed}: relative error {err:e}");
        worst = worst.max(err);
    }
    println!("distillation worst relative error {worst:e}");
}

#[test]
fn softmax_outputs_stay_on_the_simplex() {
    for seed in 0..CASES {
        let mut c = random_case(200 + seed);
        for w in c.model.params.iter_mut() {
            *w *= 50.0;
        }
        for x in &c.inputs {
            let p = c.model.forward(x).unwrap();
            assert!(p.probs.iter().all(|&v| v >= 0.0));
            let sum: f64 = p.probs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12, "sum {sum}");
        }
    }
}

#[test]
fn forward_and_gradients_are_pure() {
    let c = random_case(7);
    let batch: Vec<(&[f64], usize)> = c.inputs.iter().map(Vec::as_slice).zip(c.labels.iter().copied()).collect();
    let before = c.model.clone();
    let g1 = c.model.grad_local_loss(&batch).unwrap();
    let p1 = c.model.forward(&c.inputs[0]).unwrap();
    let g2 = c.model.grad_local_loss(&batch).unwrap();
    let p2 = c.model.forward(&c.inputs[0]).unwrap();
    assert_eq!(c.model, before);
    assert_eq!(g1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), g2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(p1, p2);
}
