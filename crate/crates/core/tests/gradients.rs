//! Backpropagated gradients against central finite differences.

use distlab_core::dataset::LabeledVector;
use distlab_core::model::{
    cross_entropy, forward, grad_input, grad_params, input_distance, ModelConfig, Params,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;

fn random_params(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Params {
    let mut p = Params::zeros(cfg);
    for t in p.tensors_mut() {
        t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
    p
}

fn random_batch(cfg: ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<LabeledVector> {
    (0..n)
        .map(|_| {
            let pixels = (0..cfg.input_dim).map(|_| rng.random::<f32>()).collect();
            LabeledVector::new(pixels, rng.random_range(0..cfg.num_classes))
        })
        .collect()
}

fn batch_loss(p: &Params, batch: &[LabeledVector]) -> f64 {
    batch
        .iter()
        .map(|item| cross_entropy(&forward(p, &item.pixels).unwrap().probs, item.tag))
        .sum::<f64>()
        / batch.len() as f64
}

fn input_objective(p: &Params, x: &[f64], tag: usize, x_s: &[f64], lambda: f64) -> f64 {
    cross_entropy(&forward(p, x).unwrap().probs, tag) + lambda * input_distance(x, x_s).unwrap()
}

/// Relative error with an absolute floor, so that near-zero components are
/// compared on the scale of the whole gradient.
fn close(analytic: f64, numeric: f64, scale: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()).max(scale * 1e-2)
}

/// Distance of every hidden pre-activation from the ReLU kink; a finite
/// difference straddling the kink is not a derivative.
fn min_kink_distance(p: &Params, x: &[f64]) -> f64 {
    forward(p, x)
        .unwrap()
        .z1
        .iter()
        .map(|z| z.abs())
        .fold(f64::INFINITY, f64::min)
}

fn check_params_instance(seed: u64) {
    let cfg = ModelConfig::new(6, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_params(cfg, &mut rng);
    let batch = random_batch(cfg, 5, &mut rng);
    let g = grad_params(&p, &batch).unwrap();
    let analytic: Vec<f64> = g.iter().collect();
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = p.clone();
        *plus.get_mut(i) += H;
        let mut minus = p.clone();
        *minus.get_mut(i) -= H;
        let numeric = (batch_loss(&plus, &batch) - batch_loss(&minus, &batch)) / (2.0 * H);
        assert!(
            close(a, numeric, scale),
            "seed {seed} param {i}: analytic {a} numeric {numeric}"
        );
    }
}

fn check_input_instance(seed: u64) {
    let cfg = ModelConfig::new(6, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = random_params(cfg, &mut rng);
    let (x, x_s) = loop {
        let x: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        if min_kink_distance(&p, &x) > 10.0 * H {
            let x_s: Vec<f64> = (0..6).map(|_| rng.random()).collect();
            break (x, x_s);
        }
    };
    let tag = rng.random_range(0..3);
    let lambda = rng.random_range(0.0..2.0);
    let g = grad_input(&p, &x, tag, &x_s, lambda).unwrap();
    let scale = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for j in 0..6 {
        let mut plus = x.clone();
        plus[j] += H;
        let mut minus = x.clone();
        minus[j] -= H;
        let numeric = (input_objective(&p, &plus, tag, &x_s, lambda)
            - input_objective(&p, &minus, tag, &x_s, lambda))
            / (2.0 * H);
        assert!(
            close(g[j], numeric, scale),
            "seed {seed} input {j}: analytic {} numeric {numeric}",
            g[j]
        );
    }
}

#[test]
fn param_gradients_match_finite_differences_on_20_instances() {
    for seed in 0..20 {
        check_params_instance(seed);
    }
}

#[test]
fn input_gradients_match_finite_differences_on_20_instances() {
    for seed in 100..120 {
        check_input_instance(seed);
    }
}

#[test]
fn b2_gradient_is_mean_residual() {
    let cfg = ModelConfig::new(6, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = random_params(cfg, &mut rng);
    let batch = random_batch(cfg, 7, &mut rng);
    let g = grad_params(&p, &batch).unwrap();
    for k in 0..3 {
        let expected = batch
            .iter()
            .map(|item| {
                let probs = forward(&p, &item.pixels).unwrap().probs;
                probs[k] - if item.tag == k { 1.0 } else { 0.0 }
            })
            .sum::<f64>()
            / batch.len() as f64;
        assert!((g.b2[k] - expected).abs() < 1e-9, "{} vs {expected}", g.b2[k]);
    }
}

#[test]
fn duplicated_item_has_same_mean_gradient() {
    let cfg = ModelConfig::new(6, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = random_params(cfg, &mut rng);
    let one = random_batch(cfg, 1, &mut rng);
    let two = vec![one[0].clone(), one[0].clone()];
    let (a, b) = (grad_params(&p, &one).unwrap(), grad_params(&p, &two).unwrap());
    for (x, y) in a.iter().zip(b.iter()) {
        assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
    }
}

#[test]
fn empty_batch_is_an_error() {
    let p = Params::zeros(ModelConfig::new(2, 2, 2));
    assert!(grad_params(&p, &[]).is_err());
}

#[test]
fn lambda_term_vanishes_at_seed_and_lambda_zero_ignores_seed() {
    let cfg = ModelConfig::new(6, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = random_params(cfg, &mut rng);
    let x: Vec<f64> = (0..6).map(|_| rng.random()).collect();
    let other: Vec<f64> = (0..6).map(|_| rng.random()).collect();
    assert_eq!(
        grad_input(&p, &x, 1, &x, 5.0).unwrap(),
        grad_input(&p, &x, 1, &x, 0.0).unwrap()
    );
    assert_eq!(
        grad_input(&p, &x, 1, &x, 0.0).unwrap(),
        grad_input(&p, &x, 1, &other, 0.0).unwrap()
    );
    assert!(grad_input(&p, &x, 1, &other, -1.0).is_err());
    assert!(grad_input(&p, &x[..5], 1, &other, 1.0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn probs_form_a_distribution(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let cfg = ModelConfig::new(6, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = random_params(cfg, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let t = forward(&p, &x).unwrap();
        prop_assert!((t.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(t.probs.iter().all(|q| (0.0..=1.0).contains(q)));
        for (a, z) in t.a1.iter().zip(&t.z1) {
            prop_assert_eq!(*a, z.max(0.0));
        }
        // Shifting every logit by the same constant leaves probs unchanged.
        p.b2.iter_mut().for_each(|b| *b += shift);
        let shifted = forward(&p, &x).unwrap();
        for (a, b) in t.probs.iter().zip(&shifted.probs) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_invariant_under_logit_scaling(seed in any::<u64>()) {
        let cfg = ModelConfig::new(6, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(cfg, &mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random()).collect();
        let base = distlab_core::model::predict(&p, &x).unwrap();
        let mut scaled = p.clone();
        scaled.w2.iter_mut().for_each(|w| *w *= 2.0);
        scaled.b2.iter_mut().for_each(|b| *b = *b * 2.0 + 3.0);
        prop_assert_eq!(distlab_core::model::predict(&scaled, &x).unwrap(), base);
    }
}
