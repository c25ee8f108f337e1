mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use temporal_fusion::network::affine::{AffineGrads, AffineLayer};
use temporal_fusion::network::{adam_step, rate_cross_entropy, AdamConfig};
use temporal_fusion::neuron::surrogate;
use temporal_fusion::{LifParams, TimeMajorTensor};

#[test]
fn affine_and_loss_gradients_match_central_differences() {
    for seed in 0..50 {
        let bad = fd_affine_loss_case(seed);
        assert!(bad.is_empty(), "seed {seed}: {bad:?}");
    }
}

proptest! {
    #[test]
    fn loss_gradient_wrt_outputs_matches_central_differences(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (t, b, c) = (r.gen_range(1..=4), r.gen_range(1..=3), r.gen_range(2..=5));
        let y = TimeMajorTensor::from_fn(t, b, c, |_, _, _| r.gen_range(0.0f32..1.0)).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
        let (loss, g) = rate_cross_entropy(&y, &labels).unwrap();
        prop_assert!(loss >= 0.0);
        let data: Vec<f64> = y.data().iter().map(|&v| f64::from(v)).collect();
        let h = 1e-5;
        for i in 0..data.len() {
            let at = |delta: f64| {
                let mut d = data.clone();
                d[i] += delta;
                let mut loss = 0.0;
                for (bi, &label) in labels.iter().enumerate() {
                    let logits: Vec<f64> = (0..c)
                        .map(|k| (0..t).map(|ti| d[ti * b * c + bi * c + k]).sum::<f64>() / t as f64)
                        .collect();
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
                    loss += lse - logits[label];
                }
                loss / b as f64
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            prop_assert!(close(g.data()[i], fd), "g[{}] = {} vs {}", i, g.data()[i], fd);
        }
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero(seed in any::<u64>(), t in 1usize..8, b in 1usize..6, c in 2usize..12) {
        let mut r = rng(seed);
        let y = TimeMajorTensor::from_fn(t, b, c, |_, _, _| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..c)).collect();
        let (_, g) = rate_cross_entropy(&y, &labels).unwrap();
        // Rows are scaled by 1/(T B); undo that before comparing with the unit-scale bound.
        let scale = (t * b) as f64;
        for ti in 0..t {
            for bi in 0..b {
                let s: f64 = (0..c).map(|k| f64::from(g.get(ti, bi, k))).sum();
                prop_assert!((s * scale).abs() <= 1e-6, "row ({}, {}) sums to {}", ti, bi, s * scale);
            }
        }
    }
}

#[test]
fn surrogate_integrates_to_one() {
    for alpha in [1.0f32, 2.0, 4.0, 8.0] {
        let integral = surrogate_integral(alpha);
        assert!((integral - 1.0).abs() <= 1e-6, "alpha {alpha}: {integral}");
    }
}

#[test]
fn surrogate_peak_is_alpha_over_four() {
    for alpha in [0.5f32, 4.0, 10.0] {
        let p = LifParams::new(0.0, 0.2, 0.3, alpha).unwrap();
        assert_eq!(surrogate(0.0, &p), alpha / 4.0);
        assert!(surrogate(0.1, &p) < alpha / 4.0);
        assert_eq!(surrogate(0.37, &p), surrogate(-0.37, &p));
    }
}

/// f64 Adam reference for one parameter vector.
struct OracleAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl OracleAdam {
    fn update(&mut self, p: &mut [f64], g: &[f32], cfg: &AdamConfig) {
        let (b1, b2) = (f64::from(cfg.beta1), f64::from(cfg.beta2));
        self.step += 1;
        for i in 0..p.len() {
            let gi = f64::from(g[i]);
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * gi;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * gi * gi;
            let m_hat = self.m[i] / (1.0 - b1.powi(self.step));
            let v_hat = self.v[i] / (1.0 - b2.powi(self.step));
            p[i] -= f64::from(cfg.learning_rate) * m_hat / (v_hat.sqrt() + f64::from(cfg.epsilon));
        }
    }
}

#[test]
fn adam_tracks_f64_reference_over_many_steps() {
    let mut r = rng(17);
    let mut layer = AffineLayer::init(5, 3, 1.0, &mut r).unwrap();
    let cfg = AdamConfig::with_learning_rate(1e-2);
    let mut w: Vec<f64> = layer.weights().iter().map(|&v| f64::from(v)).collect();
    let mut b: Vec<f64> = layer.bias().iter().map(|&v| f64::from(v)).collect();
    let mut ow = OracleAdam { m: vec![0.0; 15], v: vec![0.0; 15], step: 0 };
    let mut ob = OracleAdam { m: vec![0.0; 3], v: vec![0.0; 3], step: 0 };
    for _ in 0..50 {
        let grads = AffineGrads {
            weights: (0..15).map(|_| r.gen_range(-2.0f32..2.0)).collect(),
            bias: (0..3).map(|_| r.gen_range(-2.0f32..2.0)).collect(),
        };
        adam_step(&mut layer, &grads, &cfg).unwrap();
        ow.update(&mut w, &grads.weights, &cfg);
        ob.update(&mut b, &grads.bias, &cfg);
    }
    for (got, want) in layer.weights().iter().chain(layer.bias()).zip(w.iter().chain(&b)) {
        assert!((f64::from(*got) - want).abs() < 1e-5, "{got} vs {want}");
    }
}

#[test]
fn adam_first_step_matches_worked_example() {
    // m = 0.1 g, v = 0.001 g^2, bias corrections 0.1 and 0.001: step = lr * g / (|g| + eps).
    let mut layer = AffineLayer::new(1, 1, vec![1.0], vec![0.0]).unwrap();
    let grads = AffineGrads { weights: vec![0.5], bias: vec![-4.0] };
    adam_step(&mut layer, &grads, &AdamConfig::default()).unwrap();
    assert!((layer.weights()[0] - 0.999).abs() < 1e-6);
    assert!((layer.bias()[0] - 0.001).abs() < 1e-6);
}
