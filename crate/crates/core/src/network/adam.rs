//! Bias-corrected Adam for affine layers.

use crate::error::{shape_err, Error, Result};
use crate::network::affine::{AffineGrads, AffineLayer};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f32) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

/// First and second moments for every weight and bias, plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m_w: Vec<f32>,
    v_w: Vec<f32>,
    m_b: Vec<f32>,
    v_b: Vec<f32>,
    step: u64,
}

impl AdamState {
    pub fn new(n_weights: usize, n_bias: usize) -> Self {
        Self {
            m_w: vec![0.0; n_weights],
            v_w: vec![0.0; n_weights],
            m_b: vec![0.0; n_bias],
            v_b: vec![0.0; n_bias],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

fn update(params: &mut [f32], m: &mut [f32], v: &mut [f32], grads: &[f32], cfg: &AdamConfig, c1: f32, c2: f32) {
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
}

/// One Adam update of `layer` in place. Rejects non-finite gradients before touching
/// any state.
pub fn adam_step(layer: &mut AffineLayer, grads: &AffineGrads, cfg: &AdamConfig) -> Result<()> {
    if grads.weights.len() != layer.weights.len() || grads.bias.len() != layer.bias.len() {
        return Err(shape_err(
            format!("{} weights, {} biases", layer.weights.len(), layer.bias.len()),
            format!("{} weights, {} biases", grads.weights.len(), grads.bias.len()),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient(format!(
            "affine layer {} -> {}",
            layer.width_in, layer.width_out
        )));
    }
    let state = &mut layer.adam;
    state.step += 1;
    let t = state.step as f64;
    let c1 = (1.0 - f64::from(cfg.beta1).powf(t)) as f32;
    let c2 = (1.0 - f64::from(cfg.beta2).powf(t)) as f32;
    update(&mut layer.weights, &mut state.m_w, &mut state.v_w, &grads.weights, cfg, c1, c2);
    update(&mut layer.bias, &mut state.m_b, &mut state.v_b, &grads.bias, cfg, c1, c2);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer() -> AffineLayer {
        AffineLayer::new(2, 2, vec![0.5, -0.25, 1.0, 0.0], vec![0.1, -0.1]).unwrap()
    }

    #[test]
    fn zero_grads_leave_params_but_count_steps() {
        let mut l = layer();
        let before = l.clone();
        adam_step(&mut l, &AffineGrads::zeros(2, 2), &AdamConfig::default()).unwrap();
        assert_eq!(l.weights(), before.weights());
        assert_eq!(l.bias(), before.bias());
        assert_eq!(l.adam_state().step(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let cfg = AdamConfig::default();
        let mut l = layer();
        let before = l.clone();
        let grads = AffineGrads { weights: vec![0.3, -2.0, 5.0, -0.7], bias: vec![1.0, -0.1] };
        adam_step(&mut l, &grads, &cfg).unwrap();
        let lr = cfg.learning_rate;
        for ((new, old), g) in l
            .weights()
            .iter()
            .chain(l.bias())
            .zip(before.weights().iter().chain(before.bias()))
            .zip(grads.weights.iter().chain(&grads.bias))
        {
            let expected = -lr * g.signum();
            // Tolerance covers f32 rounding of a parameter of magnitude <= 1 as well as epsilon.
            assert!(((new - old) - expected).abs() <= lr * 1e-6 + 1.2e-7, "{new} {old} {g}");
        }
    }

    #[test]
    fn equal_grads_bound_step_size() {
        let cfg = AdamConfig::default();
        let mut l = layer();
        let grads = AffineGrads { weights: vec![0.2, -0.4, 3.0, 0.01], bias: vec![-1.0, 0.5] };
        for _ in 0..2 {
            let before = l.clone();
            adam_step(&mut l, &grads, &cfg).unwrap();
            for (new, old) in l.weights().iter().zip(before.weights()) {
                assert!((new - old).abs() <= cfg.learning_rate * (1.0 + 1e-6) + 1.2e-7);
            }
        }
        assert_eq!(l.adam_state().step(), 2);
    }

    #[test]
    fn non_finite_grads_abort() {
        let mut l = layer();
        let before = l.clone();
        let grads = AffineGrads { weights: vec![0.0, f32::NAN, 0.0, 0.0], bias: vec![0.0, 0.0] };
        assert!(matches!(
            adam_step(&mut l, &grads, &AdamConfig::default()),
            Err(Error::NonFiniteGradient(_))
        ));
        assert_eq!(l, before);
    }
}
