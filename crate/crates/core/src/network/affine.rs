//! Fully connected synaptic layer applied independently at every time step.
//!
//! All reductions run in a fixed order so results do not depend on how the time
//! axis is split across workers:
//!
//! * forward `out[o] = bias[o] + sum_i w[o][i] * x[i]`, summed over `i` ascending;
//! * input gradient `g_in[i] = sum_o g[o] * w[o][i]`, over `o` ascending;
//! * parameter gradients sum over time steps ascending, then batch ascending.

use std::ops::Range;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::network::adam::AdamState;
use crate::tensor::TimeMajorTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub(crate) width_in: usize,
    pub(crate) width_out: usize,
    /// Row-major `[width_out x width_in]`.
    pub(crate) weights: Vec<f32>,
    pub(crate) bias: Vec<f32>,
    pub(crate) adam: AdamState,
}

/// Gradients of one affine layer's parameters, same layout as the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl AffineGrads {
    pub fn zeros(width_in: usize, width_out: usize) -> Self {
        Self { weights: vec![0.0; width_in * width_out], bias: vec![0.0; width_out] }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

impl AffineLayer {
    pub fn new(width_in: usize, width_out: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if width_in == 0 || width_out == 0 {
            return Err(Error::InvalidDimensions("affine widths must be >= 1".into()));
        }
        if weights.len() != width_in * width_out {
            return Err(shape_err(width_in * width_out, weights.len()));
        }
        if bias.len() != width_out {
            return Err(shape_err(width_out, bias.len()));
        }
        if !weights.iter().chain(&bias).all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("affine parameters must be finite".into()));
        }
        let adam = AdamState::new(weights.len(), bias.len());
        Ok(Self { width_in, width_out, weights, bias, adam })
    }

    /// Uniform `[-g/sqrt(in), g/sqrt(in)]` weights, zero bias.
    pub fn init<R: Rng>(width_in: usize, width_out: usize, gain: f32, rng: &mut R) -> Result<Self> {
        let bound = gain / (width_in as f32).sqrt();
        let weights = (0..width_in * width_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(width_in, width_out, weights, vec![0.0; width_out])
    }

    pub fn width_in(&self) -> usize {
        self.width_in
    }

    pub fn width_out(&self) -> usize {
        self.width_out
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn adam_state(&self) -> &AdamState {
        &self.adam
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }
}

/// `out(t) = x(t) W^T + b` for every step.
pub fn affine_apply(layer: &AffineLayer, x: &TimeMajorTensor) -> Result<TimeMajorTensor> {
    if x.width() != layer.width_in {
        return Err(shape_err(format!("input width {}", layer.width_in), format!("width {}", x.width())));
    }
    let (t_len, batch) = (x.t_len(), x.batch());
    let (n_in, n_out) = (layer.width_in, layer.width_out);
    let mut out = TimeMajorTensor::zeros(t_len, batch, n_out)?;
    let xs = x.data();
    let os = out.data_mut();
    for row in 0..t_len * batch {
        let x_row = &xs[row * n_in..(row + 1) * n_in];
        let o_row = &mut os[row * n_out..(row + 1) * n_out];
        for (o, slot) in o_row.iter_mut().enumerate() {
            let w_row = &layer.weights[o * n_in..(o + 1) * n_in];
            let mut acc = layer.bias[o];
            for (w, xv) in w_row.iter().zip(x_row) {
                acc += w * xv;
            }
            *slot = acc;
        }
    }
    Ok(out)
}

/// Gradient w.r.t. the layer input only.
pub fn affine_input_grad(layer: &AffineLayer, g_out: &TimeMajorTensor) -> Result<TimeMajorTensor> {
    if g_out.width() != layer.width_out {
        return Err(shape_err(format!("output width {}", layer.width_out), format!("width {}", g_out.width())));
    }
    let (t_len, batch) = (g_out.t_len(), g_out.batch());
    let (n_in, n_out) = (layer.width_in, layer.width_out);
    let mut g_in = TimeMajorTensor::zeros(t_len, batch, n_in)?;
    let gs = g_out.data();
    let gi = g_in.data_mut();
    for row in 0..t_len * batch {
        let g_row = &gs[row * n_out..(row + 1) * n_out];
        let i_row = &mut gi[row * n_in..(row + 1) * n_in];
        for (o, &g) in g_row.iter().enumerate() {
            let w_row = &layer.weights[o * n_in..(o + 1) * n_in];
            for (slot, w) in i_row.iter_mut().zip(w_row) {
                *slot += g * w;
            }
        }
    }
    Ok(g_in)
}

/// Accumulates parameter gradients for output rows `rows` into `dw` / `db`, which hold
/// exactly those rows. `parts` are `(g_out, x)` pairs for consecutive time segments
/// in temporal order; the per-element summation order is the same however the time
/// axis is split, and however the rows are partitioned.
pub(crate) fn accumulate_param_grads(
    width_in: usize,
    parts: &[(&TimeMajorTensor, &TimeMajorTensor)],
    rows: Range<usize>,
    dw: &mut [f32],
    db: &mut [f32],
) {
    for (g_out, x) in parts {
        let n_out = g_out.width();
        let gs = g_out.data();
        let xs = x.data();
        for row in 0..g_out.t_len() * g_out.batch() {
            let x_row = &xs[row * width_in..(row + 1) * width_in];
            for (r, o) in rows.clone().enumerate() {
                let g = gs[row * n_out + o];
                db[r] += g;
                let dw_row = &mut dw[r * width_in..(r + 1) * width_in];
                for (slot, xv) in dw_row.iter_mut().zip(x_row) {
                    *slot += g * xv;
                }
            }
        }
    }
}

/// Full backward: `(g_in, parameter gradients)`.
pub fn affine_backward(
    layer: &AffineLayer,
    g_out: &TimeMajorTensor,
    x_saved: &TimeMajorTensor,
) -> Result<(TimeMajorTensor, AffineGrads)> {
    if x_saved.width() != layer.width_in
        || (x_saved.t_len(), x_saved.batch()) != (g_out.t_len(), g_out.batch())
    {
        return Err(shape_err(
            format!("saved input {} x {} x {}", g_out.t_len(), g_out.batch(), layer.width_in),
            format!("{} x {} x {}", x_saved.t_len(), x_saved.batch(), x_saved.width()),
        ));
    }
    let g_in = affine_input_grad(layer, g_out)?;
    let mut grads = AffineGrads::zeros(layer.width_in, layer.width_out);
    accumulate_param_grads(
        layer.width_in,
        &[(g_out, x_saved)],
        0..layer.width_out,
        &mut grads.weights,
        &mut grads.bias,
    );
    Ok((g_in, grads))
}
