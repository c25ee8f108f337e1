//! Independent oracles shared by the integration tests.
//!
//! The interpreters below restate the neuron recurrences scalar by scalar, with the
//! same floating point operation order as the update rules, so agreement with the
//! engines is expected to be bitwise.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temporal_fusion::network::affine::{affine_apply, affine_backward, AffineLayer};
use temporal_fusion::network::{rate_cross_entropy, Layer, SpikingNet};
use temporal_fusion::neuron::surrogate;
use temporal_fusion::{LifParams, LifState, MembraneGrad, SurrogateArgument, TimeMajorTensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn oracle_surrogate(u: f32, alpha: f32) -> f32 {
    let e = (-alpha * u.abs()).exp();
    alpha * e / ((1.0 + e) * (1.0 + e))
}

fn surrogate_arg(v: f32, p: &LifParams) -> f32 {
    match p.surrogate_arg {
        SurrogateArgument::Centered => v - p.v_th,
        SurrogateArgument::Literal => v,
    }
}

pub fn oracle_step(v: f32, y: f32, x: f32, p: &LifParams) -> (f32, f32) {
    let v1 = p.k_tau * v * (1.0 - y) + p.v_rest * y + x;
    (v1, if v1 - p.v_th >= 0.0 { 1.0 } else { 0.0 })
}

pub fn oracle_step_back(g_next: f32, g_y: f32, v: f32, y: f32, p: &LifParams) -> f32 {
    let d = oracle_surrogate(surrogate_arg(v, p), p.alpha);
    p.k_tau * g_next * (1.0 - y - v * d) + g_y * d
}

/// Scalar LIF forward: `(v_hist, y_hist, final_v, final_y)` as flat time-major vectors.
pub fn lif_forward(x: &TimeMajorTensor, v0: &[f32], y0: &[f32], p: &LifParams) -> (Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>) {
    let cols = x.step_len();
    let mut vh = vec![0.0; x.data().len()];
    let mut yh = vec![0.0; x.data().len()];
    let (mut fv, mut fy) = (v0.to_vec(), y0.to_vec());
    for c in 0..cols {
        let (mut v, mut y) = (v0[c], y0[c]);
        for t in 0..x.t_len() {
            (v, y) = oracle_step(v, y, x.data()[t * cols + c], p);
            vh[t * cols + c] = v;
            yh[t * cols + c] = y;
        }
        fv[c] = v;
        fy[c] = y;
    }
    (vh, yh, fv, fy)
}

/// Scalar LIF backward: `(g_x, grad_carry_out)`.
pub fn lif_backward(g_y: &TimeMajorTensor, vh: &[f32], yh: &[f32], g0: &[f32], p: &LifParams) -> (Vec<f32>, Vec<f32>) {
    let cols = g_y.step_len();
    let mut gx = vec![0.0; g_y.data().len()];
    let mut out = g0.to_vec();
    for c in 0..cols {
        let mut g = g0[c];
        for t in (0..g_y.t_len()).rev() {
            let i = t * cols + c;
            g = oracle_step_back(g, g_y.data()[i], vh[i], yh[i], p);
            gx[i] = g;
        }
        out[c] = g;
    }
    (gx, out)
}

pub struct LifCase {
    pub x: TimeMajorTensor,
    pub g_y: TimeMajorTensor,
    pub carry: LifState,
    pub g_carry: MembraneGrad,
}

/// Random LIF inputs with a share of exact-threshold and zero entries, a random
/// carry state (including spikes) and a random upstream gradient.
pub fn lif_case(r: &mut ChaCha8Rng, t: usize, b: usize, n: usize, p: &LifParams) -> LifCase {
    let x = TimeMajorTensor::from_fn(t, b, n, |_, _, _| match r.gen_range(0..10) {
        0 => 0.0,
        1 => p.v_th,
        _ => r.gen_range(-0.4f32..0.9),
    })
    .unwrap();
    let g_y = TimeMajorTensor::from_fn(t, b, n, |_, _, _| r.gen_range(-1.0f32..1.0)).unwrap();
    let v = (0..b * n).map(|_| r.gen_range(-0.5f32..0.6)).collect();
    let y = (0..b * n).map(|_| if r.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
    let g = (0..b * n).map(|_| r.gen_range(-1.0f32..1.0)).collect();
    LifCase {
        x,
        g_y,
        carry: LifState::from_parts(b, n, v, y).unwrap(),
        g_carry: MembraneGrad::from_vec(b, n, g).unwrap(),
    }
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn bitwise_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Per-step interpreter of a whole network: advances every layer one time step at a
/// time (step-major order, unlike the library's layer-major order).
pub struct NetOracle {
    /// `[layer][t][b][n]` saved affine inputs, LIF membranes and spikes.
    pub affine_in: Vec<Vec<Vec<f32>>>,
    pub v: Vec<Vec<Vec<f32>>>,
    pub y: Vec<Vec<Vec<f32>>>,
    pub output: Vec<f32>,
}

pub fn net_forward(net: &SpikingNet, x: &TimeMajorTensor) -> NetOracle {
    let layers = net.layers();
    let (t_len, batch) = (x.t_len(), x.batch());
    let mut state: Vec<Option<(Vec<f32>, Vec<f32>)>> = layers
        .iter()
        .map(|_| None)
        .collect();
    let mut o = NetOracle {
        affine_in: vec![Vec::new(); layers.len()],
        v: vec![Vec::new(); layers.len()],
        y: vec![Vec::new(); layers.len()],
        output: Vec::new(),
    };
    for t in 0..t_len {
        let mut h = x.step(t).to_vec();
        for (l, layer) in layers.iter().enumerate() {
            match layer {
                Layer::Affine(a) => {
                    o.affine_in[l].push(h.clone());
                    let (ni, no) = (a.width_in(), a.width_out());
                    let mut out = vec![0.0f32; batch * no];
                    for b in 0..batch {
                        for k in 0..no {
                            let mut acc = a.bias()[k];
                            for i in 0..ni {
                                acc += a.weights()[k * ni + i] * h[b * ni + i];
                            }
                            out[b * no + k] = acc;
                        }
                    }
                    h = out;
                }
                Layer::Lif(p) => {
                    let (sv, sy) = state[l].get_or_insert_with(|| (vec![p.v_rest; h.len()], vec![0.0; h.len()]));
                    for c in 0..h.len() {
                        let (v1, y1) = oracle_step(sv[c], sy[c], h[c], p);
                        sv[c] = v1;
                        sy[c] = y1;
                    }
                    o.v[l].push(sv.clone());
                    o.y[l].push(sy.clone());
                    h = sy.clone();
                }
            }
        }
        o.output.extend(h);
    }
    o
}

/// Backward through the per-step interpreter. Returns `([(dW, db)] per affine layer, g_x)`.
/// Parameter gradients are summed over `(t, b)` in ascending order after the sweep.
pub type LayerGrads = (Vec<f32>, Vec<f32>);

pub fn net_backward(net: &SpikingNet, o: &NetOracle, g_y: &TimeMajorTensor) -> (Vec<LayerGrads>, Vec<f32>) {
    let layers = net.layers();
    let (t_len, batch) = (g_y.t_len(), g_y.batch());
    let mut g_carry: Vec<Option<Vec<f32>>> = layers.iter().map(|_| None).collect();
    let mut g_out_saved: Vec<Vec<Vec<f32>>> = vec![vec![Vec::new(); t_len]; layers.len()];
    let mut g_x = vec![0.0f32; t_len * batch * net.input_width()];
    for t in (0..t_len).rev() {
        let mut g = g_y.step(t).to_vec();
        for (l, layer) in layers.iter().enumerate().rev() {
            match layer {
                Layer::Lif(p) => {
                    let carry = g_carry[l].get_or_insert_with(|| vec![0.0; g.len()]);
                    for c in 0..g.len() {
                        carry[c] = oracle_step_back(carry[c], g[c], o.v[l][t][c], o.y[l][t][c], p);
                    }
                    g = carry.clone();
                }
                Layer::Affine(a) => {
                    let (ni, no) = (a.width_in(), a.width_out());
                    let mut g_in = vec![0.0f32; batch * ni];
                    for b in 0..batch {
                        for k in 0..no {
                            for i in 0..ni {
                                g_in[b * ni + i] += g[b * no + k] * a.weights()[k * ni + i];
                            }
                        }
                    }
                    g_out_saved[l][t] = g;
                    g = g_in;
                }
            }
        }
        let w = net.input_width();
        g_x[t * batch * w..(t + 1) * batch * w].copy_from_slice(&g);
    }
    let mut grads = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let Layer::Affine(a) = layer else { continue };
        let (ni, no) = (a.width_in(), a.width_out());
        let mut dw = vec![0.0f32; ni * no];
        let mut db = vec![0.0f32; no];
        for (t, g_out) in g_out_saved[l].iter().enumerate() {
            for b in 0..batch {
                for k in 0..no {
                    let g = g_out[b * no + k];
                    db[k] += g;
                    for i in 0..ni {
                        dw[k * ni + i] += g * o.affine_in[l][t][b * ni + i];
                    }
                }
            }
        }
        grads.push((dw, db));
    }
    (grads, g_x)
}

/// Random binary spike input.
pub fn spike_input(r: &mut ChaCha8Rng, t: usize, b: usize, n: usize, rate: f64) -> TimeMajorTensor {
    TimeMajorTensor::from_fn(t, b, n, |_, _, _| if r.gen_bool(rate) { 1.0 } else { 0.0 }).unwrap()
}

/// f64 reference loss: softmax cross-entropy of time-mean logits of `x W^T + b`.
pub fn oracle_affine_loss(w: &[f64], bias: &[f64], x: &TimeMajorTensor, labels: &[usize]) -> f64 {
    let (t_len, n_in) = (x.t_len(), x.width());
    let n_out = bias.len();
    let mut loss = 0.0;
    for (b, &label) in labels.iter().enumerate() {
        let mut logits = vec![0.0f64; n_out];
        for t in 0..t_len {
            for (o, l) in logits.iter_mut().enumerate() {
                let mut acc = bias[o];
                for i in 0..n_in {
                    acc += w[o * n_in + i] * f64::from(x.get(t, b, i));
                }
                *l += acc;
            }
        }
        logits.iter_mut().for_each(|l| *l /= t_len as f64);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        loss += lse - logits[label];
    }
    loss / labels.len() as f64
}

/// `|a - e| <= 1e-3 * max(|a|, |e|)`; the relative scale is floored at 1e-4 so that
/// gradients at f32 noise level are compared absolutely.
pub fn close(analytic: f32, expected: f64) -> bool {
    let a = f64::from(analytic);
    (a - expected).abs() <= 1e-3 * a.abs().max(expected.abs()).max(1e-4)
}

/// Compares the library's affine parameter gradients under the rate cross-entropy with
/// central differences of [`oracle_affine_loss`]. Returns the mismatching entries.
pub fn fd_affine_loss_case(seed: u64) -> Vec<String> {
    let mut r = rng(seed);
    let (n_in, n_out) = (r.gen_range(1..=6), r.gen_range(2..=5));
    let (t, b) = (r.gen_range(1..=5), r.gen_range(1..=4));
    let layer = AffineLayer::init(n_in, n_out, 1.0, &mut r).unwrap();
    let x = TimeMajorTensor::from_fn(t, b, n_in, |_, _, _| r.gen_range(-1.0f32..1.0)).unwrap();
    let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..n_out)).collect();

    let z = affine_apply(&layer, &x).unwrap();
    let (_, g_z) = rate_cross_entropy(&z, &labels).unwrap();
    let (_, grads) = affine_backward(&layer, &g_z, &x).unwrap();

    let w: Vec<f64> = layer.weights().iter().map(|&v| f64::from(v)).collect();
    let bias: Vec<f64> = layer.bias().iter().map(|&v| f64::from(v)).collect();
    let h = 1e-5;
    let mut bad = Vec::new();
    for i in 0..w.len() {
        let (mut wp, mut wm) = (w.clone(), w.clone());
        wp[i] += h;
        wm[i] -= h;
        let fd = (oracle_affine_loss(&wp, &bias, &x, &labels) - oracle_affine_loss(&wm, &bias, &x, &labels)) / (2.0 * h);
        if !close(grads.weights[i], fd) {
            bad.push(format!("dW[{i}] = {} vs {fd}", grads.weights[i]));
        }
    }
    for i in 0..bias.len() {
        let (mut bp, mut bm) = (bias.clone(), bias.clone());
        bp[i] += h;
        bm[i] -= h;
        let fd = (oracle_affine_loss(&w, &bp, &x, &labels) - oracle_affine_loss(&w, &bm, &x, &labels)) / (2.0 * h);
        if !close(grads.bias[i], fd) {
            bad.push(format!("db[{i}] = {} vs {fd}", grads.bias[i]));
        }
    }
    bad
}

/// Composite Simpson integral of the library surrogate over `[-40/alpha, 40/alpha]`,
/// one half-line at a time since the integrand has a kink at 0.
pub fn surrogate_integral(alpha: f32) -> f64 {
    let p = LifParams::new(0.0, 0.2, 0.3, alpha).unwrap();
    let half = 40.0 / f64::from(alpha);
    let n = 200_000;
    let h = half / n as f64;
    let mut s = 0.0f64;
    for i in 0..=n {
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let u = (i as f64 * h) as f32;
        s += w * (f64::from(surrogate(u, &p)) + f64::from(surrogate(-u, &p)));
    }
    s * h / 3.0
}
