//! Serial and temporally fused execution of a LIF layer.
//!
//! Both engines compute exactly the same per-neuron recurrences (they call the same
//! scalar kernels from [`crate::neuron`] in the same order for every neuron), so their
//! outputs are bitwise equal. Only their memory behaviour differs:
//!
//! * **serial** advances the whole `[batch x width]` block one time step at a time.
//!   Each step reads the previous state from main storage, produces a freshly
//!   allocated next state, copies it into the histories and re-reads it on the next
//!   step. This is the per-step round trip that temporal fusion removes.
//! * **fused** walks each tile of neuron columns through the entire time axis with the
//!   `(v, y)` state held in a small local array, writing each step's outputs once and
//!   never re-reading state.
//!
//! If either engine is ever vectorised in a way that reorders the floating point
//! operations, the equivalence guarantee drops from bitwise to within 1 ULP per step.

use std::hint::black_box;
use std::ops::Range;

use crate::error::{shape_err, Result};
use crate::neuron::{
    backward_scalar, forward_scalar, lif_step_backward, lif_step_forward, LifParams, LifState,
    MembraneGrad,
};
use crate::tensor::TimeMajorTensor;

/// Neuron columns processed together by one pass of the fused engine. The tile's
/// state (v, y or the running gradient) stays in a stack array for the whole sweep;
/// at 1024 columns the v and y arrays together occupy 8 KiB and stay L1-resident.
pub const FUSED_TILE: usize = 1024;

/// Everything a LIF layer's forward pass leaves behind for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedForwardRecord {
    /// Spikes for every step.
    pub y_hist: TimeMajorTensor,
    /// Membrane potential for every step, as produced by the update before any reset.
    pub v_hist: TimeMajorTensor,
    /// `(v, y)` at the segment's last step, the carry-in for the next segment.
    pub final_state: LifState,
}

/// Which LIF execution engine to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LifEngine {
    Serial,
    #[default]
    Fused,
}

impl LifEngine {
    pub fn forward(
        self,
        x: &TimeMajorTensor,
        carry_in: &LifState,
        p: &LifParams,
    ) -> Result<FusedForwardRecord> {
        match self {
            LifEngine::Serial => serial_forward(x, carry_in, p),
            LifEngine::Fused => fused_forward(x, carry_in, p),
        }
    }

    pub fn backward(
        self,
        g_y: &TimeMajorTensor,
        rec: &FusedForwardRecord,
        grad_carry_in: &MembraneGrad,
        p: &LifParams,
    ) -> Result<(TimeMajorTensor, MembraneGrad)> {
        match self {
            LifEngine::Serial => serial_backward(g_y, rec, grad_carry_in, p),
            LifEngine::Fused => fused_backward(g_y, rec, grad_carry_in, p),
        }
    }
}

impl std::str::FromStr for LifEngine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "serial" => Ok(LifEngine::Serial),
            "fused" => Ok(LifEngine::Fused),
            other => Err(format!("unknown engine '{other}' (expected serial or fused)")),
        }
    }
}

fn check_backward_inputs(
    g_y: &TimeMajorTensor,
    rec: &FusedForwardRecord,
    grad_carry_in: &MembraneGrad,
) -> Result<()> {
    let (t, b, n) = (rec.y_hist.t_len(), rec.y_hist.batch(), rec.y_hist.width());
    for other in [g_y, &rec.v_hist] {
        if (other.t_len(), other.batch(), other.width()) != (t, b, n) {
            return Err(shape_err(
                format!("{t} x {b} x {n}"),
                format!("{} x {} x {}", other.t_len(), other.batch(), other.width()),
            ));
        }
    }
    grad_carry_in.check_shape(b, n)
}

fn check_record_shape(x: &TimeMajorTensor, rec: &FusedForwardRecord) -> Result<()> {
    let want = (x.t_len(), x.batch(), x.width());
    for h in [&rec.v_hist, &rec.y_hist] {
        let got = (h.t_len(), h.batch(), h.width());
        if got != want {
            return Err(shape_err(
                format!("{} x {} x {}", want.0, want.1, want.2),
                format!("{} x {} x {}", got.0, got.1, got.2),
            ));
        }
    }
    rec.final_state.check_shape(x.batch(), x.width())
}

/// Preallocated output record shaped like `x`.
pub fn record_like(x: &TimeMajorTensor) -> Result<FusedForwardRecord> {
    let (t_len, batch, width) = (x.t_len(), x.batch(), x.width());
    Ok(FusedForwardRecord {
        y_hist: TimeMajorTensor::zeros(t_len, batch, width)?,
        v_hist: TimeMajorTensor::zeros(t_len, batch, width)?,
        final_state: LifState { batch, width, v: vec![0.0; batch * width], y: vec![0.0; batch * width] },
    })
}

/// Per-time-step forward: one whole-block step per iteration, state round-tripped
/// through freshly allocated storage.
pub fn serial_forward(x: &TimeMajorTensor, carry_in: &LifState, p: &LifParams) -> Result<FusedForwardRecord> {
    carry_in.check_shape(x.batch(), x.width())?;
    let mut rec = record_like(x)?;
    serial_forward_into(x, carry_in, &mut rec, p)?;
    Ok(rec)
}

/// [`serial_forward`] writing into a preallocated record (see [`record_like`]).
pub fn serial_forward_into(
    x: &TimeMajorTensor,
    carry_in: &LifState,
    rec: &mut FusedForwardRecord,
    p: &LifParams,
) -> Result<()> {
    carry_in.check_shape(x.batch(), x.width())?;
    check_record_shape(x, rec)?;
    let mut state = carry_in.clone();
    for t in 0..x.t_len() {
        // black_box keeps the state an opaque value in memory between steps.
        let next = lif_step_forward(black_box(&state), x.step(t), p)?;
        rec.v_hist.step_mut(t).copy_from_slice(next.v());
        rec.y_hist.step_mut(t).copy_from_slice(next.y());
        state = black_box(next);
    }
    rec.final_state = state;
    Ok(())
}

/// Temporally fused forward: one sweep over the whole time axis per tile of columns.
pub fn fused_forward(x: &TimeMajorTensor, carry_in: &LifState, p: &LifParams) -> Result<FusedForwardRecord> {
    carry_in.check_shape(x.batch(), x.width())?;
    let mut rec = record_like(x)?;
    fused_forward_into(x, carry_in, &mut rec, p)?;
    Ok(rec)
}

/// [`fused_forward`] writing into a preallocated record (see [`record_like`]).
pub fn fused_forward_into(
    x: &TimeMajorTensor,
    carry_in: &LifState,
    rec: &mut FusedForwardRecord,
    p: &LifParams,
) -> Result<()> {
    carry_in.check_shape(x.batch(), x.width())?;
    check_record_shape(x, rec)?;
    let FusedForwardRecord { y_hist, v_hist, final_state } = rec;
    fused_forward_columns(
        x,
        0..x.step_len(),
        (carry_in.v(), carry_in.y()),
        (v_hist.data_mut(), y_hist.data_mut()),
        (&mut final_state.v, &mut final_state.y),
        p,
    );
    Ok(())
}

/// Fused forward over the flattened column range `cols` only. `carry` and `last`
/// are indexed relative to `cols.start`; the histories are whole-tensor buffers.
pub(crate) fn fused_forward_columns(
    x: &TimeMajorTensor,
    cols: Range<usize>,
    carry: (&[f32], &[f32]),
    hist: (&mut [f32], &mut [f32]),
    last: (&mut [f32], &mut [f32]),
    p: &LifParams,
) {
    let stride = x.step_len();
    let xs = x.data();
    let (vh, yh) = hist;
    let mut c0 = cols.start;
    while c0 < cols.end {
        let len = FUSED_TILE.min(cols.end - c0);
        let rel = c0 - cols.start;
        let mut v = [0.0f32; FUSED_TILE];
        let mut y = [0.0f32; FUSED_TILE];
        v[..len].copy_from_slice(&carry.0[rel..rel + len]);
        y[..len].copy_from_slice(&carry.1[rel..rel + len]);

        for t in 0..x.t_len() {
            let base = t * stride + c0;
            let x_t = &xs[base..base + len];
            let v_out = &mut vh[base..base + len];
            let y_out = &mut yh[base..base + len];
            for j in 0..len {
                let (v1, y1) = forward_scalar(v[j], y[j], x_t[j], p);
                v[j] = v1;
                y[j] = y1;
                v_out[j] = v1;
                y_out[j] = y1;
            }
        }

        last.0[rel..rel + len].copy_from_slice(&v[..len]);
        last.1[rel..rel + len].copy_from_slice(&y[..len]);
        c0 += len;
    }
}

fn check_grad_out(g_y: &TimeMajorTensor, g_x: &TimeMajorTensor) -> Result<()> {
    let want = (g_y.t_len(), g_y.batch(), g_y.width());
    let got = (g_x.t_len(), g_x.batch(), g_x.width());
    if got != want {
        return Err(shape_err(
            format!("{} x {} x {}", want.0, want.1, want.2),
            format!("{} x {} x {}", got.0, got.1, got.2),
        ));
    }
    Ok(())
}

/// Per-time-step backward, `t = T-1 .. 0`, with the membrane gradient threaded
/// through freshly allocated storage. Returns `(g_x, grad_carry_out)` where
/// `grad_carry_out` is the membrane gradient leaving the segment's first step.
pub fn serial_backward(
    g_y: &TimeMajorTensor,
    rec: &FusedForwardRecord,
    grad_carry_in: &MembraneGrad,
    p: &LifParams,
) -> Result<(TimeMajorTensor, MembraneGrad)> {
    check_backward_inputs(g_y, rec, grad_carry_in)?;
    let mut g_x = TimeMajorTensor::zeros(g_y.t_len(), g_y.batch(), g_y.width())?;
    let carry = serial_backward_into(g_y, rec, grad_carry_in, &mut g_x, p)?;
    Ok((g_x, carry))
}

/// [`serial_backward`] writing `g_x` into a preallocated tensor; returns `grad_carry_out`.
pub fn serial_backward_into(
    g_y: &TimeMajorTensor,
    rec: &FusedForwardRecord,
    grad_carry_in: &MembraneGrad,
    g_x: &mut TimeMajorTensor,
    p: &LifParams,
) -> Result<MembraneGrad> {
    check_backward_inputs(g_y, rec, grad_carry_in)?;
    check_grad_out(g_y, g_x)?;
    let mut g_next = grad_carry_in.values().to_vec();
    for t in (0..g_y.t_len()).rev() {
        let g_t = lif_step_backward(
            black_box(&g_next),
            g_y.step(t),
            rec.v_hist.step(t),
            rec.y_hist.step(t),
            p,
        )?;
        g_x.step_mut(t).copy_from_slice(&g_t);
        g_next = black_box(g_t);
    }
    Ok(MembraneGrad { batch: g_y.batch(), width: g_y.width(), g: g_next })
}

/// Temporally fused backward: one reverse sweep per tile with the running membrane
/// gradient kept local.
pub fn fused_backward(
    g_y: &TimeMajorTensor,
    rec: &FusedForwardRecord,
    grad_carry_in: &MembraneGrad,
    p: &LifParams,
) -> Result<(TimeMajorTensor, MembraneGrad)> {
    check_backward_inputs(g_y, rec, grad_carry_in)?;
    let mut g_x = TimeMajorTensor::zeros(g_y.t_len(), g_y.batch(), g_y.width())?;
    let carry = fused_backward_into(g_y, rec, grad_carry_in, &mut g_x, p)?;
    Ok((g_x, carry))
}

/// [`fused_backward`] writing `g_x` into a preallocated tensor; returns `grad_carry_out`.
pub fn fused_backward_into(
    g_y: &TimeMajorTensor,
    rec: &FusedForwardRecord,
    grad_carry_in: &MembraneGrad,
    g_x: &mut TimeMajorTensor,
    p: &LifParams,
) -> Result<MembraneGrad> {
    check_backward_inputs(g_y, rec, grad_carry_in)?;
    check_grad_out(g_y, g_x)?;
    let mut carry_out = vec![0.0f32; g_y.step_len()];
    fused_backward_columns(g_y, rec, 0..g_y.step_len(), grad_carry_in.values(), g_x.data_mut(), &mut carry_out, p);
    Ok(MembraneGrad { batch: g_y.batch(), width: g_y.width(), g: carry_out })
}

/// Fused backward over the flattened column range `cols`; `carry_in` and `carry_out`
/// are indexed relative to `cols.start`.
pub(crate) fn fused_backward_columns(
    g_y: &TimeMajorTensor,
    rec: &FusedForwardRecord,
    cols: Range<usize>,
    carry_in: &[f32],
    g_x: &mut [f32],
    carry_out: &mut [f32],
    p: &LifParams,
) {
    let stride = g_y.step_len();
    let gys = g_y.data();
    let vh = rec.v_hist.data();
    let yh = rec.y_hist.data();
    let mut c0 = cols.start;
    while c0 < cols.end {
        let len = FUSED_TILE.min(cols.end - c0);
        let rel = c0 - cols.start;
        let mut g = [0.0f32; FUSED_TILE];
        g[..len].copy_from_slice(&carry_in[rel..rel + len]);

        for t in (0..g_y.t_len()).rev() {
            let base = t * stride + c0;
            let gy_t = &gys[base..base + len];
            let v_t = &vh[base..base + len];
            let y_t = &yh[base..base + len];
            let out = &mut g_x[base..base + len];
            for j in 0..len {
                let gj = backward_scalar(g[j], gy_t[j], v_t[j], y_t[j], p);
                g[j] = gj;
                out[j] = gj;
            }
        }

        carry_out[rel..rel + len].copy_from_slice(&g[..len]);
        c0 += len;
    }
}
