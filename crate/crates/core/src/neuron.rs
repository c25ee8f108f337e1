//! Element-wise LIF dynamics and the sigmoid surrogate gradient.
//!
//! Forward, per neuron and time step:
//!
//! ```text
//! v' = k_tau * v * (1 - y) + v_rest * y + x
//! y' = 1 if v' - v_th >= 0 else 0
//! ```
//!
//! Backward, with `g_v_next` the gradient flowing in from step `t + 1`:
//!
//! ```text
//! g_x = k_tau * g_v_next * (1 - y - v * d) + g_y * d,   d = surrogate(v - v_th)
//! ```
//!
//! `g_x` is also the gradient w.r.t. `v` at the same step, since `v` depends on `x`
//! additively, so it becomes `g_v_next` for the preceding step.
//!
//! The scalar kernels [`forward_scalar`] and [`backward_scalar`] are the only place
//! this arithmetic is written down; every engine composes them, which is what makes
//! the engines bitwise interchangeable.

use crate::error::{shape_err, Error, Result};

/// Where the surrogate is centred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurrogateArgument {
    /// `d = surrogate(v - v_th)`: peaks where the spike Heaviside switches.
    #[default]
    Centered,
    /// `d = surrogate(v)`: the argument written literally in the backward recursion.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub v_rest: f32,
    pub k_tau: f32,
    pub v_th: f32,
    /// Surrogate sharpness.
    pub alpha: f32,
    pub surrogate_arg: SurrogateArgument,
}

impl Default for LifParams {
    /// `v_rest = 0`, `k_tau = 0.2`, `v_th = 0.3`, `alpha = 4.0`, centred surrogate.
    fn default() -> Self {
        Self {
            v_rest: 0.0,
            k_tau: 0.2,
            v_th: 0.3,
            alpha: 4.0,
            surrogate_arg: SurrogateArgument::Centered,
        }
    }
}

impl LifParams {
    pub fn new(v_rest: f32, k_tau: f32, v_th: f32, alpha: f32) -> Result<Self> {
        let p = Self { v_rest, k_tau, v_th, alpha, surrogate_arg: SurrogateArgument::Centered };
        p.validate()?;
        Ok(p)
    }

    /// Builds parameters from a membrane time constant via `k_tau = 1 - 1/tau`.
    pub fn from_tau(tau: f32, v_rest: f32, v_th: f32, alpha: f32) -> Result<Self> {
        if !tau.is_finite() || tau <= 1.0 {
            return Err(Error::InvalidParameter(format!("tau must be > 1, got {tau}")));
        }
        Self::new(v_rest, 1.0 - 1.0 / tau, v_th, alpha)
    }

    pub fn with_surrogate_arg(mut self, arg: SurrogateArgument) -> Self {
        self.surrogate_arg = arg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.v_rest, self.k_tau, self.v_th, self.alpha]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidParameter("LIF parameters must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.k_tau) {
            return Err(Error::InvalidParameter(format!("k_tau must lie in [0, 1), got {}", self.k_tau)));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidParameter(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.v_th <= self.v_rest {
            return Err(Error::InvalidParameter(format!(
                "v_th ({}) must exceed v_rest ({})",
                self.v_th, self.v_rest
            )));
        }
        Ok(())
    }

    #[inline(always)]
    fn surrogate_at(&self, v: f32) -> f32 {
        match self.surrogate_arg {
            SurrogateArgument::Centered => surrogate(v - self.v_th, self),
            SurrogateArgument::Literal => surrogate(v, self),
        }
    }
}

/// Sigmoid-derivative surrogate `alpha * e^(-alpha u) / (1 + e^(-alpha u))^2`.
///
/// Evaluated on `|u|` (the expression is even), which keeps the exponent
/// non-positive and avoids `inf / inf` for large negative `u`.
#[inline(always)]
pub fn surrogate(u: f32, p: &LifParams) -> f32 {
    let e = (-p.alpha * u.abs()).exp();
    let denom = (1.0 + e) * (1.0 + e);
    p.alpha * e / denom
}

/// One neuron, one step forward. Returns `(v', y')`.
#[inline(always)]
pub fn forward_scalar(v: f32, y: f32, x: f32, p: &LifParams) -> (f32, f32) {
    let v_new = p.k_tau * v * (1.0 - y) + p.v_rest * y + x;
    let y_new = if v_new - p.v_th >= 0.0 { 1.0 } else { 0.0 };
    (v_new, y_new)
}

/// One neuron, one step backward. Returns the gradient w.r.t. `x` (equivalently `v`) at this step.
#[inline(always)]
pub fn backward_scalar(g_v_next: f32, g_y: f32, v: f32, y: f32, p: &LifParams) -> f32 {
    let d = p.surrogate_at(v);
    p.k_tau * g_v_next * (1.0 - y - v * d) + g_y * d
}

/// Carry state of a LIF layer at a time boundary: membrane `v` and last spikes `y`,
/// each a `[batch x width]` block.
#[derive(Debug, Clone, PartialEq)]
pub struct LifState {
    pub(crate) batch: usize,
    pub(crate) width: usize,
    pub(crate) v: Vec<f32>,
    pub(crate) y: Vec<f32>,
}

impl LifState {
    /// Resting state: `v = v_rest`, `y = 0`.
    pub fn initial(batch: usize, width: usize, p: &LifParams) -> Self {
        Self {
            batch,
            width,
            v: vec![p.v_rest; batch * width],
            y: vec![0.0; batch * width],
        }
    }

    pub fn from_parts(batch: usize, width: usize, v: Vec<f32>, y: Vec<f32>) -> Result<Self> {
        let n = batch * width;
        if v.len() != n || y.len() != n {
            return Err(shape_err(
                format!("{n} values for v and y"),
                format!("{} and {}", v.len(), y.len()),
            ));
        }
        if let Some(bad) = y.iter().find(|&&s| s != 0.0 && s != 1.0) {
            return Err(Error::InvalidParameter(format!("spike value {bad} is not 0 or 1")));
        }
        Ok(Self { batch, width, v, y })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn v(&self) -> &[f32] {
        &self.v
    }

    pub fn y(&self) -> &[f32] {
        &self.y
    }

    pub(crate) fn check_shape(&self, batch: usize, width: usize) -> Result<()> {
        if self.batch != batch || self.width != width {
            return Err(shape_err(
                format!("state {batch} x {width}"),
                format!("state {} x {}", self.batch, self.width),
            ));
        }
        Ok(())
    }
}

/// Membrane gradient at a time boundary, flowing from the later segment to the earlier one.
#[derive(Debug, Clone, PartialEq)]
pub struct MembraneGrad {
    pub(crate) batch: usize,
    pub(crate) width: usize,
    pub(crate) g: Vec<f32>,
}

impl MembraneGrad {
    /// The boundary condition after the final time step.
    pub fn zeros(batch: usize, width: usize) -> Self {
        Self { batch, width, g: vec![0.0; batch * width] }
    }

    pub fn from_vec(batch: usize, width: usize, g: Vec<f32>) -> Result<Self> {
        if g.len() != batch * width {
            return Err(shape_err(batch * width, g.len()));
        }
        Ok(Self { batch, width, g })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.g
    }

    pub(crate) fn check_shape(&self, batch: usize, width: usize) -> Result<()> {
        if self.batch != batch || self.width != width {
            return Err(shape_err(
                format!("gradient {batch} x {width}"),
                format!("gradient {} x {}", self.batch, self.width),
            ));
        }
        Ok(())
    }
}

/// Advances a whole `[batch x width]` block by one time step, returning a fresh state.
pub fn lif_step_forward(state: &LifState, x_t: &[f32], p: &LifParams) -> Result<LifState> {
    if x_t.len() != state.v.len() {
        return Err(shape_err(state.v.len(), x_t.len()));
    }
    let mut v = Vec::with_capacity(x_t.len());
    let mut y = Vec::with_capacity(x_t.len());
    for ((&v0, &y0), &x) in state.v.iter().zip(&state.y).zip(x_t) {
        let (v1, y1) = forward_scalar(v0, y0, x, p);
        v.push(v1);
        y.push(y1);
    }
    Ok(LifState { batch: state.batch, width: state.width, v, y })
}

/// Backward through one time step for a whole block.
pub fn lif_step_backward(
    g_v_next: &[f32],
    g_y_t: &[f32],
    v_t: &[f32],
    y_t: &[f32],
    p: &LifParams,
) -> Result<Vec<f32>> {
    let n = g_v_next.len();
    for len in [g_y_t.len(), v_t.len(), y_t.len()] {
        if len != n {
            return Err(shape_err(n, len));
        }
    }
    Ok((0..n)
        .map(|i| backward_scalar(g_v_next[i], g_y_t[i], v_t[i], y_t[i], p))
        .collect())
}
