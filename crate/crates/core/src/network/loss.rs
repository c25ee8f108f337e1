//! Spike-rate readout and softmax cross-entropy.
//!
//! Class logits are the mean output spike count over time, which keeps their scale
//! independent of the number of time steps.

use crate::error::{shape_err, Error, Result};
use crate::tensor::TimeMajorTensor;

/// `logits[b][c] = (1/T) * sum_t y_out(t, b, c)`, row-major `[batch x classes]`.
pub fn rate_logits(y_out: &TimeMajorTensor) -> Vec<f32> {
    let (t_len, classes) = (y_out.t_len(), y_out.width());
    let mut sums = vec![0.0f32; y_out.step_len()];
    for t in 0..t_len {
        for (s, y) in sums.iter_mut().zip(y_out.step(t)) {
            *s += y;
        }
    }
    debug_assert_eq!(sums.len() % classes, 0);
    let steps = t_len as f32;
    sums.iter().map(|s| s / steps).collect()
}

/// Index of the largest logit per sample (first wins on ties).
pub fn predictions(y_out: &TimeMajorTensor) -> Vec<usize> {
    let classes = y_out.width();
    rate_logits(y_out)
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

fn softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Mean softmax cross-entropy over the batch, and its gradient w.r.t. every output
/// spike: `g_y(t, b, c) = (softmax(b, c) - [c == label_b]) / (T * B)`.
pub fn rate_cross_entropy(y_out: &TimeMajorTensor, labels: &[usize]) -> Result<(f32, TimeMajorTensor)> {
    let (t_len, batch, classes) = (y_out.t_len(), y_out.batch(), y_out.width());
    if labels.is_empty() {
        return Err(Error::InvalidDimensions("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(shape_err(format!("{batch} labels"), format!("{} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::InvalidParameter(format!("label {bad} out of range for {classes} classes")));
    }

    let logits = rate_logits(y_out);
    let mut loss = 0.0f32;
    let mut g_logit = vec![0.0f32; batch * classes];
    let scale = 1.0 / (t_len as f32 * batch as f32);
    for (b, &label) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let probs = softmax_row(row);
        loss -= probs[label].max(f32::MIN_POSITIVE).ln();
        for c in 0..classes {
            let target = if c == label { 1.0 } else { 0.0 };
            g_logit[b * classes + c] = (probs[c] - target) * scale;
        }
    }
    loss /= batch as f32;

    let g_y = TimeMajorTensor::from_fn(t_len, batch, classes, |_, b, c| g_logit[b * classes + c])?;
    Ok((loss, g_y))
}
