//! Splits the time axis at arbitrary cut points and chains the segments through the
//! carry state. The result equals a single whole-axis pass, forward and backward.

use temporal_fusion::fusion::{fused_backward, fused_forward};
use temporal_fusion::{LifParams, LifState, MembraneGrad, TimeMajorTensor};

fn main() -> temporal_fusion::Result<()> {
    let p = LifParams::default();
    let (t_len, batch, width) = (40, 2, 8);
    let x = TimeMajorTensor::from_fn(t_len, batch, width, |t, b, n| ((t * 7 + b * 3 + n) % 11) as f32 * 0.06)?;
    let g_y = TimeMajorTensor::from_fn(t_len, batch, width, |t, _, n| if (t + n) % 5 == 0 { 1.0 } else { -0.1 })?;
    let carry = LifState::initial(batch, width, &p);
    let g_carry = MembraneGrad::zeros(batch, width);

    let whole = fused_forward(&x, &carry, &p)?;
    let (whole_g, _) = fused_backward(&g_y, &whole, &g_carry, &p)?;

    let cuts = [0, 3, 17, 18, 40];
    let mut state = carry;
    let mut records = Vec::new();
    for w in cuts.windows(2) {
        let rec = fused_forward(&x.time_slice(w[0], w[1])?, &state, &p)?;
        state = rec.final_state.clone();
        records.push(rec);
    }
    // Backward runs the segments in reverse, handing the membrane gradient leftwards.
    let mut g = g_carry;
    let mut parts = vec![None; records.len()];
    for (i, w) in cuts.windows(2).enumerate().rev() {
        let (g_x, g_left) = fused_backward(&g_y.time_slice(w[0], w[1])?, &records[i], &g, &p)?;
        parts[i] = Some(g_x);
        g = g_left;
    }

    let y = TimeMajorTensor::concat_time(records.iter().map(|r| &r.y_hist))?;
    let g_x = TimeMajorTensor::concat_time(parts.iter().flatten())?;
    assert_eq!(y, whole.y_hist);
    assert_eq!(g_x, whole_g);
    assert_eq!(state, whole.final_state);
    println!("cuts {cuts:?}: chained segments equal the whole-axis pass bitwise");
    Ok(())
}
