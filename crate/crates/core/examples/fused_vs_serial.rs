//! Runs one LIF layer through the serial and the fused engine, checks that the
//! outputs agree bitwise and prints the wall time of each.
//!
//!     cargo run --release --example fused_vs_serial -- [T] [WIDTH]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use temporal_fusion::fusion::{fused_backward, fused_forward, serial_backward, serial_forward};
use temporal_fusion::{LifParams, LifState, MembraneGrad, TimeMajorTensor};

fn main() -> temporal_fusion::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("positive integer"));
    let t_len = args.next().unwrap_or(64);
    let width = args.next().unwrap_or(100_000);

    let p = LifParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = TimeMajorTensor::from_fn(t_len, 1, width, |_, _, _| rng.gen_range(0.0f32..0.6))?;
    let g_y = TimeMajorTensor::from_fn(t_len, 1, width, |_, _, _| rng.gen_range(-1.0f32..1.0))?;
    let carry = LifState::initial(1, width, &p);
    let g_carry = MembraneGrad::zeros(1, width);

    let start = Instant::now();
    let s = serial_forward(&x, &carry, &p)?;
    let (sg, _) = serial_backward(&g_y, &s, &g_carry, &p)?;
    let serial = start.elapsed();

    let start = Instant::now();
    let f = fused_forward(&x, &carry, &p)?;
    let (fg, _) = fused_backward(&g_y, &f, &g_carry, &p)?;
    let fused = start.elapsed();

    assert_eq!(s.y_hist, f.y_hist);
    assert_eq!(s.v_hist, f.v_hist);
    assert_eq!(sg, fg);
    let rate = f.y_hist.data().iter().sum::<f32>() / f.y_hist.data().len() as f32;
    println!("T={t_len} width={width}: outputs bitwise equal, firing rate {rate:.3}");
    println!("serial {serial:?}, fused {fused:?}, speedup {:.2}x", serial.as_secs_f64() / fused.as_secs_f64());
    Ok(())
}
