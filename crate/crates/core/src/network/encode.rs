//! Poisson rate coding: each step independently emits a spike with probability equal
//! to the input intensity.
//!
//! Spike trains are reproducible across runs and platforms: the generator is ChaCha8
//! (`rand_chacha`), and each sample gets its own stream seeded by
//! [`derive_seed`]`(base_seed, epoch, sample_index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::TimeMajorTensor;

/// splitmix64 finaliser.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(base_seed: u64, epoch: u64, sample_index: u64) -> u64 {
    mix64(mix64(mix64(base_seed) ^ epoch) ^ sample_index)
}

fn check_intensities(intensity: &[f32]) -> Result<()> {
    match intensity.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(bad) => Err(Error::InvalidParameter(format!("intensity {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

#[inline]
fn bernoulli<R: Rng>(rng: &mut R, p: f32) -> f32 {
    // gen::<f32>() is in [0, 1): p = 0 never fires, p = 1 always does.
    if rng.gen::<f32>() < p {
        1.0
    } else {
        0.0
    }
}

/// Encodes a `[batch x width]` intensity block into `t_len` steps of spikes drawn from
/// one generator, in `(t, b, n)` order.
pub fn poisson_encode<R: Rng>(
    intensity: &[f32],
    batch: usize,
    width: usize,
    t_len: usize,
    rng: &mut R,
) -> Result<TimeMajorTensor> {
    if intensity.len() != batch * width {
        return Err(shape_err(batch * width, intensity.len()));
    }
    check_intensities(intensity)?;
    TimeMajorTensor::from_fn(t_len, batch, width, |_, b, n| bernoulli(rng, intensity[b * width + n]))
}

/// Encodes each sample with its own generator seeded from `seeds[b]`, so the result
/// for a sample does not depend on which batch it lands in.
pub fn encode_samples(samples: &[&[f32]], seeds: &[u64], width: usize, t_len: usize) -> Result<TimeMajorTensor> {
    if samples.len() != seeds.len() {
        return Err(shape_err(samples.len(), seeds.len()));
    }
    let batch = samples.len();
    let mut out = TimeMajorTensor::zeros(t_len, batch, width)?;
    for (b, (sample, &seed)) in samples.iter().zip(seeds).enumerate() {
        if sample.len() != width {
            return Err(shape_err(width, sample.len()));
        }
        check_intensities(sample)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in 0..t_len {
            let row = &mut out.step_mut(t)[b * width..(b + 1) * width];
            for (slot, &p) in row.iter_mut().zip(sample.iter()) {
                *slot = bernoulli(&mut rng, p);
            }
        }
    }
    Ok(out)
}
