//! Training and evaluation loops.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::data::Dataset;
use crate::network::encode::{derive_seed, encode_samples};
use crate::network::loss::{predictions, rate_cross_entropy};
use crate::network::{backward_pass, forward_pass, AdamConfig, ExecutionMode, SpikingNet};

/// Salt separating the test-set encoding streams from the training ones.
const TEST_STREAM: u64 = 0x7e57_0000_0000_0001;
/// Epoch slot used for the shuffle generator, disjoint from per-sample streams.
const SHUFFLE_SLOT: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub t_len: usize,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// lr 0.001 with 32 time steps, batch 100, 5 epochs.
    fn default() -> Self {
        Self { learning_rate: 1e-3, t_len: 32, batch: 100, epochs: 5, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidParameter(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.t_len == 0 || self.batch == 0 {
            return Err(Error::InvalidParameter("t_len and batch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSummary {
    pub best_acc: f64,
    pub final_test_acc: f64,
    pub train_time_s: f64,
    pub test_time_s: f64,
    pub epochs: usize,
}

fn batch_input(data: &Dataset, idx: &[usize], seeds: &[u64], t_len: usize) -> Result<crate::tensor::TimeMajorTensor> {
    let samples: Vec<&[f32]> = idx.iter().map(|&i| data.sample(i)).collect();
    encode_samples(&samples, seeds, data.width(), t_len)
}

/// One pass over `data` in a seed-determined order. Returns `(mean loss, accuracy)`.
pub fn train_epoch(
    net: &mut SpikingNet,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    mode: &ExecutionMode,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidDimensions("empty training set".into()));
    }
    let adam = AdamConfig::with_learning_rate(cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, SHUFFLE_SLOT)));

    let mut loss_sum = 0.0f64;
    let mut batches = 0usize;
    let mut correct = 0usize;
    for idx in order.chunks(cfg.batch) {
        let seeds: Vec<u64> = idx.iter().map(|&i| derive_seed(cfg.seed, epoch as u64, i as u64)).collect();
        let x = batch_input(data, idx, &seeds, cfg.t_len)?;
        let labels: Vec<usize> = idx.iter().map(|&i| data.label(i)).collect();

        let (y, trace) = forward_pass(net, &x, mode)?;
        let (loss, g_y) = rate_cross_entropy(&y, &labels)?;
        correct += predictions(&y).iter().zip(&labels).filter(|(p, l)| p == l).count();
        let (grads, _) = backward_pass(net, &g_y, &trace, mode)?;
        net.apply_adam(&grads, &adam)?;

        loss_sum += f64::from(loss);
        batches += 1;
    }
    Ok((loss_sum / batches as f64, correct as f64 / data.len() as f64))
}

/// Classification accuracy with a fixed (epoch-independent) encoding of `data`.
pub fn evaluate(net: &SpikingNet, data: &Dataset, cfg: &TrainConfig, mode: &ExecutionMode) -> Result<f64> {
    cfg.validate()?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(cfg.batch) {
        let seeds: Vec<u64> = idx.iter().map(|&i| derive_seed(cfg.seed ^ TEST_STREAM, 0, i as u64)).collect();
        let x = batch_input(data, idx, &seeds, cfg.t_len)?;
        let (y, _) = forward_pass(net, &x, mode)?;
        correct += predictions(&y).iter().zip(idx).filter(|(p, &i)| **p == data.label(i)).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains for `cfg.epochs`, calling `on_epoch` after each epoch. With zero epochs
/// the network is only evaluated.
pub fn train(
    net: &mut SpikingNet,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mode: &ExecutionMode,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainSummary> {
    let mut train_time = 0.0;
    let mut test_time = 0.0;
    let mut best = f64::NEG_INFINITY;
    let mut last = 0.0;

    if cfg.epochs == 0 {
        let start = Instant::now();
        last = evaluate(net, test_set, cfg, mode)?;
        test_time = start.elapsed().as_secs_f64();
        best = last;
    }

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let (train_loss, train_acc) = train_epoch(net, train_set, cfg, epoch, mode)?;
        let t_train = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let test_acc = evaluate(net, test_set, cfg, mode)?;
        let t_test = start.elapsed().as_secs_f64();
        train_time += t_train;
        test_time += t_test;
        best = best.max(test_acc);
        last = test_acc;
        on_epoch(&EpochMetrics { epoch, train_loss, train_acc, test_acc, wall_s: t_train + t_test })?;
    }

    Ok(TrainSummary {
        best_acc: best,
        final_test_acc: last,
        train_time_s: train_time,
        test_time_s: test_time,
        epochs: cfg.epochs,
    })
}
