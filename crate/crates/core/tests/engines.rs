mod common;

use common::*;
use proptest::prelude::*;
use temporal_fusion::fusion::{fused_backward, fused_forward, serial_backward, serial_forward};
use temporal_fusion::network::{backward_pass, forward_pass, rate_cross_entropy, ExecutionMode, SpikingNet};
use temporal_fusion::{LifParams, PipelinePlan, SurrogateArgument, TimeMajorTensor, FUSED_TILE};

fn check_against_oracle(seed: u64, t: usize, b: usize, n: usize, p: &LifParams) -> Result<(), TestCaseError> {
    let mut r = rng(seed);
    let c = lif_case(&mut r, t, b, n, p);
    let (vh, yh, fv, fy) = lif_forward(&c.x, c.carry.v(), c.carry.y(), p);
    let (gx, gc) = lif_backward(&c.g_y, &vh, &yh, c.g_carry.values(), p);

    for rec in [serial_forward(&c.x, &c.carry, p).unwrap(), fused_forward(&c.x, &c.carry, p).unwrap()] {
        prop_assert!(bitwise_eq(rec.v_hist.data(), &vh));
        prop_assert!(bitwise_eq(rec.y_hist.data(), &yh));
        prop_assert!(bitwise_eq(rec.final_state.v(), &fv));
        prop_assert!(bitwise_eq(rec.final_state.y(), &fy));
    }
    let rec = fused_forward(&c.x, &c.carry, p).unwrap();
    for (g, carry) in [
        serial_backward(&c.g_y, &rec, &c.g_carry, p).unwrap(),
        fused_backward(&c.g_y, &rec, &c.g_carry, p).unwrap(),
    ] {
        prop_assert!(bitwise_eq(g.data(), &gx));
        prop_assert!(bitwise_eq(carry.values(), &gc));
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn engines_match_scalar_oracle(seed in any::<u64>(), t in 1usize..40, b in 1usize..4, n in 1usize..(FUSED_TILE + 80)) {
        check_against_oracle(seed, t, b, n, &LifParams::default())?;
    }

    #[test]
    fn literal_surrogate_engines_match_oracle(seed in any::<u64>(), t in 1usize..16, n in 1usize..64) {
        let p = LifParams::default().with_surrogate_arg(SurrogateArgument::Literal);
        check_against_oracle(seed, t, 2, n, &p)?;
    }

    #[test]
    fn nondefault_params_match_oracle(seed in any::<u64>(), k_tau in 0.0f32..1.0, v_th in 0.15f32..1.0, v_rest in -0.2f32..0.1) {
        let p = LifParams::new(v_rest, k_tau, v_th, 4.0).unwrap();
        check_against_oracle(seed, 12, 2, 37, &p)?;
    }

    #[test]
    fn chained_segments_equal_whole_axis(seed in any::<u64>(), t in 1usize..48, n in 1usize..300, cuts in prop::collection::vec(0usize..48, 0..5)) {
        let p = LifParams::default();
        let mut r = rng(seed);
        let c = lif_case(&mut r, t, 2, n, &p);
        let whole = fused_forward(&c.x, &c.carry, &p).unwrap();
        let (whole_g, whole_gc) = fused_backward(&c.g_y, &whole, &c.g_carry, &p).unwrap();

        let mut cuts: Vec<usize> = cuts.into_iter().filter(|&k| k <= t).collect();
        cuts.extend([0, t]);
        cuts.sort_unstable();
        cuts.dedup();
        let mut carry = c.carry.clone();
        let mut recs = Vec::new();
        for w in cuts.windows(2) {
            let rec = serial_forward(&c.x.time_slice(w[0], w[1]).unwrap(), &carry, &p).unwrap();
            carry = rec.final_state.clone();
            recs.push(rec);
        }
        let v = TimeMajorTensor::concat_time(recs.iter().map(|r| &r.v_hist)).unwrap();
        let y = TimeMajorTensor::concat_time(recs.iter().map(|r| &r.y_hist)).unwrap();
        prop_assert_eq!(&v, &whole.v_hist);
        prop_assert_eq!(&y, &whole.y_hist);
        prop_assert_eq!(&carry, &whole.final_state);

        let mut g_carry = c.g_carry.clone();
        let mut parts = vec![None; recs.len()];
        for (i, w) in cuts.windows(2).enumerate().rev() {
            let (g, gc) = fused_backward(&c.g_y.time_slice(w[0], w[1]).unwrap(), &recs[i], &g_carry, &p).unwrap();
            parts[i] = Some(g);
            g_carry = gc;
        }
        let g = TimeMajorTensor::concat_time(parts.iter().flatten()).unwrap();
        prop_assert!(bitwise_eq(g.data(), whole_g.data()));
        prop_assert!(bitwise_eq(g_carry.values(), whole_gc.values()));
    }
}

#[test]
fn t32_record_follows_recurrence_step_by_step() {
    let p = LifParams::default();
    let mut r = rng(32);
    let c = lif_case(&mut r, 32, 3, 50, &p);
    let rec = fused_forward(&c.x, &c.carry, &p).unwrap();
    for col in 0..150 {
        let (b, n) = (col / 50, col % 50);
        let (mut v, mut y) = (c.carry.v()[col], c.carry.y()[col]);
        for t in 0..32 {
            (v, y) = oracle_step(v, y, c.x.get(t, b, n), &p);
            assert_eq!(rec.v_hist.get(t, b, n).to_bits(), v.to_bits(), "v at ({t}, {b}, {n})");
            assert_eq!(rec.y_hist.get(t, b, n), y, "y at ({t}, {b}, {n})");
        }
    }
}

fn tiny_net(r: &mut rand_chacha::ChaCha8Rng, seed: u64) -> SpikingNet {
    use rand::Rng;
    let widths = [r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(2..=4)];
    SpikingNet::mlp(&widths, LifParams::default(), seed).unwrap()
}

#[test]
fn tiny_net_gradients_equal_per_step_interpreter() {
    use rand::Rng;
    for seed in 0..200u64 {
        let mut r = rng(seed);
        let net = tiny_net(&mut r, seed);
        let t = r.gen_range(1..=3);
        let b = r.gen_range(1..=3);
        let x = TimeMajorTensor::from_fn(t, b, net.input_width(), |_, _, _| r.gen_range(0.0f32..1.5)).unwrap();
        let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..net.output_width())).collect();

        let oracle = net_forward(&net, &x);
        for mode in [ExecutionMode::Serial, ExecutionMode::Fused, ExecutionMode::Pipeline(PipelinePlan::new(t, t.min(2)).unwrap())] {
            let (y, trace) = forward_pass(&net, &x, &mode).unwrap();
            assert!(bitwise_eq(y.data(), &oracle.output), "seed {seed} {} output", mode.name());
            let (loss, g_y) = rate_cross_entropy(&y, &labels).unwrap();
            assert!(loss >= 0.0);
            let (grads, g_x) = backward_pass(&net, &g_y, &trace, &mode).unwrap();
            let (want, want_gx) = net_backward(&net, &oracle, &g_y);
            assert!(bitwise_eq(g_x.data(), &want_gx), "seed {seed} {} g_x", mode.name());
            assert_eq!(grads.affine.len(), want.len());
            for (got, (dw, db)) in grads.affine.iter().zip(&want) {
                assert!(bitwise_eq(&got.weights, dw), "seed {seed} {} dW", mode.name());
                assert!(bitwise_eq(&got.bias, db), "seed {seed} {} db", mode.name());
            }
        }
    }
}

#[test]
fn deeper_net_matches_interpreter() {
    let net = SpikingNet::mlp(&[7, 12, 9, 3], LifParams::default(), 11).unwrap();
    let mut r = rng(5);
    let x = spike_input(&mut r, 20, 4, 7, 0.5);
    let oracle = net_forward(&net, &x);
    let (y, trace) = forward_pass(&net, &x, &ExecutionMode::Fused).unwrap();
    assert!(bitwise_eq(y.data(), &oracle.output));
    let (_, g_y) = rate_cross_entropy(&y, &[0, 1, 2, 0]).unwrap();
    let (grads, g_x) = backward_pass(&net, &g_y, &trace, &ExecutionMode::Fused).unwrap();
    let (want, want_gx) = net_backward(&net, &oracle, &g_y);
    assert!(bitwise_eq(g_x.data(), &want_gx));
    for (got, (dw, db)) in grads.affine.iter().zip(&want) {
        assert!(bitwise_eq(&got.weights, dw));
        assert!(bitwise_eq(&got.bias, db));
    }
}

#[test]
fn engines_give_identical_loss_on_random_nets() {
    use rand::Rng;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let net = SpikingNet::mlp(&[10, 20, 4], LifParams::default(), seed).unwrap();
        let x = spike_input(&mut r, 16, 5, 10, 0.4);
        let labels: Vec<usize> = (0..5).map(|_| r.gen_range(0..4)).collect();
        let mut losses = Vec::new();
        for mode in [ExecutionMode::Serial, ExecutionMode::Fused, ExecutionMode::Pipeline(PipelinePlan::new(16, 3).unwrap())] {
            let (y, _) = forward_pass(&net, &x, &mode).unwrap();
            losses.push(rate_cross_entropy(&y, &labels).unwrap().0.to_bits());
        }
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "seed {seed}");
    }
}
