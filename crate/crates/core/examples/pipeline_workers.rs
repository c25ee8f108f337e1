//! One training step of a small network with the time axis split across k worker threads.
//! Prints the boundary messages each run exchanged and writes the span trace as JSONL.
//!
//!     cargo run --release --example pipeline_workers -- [K] [trace.jsonl]

use std::fs::File;

use temporal_fusion::network::{backward_pass, forward_pass, rate_cross_entropy};
use temporal_fusion::pipeline::{pipeline_backward, pipeline_forward, SpanKind};
use temporal_fusion::{ExecutionMode, LifParams, PipelinePlan, SpikingNet, TimeMajorTensor};

fn main() -> temporal_fusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let k: usize = args.next().map_or(4, |a| a.parse().expect("worker count"));
    let trace_path = args.next();

    let net = SpikingNet::mlp(&[20, 64, 5], LifParams::default(), 3)?;
    let x = TimeMajorTensor::from_fn(32, 8, 20, |t, b, n| ((t + 3 * b + n) % 3 != 0) as u8 as f32)?;
    let labels = [0, 1, 2, 3, 4, 0, 1, 2];

    let (y1, trace1) = forward_pass(&net, &x, &ExecutionMode::Fused)?;
    let (loss, g_y) = rate_cross_entropy(&y1, &labels)?;
    let (grads1, _) = backward_pass(&net, &g_y, &trace1, &ExecutionMode::Fused)?;

    let plan = PipelinePlan::new(32, k)?;
    let fwd = pipeline_forward(&net, &x, &plan)?;
    let bwd = pipeline_backward(&net, &g_y, &fwd.trace, &plan)?;
    assert_eq!(fwd.output, y1);
    assert_eq!(bwd.grads, grads1);

    println!("k={k}, segments {:?}", plan.segments());
    println!("loss {loss:.5} identical to single worker; gradients bitwise equal");
    println!(
        "{} forward and {} backward boundary messages ({} LIF layers)",
        fwd.timing.forward_messages(),
        bwd.timing.backward_messages(),
        net.lif_layer_count()
    );
    for kind in [SpanKind::LifForward, SpanKind::LifBackward, SpanKind::ParamGrad] {
        println!("{kind:?}: {} spans", fwd.timing.count(kind) + bwd.timing.count(kind));
    }
    if let Some(path) = trace_path {
        let mut f = File::create(&path)?;
        fwd.timing.write_jsonl(&mut f)?;
        bwd.timing.write_jsonl(&mut f)?;
        println!("trace written to {path}");
    }
    Ok(())
}
