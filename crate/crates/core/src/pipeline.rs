//! Time-partitioned multi-worker execution and the analytic speedup model.
//!
//! The time axis is cut into `k` contiguous segments, one worker thread per segment.
//! Worker `d` runs every layer of the network on its own time slice. Before a LIF
//! layer it waits for the boundary `(v, y)` state of that layer from worker `d - 1`,
//! runs the fused engine, and immediately hands its own final state to worker `d + 1`
//! before moving on to the next layer. Worker `d` can therefore be on layer `l + 1`
//! while worker `d + 1` is still on layer `l`. The backward pass mirrors this with
//! membrane gradients flowing from worker `d + 1` to worker `d`.
//!
//! Because segmented execution with carried state is bitwise equal to whole-axis
//! execution, a pipelined run produces exactly the values of a single-worker run.
//! Affine parameter gradients are reduced after the temporal sweep, partitioned over
//! output rows rather than time, so their summation order does not depend on the plan.
//!
//! With `column_chunks > 1` each LIF boundary handoff is split into that many column
//! ranges, letting the next worker start on the first columns while the current one
//! is still computing the rest.

use std::io::Write;
use std::ops::Range;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fused_backward_columns, fused_forward_columns, FusedForwardRecord};
use crate::network::affine::{accumulate_param_grads, affine_apply, affine_input_grad, AffineGrads};
use crate::network::{ForwardTrace, Layer, LayerRecord, NetGrads, SpikingNet};
use crate::neuron::LifState;
use crate::tensor::TimeMajorTensor;

/// Splits `[0, t_len)` into `k` contiguous segments whose lengths differ by at most
/// one; the first `t_len % k` segments get the extra step.
pub fn partition_time(t_len: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 || k > t_len {
        return Err(Error::InvalidParameter(format!(
            "worker count {k} must be in 1..={t_len}"
        )));
    }
    let base = t_len / k;
    let extra = t_len % k;
    let mut segments = Vec::with_capacity(k);
    let mut lo = 0;
    for d in 0..k {
        let hi = lo + base + usize::from(d < extra);
        segments.push((lo, hi));
        lo = hi;
    }
    Ok(segments)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelinePlan {
    t_len: usize,
    segments: Vec<(usize, usize)>,
    injected_comm_delay: Duration,
    column_chunks: usize,
    #[cfg(test)]
    pub(crate) fail_worker: Option<usize>,
}

impl PipelinePlan {
    pub fn new(t_len: usize, k: usize) -> Result<Self> {
        Ok(Self {
            t_len,
            segments: partition_time(t_len, k)?,
            injected_comm_delay: Duration::ZERO,
            column_chunks: 1,
            #[cfg(test)]
            fail_worker: None,
        })
    }

    /// Every boundary message is held until `delay` after it was sent.
    pub fn with_comm_delay(mut self, delay: Duration) -> Self {
        self.injected_comm_delay = delay;
        self
    }

    pub fn with_column_chunks(mut self, chunks: usize) -> Result<Self> {
        if chunks == 0 {
            return Err(Error::InvalidParameter("column_chunks must be >= 1".into()));
        }
        self.column_chunks = chunks;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.segments.len()
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn injected_comm_delay(&self) -> Duration {
        self.injected_comm_delay
    }

    pub fn column_chunks(&self) -> usize {
        self.column_chunks
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BoundaryPayload {
    /// `(v, y)` for the message's column range.
    State { v: Vec<f32>, y: Vec<f32> },
    /// Membrane gradient for the message's column range.
    MembraneGrad(Vec<f32>),
}

/// One boundary handoff between neighbouring workers.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryMessage {
    pub layer: usize,
    /// Segment of the sender.
    pub segment: usize,
    pub direction: Direction,
    pub chunk: usize,
    pub payload: BoundaryPayload,
    /// Nanoseconds since the run's epoch.
    pub send_ns: u64,
    pub recv_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanKind {
    AffineForward,
    LifForward,
    AffineBackward,
    LifBackward,
    ParamGrad,
    /// From send to delivery (including any injected delay); `worker` is the receiver.
    MessageForward,
    MessageBackward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub worker: usize,
    pub layer: usize,
    pub segment: usize,
    pub kind: SpanKind,
    pub start_ns: u64,
    pub end_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimingTrace {
    pub spans: Vec<Span>,
}

impl TimingTrace {
    pub fn count(&self, kind: SpanKind) -> usize {
        self.spans.iter().filter(|s| s.kind == kind).count()
    }

    pub fn forward_messages(&self) -> usize {
        self.count(SpanKind::MessageForward)
    }

    pub fn backward_messages(&self) -> usize {
        self.count(SpanKind::MessageBackward)
    }

    /// One JSON object per line: `{worker, layer, segment, kind, start_ns, end_ns}`.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for span in &self.spans {
            serde_json::to_writer(&mut w, span)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub struct PipelineForward {
    pub output: TimeMajorTensor,
    pub trace: ForwardTrace,
    pub timing: TimingTrace,
}

pub struct PipelineBackward {
    pub grads: NetGrads,
    pub g_x: TimeMajorTensor,
    pub timing: TimingTrace,
}

fn chunk_ranges(cols: usize, chunks: usize) -> Vec<Range<usize>> {
    let chunks = chunks.clamp(1, cols.max(1));
    let base = cols / chunks;
    let extra = cols % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut lo = 0;
    for c in 0..chunks {
        let hi = lo + base + usize::from(c < extra);
        out.push(lo..hi);
        lo = hi;
    }
    out
}

const DISCONNECTED: &str = "neighbour disconnected";

/// Per-worker view of the shared clock and links.
struct Lane {
    worker: usize,
    epoch: Instant,
    delay: Duration,
    spans: Vec<Span>,
}

impl Lane {
    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    fn span(&mut self, layer: usize, kind: SpanKind, start_ns: u64) {
        let end_ns = self.now_ns();
        self.spans.push(Span { worker: self.worker, layer, segment: self.worker, kind, start_ns, end_ns });
    }

    fn send(&self, tx: &Sender<BoundaryMessage>, mut msg: BoundaryMessage) -> Result<()> {
        msg.send_ns = self.now_ns();
        tx.send(msg).map_err(|_| Error::Worker { worker: self.worker, reason: DISCONNECTED.into() })
    }

    fn recv(
        &mut self,
        rx: &Receiver<BoundaryMessage>,
        layer: usize,
        chunk: usize,
        direction: Direction,
    ) -> Result<BoundaryPayload> {
        let mut msg = rx
            .recv()
            .map_err(|_| Error::Worker { worker: self.worker, reason: DISCONNECTED.into() })?;
        if msg.layer != layer || msg.chunk != chunk || msg.direction != direction {
            return Err(Error::Worker {
                worker: self.worker,
                reason: format!(
                    "protocol violation: expected {direction:?} layer {layer} chunk {chunk}, got {:?} layer {} chunk {}",
                    msg.direction, msg.layer, msg.chunk
                ),
            });
        }
        let deliver_at = self.epoch + Duration::from_nanos(msg.send_ns) + self.delay;
        let now = Instant::now();
        if deliver_at > now {
            thread::sleep(deliver_at - now);
        }
        msg.recv_ns = self.now_ns();
        let kind = match direction {
            Direction::Forward => SpanKind::MessageForward,
            Direction::Backward => SpanKind::MessageBackward,
        };
        self.spans.push(Span {
            worker: self.worker,
            layer,
            segment: msg.segment,
            kind,
            start_ns: msg.send_ns,
            end_ns: msg.recv_ns,
        });
        Ok(msg.payload)
    }
}

fn protocol_error(worker: usize, what: &str) -> Error {
    Error::Worker { worker, reason: format!("protocol violation: {what}") }
}

/// Joins worker handles, preferring a root-cause error over the disconnects it
/// triggers in neighbouring workers.
fn join_workers<T>(handles: Vec<thread::ScopedJoinHandle<'_, Result<T>>>) -> Result<Vec<T>> {
    let mut results = Vec::with_capacity(handles.len());
    let mut first_err: Option<Error> = None;
    for (worker, h) in handles.into_iter().enumerate() {
        match h.join() {
            Ok(Ok(v)) => results.push(v),
            Ok(Err(e)) => {
                let is_disconnect = matches!(&e, Error::Worker { reason, .. } if reason == DISCONNECTED);
                let have_disconnect = matches!(&first_err, Some(Error::Worker { reason, .. }) if reason == DISCONNECTED);
                if first_err.is_none() || (have_disconnect && !is_disconnect) {
                    first_err = Some(e);
                }
            }
            Err(_) => {
                let have_root = matches!(&first_err, Some(e) if !matches!(e, Error::Worker { reason, .. } if reason == DISCONNECTED));
                if !have_root {
                    first_err = Some(Error::Worker { worker, reason: "panicked".into() });
                }
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(results),
    }
}

struct WorkerForward {
    output: TimeMajorTensor,
    records: Vec<LayerRecord>,
    spans: Vec<Span>,
}

fn forward_worker(
    net: &SpikingNet,
    x: &TimeMajorTensor,
    plan: &PipelinePlan,
    mut lane: Lane,
    from_prev: Option<Receiver<BoundaryMessage>>,
    to_next: Option<Sender<BoundaryMessage>>,
) -> Result<WorkerForward> {
    let d = lane.worker;
    let (lo, hi) = plan.segments[d];
    let mut cur = x.time_slice(lo, hi)?;
    let mut records = Vec::with_capacity(net.layers().len());

    for (l, layer) in net.layers().iter().enumerate() {
        #[cfg(test)]
        if plan.fail_worker == Some(d) && l > 0 {
            return Err(Error::Worker { worker: d, reason: "injected failure".into() });
        }
        match layer {
            Layer::Affine(a) => {
                let start = lane.now_ns();
                let out = affine_apply(a, &cur)?;
                lane.span(l, SpanKind::AffineForward, start);
                records.push(LayerRecord::Affine { input: cur });
                cur = out;
            }
            Layer::Lif(p) => {
                let (batch, width) = (cur.batch(), cur.width());
                let cols = batch * width;
                let mut v_hist = TimeMajorTensor::zeros(cur.t_len(), batch, width)?;
                let mut y_hist = TimeMajorTensor::zeros(cur.t_len(), batch, width)?;
                let mut last_v = vec![0.0f32; cols];
                let mut last_y = vec![0.0f32; cols];
                let initial = LifState::initial(batch, width, p);

                for (c, range) in chunk_ranges(cols, plan.column_chunks).into_iter().enumerate() {
                    let carry = match &from_prev {
                        None => None,
                        Some(rx) => match lane.recv(rx, l, c, Direction::Forward)? {
                            BoundaryPayload::State { v, y } if v.len() == range.len() && y.len() == range.len() => Some((v, y)),
                            _ => return Err(protocol_error(d, "bad forward payload")),
                        },
                    };
                    let (cv, cy) = match &carry {
                        Some((v, y)) => (&v[..], &y[..]),
                        None => (&initial.v()[range.clone()], &initial.y()[range.clone()]),
                    };
                    let start = lane.now_ns();
                    fused_forward_columns(
                        &cur,
                        range.clone(),
                        (cv, cy),
                        (v_hist.data_mut(), y_hist.data_mut()),
                        (&mut last_v[range.clone()], &mut last_y[range.clone()]),
                        p,
                    );
                    lane.span(l, SpanKind::LifForward, start);
                    if let Some(tx) = &to_next {
                        let payload = BoundaryPayload::State {
                            v: last_v[range.clone()].to_vec(),
                            y: last_y[range.clone()].to_vec(),
                        };
                        lane.send(tx, BoundaryMessage {
                            layer: l,
                            segment: d,
                            direction: Direction::Forward,
                            chunk: c,
                            payload,
                            send_ns: 0,
                            recv_ns: 0,
                        })?;
                    }
                }

                let rec = FusedForwardRecord {
                    y_hist,
                    v_hist,
                    final_state: LifState { batch, width, v: last_v, y: last_y },
                };
                cur = rec.y_hist.clone();
                records.push(LayerRecord::Lif(rec));
            }
        }
    }
    Ok(WorkerForward { output: cur, records, spans: lane.spans })
}

/// Pipelined forward pass over `plan.k()` worker threads.
pub fn pipeline_forward(net: &SpikingNet, x: &TimeMajorTensor, plan: &PipelinePlan) -> Result<PipelineForward> {
    net.check_input(x)?;
    if plan.t_len != x.t_len() {
        return Err(Error::InvalidParameter(format!(
            "plan covers {} steps but input has {}",
            plan.t_len,
            x.t_len()
        )));
    }
    let k = plan.k();
    let epoch = Instant::now();

    let mut senders: Vec<Option<Sender<BoundaryMessage>>> = (0..k).map(|_| None).collect();
    let mut receivers: Vec<Option<Receiver<BoundaryMessage>>> = (0..k).map(|_| None).collect();
    for d in 0..k.saturating_sub(1) {
        let (tx, rx) = channel();
        senders[d] = Some(tx);
        receivers[d + 1] = Some(rx);
    }

    let results = thread::scope(|s| {
        let handles: Vec<_> = senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(d, (tx, rx))| {
                let lane = Lane { worker: d, epoch, delay: plan.injected_comm_delay, spans: Vec::new() };
                s.spawn(move || forward_worker(net, x, plan, lane, rx, tx))
            })
            .collect();
        join_workers(handles)
    })?;

    let mut outputs = Vec::with_capacity(k);
    let mut records = Vec::with_capacity(k);
    let mut timing = TimingTrace::default();
    for w in results {
        outputs.push(w.output);
        records.push(w.records);
        timing.spans.extend(w.spans);
    }
    Ok(PipelineForward {
        output: TimeMajorTensor::concat_time(&outputs)?,
        trace: ForwardTrace { segments: plan.segments.clone(), records },
        timing,
    })
}

struct WorkerBackward {
    g_x: TimeMajorTensor,
    /// Upstream gradient of every affine layer on this segment, keyed by layer index.
    affine_g_out: Vec<Option<TimeMajorTensor>>,
    spans: Vec<Span>,
}

fn backward_worker(
    net: &SpikingNet,
    g_y: &TimeMajorTensor,
    records: &[LayerRecord],
    plan: &PipelinePlan,
    mut lane: Lane,
    from_next: Option<Receiver<BoundaryMessage>>,
    to_prev: Option<Sender<BoundaryMessage>>,
) -> Result<WorkerBackward> {
    let d = lane.worker;
    let (lo, hi) = plan.segments[d];
    let mut g = g_y.time_slice(lo, hi)?;
    let mut affine_g_out: Vec<Option<TimeMajorTensor>> = vec![None; net.layers().len()];

    for (l, layer) in net.layers().iter().enumerate().rev() {
        match (layer, &records[l]) {
            (Layer::Affine(a), LayerRecord::Affine { .. }) => {
                let start = lane.now_ns();
                let g_in = affine_input_grad(a, &g)?;
                lane.span(l, SpanKind::AffineBackward, start);
                affine_g_out[l] = Some(std::mem::replace(&mut g, g_in));
            }
            (Layer::Lif(p), LayerRecord::Lif(rec)) => {
                let cols = g.step_len();
                let mut g_x = TimeMajorTensor::zeros(g.t_len(), g.batch(), g.width())?;
                let mut carry_out = vec![0.0f32; cols];
                for (c, range) in chunk_ranges(cols, plan.column_chunks).into_iter().enumerate() {
                    let carry = match &from_next {
                        None => vec![0.0f32; range.len()],
                        Some(rx) => match lane.recv(rx, l, c, Direction::Backward)? {
                            BoundaryPayload::MembraneGrad(v) if v.len() == range.len() => v,
                            _ => return Err(protocol_error(d, "bad backward payload")),
                        },
                    };
                    let start = lane.now_ns();
                    fused_backward_columns(&g, rec, range.clone(), &carry, g_x.data_mut(), &mut carry_out[range.clone()], p);
                    lane.span(l, SpanKind::LifBackward, start);
                    if let Some(tx) = &to_prev {
                        lane.send(tx, BoundaryMessage {
                            layer: l,
                            segment: d,
                            direction: Direction::Backward,
                            chunk: c,
                            payload: BoundaryPayload::MembraneGrad(carry_out[range].to_vec()),
                            send_ns: 0,
                            recv_ns: 0,
                        })?;
                    }
                }
                g = g_x;
            }
            _ => return Err(protocol_error(d, &format!("trace layer {l} does not match the network"))),
        }
    }
    Ok(WorkerBackward { g_x: g, affine_g_out, spans: lane.spans })
}

/// Pipelined backward pass. `trace` must come from a forward pass with the same plan.
pub fn pipeline_backward(
    net: &SpikingNet,
    g_y: &TimeMajorTensor,
    trace: &ForwardTrace,
    plan: &PipelinePlan,
) -> Result<PipelineBackward> {
    if trace.segments != plan.segments {
        return Err(Error::InvalidParameter("forward trace was recorded with a different plan".into()));
    }
    if g_y.t_len() != plan.t_len || g_y.width() != net.output_width() {
        return Err(Error::InvalidParameter("output gradient does not match the plan/network".into()));
    }
    let k = plan.k();
    let epoch = Instant::now();

    let mut senders: Vec<Option<Sender<BoundaryMessage>>> = (0..k).map(|_| None).collect();
    let mut receivers: Vec<Option<Receiver<BoundaryMessage>>> = (0..k).map(|_| None).collect();
    for d in 1..k {
        let (tx, rx) = channel();
        senders[d] = Some(tx);
        receivers[d - 1] = Some(rx);
    }

    let results = thread::scope(|s| {
        let handles: Vec<_> = senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(d, (tx, rx))| {
                let lane = Lane { worker: d, epoch, delay: plan.injected_comm_delay, spans: Vec::new() };
                let records = &trace.records[d];
                s.spawn(move || backward_worker(net, g_y, records, plan, lane, rx, tx))
            })
            .collect();
        join_workers(handles)
    })?;

    let mut timing = TimingTrace::default();
    for w in &results {
        timing.spans.extend(w.spans.iter().cloned());
    }

    // Parameter gradients: reduce over time in order, with output rows split across workers.
    let mut affine = Vec::new();
    for (l, layer) in net.layers().iter().enumerate() {
        let Layer::Affine(a) = layer else { continue };
        let mut parts = Vec::with_capacity(k);
        for (d, w) in results.iter().enumerate() {
            let g_out = w.affine_g_out[l].as_ref().ok_or_else(|| protocol_error(d, "missing affine gradient"))?;
            let LayerRecord::Affine { input } = &trace.records[d][l] else {
                return Err(protocol_error(d, "missing affine input"));
            };
            parts.push((g_out, input));
        }
        let mut grads = AffineGrads::zeros(a.width_in(), a.width_out());
        let row_ranges = chunk_ranges(a.width_out(), k);
        let n_in = a.width_in();
        let spans = thread::scope(|s| {
            let mut w_rest = &mut grads.weights[..];
            let mut b_rest = &mut grads.bias[..];
            let mut handles = Vec::with_capacity(row_ranges.len());
            for (d, rows) in row_ranges.iter().cloned().enumerate() {
                let (w_mine, w_tail) = std::mem::take(&mut w_rest).split_at_mut(rows.len() * n_in);
                let (b_mine, b_tail) = std::mem::take(&mut b_rest).split_at_mut(rows.len());
                w_rest = w_tail;
                b_rest = b_tail;
                let parts = &parts;
                handles.push(s.spawn(move || {
                    let mut lane = Lane { worker: d, epoch, delay: Duration::ZERO, spans: Vec::new() };
                    let start = lane.now_ns();
                    accumulate_param_grads(n_in, parts, rows, w_mine, b_mine);
                    lane.span(l, SpanKind::ParamGrad, start);
                    Ok(lane.spans)
                }));
            }
            join_workers(handles)
        })?;
        timing.spans.extend(spans.into_iter().flatten());
        affine.push(grads);
    }

    let g_parts: Vec<TimeMajorTensor> = results.into_iter().map(|w| w.g_x).collect();
    Ok(PipelineBackward {
        grads: NetGrads { affine },
        g_x: TimeMajorTensor::concat_time(&g_parts)?,
        timing,
    })
}

/// Ideal-pipeline timing model: single-worker task time `t_s` and per-hop
/// communication time `t_c`, in any common unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedupModel {
    t_s: f64,
    t_c: f64,
}

impl SpeedupModel {
    pub fn new(t_s: f64, t_c: f64) -> Result<Self> {
        if !(t_s > 0.0 && t_c > 0.0 && t_s.is_finite() && t_c.is_finite()) {
            return Err(Error::InvalidParameter(format!("t_s and t_c must be finite and > 0, got {t_s}, {t_c}")));
        }
        Ok(Self { t_s, t_c })
    }

    /// Model with `t_c = 1` and `t_s = ratio`.
    pub fn from_ratio(ratio: f64) -> Result<Self> {
        Self::new(ratio, 1.0)
    }

    pub fn t_s(&self) -> f64 {
        self.t_s
    }

    pub fn t_c(&self) -> f64 {
        self.t_c
    }

    /// Predicted `k`-worker time `(k - 1) * t_c + t_s / k`.
    pub fn multi_worker_time(&self, k: usize) -> f64 {
        let k = k as f64;
        (k - 1.0) * self.t_c + self.t_s / k
    }
}

/// `mu(k) = k * t_s / (k * (k - 1) * t_c + t_s)`.
pub fn speedup_mu(m: &SpeedupModel, k: usize) -> f64 {
    let kf = k as f64;
    kf * m.t_s / (kf * (kf - 1.0) * m.t_c + m.t_s)
}

/// Continuous maximiser of [`speedup_mu`]: `sqrt(t_s / t_c)`.
pub fn optimal_k(m: &SpeedupModel) -> f64 {
    (m.t_s / m.t_c).sqrt()
}

/// The better of `floor(optimal_k)` and `ceil(optimal_k)` (at least 1).
pub fn best_integer_k(m: &SpeedupModel) -> usize {
    let k = optimal_k(m);
    let lo = (k.floor() as usize).max(1);
    let hi = (k.ceil() as usize).max(1);
    if speedup_mu(m, hi) > speedup_mu(m, lo) {
        hi
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveRow {
    pub ratio: f64,
    pub k: usize,
    pub mu: f64,
}

/// `(ratio, k, mu)` rows for `k = 1..=k_max` and every `t_s / t_c` ratio.
pub fn emit_model_curve(ratios: &[f64], k_max: usize) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::with_capacity(ratios.len() * k_max);
    for &ratio in ratios {
        let m = SpeedupModel::from_ratio(ratio)?;
        rows.extend((1..=k_max).map(|k| CurveRow { ratio, k, mu: speedup_mu(&m, k) }));
    }
    Ok(rows)
}
