//! The trainable network around the LIF engines.
//!
//! A [`SpikingNet`] is an ordered list of layers alternating between affine synaptic
//! transforms and LIF layers, ending in a LIF layer with one neuron per class. Each
//! layer runs over its full time axis before the next one starts (temporal-major
//! order), with the LIF layers executed by the engine chosen in [`ExecutionMode`].
//! The engine choice never changes values: serial, fused and pipelined runs give
//! bitwise identical outputs, losses and gradients.

pub mod adam;
pub mod affine;
pub mod data;
pub mod encode;
pub mod loss;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::fusion::{FusedForwardRecord, LifEngine};
use crate::neuron::{LifParams, LifState, MembraneGrad};
use crate::pipeline::{self, PipelinePlan};
use crate::tensor::TimeMajorTensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use affine::{affine_apply, affine_backward, affine_input_grad, AffineGrads, AffineLayer};
pub use data::Dataset;
pub use encode::{derive_seed, encode_samples, poisson_encode};
pub use loss::{predictions, rate_cross_entropy, rate_logits};
pub use train::{evaluate, train, train_epoch, EpochMetrics, TrainConfig, TrainSummary};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine(AffineLayer),
    Lif(LifParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikingNet {
    input_width: usize,
    layers: Vec<Layer>,
}

impl SpikingNet {
    /// Validates that layer kinds alternate, widths chain, and the last layer is LIF.
    pub fn new(input_width: usize, layers: Vec<Layer>) -> Result<Self> {
        if input_width == 0 {
            return Err(Error::InvalidDimensions("input width must be >= 1".into()));
        }
        if !matches!(layers.last(), Some(Layer::Lif(_))) {
            return Err(Error::InvalidParameter("network must end with a LIF layer".into()));
        }
        let mut width = input_width;
        for (i, pair) in layers.windows(2).enumerate() {
            if matches!(pair, [Layer::Affine(_), Layer::Affine(_)] | [Layer::Lif(_), Layer::Lif(_)]) {
                return Err(Error::InvalidParameter(format!("layers {i} and {} do not alternate", i + 1)));
            }
        }
        for layer in &layers {
            match layer {
                Layer::Affine(a) => {
                    if a.width_in() != width {
                        return Err(shape_err(format!("affine input width {width}"), a.width_in()));
                    }
                    width = a.width_out();
                }
                Layer::Lif(p) => p.validate()?,
            }
        }
        Ok(Self { input_width, layers })
    }

    /// Affine/LIF stack over `widths = [input, hidden..., classes]` with weights drawn
    /// from `seed`.
    pub fn mlp(widths: &[usize], lif: LifParams, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidDimensions("mlp needs at least input and output widths".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(Layer::Affine(AffineLayer::init(w[0], w[1], 1.0, &mut rng)?));
            layers.push(Layer::Lif(lif));
        }
        Self::new(widths[0], layers)
    }

    /// A single LIF layer fed directly by the input.
    pub fn lif_only(width: usize, lif: LifParams) -> Result<Self> {
        Self::new(width, vec![Layer::Lif(lif)])
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Affine(a) => Some(a.width_out()),
                Layer::Lif(_) => None,
            })
            .unwrap_or(self.input_width)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn lif_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Lif(_))).count()
    }

    pub fn affine_layers(&self) -> impl Iterator<Item = &AffineLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Affine(a) => Some(a),
            Layer::Lif(_) => None,
        })
    }

    /// One Adam step on every affine layer.
    pub fn apply_adam(&mut self, grads: &NetGrads, cfg: &AdamConfig) -> Result<()> {
        let affine = self.layers.iter_mut().filter_map(|l| match l {
            Layer::Affine(a) => Some(a),
            Layer::Lif(_) => None,
        });
        let mut n = 0;
        for (layer, g) in affine.zip(&grads.affine) {
            adam_step(layer, g, cfg)?;
            n += 1;
        }
        if n != grads.affine.len() {
            return Err(shape_err(format!("{n} affine gradient sets"), grads.affine.len()));
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, x: &TimeMajorTensor) -> Result<()> {
        if x.width() != self.input_width {
            return Err(shape_err(format!("input width {}", self.input_width), x.width()));
        }
        Ok(())
    }

    pub fn affine_mut(&mut self, index: usize) -> Option<&mut AffineLayer> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Affine(a) => Some(a),
                Layer::Lif(_) => None,
            })
            .nth(index)
    }
}

/// How LIF layers are executed.
#[derive(Debug, Clone, PartialEq)]
pub enum ExecutionMode {
    Serial,
    Fused,
    Pipeline(PipelinePlan),
}

impl ExecutionMode {
    pub fn name(&self) -> &'static str {
        match self {
            ExecutionMode::Serial => "serial",
            ExecutionMode::Fused => "fused",
            ExecutionMode::Pipeline(_) => "pipeline",
        }
    }
}

/// What the forward pass saves for one layer in one time segment.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerRecord {
    Affine { input: TimeMajorTensor },
    Lif(FusedForwardRecord),
}

/// Saved activations of a forward pass, per time segment and layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub segments: Vec<(usize, usize)>,
    /// `records[segment][layer]`.
    pub records: Vec<Vec<LayerRecord>>,
}

/// Parameter gradients, one entry per affine layer in network order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub affine: Vec<AffineGrads>,
}

impl NetGrads {
    pub fn is_zero(&self) -> bool {
        self.affine
            .iter()
            .all(|g| g.weights.iter().chain(&g.bias).all(|&v| v == 0.0))
    }
}

/// Runs every layer over the full time axis on the calling thread.
fn single_worker_forward(net: &SpikingNet, x: &TimeMajorTensor, engine: LifEngine) -> Result<(TimeMajorTensor, ForwardTrace)> {
    let mut cur = x.clone();
    let mut records = Vec::with_capacity(net.layers.len());
    for layer in &net.layers {
        match layer {
            Layer::Affine(a) => {
                let out = affine_apply(a, &cur)?;
                records.push(LayerRecord::Affine { input: cur });
                cur = out;
            }
            Layer::Lif(p) => {
                let carry = LifState::initial(cur.batch(), cur.width(), p);
                let rec = engine.forward(&cur, &carry, p)?;
                cur = rec.y_hist.clone();
                records.push(LayerRecord::Lif(rec));
            }
        }
    }
    Ok((cur, ForwardTrace { segments: vec![(0, x.t_len())], records: vec![records] }))
}

/// Backward on the calling thread. Works for traces with any number of segments by
/// chaining the membrane-gradient carry from the last segment to the first.
fn single_worker_backward(
    net: &SpikingNet,
    g_y: &TimeMajorTensor,
    trace: &ForwardTrace,
    engine: LifEngine,
) -> Result<(NetGrads, TimeMajorTensor)> {
    let mut g: Vec<TimeMajorTensor> = trace
        .segments
        .iter()
        .map(|&(lo, hi)| g_y.time_slice(lo, hi))
        .collect::<Result<_>>()?;
    let mut affine_grads = Vec::new();

    for (l, layer) in net.layers.iter().enumerate().rev() {
        match layer {
            Layer::Lif(p) => {
                let mut carry = MembraneGrad::zeros(g_y.batch(), g[0].width());
                for s in (0..trace.segments.len()).rev() {
                    let LayerRecord::Lif(rec) = &trace.records[s][l] else {
                        return Err(Error::InvalidParameter(format!("trace layer {l} is not LIF")));
                    };
                    let (g_x, out) = engine.backward(&g[s], rec, &carry, p)?;
                    g[s] = g_x;
                    carry = out;
                }
            }
            Layer::Affine(a) => {
                let inputs = trace
                    .records
                    .iter()
                    .map(|seg| match &seg[l] {
                        LayerRecord::Affine { input } => Ok(input),
                        LayerRecord::Lif(_) => Err(Error::InvalidParameter(format!("trace layer {l} is not affine"))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let parts: Vec<_> = g.iter().zip(inputs).collect();
                let mut grads = AffineGrads::zeros(a.width_in(), a.width_out());
                affine::accumulate_param_grads(a.width_in(), &parts, 0..a.width_out(), &mut grads.weights, &mut grads.bias);
                affine_grads.push(grads);
                g = g.iter().map(|gs| affine_input_grad(a, gs)).collect::<Result<_>>()?;
            }
        }
    }
    affine_grads.reverse();
    let g_x = TimeMajorTensor::concat_time(&g)?;
    Ok((NetGrads { affine: affine_grads }, g_x))
}

/// Forward through the whole network. Returns the output spikes of the last layer and
/// the saved activations needed by [`backward_pass`].
pub fn forward_pass(net: &SpikingNet, x: &TimeMajorTensor, mode: &ExecutionMode) -> Result<(TimeMajorTensor, ForwardTrace)> {
    net.check_input(x)?;
    match mode {
        ExecutionMode::Serial => single_worker_forward(net, x, LifEngine::Serial),
        ExecutionMode::Fused => single_worker_forward(net, x, LifEngine::Fused),
        ExecutionMode::Pipeline(plan) => {
            let run = pipeline::pipeline_forward(net, x, plan)?;
            Ok((run.output, run.trace))
        }
    }
}

/// Backward through the whole network from the gradient w.r.t. the output spikes.
/// Returns parameter gradients and the gradient w.r.t. the network input.
pub fn backward_pass(
    net: &SpikingNet,
    g_y: &TimeMajorTensor,
    trace: &ForwardTrace,
    mode: &ExecutionMode,
) -> Result<(NetGrads, TimeMajorTensor)> {
    match mode {
        ExecutionMode::Serial => single_worker_backward(net, g_y, trace, LifEngine::Serial),
        ExecutionMode::Fused => single_worker_backward(net, g_y, trace, LifEngine::Fused),
        ExecutionMode::Pipeline(plan) => {
            let run = pipeline::pipeline_backward(net, g_y, trace, plan)?;
            Ok((run.grads, run.g_x))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn construction_rules() {
        let p = LifParams::default();
        let a = |i, o| Layer::Affine(AffineLayer::new(i, o, vec![0.0; i * o], vec![0.0; o]).unwrap());
        assert!(SpikingNet::new(3, vec![a(3, 2), Layer::Lif(p)]).is_ok());
        assert!(SpikingNet::new(3, vec![a(3, 2)]).is_err());
        assert!(SpikingNet::new(3, vec![a(4, 2), Layer::Lif(p)]).is_err());
        assert!(SpikingNet::new(3, vec![a(3, 2), a(2, 2), Layer::Lif(p)]).is_err());
        assert!(SpikingNet::new(3, vec![Layer::Lif(p), Layer::Lif(p)]).is_err());
        let net = SpikingNet::mlp(&[4, 6, 3], p, 0).unwrap();
        assert_eq!((net.input_width(), net.output_width(), net.lif_layer_count()), (4, 3, 2));
        assert_eq!(SpikingNet::lif_only(5, p).unwrap().output_width(), 5);
    }

    #[test]
    fn serial_and_fused_agree_end_to_end() {
        let net = SpikingNet::mlp(&[5, 7, 3], LifParams::default(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = TimeMajorTensor::from_fn(6, 2, 5, |_, _, _| rng.gen_range(0f32..1.0)).unwrap();
        let (ys, ts) = forward_pass(&net, &x, &ExecutionMode::Serial).unwrap();
        let (yf, tf) = forward_pass(&net, &x, &ExecutionMode::Fused).unwrap();
        assert_eq!(ys, yf);
        assert_eq!(ts, tf);
        let (ls, gs) = rate_cross_entropy(&ys, &[0, 2]).unwrap();
        let (lf, gf) = rate_cross_entropy(&yf, &[0, 2]).unwrap();
        assert_eq!(ls.to_bits(), lf.to_bits());
        assert_eq!(
            backward_pass(&net, &gs, &ts, &ExecutionMode::Serial).unwrap(),
            backward_pass(&net, &gf, &tf, &ExecutionMode::Fused).unwrap()
        );
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let net = SpikingNet::mlp(&[3, 4, 2], LifParams::default(), 1).unwrap();
        let x = TimeMajorTensor::from_fn(4, 2, 3, |t, b, n| ((t + b + n) % 2) as f32).unwrap();
        let (_, trace) = forward_pass(&net, &x, &ExecutionMode::Fused).unwrap();
        let g = TimeMajorTensor::zeros(4, 2, 2).unwrap();
        let (grads, g_x) = backward_pass(&net, &g, &trace, &ExecutionMode::Fused).unwrap();
        assert!(grads.is_zero());
        assert!(g_x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_width_checked() {
        let net = SpikingNet::mlp(&[3, 2], LifParams::default(), 1).unwrap();
        let x = TimeMajorTensor::zeros(2, 1, 4).unwrap();
        assert!(forward_pass(&net, &x, &ExecutionMode::Fused).is_err());
    }
}
