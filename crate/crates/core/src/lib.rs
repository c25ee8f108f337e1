//! Time-fused and time-pipelined execution of leaky integrate-and-fire spiking networks.
//!
//! Tensors are time-major (`[T x B x N]`). The fused engine sweeps a layer's whole
//! time axis per column tile with neuron state kept in registers; the pipeline splits
//! the time axis across worker threads that exchange boundary state. Every execution
//! path produces bitwise the same values as the per-step serial reference.

pub mod cli;
pub mod error;
pub mod fusion;
pub mod network;
pub mod neuron;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use fusion::{FusedForwardRecord, LifEngine, FUSED_TILE};
pub use network::{ExecutionMode, SpikingNet};
pub use neuron::{LifParams, LifState, MembraneGrad, SurrogateArgument};
pub use pipeline::{PipelinePlan, SpeedupModel};
pub use tensor::TimeMajorTensor;
