//! Spiking neural network training with surrogate-gradient backpropagation
//! through time and per-neuron learnable spiking thresholds.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are the default double-precision instantiations.

pub mod bptt;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod events_io;
pub mod network;
pub mod neuron;
pub mod optim;
pub mod scalar;
pub mod train;

pub use config::{load_config, Hyperparams};
pub use error::{Error, Result};
pub use events_io::{Event, EventStream, Geometry, SpikeTensor};
pub use network::NetworkSpec;
pub use scalar::{Matrix, Scalar};

pub type LayerParams64 = neuron::LayerParams<f64>;
pub type LayerTrace64 = neuron::LayerTrace<f64>;
pub type Network64 = network::Network<f64>;
pub type GradientSet64 = bptt::GradientSet<f64>;
pub type TargetRates64 = bptt::TargetRates<f64>;
pub type AdamState64 = optim::AdamState<f64>;

pub type LayerParams32 = neuron::LayerParams<f32>;
pub type LayerTrace32 = neuron::LayerTrace<f32>;
pub type Network32 = network::Network<f32>;
pub type GradientSet32 = bptt::GradientSet<f32>;
pub type AdamState32 = optim::AdamState<f32>;
