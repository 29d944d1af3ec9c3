//! Spiking neural network engine for underwater image dehazing.
//!
//! The model converts a static RGB image into a time-dependent sequence,
//! spike-codes RGB and CIELAB views of it, estimates a transmission-derived
//! map `K` with a dual-branch spiking transformer encoder/decoder, estimates
//! the background light `B`, and reconstructs the haze-free image as
//! `Ŷ = K⊙X − K⊙B + X`. Training uses surrogate-gradient backpropagation
//! through time; an energy ledger converts measured spike rates into
//! synaptic-operation counts and CMOS energy estimates.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod colorspace;
pub mod config;
pub mod dataset;
pub mod energy;
pub mod error;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod neuron;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Caps the global worker pool at `threads` workers. Must run before any
/// parallel work; later calls fail.
pub fn configure_threads(threads: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
