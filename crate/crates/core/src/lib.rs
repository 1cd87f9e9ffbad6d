//! Full-waveform inversion with an encoder-decoder network: synthetic data
//! generation by acoustic finite differences, training, low-rank adapters
//! and evaluation metrics.

mod container;
pub mod data;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;
pub mod wavesim;

pub use container::TensorEntry;
pub use error::{Error, Result};
pub use lorafwi_tensor as tensor;
