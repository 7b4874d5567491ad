//! Pre-norm transformer encoder over variable-length patch sequences.

pub mod checkpoint;
mod config;
mod model;
mod params;

pub use config::{parse_key_values, ModelConfig, PosembStrategy};
pub use model::{Encoder, ForwardCache, Positional};
pub use params::{is_decay_exempt, BlockParams, ModelParams};
