//! Variable-size 3D vision transformer.
//!
//! Volumes of different crop sizes are cut into fixed-size patches, so the
//! token count varies with the image while the embedding width does not.
//! Positional embeddings for each size are taken from a single master grid
//! built for the largest size (see [`posemb`]), and batches are formed either
//! from same-size samples or by accumulating gradients over singletons (see
//! [`batching`]).

pub mod batching;
pub mod bench;
pub mod data;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod patchify;
pub mod posemb;
pub mod train;

pub use error::{Error, Result};
