//! Compressed light-field tokens.
//!
//! Posed input views are patchified together with per-pixel Plücker rays and
//! encoded jointly into one latent token per patch. Latent K-means picks a
//! representative subset of those tokens, a small condenser folds each
//! cluster into its representative, and a decoder renders novel views from
//! any number of the stored tokens chosen by a ray-distance heuristic.

pub mod clift_file;
pub mod clustering;
pub mod condenser;
pub mod config;
pub mod encoder;
mod error;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod renderer;
pub mod scene;
pub mod selection;
pub mod train;

pub use clift_tensor as tensor;
pub use error::{CliftError, Result};
