//! Dense tensors with tape-based reverse-mode automatic differentiation,
//! plus the handful of transformer layers and the optimizer needed to train
//! small models on a CPU.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{Graph, NodeId};
pub use nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{AdamW, CosineSchedule};
pub use params::{ParamId, ParamStore};
pub use tensor::{matmul_plain, Scalar, Tensor};
