//! Transformer building blocks on top of [`Graph`].

use std::ops::Range;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, NodeId};
use crate::params::{trunc_normal, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Weight init std for a layer with `fan_in` inputs. A flat 0.02 leaves
/// narrow models with near-zero attention outputs.
pub fn init_std(fan_in: usize) -> f32 {
    1.0 / (fan_in.max(1) as f32).sqrt()
}

/// `y = x W (+ b)` with `W` stored as `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            trunc_normal(&[in_dim, out_dim], init_std(in_dim), rng),
            true,
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), false));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// A linear layer whose weight (and bias) start at exactly zero.
    pub fn zeros(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = ps.add(
            format!("{name}.weight"),
            Tensor::zeros(&[in_dim, out_dim]),
            true,
        );
        let bias = bias.then(|| ps.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), false));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = g.param(ps, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(ps, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), Tensor::filled(&[dim], 1.0), false),
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
            eps: LN_EPS,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let gamma = g.param(ps, self.gamma)?;
        let beta = g.param(ps, self.beta)?;
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// Multi-head attention with bias-free query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(TensorError::Shape {
                op: "multi_head_attention",
                detail: format!("width {dim} is not divisible by {heads} heads"),
            });
        }
        Ok(Self {
            wq: Linear::new(ps, &format!("{name}.wq"), dim, dim, false, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), dim, dim, false, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), dim, dim, false, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), dim, dim, false, rng),
            heads,
        })
    }

    /// `query` attends to `context`; pass the same node for self-attention.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        query: NodeId,
        context: NodeId,
        spans: Option<Vec<Range<usize>>>,
    ) -> Result<NodeId> {
        let q = self.wq.forward(g, ps, query)?;
        let k = self.wk.forward(g, ps, context)?;
        let v = self.wv.forward(g, ps, context)?;
        let a = g.attention(q, k, v, self.heads, spans)?;
        self.wo.forward(g, ps, a)
    }
}

/// Two linear layers with GELU in between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden, true, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim, true, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.fc1.forward(g, ps, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, ps, h)
    }
}
