//! Neural condensation: folds every LiFT of a cluster into its medoid.
//!
//! Per block, with `T` the medoid embeddings:
//!
//! ```text
//! T̂ = SA(LN(T))
//! T̂_k = CA(T̂_k, LN(members of k))
//! T̂ = FFN(LN(T̂))
//! T = T + W_z T̂
//! ```
//!
//! `W_z` starts at zero, so an untrained condenser returns the medoid
//! embeddings unchanged.

use std::ops::Range;

use clift_tensor::{
    FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, NodeId, ParamStore,
    Result as TResult, Scalar, Tensor,
};
use rand::Rng;

use crate::clustering::ClusterAssignment;
use crate::config::ModelConfig;
use crate::encoder::LiftSet;
use crate::error::{CliftError, Result};
use crate::geometry::RayCoords;

/// The stored scene representation: condensed medoid tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct CliftSet {
    /// `[N_s, D]`.
    pub embeddings: Tensor<f32>,
    pub rays: Vec<RayCoords>,
    pub source_view: Vec<u32>,
    pub view_centers: Vec<[f32; 3]>,
    /// Index of the LiFT each token was condensed into. Not persisted.
    pub provenance: Vec<u32>,
}

impl CliftSet {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.last_dim()
    }

    /// Treats every LiFT as a stored token (no compression).
    pub fn from_lifts(lifts: &LiftSet) -> Self {
        Self {
            embeddings: lifts.embeddings.clone(),
            rays: lifts.rays.clone(),
            source_view: lifts.source_view.clone(),
            view_centers: lifts.view_centers.clone(),
            provenance: (0..lifts.len() as u32).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.embeddings.rows();
        if self.embeddings.shape().len() != 2 || self.rays.len() != n || self.source_view.len() != n
        {
            return Err(CliftError::Shape(format!(
                "{n} embeddings, {} rays, {} source views",
                self.rays.len(),
                self.source_view.len()
            )));
        }
        if let Some(&v) = self
            .source_view
            .iter()
            .find(|&&v| v as usize >= self.view_centers.len())
        {
            return Err(CliftError::Shape(format!(
                "source view {v} but only {} view centers",
                self.view_centers.len()
            )));
        }
        Ok(())
    }
}

/// Index layout for the per-cluster cross-attention: member rows, grouped
/// by cluster, and the span of each cluster within them.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterLayout {
    pub medoids: Vec<usize>,
    pub members: Vec<usize>,
    pub spans: Vec<Range<usize>>,
}

impl ClusterLayout {
    /// Members exclude the medoid and are sorted ascending; a singleton
    /// cluster attends to its medoid alone.
    pub fn new(clusters: &ClusterAssignment) -> Self {
        let mut grouped = vec![Vec::new(); clusters.k];
        for (i, &a) in clusters.assignment.iter().enumerate() {
            if clusters.medoids[a as usize] as usize != i {
                grouped[a as usize].push(i);
            }
        }
        let mut members = Vec::with_capacity(clusters.len());
        let mut spans = Vec::with_capacity(clusters.k);
        for (c, g) in grouped.into_iter().enumerate() {
            let start = members.len();
            if g.is_empty() {
                members.push(clusters.medoids[c] as usize);
            } else {
                members.extend(g);
            }
            spans.push(start..members.len());
        }
        Self {
            medoids: clusters.medoids.iter().map(|&m| m as usize).collect(),
            members,
            spans,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CondenserBlock {
    pub norm_tokens: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_members: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
    pub w_z: Linear,
}

impl CondenserBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            norm_tokens: LayerNorm::new(ps, &format!("{name}.norm_tokens"), d),
            self_attn: MultiHeadAttention::new(
                ps,
                &format!("{name}.self_attn"),
                d,
                cfg.heads,
                rng,
            )?,
            norm_members: LayerNorm::new(ps, &format!("{name}.norm_members"), d),
            cross_attn: MultiHeadAttention::new(
                ps,
                &format!("{name}.cross_attn"),
                d,
                cfg.heads,
                rng,
            )?,
            norm_ffn: LayerNorm::new(ps, &format!("{name}.norm_ffn"), d),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, cfg.ffn_hidden(), rng),
            w_z: Linear::zeros(ps, &format!("{name}.w_z"), d, d, false),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        tokens: NodeId,
        members: NodeId,
        spans: &[Range<usize>],
    ) -> TResult<NodeId> {
        let t = self.norm_tokens.forward(g, ps, tokens)?;
        let h = self.self_attn.forward(g, ps, t, t, None)?;
        let m = self.norm_members.forward(g, ps, members)?;
        let h = self.cross_attn.forward(g, ps, h, m, Some(spans.to_vec()))?;
        let h = self.norm_ffn.forward(g, ps, h)?;
        let h = self.ffn.forward(g, ps, h)?;
        let z = self.w_z.forward(g, ps, h)?;
        g.add(tokens, z)
    }
}

#[derive(Clone, Debug)]
pub struct Condenser {
    pub blocks: Vec<CondenserBlock>,
}

impl Condenser {
    pub const PREFIX: &'static str = "condenser.";

    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.condenser_blocks)
            .map(|i| CondenserBlock::new(ps, &format!("condenser.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    /// `lifts` is `[N, D]`; returns the condensed `[K, D]` medoid rows.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        lifts: NodeId,
        layout: &ClusterLayout,
    ) -> TResult<NodeId> {
        let mut tokens = g.gather_rows(lifts, layout.medoids.clone())?;
        let members = g.gather_rows(lifts, layout.members.clone())?;
        for b in &self.blocks {
            tokens = b.forward(g, ps, tokens, members, &layout.spans)?;
        }
        Ok(tokens)
    }

    pub fn condense(
        &self,
        ps: &ParamStore,
        lifts: &LiftSet,
        clusters: &ClusterAssignment,
    ) -> Result<CliftSet> {
        if clusters.len() != lifts.len() {
            return Err(CliftError::Shape(format!(
                "assignment covers {} tokens but there are {} LiFTs",
                clusters.len(),
                lifts.len()
            )));
        }
        clusters.validate()?;
        let layout = ClusterLayout::new(clusters);
        let mut g = Graph::<f32>::inference();
        let x = g.constant(lifts.embeddings.clone())?;
        let y = self.forward(&mut g, ps, x, &layout)?;
        Ok(CliftSet {
            embeddings: g.take_value(y),
            rays: layout.medoids.iter().map(|&m| lifts.rays[m]).collect(),
            source_view: layout
                .medoids
                .iter()
                .map(|&m| lifts.source_view[m])
                .collect(),
            view_centers: lifts.view_centers.clone(),
            provenance: clusters.medoids.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_groups_members_and_handles_singletons() {
        let ca = ClusterAssignment {
            k: 3,
            assignment: vec![1, 0, 1, 2, 1, 0],
            medoids: vec![5, 2, 3],
        };
        let l = ClusterLayout::new(&ca);
        assert_eq!(l.members, vec![1, 0, 4, 3]);
        assert_eq!(l.spans, vec![0..1, 1..3, 3..4]);
        assert_eq!(l.medoids, vec![5, 2, 3]);
    }
}
