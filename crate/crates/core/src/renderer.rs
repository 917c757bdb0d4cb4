//! Budget-adaptive decoder: query patches built from target rays attend to
//! however many tokens they are given and predict RGB patches.

use std::collections::HashSet;

use clift_tensor::{
    FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, NodeId, ParamStore,
    Result as TResult, Scalar, Tensor, TensorError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::ModelConfig;
use crate::error::{CliftError, Result};
use crate::geometry::{
    query_grid, unpatchify, Camera, PATCH, QUERY_VECTOR_WIDTH, RGB_VECTOR_WIDTH,
};
use crate::imaging::Image;

/// Post-norm decoder block: self-attention among queries, cross-attention
/// to the tokens, FFN, each followed by add & norm.
#[derive(Clone, Debug)]
pub struct RendererBlock {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl RendererBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let d = cfg.dim;
        Ok(Self {
            self_attn: MultiHeadAttention::new(
                ps,
                &format!("{name}.self_attn"),
                d,
                cfg.heads,
                rng,
            )?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), d),
            cross_attn: MultiHeadAttention::new(
                ps,
                &format!("{name}.cross_attn"),
                d,
                cfg.heads,
                rng,
            )?,
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), d),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), d, cfg.ffn_hidden(), rng),
            norm3: LayerNorm::new(ps, &format!("{name}.norm3"), d),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        x: NodeId,
        tokens: NodeId,
    ) -> TResult<NodeId> {
        let a = self.self_attn.forward(g, ps, x, x, None)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, ps, x)?;
        let c = self.cross_attn.forward(g, ps, x, tokens, None)?;
        let x = g.add(x, c)?;
        let x = self.norm2.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, x)?;
        let x = g.add(x, f)?;
        self.norm3.forward(g, ps, x)
    }
}

#[derive(Clone, Debug)]
pub struct Renderer {
    pub query: Linear,
    pub blocks: Vec<RendererBlock>,
    pub head: Linear,
}

impl Renderer {
    pub const PREFIX: &'static str = "renderer.";

    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let query = Linear::new(ps, "renderer.query", QUERY_VECTOR_WIDTH, cfg.dim, true, rng);
        let blocks = (0..cfg.renderer_blocks)
            .map(|i| RendererBlock::new(ps, &format!("renderer.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let head = Linear::new(ps, "renderer.head", cfg.dim, RGB_VECTOR_WIDTH, true, rng);
        Ok(Self {
            query,
            blocks,
            head,
        })
    }

    /// `queries` is `[P, 384]`, `tokens` `[R, D]`; returns RGB patches
    /// `[P, 192]` in `(0, 1)`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        queries: NodeId,
        tokens: NodeId,
    ) -> TResult<NodeId> {
        let mut x = self.query.forward(g, ps, queries)?;
        for b in &self.blocks {
            x = b.forward(g, ps, x, tokens)?;
        }
        let y = self.head.forward(g, ps, x)?;
        g.sigmoid(y)
    }

    /// Renders `target` from `tokens` (`[R, D]`); `ids` identifies the
    /// supplied tokens and must be unique.
    pub fn render(
        &self,
        ps: &ParamStore,
        target: &Camera,
        tokens: &Tensor<f32>,
        ids: &[u32],
    ) -> Result<Image> {
        check_tokens(tokens, ids)?;
        let q = query_grid(target)?;
        let mut g = Graph::<f32>::inference();
        let qn = g.constant(q)?;
        let tn = g.constant(tokens.clone())?;
        let y = self.forward(&mut g, ps, qn, tn)?;
        unpatchify(&g.take_value(y), target.height, target.width)
    }
}

fn check_tokens(tokens: &Tensor<f32>, ids: &[u32]) -> Result<()> {
    if tokens.rows() == 0 || tokens.numel() == 0 {
        return Err(CliftError::InvalidArgument(
            "rendering needs at least one token".into(),
        ));
    }
    if ids.len() != tokens.rows() {
        return Err(CliftError::Shape(format!(
            "{} ids for {} tokens",
            ids.len(),
            tokens.rows()
        )));
    }
    let mut seen = HashSet::with_capacity(ids.len());
    if let Some(d) = ids.iter().find(|&&i| !seen.insert(i)) {
        return Err(CliftError::InvalidArgument(format!(
            "token {d} supplied more than once"
        )));
    }
    Ok(())
}

/// Weights of the reconstruction loss.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub l2_weight: f32,
    pub perceptual_weight: f32,
    pub perceptual: Option<PerceptualFeatures>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            l2_weight: 1.0,
            perceptual_weight: 0.5,
            perceptual: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_weight >= 0.0 && self.perceptual_weight >= 0.0) {
            return Err(CliftError::InvalidArgument(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// A frozen, seeded bank of random 3×3 convolution filters with ReLU. Used
/// as a cheap stand-in for a pretrained feature network.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualFeatures {
    /// `[27, channels]`.
    pub filters: Tensor<f32>,
}

impl PerceptualFeatures {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, (2.0f32 / 27.0).sqrt()).unwrap();
        Self {
            filters: Tensor::from_fn(&[27, channels], |_| normal.sample(&mut rng)),
        }
    }

    /// Gather indices turning `[P, 192]` patch rows into `[H·W, 27]`
    /// zero-padded 3×3 neighbourhoods.
    fn im2col(height: usize, width: usize) -> Vec<Option<usize>> {
        let cols = width / PATCH;
        let at = |x: usize, y: usize, ch: usize| {
            let p = (y / PATCH) * cols + x / PATCH;
            p * RGB_VECTOR_WIDTH + ((y % PATCH) * PATCH + x % PATCH) * 3 + ch
        };
        let mut idx = Vec::with_capacity(height * width * 27);
        for y in 0..height as isize {
            for x in 0..width as isize {
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (sx, sy) = (x + dx, y + dy);
                        let inside =
                            sx >= 0 && sy >= 0 && sx < width as isize && sy < height as isize;
                        for ch in 0..3 {
                            idx.push(inside.then(|| at(sx as usize, sy as usize, ch)));
                        }
                    }
                }
            }
        }
        idx
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        patches: NodeId,
        height: usize,
        width: usize,
    ) -> TResult<NodeId> {
        let cols = g.gather(
            patches,
            Self::im2col(height, width),
            vec![height * width, 27],
        )?;
        let w = g.constant(self.filters.cast())?;
        let f = g.matmul(cols, w)?;
        g.relu(f)
    }
}

/// `l2_weight·MSE + perceptual_weight·MSE(features)` on patch-layout images.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    pred: NodeId,
    truth: NodeId,
    height: usize,
    width: usize,
    cfg: &LossConfig,
) -> TResult<NodeId> {
    if g.value(pred).shape() != g.value(truth).shape() {
        return Err(TensorError::shape(
            "loss",
            format!(
                "prediction {:?} vs target {:?}",
                g.value(pred).shape(),
                g.value(truth).shape()
            ),
        ));
    }
    let diff = g.sub(pred, truth)?;
    let sq = g.mul(diff, diff)?;
    let mse = g.mean(sq)?;
    let mut total = g.scale(mse, T::from_f32(cfg.l2_weight))?;
    if let (Some(feat), true) = (&cfg.perceptual, cfg.perceptual_weight > 0.0) {
        let fp = feat.forward(g, pred, height, width)?;
        let ft = feat.forward(g, truth, height, width)?;
        let d = g.sub(fp, ft)?;
        let s = g.mul(d, d)?;
        let m = g.mean(s)?;
        let m = g.scale(m, T::from_f32(cfg.perceptual_weight))?;
        total = g.add(total, m)?;
    }
    Ok(total)
}

/// Loss between two images.
pub fn image_loss(pred: &Image, truth: &Image, cfg: &LossConfig) -> Result<f64> {
    if pred.width != truth.width || pred.height != truth.height {
        return Err(CliftError::Shape(format!(
            "{}x{} vs {}x{}",
            pred.width, pred.height, truth.width, truth.height
        )));
    }
    cfg.validate()?;
    let mut g = Graph::<f64>::inference();
    let p = g.constant(crate::geometry::patchify_rgb(pred)?.cast())?;
    let t = g.constant(crate::geometry::patchify_rgb(truth)?.cast())?;
    let l = loss_graph(&mut g, p, t, pred.height, pred.width, cfg)?;
    Ok(g.value(l).data()[0])
}

/// Analytic renderer cost in FLOPs, counting a multiply-add as two.
///
/// With `P` queries, `R` tokens, width `D`, FFN width `F` and `B` blocks:
///
/// ```text
/// 2·P·384·D                                    query projection
/// + B · ( 8·P·D² + 4·P²·D                      self-attention
///       + 4·P·D² + 4·R·D² + 4·P·R·D            cross-attention
///       + 4·P·D·F )                            FFN
/// + 2·P·D·192                                  RGB head
/// ```
pub fn flops_estimate(cfg: &ModelConfig, n_query: usize, n_tokens: usize) -> u64 {
    let (p, r, d, f) = (
        n_query as u64,
        n_tokens as u64,
        cfg.dim as u64,
        cfg.ffn_hidden() as u64,
    );
    let sa = 6 * p * d * d + 4 * p * p * d + 2 * p * d * d;
    let ca = 2 * p * d * d + 4 * r * d * d + 4 * p * r * d + 2 * p * d * d;
    let ffn = 4 * p * d * f;
    2 * p * QUERY_VECTOR_WIDTH as u64 * d
        + cfg.renderer_blocks as u64 * (sa + ca + ffn)
        + 2 * p * d * RGB_VECTOR_WIDTH as u64
}
