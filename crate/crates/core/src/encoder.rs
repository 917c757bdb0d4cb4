//! Multi-view encoder: all patches of all input views attend to each other
//! jointly and come out as light-field tokens (LiFTs).

use clift_tensor::{
    FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, NodeId, ParamStore,
    Result as TResult, Scalar, Tensor,
};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{CliftError, Result};
use crate::geometry::{patchify, Camera, RayCoords, PATCH_VECTOR_WIDTH};
use crate::imaging::Image;

/// Patch vectors and per-token metadata for a set of posed input views.
#[derive(Clone, Debug)]
pub struct PatchedViews {
    /// `[N, 576]`, views concatenated in order.
    pub patches: Tensor<f32>,
    /// Ray through each patch center.
    pub rays: Vec<RayCoords>,
    pub source_view: Vec<u32>,
    pub view_centers: Vec<[f32; 3]>,
    pub width: usize,
    pub height: usize,
}

impl PatchedViews {
    pub fn new(views: &[(&Image, &Camera)]) -> Result<Self> {
        let (first_img, _) = views.first().ok_or_else(|| {
            CliftError::InvalidArgument("at least one input view is required".into())
        })?;
        let (width, height) = (first_img.width, first_img.height);
        let mut data = Vec::new();
        let mut rays = Vec::new();
        let mut source_view = Vec::new();
        let mut view_centers = Vec::new();
        for (v, (img, cam)) in views.iter().enumerate() {
            if img.width != width || img.height != height {
                return Err(CliftError::Shape(format!(
                    "view {v} is {}x{} but view 0 is {width}x{height}",
                    img.width, img.height
                )));
            }
            if cam.width != width || cam.height != height {
                return Err(CliftError::Shape(format!(
                    "camera {v} is {}x{} but its image is {width}x{height}",
                    cam.width, cam.height
                )));
            }
            let p = patchify(img, &cam.pixel_rays())?;
            data.extend_from_slice(p.data());
            for r in cam.patch_center_rays() {
                rays.push(r.to_coords());
                source_view.push(v as u32);
            }
            let c = cam.center();
            view_centers.push([c.x as f32, c.y as f32, c.z as f32]);
        }
        let n = rays.len();
        Ok(Self {
            patches: Tensor::new(vec![n, PATCH_VECTOR_WIDTH], data)?,
            rays,
            source_view,
            view_centers,
            width,
            height,
        })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Encoder output: one token per input patch.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftSet {
    /// `[N, D]`.
    pub embeddings: Tensor<f32>,
    pub rays: Vec<RayCoords>,
    pub source_view: Vec<u32>,
    /// Camera center of every input view, indexed by `source_view`.
    pub view_centers: Vec<[f32; 3]>,
}

impl LiftSet {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.last_dim()
    }
}

/// Post-norm block: self-attention, add & norm, FFN, add & norm.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), cfg.dim, cfg.heads, rng)?,
            norm1: LayerNorm::new(ps, &format!("{name}.norm1"), cfg.dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), cfg.dim, cfg.ffn_hidden(), rng),
            norm2: LayerNorm::new(ps, &format!("{name}.norm2"), cfg.dim),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        x: NodeId,
    ) -> TResult<NodeId> {
        let a = self.attn.forward(g, ps, x, x, None)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, ps, x)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub input: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub dim: usize,
}

impl Encoder {
    pub const PREFIX: &'static str = "encoder.";

    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let input = Linear::new(ps, "encoder.input", PATCH_VECTOR_WIDTH, cfg.dim, true, rng);
        let blocks = (0..cfg.encoder_blocks)
            .map(|i| EncoderBlock::new(ps, &format!("encoder.block{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            input,
            blocks,
            dim: cfg.dim,
        })
    }

    /// `patches` is `[N, 576]`; returns `[N, D]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamStore,
        patches: NodeId,
    ) -> TResult<NodeId> {
        let mut x = self.input.forward(g, ps, patches)?;
        for b in &self.blocks {
            x = b.forward(g, ps, x)?;
        }
        Ok(x)
    }

    /// Inference-only encoding of a set of posed views.
    pub fn encode(&self, ps: &ParamStore, views: &PatchedViews) -> Result<LiftSet> {
        let mut g = Graph::<f32>::inference();
        let x = g.constant(views.patches.clone())?;
        let y = self.forward(&mut g, ps, x)?;
        Ok(LiftSet {
            embeddings: g.take_value(y),
            rays: views.rays.clone(),
            source_view: views.source_view.clone(),
            view_centers: views.view_centers.clone(),
        })
    }
}
