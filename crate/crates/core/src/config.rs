//! Model and run configuration.
//!
//! Run configs are plain `key = value` TOML documents; every field has a
//! default, so an empty file is valid.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliftError, Result};

/// Transformer sizes for the encoder, condenser and renderer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub condenser_blocks: usize,
    pub renderer_blocks: usize,
    /// FFN hidden width as a multiple of `dim`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            dim: 64,
            heads: 4,
            encoder_blocks: 2,
            condenser_blocks: 2,
            renderer_blocks: 2,
            ffn_mult: 4,
        }
    }

    /// The full-size configuration (768 wide, 8 heads, 6 blocks).
    pub fn full_scale() -> Self {
        Self {
            dim: 768,
            heads: 8,
            encoder_blocks: 6,
            condenser_blocks: 2,
            renderer_blocks: 6,
            ffn_mult: 4,
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.dim * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CliftError::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.ffn_mult == 0 {
            return Err(CliftError::Config("ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a CLI run can override.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub condenser_blocks: usize,
    pub renderer_blocks: usize,
    pub ffn_mult: usize,
    pub seed: u64,
    pub image_size: usize,
    pub scene_kind: String,
    pub num_scenes: usize,
    pub n_views: usize,
    pub n_inputs: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub peak_lr: f64,
    pub stage2_lr: f64,
    pub warmup_steps: usize,
    pub renderer_lr_scale: f32,
    pub batch_size: usize,
    pub ns_list: Vec<usize>,
    /// Fractions of N_s sampled as the render budget.
    pub budget_ladder: Vec<f64>,
    pub kmeans_iters: usize,
    /// Resample which views are inputs and which is the target every stage-1 step.
    pub random_views: bool,
    pub l2_weight: f32,
    pub perceptual_weight: f32,
    pub perceptual: bool,
    pub fps_runs: usize,
    pub fps_warmup: usize,
    pub selection_state: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk();
        Self {
            dim: m.dim,
            heads: m.heads,
            encoder_blocks: m.encoder_blocks,
            condenser_blocks: m.condenser_blocks,
            renderer_blocks: m.renderer_blocks,
            ffn_mult: m.ffn_mult,
            seed: 0,
            image_size: 64,
            scene_kind: "checker-box".into(),
            num_scenes: 8,
            n_views: 6,
            n_inputs: 4,
            stage1_steps: 3000,
            stage2_steps: 1000,
            peak_lr: 1e-3,
            stage2_lr: 5e-4,
            warmup_steps: 100,
            renderer_lr_scale: 0.1,
            batch_size: 1,
            ns_list: vec![64, 128, 256],
            budget_ladder: vec![1.0, 0.5, 0.25, 0.125],
            kmeans_iters: 50,
            l2_weight: 1.0,
            perceptual_weight: 0.5,
            perceptual: false,
            fps_runs: 20,
            fps_warmup: 3,
            selection_state: true,
            random_views: true,
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            heads: self.heads,
            encoder_blocks: self.encoder_blocks,
            condenser_blocks: self.condenser_blocks,
            renderer_blocks: self.renderer_blocks,
            ffn_mult: self.ffn_mult,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| CliftError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CliftError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(crate::geometry::PATCH) {
            return Err(CliftError::Config(format!(
                "image_size {} must be a positive multiple of 8",
                self.image_size
            )));
        }
        if self.n_inputs == 0 || self.n_inputs >= self.n_views {
            return Err(CliftError::Config(format!(
                "need 1 <= n_inputs < n_views, got {} and {}",
                self.n_inputs, self.n_views
            )));
        }
        if self.budget_ladder.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return Err(CliftError::Config(
                "budget ladder fractions must lie in (0, 1]".into(),
            ));
        }
        if self.ns_list.contains(&0) {
            return Err(CliftError::Config(
                "ns_list entries must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(CliftError::Config("batch_size must be positive".into()));
        }
        if self.l2_weight < 0.0 || self.perceptual_weight < 0.0 {
            return Err(CliftError::Config(
                "loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Render budgets for a given N_s, largest first, deduplicated.
    pub fn budgets(&self, ns: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .budget_ladder
            .iter()
            .map(|f| ((ns as f64 * f).round() as usize).clamp(1, ns))
            .collect();
        out.sort_unstable_by(|a, b| b.cmp(a));
        out.dedup();
        out
    }
}
