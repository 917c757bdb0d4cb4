//! Encoder, condenser and renderer sharing one parameter store.

use std::path::Path;

use clift_tensor::{Checkpoint, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::{kmeans, ClusterAssignment, KMeansResult};
use crate::condenser::{CliftSet, Condenser};
use crate::config::ModelConfig;
use crate::encoder::{Encoder, LiftSet, PatchedViews};
use crate::error::{CliftError, Result};
use crate::geometry::Camera;
use crate::imaging::Image;
use crate::renderer::Renderer;
use crate::scene::Scene;

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ps: ParamStore,
    pub encoder: Encoder,
    pub condenser: Condenser,
    pub renderer: Renderer,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let encoder = Encoder::new(&mut ps, cfg, &mut rng)?;
        let condenser = Condenser::new(&mut ps, cfg, &mut rng)?;
        let renderer = Renderer::new(&mut ps, cfg, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            ps,
            encoder,
            condenser,
            renderer,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.ps)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.checkpoint().to_bytes()).map_err(|e| CliftError::io(path, e))
    }

    /// Builds the architecture for `cfg` and loads weights from `path`.
    pub fn load(cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| CliftError::io(path, e))?;
        let ckpt = Checkpoint::from_bytes(&bytes)
            .map_err(|e| CliftError::format(path.display().to_string(), e.to_string()))?;
        let mut m = Self::new(cfg, 0)?;
        ckpt.apply(&mut m.ps)?;
        Ok(m)
    }

    pub fn encode_views(&self, views: &PatchedViews) -> Result<LiftSet> {
        self.encoder.encode(&self.ps, views)
    }

    /// LiFTs of a scene's input views.
    pub fn encode_scene(&self, scene: &Scene) -> Result<LiftSet> {
        self.encode_views(&PatchedViews::new(&scene.input_views())?)
    }

    pub fn condense(&self, lifts: &LiftSet, clusters: &ClusterAssignment) -> Result<CliftSet> {
        self.condenser.condense(&self.ps, lifts, clusters)
    }

    /// Clusters the LiFTs into `ns` groups and condenses them.
    pub fn build_clifts(
        &self,
        lifts: &LiftSet,
        ns: usize,
        seed: u64,
        max_iters: usize,
    ) -> Result<(KMeansResult, CliftSet)> {
        let km = kmeans(&lifts.embeddings, ns, seed, max_iters)?;
        let set = self.condense(lifts, &km.clusters)?;
        Ok((km, set))
    }

    /// Renders `target` from the tokens of `set` listed in `ids`.
    pub fn render(&self, target: &Camera, set: &CliftSet, ids: &[usize]) -> Result<Image> {
        let tokens: Tensor<f32> = set.embeddings.select_rows(ids);
        let ids: Vec<u32> = ids.iter().map(|&i| i as u32).collect();
        self.renderer.render(&self.ps, target, &tokens, &ids)
    }
}
