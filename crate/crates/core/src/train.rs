//! Two-stage training.
//!
//! Stage 1 trains encoder and renderer end to end, with every LiFT passed to
//! the renderer. Stage 2 freezes the encoder, clusters its cached LiFTs
//! once, and trains condenser and renderer with a randomly drawn storage
//! size and render budget per step.

use std::collections::HashMap;
use std::path::Path;

use clift_tensor::{AdamW, CosineSchedule, Graph, NodeId, ParamId, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clustering::{kmeans, ClusterAssignment};
use crate::condenser::ClusterLayout;
use crate::config::RunConfig;
use crate::encoder::{LiftSet, PatchedViews};
use crate::error::{CliftError, Result};
use crate::geometry::{patchify, patchify_rgb, query_grid, PATCH_VECTOR_WIDTH};
use crate::model::Model;
use crate::renderer::{loss_graph, LossConfig, PerceptualFeatures};
use crate::scene::Scene;
use crate::selection::{select, Candidates, SelectionConfig};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub renderer_lr_scale: f32,
    pub ns_list: Vec<usize>,
    pub budget_ladder: Vec<f64>,
    pub kmeans_iters: usize,
    /// Stage 1 draws a fresh input/target split each step instead of using
    /// the scene's fixed one.
    pub random_views: bool,
    pub loss: LossConfig,
    pub seed: u64,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig, stage: u8) -> Self {
        Self {
            stage,
            steps: if stage == 1 {
                run.stage1_steps
            } else {
                run.stage2_steps
            },
            batch_size: run.batch_size,
            peak_lr: if stage == 1 {
                run.peak_lr
            } else {
                run.stage2_lr
            },
            warmup_steps: run.warmup_steps,
            renderer_lr_scale: if stage == 1 {
                1.0
            } else {
                run.renderer_lr_scale
            },
            ns_list: run.ns_list.clone(),
            budget_ladder: run.budget_ladder.clone(),
            kmeans_iters: run.kmeans_iters,
            random_views: run.random_views,
            loss: LossConfig {
                l2_weight: run.l2_weight,
                perceptual_weight: run.perceptual_weight,
                perceptual: run
                    .perceptual
                    .then(|| PerceptualFeatures::new(16, run.seed ^ 0xfea7)),
            },
            seed: run.seed,
            log_every: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(CliftError::Config(format!(
                "stage must be 1 or 2, got {}",
                self.stage
            )));
        }
        if self.batch_size == 0 {
            return Err(CliftError::Config("batch_size must be positive".into()));
        }
        if !(self.peak_lr >= 0.0) {
            return Err(CliftError::Config(
                "learning rate must be non-negative".into(),
            ));
        }
        self.loss.validate()
    }

    fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    /// Render budgets for `ns`, largest first.
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

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Precomputed per-scene tensors.
struct SceneData {
    patches: PatchedViews,
    targets: Vec<(Tensor<f32>, Tensor<f32>)>,
    /// Per-view patch vectors, query grid and RGB truth, for random splits.
    views: Vec<ViewData>,
    n_inputs: usize,
    height: usize,
    width: usize,
}

struct ViewData {
    patches: Vec<f32>,
    query: Tensor<f32>,
    truth: Tensor<f32>,
}

impl SceneData {
    fn new(scene: &Scene) -> Result<Self> {
        scene.validate()?;
        if scene.targets.is_empty() {
            return Err(CliftError::InvalidArgument(format!(
                "scene {} has no target views",
                scene.id
            )));
        }
        let views = scene
            .views
            .iter()
            .map(|v| {
                Ok(ViewData {
                    patches: patchify(&v.image, &v.camera.pixel_rays())?.data().to_vec(),
                    query: query_grid(&v.camera)?,
                    truth: patchify_rgb(&v.image)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let targets = scene
            .targets
            .iter()
            .map(|&t| (views[t].query.clone(), views[t].truth.clone()))
            .collect();
        Ok(Self {
            patches: PatchedViews::new(&scene.input_views())?,
            targets,
            views,
            n_inputs: scene.inputs.len(),
            height: scene.height(),
            width: scene.width(),
        })
    }

    /// Draws `n_inputs + 1` distinct views; the last one is the target.
    fn random_split(&self, rng: &mut impl Rng) -> Result<(Tensor<f32>, usize)> {
        let picked = rand::seq::index::sample(rng, self.views.len(), self.n_inputs + 1).into_vec();
        let (target, inputs) = picked.split_last().unwrap();
        let mut inputs = inputs.to_vec();
        inputs.sort_unstable();
        let mut data = Vec::with_capacity(inputs.len() * self.views[0].patches.len());
        for &i in &inputs {
            data.extend_from_slice(&self.views[i].patches);
        }
        let rows = data.len() / PATCH_VECTOR_WIDTH;
        Ok((Tensor::new(vec![rows, PATCH_VECTOR_WIDTH], data)?, *target))
    }
}

fn diverged(step: usize) -> impl Fn(CliftError) -> CliftError {
    move |e| match e {
        CliftError::Tensor(TensorError::NonFinite { op }) => CliftError::Diverged {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Sums per-element gradients into `acc`.
fn accumulate(acc: &mut HashMap<ParamId, Tensor<f32>>, grads: Vec<(ParamId, Tensor<f32>)>) {
    for (id, g) in grads {
        match acc.get_mut(&id) {
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            None => {
                acc.insert(id, g);
            }
        }
    }
}

fn apply_step(
    model: &mut Model,
    opt: &mut AdamW,
    acc: HashMap<ParamId, Tensor<f32>>,
    batch: usize,
    lr: f64,
) {
    let inv = 1.0 / batch as f32;
    let mut grads: Vec<(ParamId, Tensor<f32>)> = acc
        .into_iter()
        .map(|(id, mut g)| {
            g.data_mut().iter_mut().for_each(|v| *v *= inv);
            (id, g)
        })
        .collect();
    grads.sort_by_key(|(id, _)| id.index());
    opt.step(&mut model.ps, &grads, lr);
}

fn check_loss(step: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(CliftError::Diverged {
            step,
            detail: format!("loss is {loss}"),
        })
    }
}

/// Stage 1: encoder and renderer trained jointly on all LiFTs.
pub fn train_stage1(model: &mut Model, scenes: &[Scene], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(CliftError::InvalidArgument("no training scenes".into()));
    }
    let data = scenes
        .iter()
        .map(SceneData::new)
        .collect::<Result<Vec<_>>>()?;
    model.ps.set_trainable("", true);
    model.ps.set_lr_scale("", 1.0);
    model.ps.set_lr_scale("renderer.", cfg.renderer_lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a9e1);
    let mut opt = AdamW::default();
    let sched = cfg.schedule();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut acc = HashMap::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let sd = &data[rng.random_range(0..data.len())];
            let (loss, grads) = if cfg.random_views && sd.views.len() > sd.n_inputs {
                let (patches, t) = sd.random_split(&mut rng)?;
                let v = &sd.views[t];
                stage1_loss(model, sd, &patches, &v.query, &v.truth, &cfg.loss)
            } else {
                let (query, truth) = &sd.targets[rng.random_range(0..sd.targets.len())];
                stage1_loss(model, sd, &sd.patches.patches, query, truth, &cfg.loss)
            }
            .map_err(diverged(step))?;
            total += loss;
            accumulate(&mut acc, grads);
        }
        let loss = total / cfg.batch_size as f64;
        check_loss(step, loss)?;
        report.losses.push(loss);
        apply_step(model, &mut opt, acc, cfg.batch_size, sched.lr(step));
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("stage 1 step {step}: loss {loss:.6}");
        }
    }
    Ok(report)
}

fn stage1_loss(
    model: &Model,
    sd: &SceneData,
    patches: &Tensor<f32>,
    query: &Tensor<f32>,
    truth: &Tensor<f32>,
    loss: &LossConfig,
) -> Result<(f64, Vec<(ParamId, Tensor<f32>)>)> {
    let mut g = Graph::<f32>::new();
    let x = g.constant(patches.clone())?;
    let lifts = model.encoder.forward(&mut g, &model.ps, x)?;
    let q = g.constant(query.clone())?;
    let pred = model.renderer.forward(&mut g, &model.ps, q, lifts)?;
    finish(g, pred, truth, sd, loss)
}

fn finish(
    mut g: Graph<f32>,
    pred: NodeId,
    truth: &Tensor<f32>,
    sd: &SceneData,
    loss: &LossConfig,
) -> Result<(f64, Vec<(ParamId, Tensor<f32>)>)> {
    let t = g.constant(truth.clone())?;
    let l = loss_graph(&mut g, pred, t, sd.height, sd.width, loss)?;
    let value = g.value(l).data()[0] as f64;
    g.backward(l)?;
    Ok((value, g.param_grads()))
}

/// Cluster assignments computed once per (scene, N_s) before stage 2.
#[derive(Clone, Debug, Default)]
pub struct AssignmentCache {
    entries: HashMap<(String, usize), ClusterAssignment>,
}

impl AssignmentCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clusters every scene's LiFTs for every `ns` in `ns_list` that fits.
    pub fn build(
        lifts: &[(String, LiftSet)],
        ns_list: &[usize],
        seed: u64,
        max_iters: usize,
    ) -> Result<Self> {
        let mut entries = HashMap::new();
        for (id, l) in lifts {
            for &ns in ns_list.iter().filter(|&&ns| ns <= l.len()) {
                let km = kmeans(&l.embeddings, ns, seed, max_iters)?;
                entries.insert((id.clone(), ns), km.clusters);
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, scene: &str, ns: usize) -> Option<&ClusterAssignment> {
        self.entries.get(&(scene.to_string(), ns))
    }

    pub fn insert(&mut self, scene: &str, ns: usize, ca: ClusterAssignment) {
        self.entries.insert((scene.to_string(), ns), ca);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Available storage sizes for `scene`, ascending.
    pub fn sizes(&self, scene: &str) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .entries
            .keys()
            .filter(|(s, _)| s == scene)
            .map(|&(_, n)| n)
            .collect();
        v.sort_unstable();
        v
    }

    pub fn file_name(scene: &str, ns: usize) -> String {
        format!("{scene}_ns{ns}.kmas")
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| CliftError::io(dir, e))?;
        for ((s, ns), ca) in &self.entries {
            ca.save(dir.join(Self::file_name(s, *ns)))?;
        }
        Ok(())
    }

    /// Loads the caches for the given scenes and sizes; missing files are
    /// an error.
    pub fn load(dir: impl AsRef<Path>, scenes: &[&str], ns_list: &[usize]) -> Result<Self> {
        let dir = dir.as_ref();
        let mut out = Self::new();
        for s in scenes {
            for &ns in ns_list {
                let p = dir.join(Self::file_name(s, ns));
                if p.exists() {
                    out.insert(s, ns, ClusterAssignment::load(&p)?);
                }
            }
        }
        Ok(out)
    }
}

/// Stage 2: encoder frozen, condenser and renderer trained on cached
/// cluster assignments with a random storage size and render budget.
pub fn train_stage2(
    model: &mut Model,
    scenes: &[Scene],
    cache: &AssignmentCache,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(CliftError::InvalidArgument("no training scenes".into()));
    }
    let data = scenes
        .iter()
        .map(SceneData::new)
        .collect::<Result<Vec<_>>>()?;
    let mut lifts = Vec::with_capacity(scenes.len());
    for (s, sd) in scenes.iter().zip(&data) {
        let l = model.encode_views(&sd.patches)?;
        let sizes = cache.sizes(&s.id);
        if sizes.is_empty() {
            return Err(CliftError::InvalidArgument(format!(
                "no cluster assignments cached for scene {}",
                s.id
            )));
        }
        for &ns in &sizes {
            if cache.get(&s.id, ns).unwrap().len() != l.len() {
                return Err(CliftError::Shape(format!(
                    "cached assignment for {} covers the wrong number of tokens",
                    s.id
                )));
            }
        }
        lifts.push((l, sizes));
    }
    model.ps.set_trainable("", true);
    model.ps.set_trainable("encoder.", false);
    model.ps.set_lr_scale("", 1.0);
    model.ps.set_lr_scale("renderer.", cfg.renderer_lr_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x57a9e2);
    let mut opt = AdamW::default();
    let sched = cfg.schedule();
    let mut report = TrainReport::default();
    for step in 0..cfg.steps {
        let mut acc = HashMap::new();
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let si = rng.random_range(0..data.len());
            let ti = rng.random_range(0..data[si].targets.len());
            let (l, sizes) = &lifts[si];
            let ns = sizes[rng.random_range(0..sizes.len())];
            let budgets = cfg.budgets(ns);
            let nr = budgets[rng.random_range(0..budgets.len())];
            let clusters = cache.get(&scenes[si].id, ns).unwrap();
            let target = &scenes[si].views[scenes[si].targets[ti]].camera;
            let (loss, grads) =
                stage2_loss(model, &data[si], l, clusters, target, ti, nr, &cfg.loss)
                    .map_err(diverged(step))?;
            total += loss;
            accumulate(&mut acc, grads);
        }
        let loss = total / cfg.batch_size as f64;
        check_loss(step, loss)?;
        report.losses.push(loss);
        apply_step(model, &mut opt, acc, cfg.batch_size, sched.lr(step));
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            log::info!("stage 2 step {step}: loss {loss:.6}");
        }
    }
    model.ps.set_trainable("", true);
    Ok(report)
}

#[allow(clippy::too_many_arguments)]
fn stage2_loss(
    model: &Model,
    sd: &SceneData,
    lifts: &LiftSet,
    clusters: &ClusterAssignment,
    target: &crate::geometry::Camera,
    ti: usize,
    nr: usize,
    loss: &LossConfig,
) -> Result<(f64, Vec<(ParamId, Tensor<f32>)>)> {
    let (query, truth) = &sd.targets[ti];
    let layout = ClusterLayout::new(clusters);
    let rays: Vec<_> = layout.medoids.iter().map(|&m| lifts.rays[m]).collect();
    let views: Vec<u32> = layout
        .medoids
        .iter()
        .map(|&m| lifts.source_view[m])
        .collect();
    let cands = Candidates {
        rays: &rays,
        source_view: &views,
        view_centers: &lifts.view_centers,
    };
    let chosen = select(target, cands, None, &SelectionConfig::with_budget(nr))?;
    let mut g = Graph::<f32>::new();
    let x = g.constant(lifts.embeddings.clone())?;
    let clifts = model.condenser.forward(&mut g, &model.ps, x, &layout)?;
    let tokens = g.gather_rows(clifts, chosen)?;
    let q = g.constant(query.clone())?;
    let pred = model.renderer.forward(&mut g, &model.ps, q, tokens)?;
    finish(g, pred, truth, sd, loss)
}

/// Mean loss over every (scene, target) pair with all LiFTs, no training.
pub fn stage1_eval_loss(model: &Model, scenes: &[Scene], loss: &LossConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for s in scenes {
        let sd = SceneData::new(s)?;
        for (q, t) in &sd.targets {
            let mut g = Graph::<f32>::inference();
            let x = g.constant(sd.patches.patches.clone())?;
            let lifts = model.encoder.forward(&mut g, &model.ps, x)?;
            let qn = g.constant(q.clone())?;
            let pred = model.renderer.forward(&mut g, &model.ps, qn, lifts)?;
            let tn = g.constant(t.clone())?;
            let l = loss_graph(&mut g, pred, tn, sd.height, sd.width, loss)?;
            total += g.value(l).data()[0] as f64;
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}
