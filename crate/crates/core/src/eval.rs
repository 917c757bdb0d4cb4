//! Evaluation: quality/size/cost sweeps over storage and render budgets,
//! and trajectory rendering with selection state carried across frames.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::clift_file::encoded_size;
use crate::condenser::CliftSet;
use crate::error::{CliftError, Result};
use crate::geometry::Camera;
use crate::imaging::Image;
use crate::metrics::{psnr, ssim};
use crate::model::Model;
use crate::renderer::flops_estimate;
use crate::scene::Scene;
use crate::selection::{select, SelectionConfig, SelectionState};

pub const CSV_HEADER: &str = "scene_id,n_views,N_s,N_r,psnr_db,ssim,bytes,flops,fps";

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub seed: u64,
    pub kmeans_iters: usize,
    /// Measure rendering speed; otherwise the fps column is 0.
    pub measure_fps: bool,
    pub fps_runs: usize,
    pub fps_warmup: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            kmeans_iters: crate::clustering::DEFAULT_MAX_ITERS,
            measure_fps: true,
            fps_runs: 20,
            fps_warmup: 3,
        }
    }
}

/// One (scene, N_s, N_r) cell, averaged over the scene's target views.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub scene_id: String,
    /// Number of input views.
    pub n_views: usize,
    pub ns: usize,
    pub nr: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub bytes: usize,
    pub flops: u64,
    pub fps: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CellResult>,
}

impl EvalReport {
    /// Mean PSNR and SSIM over scenes for one (N_s, N_r) cell.
    pub fn aggregate(&self, ns: usize, nr: usize) -> Option<(f64, f64)> {
        let cell: Vec<&CellResult> = self
            .rows
            .iter()
            .filter(|r| r.ns == ns && r.nr == nr)
            .collect();
        if cell.is_empty() {
            return None;
        }
        let n = cell.len() as f64;
        Some((
            cell.iter().map(|r| r.psnr_db).sum::<f64>() / n,
            cell.iter().map(|r| r.ssim).sum::<f64>() / n,
        ))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{:.4},{:.6},{},{},{:.3}",
                r.scene_id, r.n_views, r.ns, r.nr, r.psnr_db, r.ssim, r.bytes, r.flops, r.fps
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| CliftError::io(path, e))
    }
}

/// Median wall-clock rate of `f` in calls per second.
pub fn measure_fps(runs: usize, warmup: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    for _ in 0..warmup {
        f()?;
    }
    let mut times = Vec::with_capacity(runs.max(1));
    for _ in 0..runs.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let m = times.len();
    let median = if m % 2 == 1 {
        times[m / 2]
    } else {
        0.5 * (times[m / 2 - 1] + times[m / 2])
    };
    Ok(1.0 / median.max(1e-12))
}

/// Renders every target of `scene` from `set` with budget `nr` and returns
/// mean PSNR and SSIM.
pub fn evaluate_set(model: &Model, scene: &Scene, set: &CliftSet, nr: usize) -> Result<(f64, f64)> {
    if scene.targets.is_empty() {
        return Err(CliftError::InvalidArgument(format!(
            "scene {} has no target views",
            scene.id
        )));
    }
    let (mut p, mut s) = (0.0, 0.0);
    for &t in &scene.targets {
        let v = &scene.views[t];
        let ids = select(
            &v.camera,
            set.into(),
            None,
            &SelectionConfig::with_budget(nr),
        )?;
        let img = model.render(&v.camera, set, &ids)?;
        p += psnr(&img, &v.image)?;
        s += ssim(&img, &v.image)?;
    }
    let n = scene.targets.len() as f64;
    Ok((p / n, s / n))
}

fn scene_cells(
    model: &Model,
    scene: &Scene,
    pairs: &[(usize, usize)],
    opts: &EvalOptions,
) -> Result<Vec<CellResult>> {
    let lifts = model.encode_scene(scene)?;
    let mut out = Vec::with_capacity(pairs.len());
    let mut cached: Option<(usize, CliftSet)> = None;
    for &(ns, nr) in pairs {
        if ns > lifts.len() {
            return Err(CliftError::InvalidArgument(format!(
                "N_s={ns} exceeds the {} LiFTs of scene {}",
                lifts.len(),
                scene.id
            )));
        }
        if cached.as_ref().is_none_or(|(n, _)| *n != ns) {
            let (_, set) = model.build_clifts(&lifts, ns, opts.seed, opts.kmeans_iters)?;
            cached = Some((ns, set));
        }
        let set = &cached.as_ref().unwrap().1;
        let (p, s) = evaluate_set(model, scene, set, nr)?;
        let target = &scene.views[scene.targets[0]].camera;
        let fps = if opts.measure_fps {
            let ids = select(target, set.into(), None, &SelectionConfig::with_budget(nr))?;
            measure_fps(opts.fps_runs, opts.fps_warmup, || {
                model.render(target, set, &ids).map(|_| ())
            })?
        } else {
            0.0
        };
        out.push(CellResult {
            scene_id: scene.id.clone(),
            n_views: scene.inputs.len(),
            ns,
            nr,
            psnr_db: p,
            ssim: s,
            bytes: encoded_size(ns, set.dim(), set.view_centers.len()),
            flops: flops_estimate(&model.cfg, target.num_patches(), nr),
            fps,
        });
    }
    Ok(out)
}

fn run_cells(
    model: &Model,
    scenes: &[Scene],
    pairs: &[(usize, usize)],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    // Timing runs share the CPU badly, so scenes only run concurrently
    // when speed is not measured.
    let per_scene: Vec<Vec<CellResult>> = if opts.measure_fps {
        scenes
            .iter()
            .map(|s| scene_cells(model, s, pairs, opts))
            .collect::<Result<_>>()?
    } else {
        scenes
            .par_iter()
            .map(|s| scene_cells(model, s, pairs, opts))
            .collect::<Result<_>>()?
    };
    Ok(EvalReport {
        rows: per_scene.into_iter().flatten().collect(),
    })
}

/// Every `(N_s, N_r)` pair with `N_r ≤ N_s`, in list order.
pub fn sweep(
    model: &Model,
    scenes: &[Scene],
    ns_list: &[usize],
    nr_list: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if nr_list.contains(&0) || ns_list.contains(&0) {
        return Err(CliftError::InvalidArgument(
            "token counts must be positive".into(),
        ));
    }
    let pairs: Vec<(usize, usize)> = ns_list
        .iter()
        .flat_map(|&ns| {
            nr_list
                .iter()
                .filter(move |&&nr| nr <= ns)
                .map(move |&nr| (ns, nr))
        })
        .collect();
    run_cells(model, scenes, &pairs, opts)
}

/// For each N_s, render budgets at the given fractions of N_s.
pub fn ladder_sweep(
    model: &Model,
    scenes: &[Scene],
    ns_list: &[usize],
    ladder: &[f64],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let mut pairs = Vec::new();
    for &ns in ns_list {
        let mut nrs: Vec<usize> = ladder
            .iter()
            .map(|f| ((ns as f64 * f).round() as usize).clamp(1, ns))
            .collect();
        nrs.sort_unstable_by(|a, b| b.cmp(a));
        nrs.dedup();
        pairs.extend(nrs.into_iter().map(|nr| (ns, nr)));
    }
    run_cells(model, scenes, &pairs, opts)
}

/// Checks a single evaluation request.
pub fn check_budget(ns: usize, nr: usize) -> Result<()> {
    if nr == 0 || nr > ns {
        return Err(CliftError::InvalidArgument(format!(
            "N_r={nr} must lie in 1..={ns}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub image: Image,
    /// Token indices used, in selection order.
    pub selected: Vec<usize>,
}

/// Renders each camera of `path` with budget `nr`. With `persist_state`,
/// momentum and the previous-frame mask carry over between frames;
/// otherwise every frame is selected independently.
pub fn render_trajectory(
    model: &Model,
    set: &CliftSet,
    path: &[Camera],
    nr: usize,
    persist_state: bool,
) -> Result<Vec<Frame>> {
    if path.is_empty() {
        return Err(CliftError::InvalidArgument("camera path is empty".into()));
    }
    check_budget(set.len(), nr)?;
    let cfg = SelectionConfig::with_budget(nr);
    let mut state = SelectionState::new();
    path.iter()
        .map(|cam| {
            let selected = if persist_state {
                select(cam, set.into(), Some(&mut state), &cfg)?
            } else {
                select(cam, set.into(), None, &cfg)?
            };
            let image = model.render(cam, set, &selected)?;
            Ok(Frame { image, selected })
        })
        .collect()
}
