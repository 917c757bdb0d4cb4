use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clift::clift_file::{load_clift, save_clift};
use clift::clustering::{export_cluster_viz, kmeans, ClusterAssignment};
use clift::config::RunConfig;
use clift::eval::{check_budget, ladder_sweep, render_trajectory, sweep, EvalOptions};
use clift::metrics::{psnr, ssim};
use clift::model::Model;
use clift::scene::{arc_camera, gen_scene, view_file, Scene, SceneKind, MANIFEST};
use clift::selection::{select, SelectionConfig};
use clift::train::{train_stage1, train_stage2, AssignmentCache, TrainConfig};
use clift::{CliftError, Result};

#[derive(Parser)]
#[command(name = "clift", version, about = "Compressed light-field tokens")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Overrides the seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file of run settings; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic scenes to disk.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        kind: Option<SceneKind>,
        #[arg(long)]
        num_scenes: Option<usize>,
    },
    /// Run one training stage.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Scene directory, or a directory of scene directories.
        #[arg(long)]
        data: PathBuf,
        /// Weights to start from; required for stage 2.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory of precomputed cluster assignments for stage 2.
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Cluster each scene's LiFTs into N_s groups.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ns: usize,
    },
    /// Build and save each scene's CLiFTs.
    Condense {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ns: usize,
        /// Directory holding `<scene>_ns<N>.kmas`; clustered afresh when absent.
        #[arg(long)]
        clusters: Option<PathBuf>,
    },
    /// Render one view of a scene from a CLiFT file.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clift: PathBuf,
        /// Scene directory supplying the target camera (and ground truth).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        view: usize,
        #[arg(long)]
        nr: usize,
    },
    /// Quality, size and cost for one (N_s, N_r) cell.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ns: usize,
        #[arg(long)]
        nr: usize,
        #[arg(long)]
        no_fps: bool,
    },
    /// Quality, size and cost over storage and render budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated N_s values; defaults to the config list.
        #[arg(long, value_delimiter = ',')]
        ns: Vec<usize>,
        /// Comma-separated N_r values; defaults to the budget ladder.
        #[arg(long, value_delimiter = ',')]
        nr: Vec<usize>,
        #[arg(long)]
        no_fps: bool,
    },
    /// Render frames along the capture arc from a CLiFT file.
    Trajectory {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clift: PathBuf,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long)]
        nr: usize,
        /// Output resolution; defaults to the config image size.
        #[arg(long)]
        size: Option<usize>,
        /// Select every frame independently.
        #[arg(long)]
        no_state: bool,
    },
    /// Color each input patch by its cluster.
    VizClusters {
        #[command(flatten)]
        common: Common,
        /// A single scene directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        clusters: PathBuf,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::GenData { common, .. }
            | Self::Train { common, .. }
            | Self::Cluster { common, .. }
            | Self::Condense { common, .. }
            | Self::Render { common, .. }
            | Self::Eval { common, .. }
            | Self::Sweep { common, .. }
            | Self::Trajectory { common, .. }
            | Self::VizClusters { common, .. } => common,
        }
    }
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliftError::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliftError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// A scene directory, or every scene directory directly below `dir`.
fn load_scenes(dir: &Path) -> Result<Vec<Scene>> {
    if dir.join(MANIFEST).exists() {
        return Ok(vec![Scene::load(dir)?]);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| CliftError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliftError::InvalidArgument(format!(
            "no scenes found under {}",
            dir.display()
        )));
    }
    dirs.iter().map(Scene::load).collect()
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    Model::load(&cfg.model(), path)
}

fn eval_options(cfg: &RunConfig, no_fps: bool) -> EvalOptions {
    EvalOptions {
        seed: cfg.seed,
        kmeans_iters: cfg.kmeans_iters,
        measure_fps: !no_fps,
        fps_runs: cfg.fps_runs,
        fps_warmup: cfg.fps_warmup,
    }
}

fn run(command: Command) -> Result<()> {
    let common = command.common().clone();
    let cfg = run_config(&common)?;
    let out = common.out.as_path();
    create_dir(out)?;
    match command {
        Command::GenData {
            kind, num_scenes, ..
        } => {
            let kind = match kind {
                Some(k) => k,
                None => cfg.scene_kind.parse()?,
            };
            for i in 0..num_scenes.unwrap_or(cfg.num_scenes) {
                let scene = gen_scene(
                    kind,
                    cfg.seed + i as u64,
                    cfg.n_views,
                    cfg.image_size,
                    cfg.n_inputs,
                )?;
                scene.save(out.join(&scene.id))?;
                println!("{}", scene.id);
            }
        }
        Command::Train {
            stage,
            data,
            checkpoint,
            clusters,
            ..
        } => {
            let scenes = load_scenes(&data)?;
            let mut model = match &checkpoint {
                Some(p) => load_model(&cfg, p)?,
                None if stage == 2 => {
                    return Err(CliftError::InvalidArgument(
                        "stage 2 needs --checkpoint from stage 1".into(),
                    ));
                }
                None => Model::new(&cfg.model(), cfg.seed)?,
            };
            let tc = TrainConfig::from_run(&cfg, stage);
            let report = if stage == 1 {
                train_stage1(&mut model, &scenes, &tc)?
            } else {
                let cache = match &clusters {
                    Some(dir) => {
                        let ids: Vec<&str> = scenes.iter().map(|s| s.id.as_str()).collect();
                        AssignmentCache::load(dir, &ids, &cfg.ns_list)?
                    }
                    None => {
                        let lifts = scenes
                            .iter()
                            .map(|s| Ok((s.id.clone(), model.encode_scene(s)?)))
                            .collect::<Result<Vec<_>>>()?;
                        let cache = AssignmentCache::build(
                            &lifts,
                            &cfg.ns_list,
                            cfg.seed,
                            cfg.kmeans_iters,
                        )?;
                        cache.save(out.join("clusters"))?;
                        cache
                    }
                };
                train_stage2(&mut model, &scenes, &cache, &tc)?
            };
            model.save(out.join("model.ckpt"))?;
            let mut csv = String::from("step,loss\n");
            for (i, l) in report.losses.iter().enumerate() {
                csv.push_str(&format!("{i},{l:.6}\n"));
            }
            write_text(&out.join(format!("losses_stage{stage}.csv")), &csv)?;
            if let Some(last) = report.losses.last() {
                println!(
                    "stage {stage}: {} steps, final loss {last:.6}",
                    report.losses.len()
                );
            }
        }
        Command::Cluster {
            data,
            checkpoint,
            ns,
            ..
        } => {
            let model = load_model(&cfg, &checkpoint)?;
            for scene in load_scenes(&data)? {
                let lifts = model.encode_scene(&scene)?;
                let km = kmeans(&lifts.embeddings, ns, cfg.seed, cfg.kmeans_iters)?;
                km.clusters
                    .save(out.join(AssignmentCache::file_name(&scene.id, ns)))?;
                println!(
                    "{} objective {:.6} iterations {}",
                    scene.id,
                    km.objective,
                    km.history.len()
                );
            }
        }
        Command::Condense {
            data,
            checkpoint,
            ns,
            clusters,
            ..
        } => {
            let model = load_model(&cfg, &checkpoint)?;
            for scene in load_scenes(&data)? {
                let lifts = model.encode_scene(&scene)?;
                let assignment = match &clusters {
                    Some(dir) => ClusterAssignment::load(
                        dir.join(AssignmentCache::file_name(&scene.id, ns)),
                    )?,
                    None => kmeans(&lifts.embeddings, ns, cfg.seed, cfg.kmeans_iters)?.clusters,
                };
                let set = model.condense(&lifts, &assignment)?;
                let bytes = save_clift(&set, out.join(format!("{}_ns{ns}.clft", scene.id)))?;
                println!("{} {} tokens {bytes} bytes", scene.id, set.len());
            }
        }
        Command::Render {
            checkpoint,
            clift,
            data,
            view,
            nr,
            ..
        } => {
            let model = load_model(&cfg, &checkpoint)?;
            let set = load_clift(&clift)?;
            check_budget(set.len(), nr)?;
            let scene = Scene::load(&data)?;
            let v = scene.views.get(view).ok_or_else(|| {
                CliftError::InvalidArgument(format!("scene {} has no view {view}", scene.id))
            })?;
            let ids = select(
                &v.camera,
                (&set).into(),
                None,
                &SelectionConfig::with_budget(nr),
            )?;
            let img = model.render(&v.camera, &set, &ids)?;
            img.save(out.join(format!("render_{}", view_file(view))))?;
            println!(
                "psnr {:.4} ssim {:.6}",
                psnr(&img, &v.image)?,
                ssim(&img, &v.image)?
            );
        }
        Command::Eval {
            checkpoint,
            data,
            ns,
            nr,
            no_fps,
            ..
        } => {
            check_budget(ns, nr)?;
            let model = load_model(&cfg, &checkpoint)?;
            let scenes = load_scenes(&data)?;
            let report = sweep(&model, &scenes, &[ns], &[nr], &eval_options(&cfg, no_fps))?;
            report.write_csv(out.join("eval.csv"))?;
            print!("{}", report.to_csv());
        }
        Command::Sweep {
            checkpoint,
            data,
            ns,
            nr,
            no_fps,
            ..
        } => {
            let model = load_model(&cfg, &checkpoint)?;
            let scenes = load_scenes(&data)?;
            let ns_list = if ns.is_empty() {
                cfg.ns_list.clone()
            } else {
                ns
            };
            let opts = eval_options(&cfg, no_fps);
            let report = if nr.is_empty() {
                ladder_sweep(&model, &scenes, &ns_list, &cfg.budget_ladder, &opts)?
            } else {
                sweep(&model, &scenes, &ns_list, &nr, &opts)?
            };
            report.write_csv(out.join("sweep.csv"))?;
            print!("{}", report.to_csv());
        }
        Command::Trajectory {
            checkpoint,
            clift,
            frames,
            nr,
            size,
            no_state,
            ..
        } => {
            if frames == 0 {
                return Err(CliftError::InvalidArgument(
                    "--frames must be positive".into(),
                ));
            }
            let model = load_model(&cfg, &checkpoint)?;
            let set = load_clift(&clift)?;
            let res = size.unwrap_or(cfg.image_size);
            let path = (0..frames)
                .map(|i| arc_camera(i as f64 / (frames.max(2) - 1) as f64, res, res))
                .collect::<Result<Vec<_>>>()?;
            let rendered =
                render_trajectory(&model, &set, &path, nr, cfg.selection_state && !no_state)?;
            let mut listing = String::new();
            for (i, f) in rendered.iter().enumerate() {
                f.image.save(out.join(format!("frame_{i:03}.png")))?;
                let ids: Vec<String> = f.selected.iter().map(|s| s.to_string()).collect();
                listing.push_str(&ids.join(" "));
                listing.push('\n');
            }
            write_text(&out.join("selected.txt"), &listing)?;
            println!("{} frames", rendered.len());
        }
        Command::VizClusters { data, clusters, .. } => {
            let scene = Scene::load(&data)?;
            let assignment = ClusterAssignment::load(&clusters)?;
            let inputs: Vec<_> = scene
                .inputs
                .iter()
                .map(|&i| &scene.views[i].image)
                .collect();
            for (i, img) in export_cluster_viz(&assignment, &inputs)?.iter().enumerate() {
                img.save(out.join(format!("clusters_{}", view_file(scene.inputs[i]))))?;
            }
            println!("{} clusters over {} views", assignment.k, inputs.len());
        }
    }
    Ok(())
}

/// Single-line, `key=value` error report.
fn report(kind: &str, message: &str) {
    let flat = message
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("; ");
    eprintln!("error kind={kind} message={flat:?}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            report("usage", first);
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
