//! Command-line driver: dataset generation, training, rendering held-out
//! views and dataset-wide evaluation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use muvie_core::config::{parse_ablation, Config};
use muvie_core::evalsuite::{evaluate_model, HeuristicPredictor, ModelPredictor, ViewPredictor};
use muvie_core::model::{nearest_source_frames, render_view, Model, Task, ValueSource};
use muvie_core::toyscenes::{
    default_orbit, io as scene_io, load_dataset, load_dataset_root, generate_dataset_root,
};
use muvie_core::training::{
    load_checkpoint, save_checkpoint, train, Adam, Trainable, TrainOptions,
};

#[derive(Parser)]
#[command(name = "muvie", about = "Multi-task view synthesis on toy scenes")]
struct Cli {
    /// Base directory for datasets, checkpoints and reports.
    #[arg(long, default_value = ".")]
    workdir: PathBuf,
    /// TOML config file (built-in defaults when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the procedural toy dataset.
    GenData,
    /// Train the model; writes a checkpoint and a per-iteration loss CSV.
    Train(TrainArgs),
    /// Render all task maps for one frame of a scene.
    Render(RenderArgs),
    /// Evaluate predictors over held-out views and write reports.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Enable the annotation predictor branch and its losses.
    #[arg(long)]
    setting2: bool,
    /// Build an ablated variant: `no-cta` or `no-cva`.
    #[arg(long)]
    ablate: Option<String>,
    /// Override the schedule as `stage1,stage2` iterations.
    #[arg(long)]
    iters: Option<String>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path (default `<workdir>/model.ckpt`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    /// Checkpoint to render with.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene directory (one scene, not the dataset root).
    #[arg(long)]
    scene: PathBuf,
    /// Frame index to render.
    #[arg(long)]
    frame: usize,
    /// Number of source views.
    #[arg(long)]
    views: Option<usize>,
    /// Output directory (default `<workdir>/renders`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate (omit with --baseline-only).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Only run the reprojection baseline.
    #[arg(long)]
    baseline_only: bool,
    /// Evaluate with the annotation predictor instead of ground-truth
    /// source annotations.
    #[arg(long)]
    setting2: bool,
    /// Report output directory (default `<workdir>/eval`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    muvie_core::tune_allocator();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default_with_scenes(),
    };
    match cli.command {
        Command::GenData => gen_data(&cli.workdir, &config),
        Command::Train(args) => run_train(&cli.workdir, config, args),
        Command::Render(args) => run_render(&cli.workdir, &config, args),
        Command::Eval(args) => run_eval(&cli.workdir, &config, args),
    }
}

fn gen_data(workdir: &Path, config: &Config) -> Result<()> {
    let scenes = config.scenes()?;
    let root = workdir.join(config.data_root());
    let orbit = default_orbit(scenes.width, scenes.height);
    generate_dataset_root(
        &root,
        scenes.train,
        scenes.test,
        scenes.frames,
        &orbit,
        scenes.seed,
    )?;
    println!(
        "wrote {} train + {} test scenes ({} frames each) to {}",
        scenes.train,
        scenes.test,
        scenes.frames,
        root.display()
    );
    Ok(())
}

fn run_train(workdir: &Path, mut config: Config, args: TrainArgs) -> Result<()> {
    if let Some(ablate) = &args.ablate {
        parse_ablation(ablate)
            .with_context(|| format!("--ablate {ablate}: expected no-cta or no-cva"))?;
        config.model.ablation = ablate.clone();
    }
    if let Some(iters) = &args.iters {
        let (a, b) = iters
            .split_once(',')
            .with_context(|| format!("--iters {iters}: expected `stage1,stage2`"))?;
        config.train.stage1_iters = a.trim().parse().context("--iters stage1")?;
        config.train.stage2_iters = b.trim().parse().context("--iters stage2")?;
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if args.setting2 {
        config.train.setting2 = true;
    }

    let root = workdir.join(config.data_root());
    let (train_scenes, _) = load_dataset_root(&root)?;
    if train_scenes.is_empty() {
        bail!("no training scenes under {} (run gen-data first)", root.display());
    }
    let scenes: Vec<_> = train_scenes.into_iter().map(|(_, s)| s).collect();

    let model = Model::new(config.model_config()?, config.model.seed)?;
    let mut trainable = Trainable::new(model, config.train.setting2, config.train.seed)?;
    let opts: TrainOptions = config.train_options();

    let ckpt_path = args.out.unwrap_or_else(|| workdir.join("model.ckpt"));
    let csv_path = ckpt_path.with_extension("loss.csv");
    let mut csv = String::from("iter,total");
    for t in &trainable.model.cfg.tasks {
        csv.push_str(&format!(",{}", t.name()));
    }
    if config.train.setting2 {
        for t in &trainable.model.cfg.tasks {
            if *t != Task::Rgb {
                csv.push_str(&format!(",u_{}", t.name()));
            }
        }
    }
    csv.push('\n');

    let log_every = opts.log_every.max(1);
    let started = std::time::Instant::now();
    train(&mut trainable, &scenes, &opts, &mut |rec| {
        csv.push_str(&format!("{},{:.6}", rec.iter, rec.total));
        for (_, v) in &rec.per_task {
            csv.push_str(&format!(",{v:.6}"));
        }
        for (_, v) in &rec.unet_per_task {
            csv.push_str(&format!(",{v:.6}"));
        }
        csv.push('\n');
        if rec.iter % log_every == 0 {
            println!(
                "iter {:>6}  loss {:.5}  [{:.1}s]",
                rec.iter,
                rec.total,
                started.elapsed().as_secs_f64()
            );
        }
    })?;

    save_checkpoint(
        &ckpt_path,
        &trainable.model.store,
        None,
        (config.train.stage1_iters + config.train.stage2_iters) as u64,
    )?;
    std::fs::write(&csv_path, csv)?;
    let sidecar = ckpt_path.with_extension("config.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&ConfigSidecar::of(&config))?)?;
    println!(
        "checkpoint: {}\nloss curve: {}",
        ckpt_path.display(),
        csv_path.display()
    );
    Ok(())
}

/// Everything needed to rebuild the model of a checkpoint.
#[derive(serde::Serialize, serde::Deserialize)]
struct ConfigSidecar {
    model: muvie_core::config::ModelSection,
    train_setting2: bool,
    train_seed: u64,
    eval_source_views: usize,
}

impl ConfigSidecar {
    fn of(config: &Config) -> Self {
        Self {
            model: config.model.clone(),
            train_setting2: config.train.setting2,
            train_seed: config.train.seed,
            eval_source_views: config.train.source_views,
        }
    }
}

fn load_model_for(checkpoint: &Path, fallback: &Config) -> Result<(Trainable, usize)> {
    let sidecar_path = checkpoint.with_extension("config.json");
    let (mut config, views) = if sidecar_path.is_file() {
        let sidecar: ConfigSidecar =
            serde_json::from_str(&std::fs::read_to_string(&sidecar_path)?)
                .with_context(|| format!("parsing {}", sidecar_path.display()))?;
        let mut cfg = fallback.clone();
        cfg.model = sidecar.model;
        cfg.train.setting2 = sidecar.train_setting2;
        cfg.train.seed = sidecar.train_seed;
        (cfg, sidecar.eval_source_views)
    } else {
        (fallback.clone(), fallback.eval.source_views)
    };
    config.apply_env();
    let model = Model::new(config.model_config()?, config.model.seed)?;
    let mut trainable = Trainable::new(model, config.train.setting2, config.train.seed)?;
    load_checkpoint(checkpoint, &mut trainable.model.store, None::<&mut Adam>.map(|a| a))?;
    Ok((trainable, views))
}

fn run_render(workdir: &Path, config: &Config, args: RenderArgs) -> Result<()> {
    let (trainable, sidecar_views) = load_model_for(&args.checkpoint, config)?;
    let scene = load_dataset(&args.scene)?;
    let frame = args.frame;
    if frame >= scene.bundles.len() {
        bail!("frame {frame} out of range ({} frames)", scene.bundles.len());
    }
    if !scene.held_out.contains(&frame) {
        eprintln!("warning: frame {frame} is not a held-out view; rendering anyway");
    }
    let views = args.views.unwrap_or(sidecar_views);
    let target = &scene.bundles[frame];
    let sources_idx = nearest_source_frames(
        &scene,
        &scene.train_frames(),
        target.pose.center(),
        views,
        Some(frame),
    );
    let sources: Vec<_> = sources_idx.iter().map(|&i| &scene.bundles[i]).collect();

    let out_dir = args.out.clone().unwrap_or_else(|| workdir.join("renders"));
    std::fs::create_dir_all(&out_dir)?;

    let predicted;
    let value_source = if let Some(unet) = &trainable.unet {
        let images: Vec<(&[f64], usize, usize)> = sources
            .iter()
            .map(|b| (b.rgb.as_slice(), b.width, b.height))
            .collect();
        predicted = unet.predict_bundles(&trainable.model.store, &images)?;
        // cache the per-view predicted annotations for inspection
        for (vi, bundle) in predicted.iter().enumerate() {
            for (task, map) in &bundle.maps {
                let c = task.channels();
                if c == 1 || c == 3 {
                    scene_io::write_pfm(
                        &out_dir.join(format!("pred_{}_view{vi}.pfm", task.name())),
                        bundle.width,
                        bundle.height,
                        c,
                        map,
                    )?;
                }
            }
        }
        ValueSource::Predicted(&predicted)
    } else {
        ValueSource::Ground
    };

    let maps = render_view(
        &trainable.model,
        &sources,
        &target.view(),
        scene.near,
        scene.far,
        &value_source,
        config.eval.chunk,
    )?;

    let (w, h) = (maps.width, maps.height);
    for (task, data) in &maps.maps {
        match task {
            Task::Rgb => {
                scene_io::write_rgb_png(&out_dir.join(format!("rgb_{frame:04}.png")), w, h, data)?
            }
            Task::Sn => {
                scene_io::write_pfm(&out_dir.join(format!("sn_{frame:04}.pfm")), w, h, 3, data)?
            }
            Task::Sh | Task::Ed | Task::Kp => scene_io::write_pfm(
                &out_dir.join(format!("{}_{frame:04}.pfm", task.name())),
                w,
                h,
                1,
                data,
            )?,
            Task::Sl => {}
        }
    }
    if let Some(labels) = maps.sl_labels() {
        scene_io::write_gray_png(&out_dir.join(format!("sl_{frame:04}.png")), w, h, &labels)?;
    }
    println!("wrote rendered maps for frame {frame} to {}", out_dir.display());
    Ok(())
}

fn run_eval(workdir: &Path, config: &Config, args: EvalArgs) -> Result<()> {
    let root = workdir.join(config.data_root());
    let (train_scenes, test_scenes) = load_dataset_root(&root)?;
    if train_scenes.is_empty() && test_scenes.is_empty() {
        bail!("no scenes under {} (run gen-data first)", root.display());
    }

    let out_dir = args.out.unwrap_or_else(|| workdir.join("eval"));
    std::fs::create_dir_all(&out_dir)?;

    let heuristic = HeuristicPredictor;
    let mut predictors: Vec<&dyn ViewPredictor> = vec![&heuristic];

    let loaded;
    let model_predictor;
    if !args.baseline_only {
        let checkpoint = args
            .checkpoint
            .as_ref()
            .context("--checkpoint required unless --baseline-only")?;
        loaded = load_model_for(checkpoint, config)?;
        let unet = if args.setting2 {
            Some(loaded.0.unet.as_ref().context(
                "--setting2 requires a checkpoint trained with the annotation predictor",
            )?)
        } else {
            None
        };
        model_predictor = ModelPredictor {
            model: &loaded.0.model,
            source_views: loaded.1,
            chunk: config.eval.chunk,
            unet,
        };
        predictors.push(&model_predictor);
    }

    let tasks = if args.baseline_only {
        Task::ALL.to_vec()
    } else if args.setting2 {
        // score only the predicted annotation tasks plus RGB
        let mut t = vec![Task::Rgb];
        t.extend(
            config
                .model_config()?
                .tasks
                .iter()
                .copied()
                .filter(|t| *t != Task::Rgb),
        );
        t
    } else {
        config.model_config()?.tasks
    };

    let dump = config.eval.dump_images.then_some(out_dir.as_path());
    let report = evaluate_model(&predictors, &train_scenes, &test_scenes, &tasks, dump)?;
    report.write_json(&out_dir.join("report.json"))?;
    report.write_markdown(&out_dir.join("report.md"), &tasks)?;
    println!("{}", report.to_markdown(&tasks));
    println!("reports written to {}", out_dir.display());

    if report.any_nan() {
        bail!("evaluation produced non-finite metrics");
    }
    Ok(())
}
