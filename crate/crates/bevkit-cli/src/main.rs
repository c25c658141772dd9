//! `bevkit` — command-line front end for the BEV detection workbench.
//!
//! Subcommands: `gen` (synthesize a dataset directory), `train`, `eval`,
//! `compare-assign` (train one model per assignment strategy), `render`
//! (draw a scene to SVG).
//!
//! Exit codes: 0 on success, 2 for configuration/parse/I-O problems,
//! 3 when a computation produced a non-finite value.

use bevkit::assign::Strategy;
use bevkit::bevgrid::GridSpec;
use bevkit::error::BevError;
use bevkit::eval::{evaluate, pr_csv, report_csv, ApMethod, EvalReport};
use bevkit::fusion::AttentionScope;
use bevkit::geometry::RotatedBox;
use bevkit::pipeline::{
    decode_detections, featurize_scenes, load_checkpoint, metrics_csv, save_checkpoint,
    split_indices, train_until, DetectionModel, FusionKind, SceneFeatures, TrainConfig,
    TrainState, HEAD_STRIDES,
};
use bevkit::synth::{
    generate_dataset, load_dataset, load_manifest, load_scene, save_dataset, FogMode, Scene,
    SynthConfig,
};
use bevkit::viz::{render_scene, save_svg, RenderOptions};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

type F = f32;

#[derive(Parser)]
#[command(
    name = "bevkit",
    about = "Desk-scale radar/LiDAR bird's-eye-view detection workbench",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory (scene JSONs + manifest).
    Gen(GenArgs),
    /// Train a detector and write metrics + checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Train one model per assignment strategy and compare them.
    CompareAssign(CompareArgs),
    /// Render a scene (and optional predictions) to an SVG figure.
    Render(RenderArgs),
}

/// Grid geometry for dataset generation. The origin is chosen so the sensor
/// at (0, 0) sits in the grid center; consumers read the grid back from the
/// dataset manifest.
#[derive(Args, Clone)]
struct GridArgs {
    /// Grid rows.
    #[arg(long, default_value_t = 64)]
    grid_h: usize,
    /// Grid columns.
    #[arg(long, default_value_t = 64)]
    grid_w: usize,
    /// Cell edge length in meters.
    #[arg(long, default_value_t = 0.4)]
    res: f64,
}

impl GridArgs {
    fn build(&self) -> Result<GridSpec, BevError> {
        GridSpec::new(
            self.grid_h,
            self.grid_w,
            self.res,
            -0.5 * self.grid_w as f64 * self.res,
            -0.5 * self.grid_h as f64 * self.res,
        )
    }
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes (doubled by --fog both: clear/foggy twins).
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Dataset seed; scene i derives its own seed from (seed, i).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weather: clear, foggy, or interleaved clear/foggy twins.
    #[arg(long, default_value = "clear")]
    fog: String,
    /// Maximum cars per scene.
    #[arg(long, default_value_t = 8)]
    cars_max: usize,
    #[command(flatten)]
    grid: GridArgs,
}

/// Training configuration. Values come from --config (a JSON file sharing
/// the checkpoint's `config` schema) when given, otherwise from built-in
/// defaults; any flag set here overrides both. The grid always comes from
/// the dataset manifest.
#[derive(Args, Clone)]
struct FitArgs {
    /// JSON training-config file (same schema as the checkpoint `config`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Assignment strategy: multipositive, dips, gahps, gahips, gachips
    /// [default: gachips].
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Fusion: lidar-only, concat, direct, dual-query [default: concat].
    #[arg(long)]
    fusion: Option<FusionKind>,
    /// Training epochs [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// Scenes per optimizer step [default: 4].
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: 3e-3].
    #[arg(long)]
    lr_peak: Option<f64>,
    /// Linear warmup epochs [default: 2].
    #[arg(long)]
    warmup_epochs: Option<usize>,
    /// Fraction of scenes held out for validation [default: 0.2].
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Candidate-anchor threshold on the normalized heatmap [default: 0.2].
    #[arg(long)]
    tau: Option<f64>,
    /// Model/shuffle seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Stem channel width [default: 8].
    #[arg(long)]
    stem: Option<usize>,
    /// Trunk channel width [default: 12].
    #[arg(long)]
    trunk: Option<usize>,
    /// Downsampled-stage channel width [default: 16].
    #[arg(long)]
    down: Option<usize>,
    /// Attention tile edge for direct/dual-query fusion; 0 = full maps
    /// [default: 8].
    #[arg(long)]
    attention_tile: Option<usize>,
}

impl FitArgs {
    fn build(&self, grid: GridSpec) -> Result<TrainConfig, BevError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let raw = std::fs::read_to_string(path)
                    .map_err(|e| BevError::io(path.display().to_string(), e))?;
                serde_json::from_str::<TrainConfig>(&raw)
                    .map_err(|e| BevError::malformed(path.display().to_string(), e.to_string()))?
            }
            None => TrainConfig::default(),
        };
        cfg.grid = grid;
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.fusion {
            cfg.fusion = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr_peak {
            cfg.lr_peak = v;
        }
        if let Some(v) = self.warmup_epochs {
            cfg.warmup_epochs = v;
        }
        if let Some(v) = self.val_fraction {
            cfg.val_fraction = v;
        }
        if let Some(v) = self.tau {
            cfg.tau = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.stem {
            cfg.dims.stem = v;
        }
        if let Some(v) = self.trunk {
            cfg.dims.trunk = v;
        }
        if let Some(v) = self.down {
            cfg.dims.down = v;
        }
        if let Some(v) = self.attention_tile {
            cfg.attention_scope = if v == 0 {
                AttentionScope::Full
            } else {
                AttentionScope::Tiled { tile: v }
            };
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `bevkit gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for metrics.csv and checkpoint.json.
    #[arg(long)]
    out_dir: PathBuf,
    /// Resume from an existing checkpoint (its config wins; only --epochs
    /// extends the run).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also checkpoint every N epochs (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
    /// Worker threads for featurization (or env BEVKIT_THREADS; results do
    /// not depend on this).
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Portion of the dataset to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Val)]
    split: SplitArg,
    /// Area-under-PR method.
    #[arg(long, value_enum, default_value_t = MethodArg::Envelope)]
    method: MethodArg,
    /// Write the per-threshold report CSV here instead of stdout.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Also write full PR curves (one CSV with a threshold column).
    #[arg(long)]
    out_pr: Option<PathBuf>,
    /// Also write per-scene predictions (render-ready JSON box lists).
    #[arg(long)]
    out_pred: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    /// Validation tail of the dataset (per the checkpoint's val fraction).
    Val,
    /// Training head of the dataset.
    Train,
    /// Every scene.
    All,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Envelope,
    Trapezoid,
}

impl From<MethodArg> for ApMethod {
    fn from(m: MethodArg) -> ApMethod {
        match m {
            MethodArg::Envelope => ApMethod::PrecisionEnvelope,
            MethodArg::Trapezoid => ApMethod::Trapezoid,
        }
    }
}

#[derive(Args)]
struct CompareArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated strategies, or `all`.
    #[arg(long, default_value = "all")]
    strategies: String,
    #[arg(long)]
    threads: Option<usize>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args)]
struct RenderArgs {
    /// Scene JSON file inside a dataset directory (the sibling manifest
    /// supplies the grid).
    #[arg(long)]
    scene: PathBuf,
    /// Optional predictions file: a JSON array of boxes, as written by
    /// `eval --out-pred`. Omitted or empty → ground-truth-only figure.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
    /// SVG user units per grid cell.
    #[arg(long, default_value_t = 8.0)]
    px: f64,
    #[arg(long)]
    no_radar: bool,
    #[arg(long)]
    no_lidar: bool,
    #[arg(long)]
    no_gt: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                BevError::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cmd: Command) -> Result<(), BevError> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::CompareAssign(a) => cmd_compare(a),
        Command::Render(a) => cmd_render(a),
    }
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(|| {
        std::env::var("BEVKIT_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
    .unwrap_or(1)
    .max(1)
}

fn ensure_dir(dir: &Path) -> Result<(), BevError> {
    std::fs::create_dir_all(dir).map_err(|e| BevError::io(dir.display().to_string(), e))
}

fn write_text(path: &Path, text: &str) -> Result<(), BevError> {
    std::fs::write(path, text).map_err(|e| BevError::io(path.display().to_string(), e))
}

/// The dataset grid must match the one a checkpoint was trained for;
/// anything else silently misplaces every box.
fn check_grid(expected: &GridSpec, got: &GridSpec) -> Result<(), BevError> {
    if expected != got {
        return Err(BevError::InvalidConfig {
            field: "grid".into(),
            reason: format!("checkpoint grid {expected:?} != dataset grid {got:?}"),
        });
    }
    Ok(())
}

fn cmd_gen(a: GenArgs) -> Result<(), BevError> {
    let fog: FogMode = a.fog.parse()?;
    let cfg = SynthConfig {
        grid: a.grid.build()?,
        cars_max: a.cars_max,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let (scenes, reports) = generate_dataset(&cfg, a.seed, a.count, fog)?;
    save_dataset(&a.out, &scenes, &cfg.grid)?;
    let placed: usize = reports.iter().map(|r| r.placed).sum();
    let requested: usize = reports.iter().map(|r| r.requested).sum();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    for scene in &scenes {
        *histogram.entry(scene.gt_boxes.len()).or_default() += 1;
    }
    let histogram = histogram
        .iter()
        .map(|(cars, n)| format!("{cars}:{n}"))
        .collect::<Vec<_>>()
        .join(" ");
    println!(
        "wrote {} scenes ({} of {} requested cars placed) to {}",
        scenes.len(),
        placed,
        requested,
        a.out.display()
    );
    println!("cars-per-scene histogram: {histogram}");
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), BevError> {
    let threads = resolve_threads(a.threads);
    let (scenes, grid) = load_dataset(&a.data)?;
    ensure_dir(&a.out_dir)?;
    let mut state: TrainState<F> = match &a.resume {
        Some(path) => {
            let st = load_checkpoint::<F>(path)?;
            check_grid(&st.config.grid, &grid)?;
            println!(
                "resuming from {} at epoch {}",
                path.display(),
                st.epochs_done
            );
            st
        }
        None => TrainState::new(a.fit.build(grid)?)?,
    };
    let target = a.fit.epochs.unwrap_or(state.config.epochs).max(state.epochs_done);
    // Record the extended horizon so a resumed run's checkpoint is
    // indistinguishable from an uninterrupted one.
    state.config.epochs = state.config.epochs.max(target);
    let cfg = state.config.clone();
    println!(
        "training strategy={} fusion={} scenes={} epochs {}..{}",
        cfg.strategy,
        cfg.fusion,
        scenes.len(),
        state.epochs_done,
        target
    );
    let features = featurize_scenes::<F>(&scenes, &cfg.grid, cfg.tau, threads)?;

    let metrics_path = a.out_dir.join("metrics.csv");
    let ckpt_path = a.out_dir.join("checkpoint.json");
    let mut next_stop = state.epochs_done;
    while next_stop < target {
        next_stop = if a.checkpoint_every > 0 {
            (next_stop + a.checkpoint_every).min(target)
        } else {
            target
        };
        train_until(&mut state, &features, next_stop, |m| {
            println!(
                "epoch {:>3}  loss {:>10.4}  (cls {:.4} box {:.4})  ap50 {:.4}  ap65 {:.4}  ap80 {:.4}",
                m.epoch, m.loss_total, m.loss_cls, m.loss_box, m.ap50, m.ap65, m.ap80
            );
        })?;
        write_text(&metrics_path, &metrics_csv(&state.metrics))?;
        save_checkpoint(&ckpt_path, &state)?;
    }
    println!(
        "wrote {} and {}",
        metrics_path.display(),
        ckpt_path.display()
    );
    Ok(())
}

fn eval_indices(n: usize, split: SplitArg, val_fraction: f64) -> Vec<usize> {
    let (train, val) = split_indices(n, val_fraction);
    match split {
        SplitArg::Val => {
            if val.is_empty() {
                (0..n).collect()
            } else {
                val
            }
        }
        SplitArg::Train => train,
        SplitArg::All => (0..n).collect(),
    }
}

/// Forward one featurized scene and decode its detections.
fn scene_detections(
    model: &DetectionModel<F>,
    features: &SceneFeatures<F>,
    cfg: &TrainConfig,
) -> Result<Vec<RotatedBox<f64>>, BevError> {
    let (heads, _) = model.forward(&features.lidar, &features.radar)?;
    let specs: Vec<GridSpec> = HEAD_STRIDES.iter().map(|&s| cfg.grid.at_stride(s)).collect();
    decode_detections(&heads, &specs, &cfg.decode)
}

fn cmd_eval(a: EvalArgs) -> Result<(), BevError> {
    let threads = resolve_threads(a.threads);
    let (scenes, grid) = load_dataset(&a.data)?;
    let state = load_checkpoint::<F>(&a.checkpoint)?;
    let cfg = state.config.clone();
    check_grid(&cfg.grid, &grid)?;
    let features = featurize_scenes::<F>(&scenes, &cfg.grid, cfg.tau, threads)?;
    let indices = eval_indices(features.len(), a.split, cfg.val_fraction);
    if indices.is_empty() {
        return Err(BevError::EmptyDataset);
    }
    if let Some(dir) = &a.out_pred {
        ensure_dir(dir)?;
    }
    let mut pairs: Vec<(Vec<RotatedBox<f64>>, Vec<RotatedBox<f64>>)> = Vec::new();
    for &i in &indices {
        let dets = scene_detections(&state.model, &features[i], &cfg)?;
        if let Some(dir) = &a.out_pred {
            let path = dir.join(format!("{}.pred.json", scenes[i].id));
            let json = serde_json::to_string(&dets)
                .map_err(|e| BevError::malformed(path.display().to_string(), e.to_string()))?;
            write_text(&path, &json)?;
        }
        pairs.push((dets, scenes[i].gt_boxes.clone()));
    }
    let report: EvalReport = evaluate(&pairs, &[0.5, 0.65, 0.8], a.method.into())?;
    let csv = report_csv(&report);
    match &a.out_csv {
        Some(path) => {
            write_text(path, &csv)?;
            println!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    if let Some(path) = &a.out_pr {
        write_text(path, &pr_csv(&report))?;
        println!("wrote {}", path.display());
    }
    if let Some(dir) = &a.out_pred {
        println!("wrote {} prediction files to {}", indices.len(), dir.display());
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<(), BevError> {
    let threads = resolve_threads(a.threads);
    let strategies: Vec<Strategy> = if a.strategies.trim().eq_ignore_ascii_case("all") {
        Strategy::ALL.to_vec()
    } else {
        a.strategies
            .split(',')
            .map(|s| s.trim().parse())
            .collect::<Result<_, _>>()?
    };
    let (scenes, grid) = load_dataset(&a.data)?;
    ensure_dir(&a.out_dir)?;
    let base = a.fit.build(grid)?;
    let features = featurize_scenes::<F>(&scenes, &base.grid, base.tau, threads)?;

    let mut summary = String::from("strategy,fusion,epochs,loss_total,ap50,ap65,ap80\n");
    println!(
        "{:<14} {:>10} {:>8} {:>8} {:>8}",
        "strategy", "loss", "ap50", "ap65", "ap80"
    );
    for strategy in strategies {
        let mut cfg = base.clone();
        cfg.strategy = strategy;
        let mut state = TrainState::<F>::new(cfg)?;
        train_until(&mut state, &features, base.epochs, |_| {})?;
        let last = state
            .metrics
            .last()
            .cloned()
            .unwrap_or_else(|| unreachable!("training at least one epoch always logs a row"));
        write_text(
            &a.out_dir.join(format!("{strategy}.metrics.csv")),
            &metrics_csv(&state.metrics),
        )?;
        save_checkpoint(&a.out_dir.join(format!("{strategy}.checkpoint.json")), &state)?;
        summary.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
            strategy, base.fusion, base.epochs, last.loss_total, last.ap50, last.ap65, last.ap80
        ));
        println!(
            "{:<14} {:>10.4} {:>8.4} {:>8.4} {:>8.4}",
            strategy.to_string(),
            last.loss_total,
            last.ap50,
            last.ap65,
            last.ap80
        );
    }
    let summary_path = a.out_dir.join("compare.csv");
    write_text(&summary_path, &summary)?;
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<(), BevError> {
    let scene: Scene = load_scene(&a.scene)?;
    let dataset_dir = a.scene.parent().ok_or_else(|| BevError::InvalidConfig {
        field: "scene".into(),
        reason: "scene file has no parent directory".into(),
    })?;
    let grid = load_manifest(dataset_dir)?.grid;
    let predictions: Vec<RotatedBox<f64>> = match &a.pred {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| BevError::io(path.display().to_string(), e))?;
            serde_json::from_str(&raw)
                .map_err(|e| BevError::malformed(path.display().to_string(), e.to_string()))?
        }
        None => Vec::new(),
    };
    let opts = RenderOptions {
        px_per_cell: a.px,
        radar_background: !a.no_radar,
        draw_lidar: !a.no_lidar,
        draw_gt: !a.no_gt,
        predictions,
    };
    let svg = render_scene(&scene, &grid, &opts);
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    save_svg(&a.out, &svg)?;
    println!(
        "wrote {} ({} predictions over scene {})",
        a.out.display(),
        opts.predictions.len(),
        scene.id
    );
    Ok(())
}
