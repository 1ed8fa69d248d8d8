//! Command-line interface. Results go to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gazeprophet_core::data::{synthesize, Dataset, ScanpathStyle, SynthConfig};
use gazeprophet_core::eval::{evaluate, spatial_heatmap, EvalReport};
use gazeprophet_core::model::{BaselineKind, Model};
use gazeprophet_core::temporal::WINDOW_LEN;
use gazeprophet_core::train::{prepare_samples, split_dataset, train, TrainConfig};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, read_gaze_csv, write_dataset};
use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::ppm::read_scene;
use crate::report::{write_heatmap, write_report, Comparison, ReportFile};

#[derive(Debug, Parser)]
#[command(name = "gazeprophet", version, about = "Multi-modal gaze prediction on 360° scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of blob scenes and scanpaths.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a report directory.
    Eval(EvalArgs),
    /// Predict the next gaze point from a scene and a gaze history.
    Predict(PredictArgs),
    /// Write the spatial error heatmap of a checkpoint.
    Heatmap(HeatmapArgs),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Full,
    Temporal,
    Spatial,
    Center,
}

impl From<ModelArg> for BaselineKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Full => Self::Full,
            ModelArg::Temporal => Self::TemporalOnly,
            ModelArg::Spatial => Self::SpatialOnly,
            ModelArg::Center => Self::CenterFixed,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StyleArg {
    Fixation,
    Momentum,
}

#[derive(Debug, Clone, Copy, ValueEnum, PartialEq, Eq)]
pub enum SplitArg {
    /// Held-out scenes of the checkpoint's training split.
    Test,
    /// Every sample in the dataset.
    All,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image width in pixels.
    #[arg(long, default_value_t = 512)]
    pub w: usize,
    /// Image height in pixels (half the width).
    #[arg(long, default_value_t = 256)]
    pub h: usize,
    #[arg(long, default_value_t = 3)]
    pub blobs: usize,
    /// Points per scanpath.
    #[arg(long, default_value_t = 40)]
    pub length: usize,
    #[arg(long, value_enum, default_value_t = StyleArg::Fixation)]
    pub style: StyleArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelArg::Full)]
    pub model: ModelArg,
    /// JSON run configuration; the flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable dropout during training.
    #[arg(long)]
    pub no_dropout: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Report directory to write.
    #[arg(long)]
    pub report: PathBuf,
    /// Second checkpoint; adds a paired t-test and Cohen's d on angular error.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Heatmap grid as ROWSxCOLS.
    #[arg(long, default_value = "4x8", value_parser = parse_grid)]
    pub grid: (usize, usize),
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scene image (binary PPM).
    #[arg(long)]
    pub scene: PathBuf,
    /// Gaze history CSV; the last 10 points are used.
    #[arg(long)]
    pub gaze: PathBuf,
}

#[derive(Debug, Args)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Grid as ROWSxCOLS, at least 2x2.
    #[arg(long, value_parser = parse_grid)]
    pub grid: (usize, usize),
    /// Output directory for heatmap.csv and heatmap.ppm.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// JSON run configuration (model dims and loss weights).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Coordinates sampled per parameter array.
    #[arg(long, default_value_t = 8)]
    pub per_group: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid '{s}' is not ROWSxCOLS"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("grid '{s}' is not ROWSxCOLS"));
    let (r, c) = (parse(r)?, parse(c)?);
    if r < 2 || c < 2 {
        return Err(format!("grid '{s}' must be at least 2x2"));
    }
    Ok((r, c))
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Heatmap(a) => heatmap(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string(value).expect("result serializes"));
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        scenes: a.scenes,
        seed: a.seed,
        width: a.w,
        height: a.h,
        blobs: a.blobs,
        length: a.length,
        style: match a.style {
            StyleArg::Fixation => ScanpathStyle::Fixation,
            StyleArg::Momentum => ScanpathStyle::Momentum,
        },
    };
    if cfg.blobs == 0 {
        return Err(Error::Usage("--blobs must be at least 1".into()));
    }
    let ds = synthesize(&cfg).map_err(|e| Error::Usage(e.to_string()))?;
    write_dataset(&a.out, &ds)?;
    eprintln!("wrote {} scenes to {}", ds.scenes.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(a.config.as_deref())?;
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.adam.lr = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
    }
    if a.no_dropout {
        cfg.train.dropout = false;
    }
    cfg.train.validate().map_err(|e| Error::Usage(e.to_string()))?;
    cfg.model.validate().map_err(|e| Error::Usage(e.to_string()))?;
    let ds = load_dataset(&a.data)?;
    let kind = BaselineKind::from(a.model);
    let (outcome, split) = train(kind, &cfg.model, &ds, &cfg.train)?;
    for r in &outcome.history {
        match r.val {
            Some(v) => eprintln!("epoch {:>4}  train {:.6}  val {:.6}", r.epoch, r.train.total, v.total),
            None => eprintln!("epoch {:>4}  train {:.6}", r.epoch, r.train.total),
        }
    }
    checkpoint::save(&a.out, &outcome.model, Some(&cfg.train))?;
    print_json(&serde_json::json!({
        "model": kind.name(),
        "parameters": outcome.model.parameter_count(),
        "train_scenes": split.train.len(),
        "val_scenes": split.val.len(),
        "test_scenes": split.test.len(),
        "initial_train": outcome.initial_train,
        "best_epoch": outcome.best_epoch,
        "history": outcome.history,
    }));
    Ok(())
}

/// Scene ids a checkpoint should be scored on.
fn eval_scene_ids(ds: &Dataset, train: Option<&TrainConfig>, split: SplitArg) -> Result<Vec<String>> {
    Ok(match (split, train) {
        (SplitArg::All, _) | (SplitArg::Test, None) => ds.scene_ids(),
        (SplitArg::Test, Some(cfg)) => split_dataset(ds, cfg)?.test,
    })
}

fn score(model: &Model, ds: &Dataset, ids: &[String], tau: f64) -> Result<EvalReport> {
    let samples = ds.samples_for(ids)?;
    let prepared = prepare_samples(model.kind, &model.dims, &ds.scenes, &samples)?;
    Ok(evaluate(model, &prepared, tau)?)
}

fn check_images(ds: &Dataset, model: &Model, data: &Path) -> Result<()> {
    let (w, h) = (model.dims.vit.image_w, model.dims.vit.image_h);
    for (id, img) in &ds.scenes {
        if model.kind.uses_scene() && (img.width(), img.height()) != (w, h) {
            return Err(Error::format(
                crate::dataset::scene_path(data, id),
                format!("image is {}x{}, the model expects {w}x{h}", img.width(), img.height()),
            ));
        }
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let (model, train_cfg) = checkpoint::load(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    check_images(&ds, &model, &a.data)?;
    let tau = train_cfg.as_ref().map_or(0.05, |c| c.loss.tau);
    let ids = eval_scene_ids(&ds, train_cfg.as_ref(), a.split)?;
    let report = score(&model, &ds, &ids, tau)?;
    let comparison = match &a.compare {
        Some(path) => {
            let (other, _) = checkpoint::load(path)?;
            check_images(&ds, &other, &a.data)?;
            let other_report = score(&other, &ds, &ids, tau)?;
            Some(Comparison::new(&report, &other_report)?)
        }
        None => None,
    };
    let heat = spatial_heatmap(&report.per_sample, a.grid.0, a.grid.1)?;
    let file: ReportFile = write_report(&a.report, &report, comparison, &heat)?;
    print_json(&file);
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let points = read_gaze_csv(&a.gaze)?;
    if points.len() < WINDOW_LEN {
        return Err(Error::format(
            &a.gaze,
            format!("{} gaze points given, the model needs a window of {WINDOW_LEN}", points.len()),
        ));
    }
    let window = &points[points.len() - WINDOW_LEN..];
    let image = read_scene(&a.scene)?;
    let (w, h) = (model.dims.vit.image_w, model.dims.vit.image_h);
    if model.kind.uses_scene() && (image.width(), image.height()) != (w, h) {
        return Err(Error::format(
            &a.scene,
            format!("image is {}x{}, the model expects {w}x{h}", image.width(), image.height()),
        ));
    }
    let p = model.predict(&image, window)?;
    println!("{:.6} {:.6} {:.6}", p.x, p.y, p.confidence);
    Ok(())
}

fn heatmap(a: HeatmapArgs) -> Result<()> {
    let (model, train_cfg) = checkpoint::load(&a.ckpt)?;
    let ds = load_dataset(&a.data)?;
    check_images(&ds, &model, &a.data)?;
    let tau = train_cfg.as_ref().map_or(0.05, |c| c.loss.tau);
    let ids = eval_scene_ids(&ds, train_cfg.as_ref(), a.split)?;
    let report = score(&model, &ds, &ids, tau)?;
    let heat = spatial_heatmap(&report.per_sample, a.grid.0, a.grid.1)?;
    write_heatmap(&a.out, &heat)?;
    print_json(&heat);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let cfg = RunConfig::load_or_default(a.config.as_deref())?;
    let opts = GradcheckOptions {
        per_group: a.per_group,
        seed: a.seed,
        ..GradcheckOptions::default()
    };
    let summary = run_gradcheck(&cfg.model, &cfg.train.loss, &opts)?;
    eprintln!(
        "checked {} coordinates in {} arrays; worst '{}'",
        summary.coordinates, summary.groups, summary.worst_group
    );
    println!("{:e}", summary.max_relative_error);
    if summary.max_relative_error > a.tolerance {
        return Err(Error::Numeric(format!(
            "max relative error {:e} exceeds tolerance {:e}",
            summary.max_relative_error, a.tolerance
        )));
    }
    Ok(())
}
