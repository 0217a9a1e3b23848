//! Argument parsing and the six subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cohesion_core::annotation::{agreement_report, Weighting};
use cohesion_core::capsnet::CapsNet;
use cohesion_core::data::{FaceBox, GroupSample, Split, SynthSpec};
use serde::Serialize;

use crate::annotations::read_annotations;
use crate::config::{FileConfig, ModelKind, OptimizerChoice, TrainSettings};
use crate::error::{Error, Result, EXIT_CONFIG};
use crate::images::{quantize, read_rgb, write_gray};
use crate::manifest::Manifest;
use crate::models::{Float, Model};
use crate::pipeline::{self, evaluate_model, TrainOutput};
use crate::synth::write_synth;

pub const CHECKPOINT_NAME: &str = "checkpoint.gcsckpt";
pub const REPORT_NAME: &str = "report.json";
pub const METRICS_NAME: &str = "metrics.json";
pub const CROSSVAL_NAME: &str = "crossval.json";
pub const DEFAULT_FOLDS: usize = 5;

#[derive(Debug, Parser)]
#[command(name = "cohesion", version, about = "Group cohesion estimation from images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write its checkpoint, report and metrics.
    Train(RunFlags),
    /// Score a checkpoint on one split of a manifest.
    Eval(EvalArgs),
    /// k-fold cross-validation over the train and val splits.
    Crossval(CrossvalArgs),
    /// Inter-rater agreement of an annotation CSV.
    Stats(StatsArgs),
    /// Export a normalized input-gradient map as a grayscale PNG.
    Saliency(SaliencyArgs),
    /// Generate a synthetic dataset with its manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RunFlags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model: Option<ModelKind>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerChoice>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Weight of the cohesion loss in multitask runs.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pretrained capsule-network checkpoint for face-level runs.
    #[arg(long)]
    pub capsnet: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Also write the evaluation as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct CrossvalArgs {
    #[command(flatten)]
    pub run: RunFlags,
    #[arg(long)]
    pub folds: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    Linear,
    Quadratic,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_enum, default_value_t = WeightingArg::Linear)]
    pub weighting: WeightingArg,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SaliencyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// Face box `x,y,w,h`; repeat for every face. Face-level models need them.
    #[arg(long = "faces", value_parser = parse_face)]
    pub faces: Vec<FaceBox>,
    /// Defaults to `<image stem>.saliency.png` beside the image.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub faces_min: Option<usize>,
    #[arg(long)]
    pub faces_max: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
}

fn parse_face(s: &str) -> std::result::Result<FaceBox, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [x, y, w, h] => Ok(FaceBox { x, y, w, h }),
        _ => Err(format!("expected x,y,w,h, got {s:?}")),
    }
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    std::path::absolute(&p).map_err(Error::io(&p))
}

impl RunFlags {
    /// Layers flags over the config file and resolves every path.
    pub fn file_config(&self) -> Result<FileConfig> {
        let base = match &self.config {
            Some(p) => FileConfig::load(&absolute(p.clone())?)?,
            None => FileConfig::default(),
        };
        let flags = FileConfig {
            manifest: self.manifest.clone(),
            model: self.model,
            optimizer: self.optimizer,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            momentum: self.momentum,
            alpha: self.alpha,
            seed: self.seed,
            out: self.out.clone(),
            capsnet_checkpoint: self.capsnet.clone(),
            ..FileConfig::default()
        };
        let mut cfg = base.overlay(flags);
        for p in [&mut cfg.manifest, &mut cfg.out, &mut cfg.capsnet_checkpoint] {
            if let Some(path) = p.take() {
                *p = Some(absolute(path)?);
            }
        }
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(flags) => cmd_train(&flags),
        Command::Eval(args) => cmd_eval(&args),
        Command::Crossval(args) => cmd_crossval(&args),
        Command::Stats(args) => cmd_stats(&args),
        Command::Saliency(args) => cmd_saliency(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

/// Parses `args`, runs the command and maps failures to exit codes.
pub fn main_with<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| Error::Config(format!("{flag} is required")))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(Error::io(path))
}

fn load_capsnet(path: &Path) -> Result<CapsNet<Float>> {
    match Model::load(path)?.0 {
        Model::Capsnet(net) => Ok(net),
        other => Err(Error::Architecture(format!(
            "{} holds a {} model, not a capsule network",
            path.display(),
            other.kind_name()
        ))),
    }
}

fn split_samples(manifest: &Manifest, split: Split) -> Result<Vec<GroupSample>> {
    manifest.samples(&manifest.indices(split))
}

#[derive(Serialize)]
struct RunReport<'a> {
    model: &'a str,
    train: &'a cohesion_core::training::TrainRunReport,
    pretrain: Option<&'a cohesion_core::training::TrainRunReport>,
}

/// Deterministic summary: no timings.
#[derive(Serialize)]
struct MetricsSummary<'a> {
    model: &'a str,
    fingerprint: String,
    seed: u64,
    best_epoch: usize,
    best_loss: f64,
    metrics: &'a BTreeMap<String, f64>,
}

pub fn cmd_train(flags: &RunFlags) -> Result<()> {
    let cfg = flags.file_config()?;
    let settings = TrainSettings::resolve(&cfg)?;
    let manifest_path = require(&cfg.manifest, "--manifest")?;
    let out = require(&cfg.out, "--out")?;
    let capsnet = settings.capsnet_checkpoint.as_deref().map(load_capsnet).transpose()?;
    let manifest = Manifest::load(manifest_path)?;
    let train = split_samples(&manifest, Split::Train)?;
    let val = split_samples(&manifest, Split::Val)?;
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    let output = pipeline::train(&settings, &train, &val, capsnet)?;
    write_train_output(out, &settings, &output)?;
    println!("{}", serde_json::to_string_pretty(&output.metrics).expect("metrics serialize"));
    Ok(())
}

pub fn write_train_output(out: &Path, settings: &TrainSettings, o: &TrainOutput) -> Result<()> {
    let metrics: Vec<(String, f64)> = o.metrics.iter().map(|(k, v)| (k.clone(), *v)).collect();
    o.model
        .to_checkpoint(settings.fit.seed, metrics, Some(o.optimizer.clone()))
        .write(&out.join(CHECKPOINT_NAME))?;
    let model = settings.kind.name();
    write_json(
        &out.join(REPORT_NAME),
        &RunReport {
            model,
            train: &o.report,
            pretrain: o.pretrain.as_ref(),
        },
    )?;
    write_json(
        &out.join(METRICS_NAME),
        &MetricsSummary {
            model,
            fingerprint: o.model.fingerprint(),
            seed: settings.fit.seed,
            best_epoch: o.report.best_epoch,
            best_loss: o.report.best_loss,
            metrics: &o.metrics,
        },
    )
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (model, _) = Model::load(&args.checkpoint)?;
    let manifest = Manifest::load(&args.manifest)?;
    let split: Split = args.split.into();
    let groups = split_samples(&manifest, split)?;
    if groups.is_empty() {
        return Err(Error::Config(format!("split {} of the manifest is empty", split.name())));
    }
    let evaluation = evaluate_model(&model, &groups, split.name())?;
    println!("{}", serde_json::to_string_pretty(&evaluation).expect("evaluation serializes"));
    if let Some(out) = &args.out {
        write_json(out, &evaluation)?;
    }
    Ok(())
}

pub fn cmd_crossval(args: &CrossvalArgs) -> Result<()> {
    let mut cfg = args.run.file_config()?;
    if args.folds.is_some() {
        cfg.folds = args.folds;
    }
    let k = cfg.folds.unwrap_or(DEFAULT_FOLDS);
    if k < 2 {
        return Err(Error::config("--folds must be at least 2"));
    }
    let settings = TrainSettings::resolve(&cfg)?;
    if settings.kind == ModelKind::CapsnetPretrain {
        return Err(Error::config("cross-validation reports cohesion MSE; choose a cohesion model"));
    }
    let manifest_path = require(&cfg.manifest, "--manifest")?;
    let capsnet = settings.capsnet_checkpoint.as_deref().map(load_capsnet).transpose()?;
    let manifest = Manifest::load(manifest_path)?;
    let train = split_samples(&manifest, Split::Train)?;
    let val = split_samples(&manifest, Split::Val)?;
    let capsnet = match (settings.kind, capsnet) {
        (ModelKind::FaceLevel, None) => Some(pipeline::pretrain_capsnet(&settings, &settings.pretrain, &train, &val)?.net),
        (_, c) => c,
    };
    let pool: Vec<GroupSample> = train.into_iter().chain(val).collect();
    if pool.len() < k {
        return Err(Error::Config(format!("{k} folds need at least {k} train/val samples, found {}", pool.len())));
    }
    let report = pipeline::crossval(&settings, &pool, k, capsnet.as_ref())?;
    print!("{}", report.table());
    if let Some(out) = &cfg.out {
        std::fs::create_dir_all(out).map_err(Error::io(out))?;
        write_json(&out.join(CROSSVAL_NAME), &report)?;
    }
    Ok(())
}

pub fn cmd_stats(args: &StatsArgs) -> Result<()> {
    let m = read_annotations(&args.annotations)?;
    let weighting = match args.weighting {
        WeightingArg::Linear => Weighting::Linear,
        WeightingArg::Quadratic => Weighting::Quadratic,
    };
    let report = agreement_report(&m, weighting);
    print!("{}", report.render());
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

/// `<stem>.saliency.png` in the image's directory.
pub fn default_saliency_path(image: &Path) -> PathBuf {
    let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    image.with_file_name(format!("{stem}.saliency.png"))
}

pub fn cmd_saliency(args: &SaliencyArgs) -> Result<()> {
    let (model, _) = Model::load(&args.checkpoint)?;
    let image = read_rgb(&args.image)?;
    if let Some(f) = args.faces.iter().find(|f| !f.within(image.width, image.height)) {
        return Err(Error::Config(format!("face box {f:?} leaves the {}x{} image", image.width, image.height)));
    }
    if matches!(model, Model::FaceLevel(_)) && args.faces.is_empty() {
        return Err(Error::config("face-level saliency needs at least one --faces box"));
    }
    let map = model.saliency(&image, &args.faces)?;
    let out = args.out.clone().unwrap_or_else(|| default_saliency_path(&args.image));
    write_gray(&out, image.width, image.height, quantize(&map))?;
    println!("{}", out.display());
    Ok(())
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        num_samples: args.n.unwrap_or(d.num_samples),
        faces_min: args.faces_min.unwrap_or(d.faces_min),
        faces_max: args.faces_max.unwrap_or(d.faces_max),
        noise: args.noise.unwrap_or(d.noise),
        seed: args.seed.unwrap_or(d.seed),
        val_fraction: args.val_fraction.unwrap_or(d.val_fraction),
        test_fraction: args.test_fraction.unwrap_or(d.test_fraction),
    };
    spec.validate()?;
    let (_, summary) = write_synth(&args.out, &spec)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}
