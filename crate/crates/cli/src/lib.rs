//! Command implementations behind the `rfhit` binary.
//!
//! Every command writes its human-readable output to a caller-supplied
//! writer and returns a small summary value, so tests can drive the same code
//! paths as the binary.

pub mod ablation;
pub mod source;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rfhit::accounting::{cost_report, CostReport};
use rfhit::checkpoint::Checkpoint;
use rfhit::config::{preset, RunConfig, ThresholdGrid};
use rfhit::data::{read_predictions, synthetic_dataset, write_predictions, write_slice_folder, SyntheticSpec};
use rfhit::metrics::{calibrate_thresholds, class_names, evaluate, stack_labels, stack_slices, EvalReport};
use rfhit::pipeline::{predict, predict_volumes};
use rfhit::trainer::{ProgressLog, Trainer};
use rfhit::Error;

use source::{DataSource, Geometry, Split};

/// Output root when neither `--out` nor `RFHIT_OUT` is given.
pub const DEFAULT_OUT: &str = "rfhit-out";

#[derive(Parser, Debug)]
#[command(name = "rfhit", version, about = "Rectified-flow hourglass transformer segmentation")]
pub struct Cli {
    /// Directory under which commands place their outputs by default.
    #[arg(long, env = "RFHIT_OUT", default_value = DEFAULT_OUT, global = true)]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write a checkpoint and loss log.
    Train(TrainArgs),
    /// Euler-sample every slice and write per-class value rasters.
    Sample(SampleArgs),
    /// Grid-search per-class decode thresholds on validation data.
    Calibrate(CalibrateArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Train and compare the encoder and fusion ablation variants.
    Ablate(AblateArgs),
    /// Parameter and FLOP report for a configuration.
    Report(ReportArgs),
    /// Write the synthetic dataset as a slice folder.
    Synth(SynthArgs),
}

/// Model and run configuration: a named preset or a TOML file.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// Built-in preset: paper, tiny or unit.
    #[arg(long, default_value = "tiny", conflicts_with = "config")]
    pub preset: String,
    /// Run configuration file (TOML with [model], [train], [infer]).
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self, log: &mut dyn Write) -> Result<RunConfig> {
        let rc = match &self.config {
            Some(path) => {
                let (rc, warnings) = RunConfig::load(path)?;
                for w in warnings {
                    writeln!(log, "warning: {}: {w}", path.display())?;
                }
                rc
            }
            None => RunConfig::from_preset(&self.preset)?,
        };
        let problems = rc.validate();
        if !problems.is_empty() {
            return Err(Error::Config(problems).into());
        }
        Ok(rc)
    }
}

/// Data source shared by the commands that read slices.
#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// `synthetic` or a slice-folder path.
    #[arg(long, default_value = "synthetic")]
    pub data: DataSource,
    /// Generator seed for synthetic data.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of optimizer updates (overrides the epoch count).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// Run directory; defaults to `<out-root>/train`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint (its configuration wins).
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// End this invocation after this many updates; the schedule keeps its full length.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    #[arg(long, default_value_t = 25)]
    pub log_every: usize,
}

#[derive(Args, Clone, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Synthetic split to sample.
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    /// Euler steps; defaults to the checkpoint's inference setting (3).
    #[arg(short = 'n', long)]
    pub euler_steps: Option<usize>,
    /// Noise seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Prediction folder; defaults to `<out-root>/predictions`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct CalibrateArgs {
    /// Sample the validation data with this model.
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Use existing predictions instead of sampling.
    #[arg(long, conflicts_with = "checkpoint")]
    pub predictions: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    #[arg(short = 'n', long)]
    pub euler_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Thresholds file; defaults to `<out-root>/thresholds.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    /// Prediction folder (`values/` plus `manifest.json`).
    #[arg(long)]
    pub predictions: PathBuf,
    /// Ground truth: `synthetic` or a slice-folder path.
    #[arg(long, default_value = "synthetic")]
    pub truth: DataSource,
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[arg(long, value_enum, default_value = "test")]
    pub split: Split,
    #[arg(long)]
    pub thresholds: PathBuf,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Clone, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(short = 'n', long, default_value_t = 3)]
    pub euler_steps: usize,
    /// Where the tables are written; defaults to `<out-root>/ablation`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Euler steps for the trajectory figure.
    #[arg(short = 'n', long, default_value_t = 3)]
    pub euler_steps: usize,
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Clone, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 70)]
    pub volumes: usize,
    #[arg(long, default_value_t = 10)]
    pub slices: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Including background.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Calibrated per-class decode thresholds, background included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdsFile {
    pub grid: ThresholdGrid,
    pub thresholds: Vec<f64>,
}

impl ThresholdsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing thresholds file {}", path.display()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        create_parent(path)?;
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Machine-readable form of the cost report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportJson {
    pub report: CostReport,
    pub euler_steps: usize,
    pub gflops_single_forward: f64,
    pub gflops_trajectory: f64,
    pub reference_compared: bool,
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let root = &cli.out_root;
    match &cli.command {
        Command::Train(a) => train(a, root, out).map(drop),
        Command::Sample(a) => sample(a, root, out).map(drop),
        Command::Calibrate(a) => calibrate(a, root, out).map(drop),
        Command::Eval(a) => eval(a, out).map(drop),
        Command::Ablate(a) => ablation::ablate(a, root, out).map(drop),
        Command::Report(a) => report(a, out).map(drop),
        Command::Synth(a) => synth(a, out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// Result of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub step: usize,
    pub losses: Vec<f64>,
}

pub fn train(a: &TrainArgs, root: &Path, out: &mut dyn Write) -> Result<TrainOutcome> {
    let dir = a.out.clone().unwrap_or_else(|| root.join("train"));
    let (rc, resumed) = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            writeln!(out, "resuming {} at step {}/{}", path.display(), ck.step, ck.total_steps)?;
            (ck.config.clone(), Some(ck))
        }
        None => {
            let mut rc = a.config.resolve(out)?;
            if let Some(s) = a.steps {
                rc.train.steps = Some(s);
            }
            if let Some(s) = a.seed {
                rc.train.seed = s;
            }
            if let Some(b) = a.batch_size {
                rc.train.batch_size = b;
            }
            if let Some(lr) = a.learning_rate {
                rc.train.learning_rate = lr;
            }
            let problems = rc.validate();
            if !problems.is_empty() {
                return Err(Error::Config(problems).into());
            }
            (rc, None)
        }
    };
    let data = source::load(&a.data.data, Split::Train, Geometry::of_model(&rc.model), a.data.data_seed)?;
    let mut trainer = match resumed {
        Some(ck) => ck.trainer()?,
        None => Trainer::new(&rc.model, &rc.train, rc.train.total_steps(data.len()))?,
    };
    create_dir(&dir)?;
    rc.save(&dir.join("config.toml"))?;
    let ck_path = dir.join("checkpoint.bin");
    let mut log = ProgressLog::open(&dir.join("train_log.txt"))?;
    writeln!(
        out,
        "training {} parameters on {} slices from {} for {} steps",
        trainer.model.param_count(),
        data.len(),
        a.data.data,
        trainer.schedule.total_steps
    )?;
    let mut losses = Vec::new();
    let (every, log_every) = (a.checkpoint_every.max(1), a.log_every.max(1));
    let start = trainer.step;
    while !trainer.done() && a.stop_after.is_none_or(|n| trainer.step - start < n) {
        let s = trainer.train_step(&data)?;
        log.record(&s)?;
        losses.push(s.loss);
        if s.step % log_every == 0 || s.step == trainer.schedule.total_steps {
            writeln!(out, "step {:>6}  lr {:.3e}  loss {:.5}  grad {:.3}", s.step, s.lr, s.loss, s.grad_norm)?;
        }
        if s.step % every == 0 {
            Checkpoint::from_trainer(&trainer, &rc).save(&ck_path)?;
        }
    }
    Checkpoint::from_trainer(&trainer, &rc).save(&ck_path)?;
    writeln!(out, "checkpoint: {}", ck_path.display())?;
    Ok(TrainOutcome { checkpoint: ck_path, step: trainer.step, losses })
}

/// Loads `split` shaped for the checkpoint's model.
fn checkpoint_data(ck: &Checkpoint, data: &DataArgs, split: Split) -> Result<rfhit::data::Dataset> {
    source::load(&data.data, split, Geometry::of_model(&ck.config.model), data.data_seed)
}

pub fn sample(a: &SampleArgs, root: &Path, out: &mut dyn Write) -> Result<PathBuf> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.model()?;
    let steps = a.euler_steps.unwrap_or(ck.config.infer.euler_steps);
    ensure!(steps >= 1, "--euler-steps must be at least 1");
    let data = checkpoint_data(&ck, &a.data, a.split)?;
    let dir = a.out.clone().unwrap_or_else(|| root.join("predictions"));
    let preds = predict(&model, &data, steps, a.seed)?;
    create_dir(&dir)?;
    write_predictions(&dir, &preds, &data.manifest())?;
    writeln!(
        out,
        "sampled {} slices in {} volumes with {steps} Euler steps (seed {}) into {}",
        preds.len(),
        data.volumes.len(),
        a.seed,
        dir.display()
    )?;
    Ok(dir)
}

pub fn calibrate(a: &CalibrateArgs, root: &Path, out: &mut dyn Write) -> Result<ThresholdsFile> {
    let (preds, gts, grid) = match (&a.checkpoint, &a.predictions) {
        (Some(path), _) => {
            let ck = Checkpoint::load(path)?;
            let model = ck.model()?;
            let steps = a.euler_steps.unwrap_or(ck.config.infer.euler_steps);
            let data = checkpoint_data(&ck, &a.data, a.split)?;
            let (p, g) = predict_volumes(&model, &data, steps, a.seed)?;
            (p, g, ck.config.infer.threshold_grid)
        }
        (None, Some(dir)) => {
            let (preds, manifest) = read_predictions(dir)?;
            let geo = Geometry::of_predictions(&preds)?;
            let data = source::load(&a.data.data, a.split, geo, a.data.data_seed)?;
            let gts = stack_labels(&data.samples, &data.manifest(), geo.seg_channels)?;
            (stack_slices(&preds, &manifest)?, gts, ThresholdGrid::default())
        }
        (None, None) => bail!("calibrate needs --checkpoint or --predictions"),
    };
    if gts.is_empty() {
        bail!("validation set {} is empty", a.data.data);
    }
    let thresholds = calibrate_thresholds(&preds, &gts, &grid)?;
    let values = grid.values();
    writeln!(
        out,
        "grid: {} values from {:.4} to {:.4} (step {:.6}) over {} validation volumes",
        values.len(),
        values[0],
        values[values.len() - 1],
        grid.step(),
        gts.len()
    )?;
    let names = class_names(thresholds.len());
    for (c, t) in thresholds.iter().enumerate() {
        let name = if c == 0 { "background" } else { &names[c - 1] };
        writeln!(out, "class {c} ({name}): threshold {t:.4}")?;
    }
    let file = ThresholdsFile { grid, thresholds };
    let path = a.out.clone().unwrap_or_else(|| root.join("thresholds.json"));
    file.save(&path)?;
    writeln!(out, "thresholds: {}", path.display())?;
    Ok(file)
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<EvalReport> {
    let (preds, manifest) = read_predictions(&a.predictions)?;
    let geo = Geometry::of_predictions(&preds)
        .with_context(|| format!("reading predictions from {}", a.predictions.display()))?;
    let th = ThresholdsFile::load(&a.thresholds)?;
    if th.thresholds.len() != geo.seg_channels {
        bail!(
            "{}: {} thresholds for {} classes",
            a.thresholds.display(),
            th.thresholds.len(),
            geo.seg_channels
        );
    }
    let data = source::load(&a.truth, a.split, geo, a.data_seed)?;
    let gts = stack_labels(&data.samples, &data.manifest(), geo.seg_channels)?;
    let pvols = stack_slices(&preds, &manifest)?;
    if let Some(extra) = pvols.iter().find(|p| gts.iter().all(|g| g.volume_id != p.volume_id)) {
        bail!("prediction volume {} has no ground truth in {}", extra.volume_id, a.truth);
    }
    let report = evaluate(&pvols, &gts, &th.thresholds)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        write!(out, "{}", report.table())?;
    }
    Ok(report)
}

pub fn report(a: &ReportArgs, out: &mut dyn Write) -> Result<ReportJson> {
    let rc = a.config.resolve(out)?;
    let r = cost_report(&rc.model)?;
    let reference = rc.model == preset("paper")?;
    let json = ReportJson {
        euler_steps: a.euler_steps,
        gflops_single_forward: r.single_forward_flops() as f64 / 1e9,
        gflops_trajectory: r.trajectory_flops(a.euler_steps) as f64 / 1e9,
        reference_compared: reference,
        report: r,
    };
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&json)?)?;
    } else {
        write!(out, "{}", json.report.render(a.euler_steps, reference))?;
    }
    Ok(json)
}

pub fn synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let spec = SyntheticSpec {
        size: a.size,
        classes: a.classes,
        noise: a.noise,
        seed: a.seed,
        volumes: a.volumes,
        slices_per_volume: a.slices,
        ..SyntheticSpec::default()
    };
    let ds = synthetic_dataset(&spec)?;
    write_slice_folder(&a.out, &ds)?;
    writeln!(out, "wrote {} slices in {} volumes to {}", ds.len(), ds.volumes.len(), a.out.display())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_parses_every_command() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let cli = Cli::try_parse_from(["rfhit", "train", "--preset", "tiny", "--data", "synthetic", "--steps", "5"]).unwrap();
        match cli.command {
            Command::Train(a) => {
                assert_eq!(a.steps, Some(5));
                assert_eq!(a.data.data, DataSource::Synthetic);
            }
            other => panic!("parsed {other:?}"),
        }
        assert!(Cli::try_parse_from(["rfhit", "calibrate"]).is_err());
        assert!(Cli::try_parse_from(["rfhit", "report", "--preset", "tiny", "--config", "x.toml"]).is_err());
    }

    #[test]
    fn thresholds_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/t.json");
        let f = ThresholdsFile { grid: ThresholdGrid::default(), thresholds: vec![0.2, 0.5, 0.55, 0.8] };
        f.save(&path).unwrap();
        assert_eq!(ThresholdsFile::load(&path).unwrap(), f);
    }
}
