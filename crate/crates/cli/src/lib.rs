//! Command implementations behind the `ovg` binary.
//!
//! Every command returns a [`Status`] on success; the binary maps it to the
//! process exit code. Errors of any kind exit with code 2.

pub mod report;

use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use ovg_core::data::{check_disjointness, load_manifest, load_vg_manifest, write_synthetic, DisjointnessReport, SynthConfig};
use ovg_core::eval::{evaluate_manifest, AnswerTable, Predictor};
use ovg_core::metrics::PredictionRecord;
use ovg_core::train::{train_on, RunRecord};
use ovg_core::{Checkpoint, EvalReport, ModelConfig};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "OVG_SEED";

pub const RUN_FILE: &str = "run.json";
pub const LOSS_FILE: &str = "losses.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const DISJOINTNESS_FILE: &str = "disjointness.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ovg_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("invalid input {path}: {message}")]
    Input { path: PathBuf, message: String },

    #[error("invalid {SEED_ENV} value {0:?}: expected an unsigned integer")]
    Seed(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Outcome of a command that ran to completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// The command ran but its check did not pass.
    CheckFailed,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Ok => 0,
            Status::CheckFailed => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ovg", version, about = "Open-vocabulary visual grounding toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on a grounding manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a grounding or phrase-localization manifest.
    Eval(EvalArgs),
    /// Check that a training and an evaluation manifest do not leak into each other.
    Verify(VerifyArgs),
    /// Render plots and an accuracy table from an evaluation run.
    Report(ReportArgs),
    /// Write a synthetic grounding set of colored shapes.
    Synth(SynthArgs),
    /// Write a checkpoint that answers with a manifest's ground truth.
    Oracle(OracleArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat TOML file; keys override the selected profile.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Layer the config over the desk-scale profile instead of the full one.
    #[arg(long)]
    pub toy: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub eval: PathBuf,
    /// Directory to also write `disjointness.json` into.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `report.json`, or the directory `eval` wrote it to.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub scenes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub canvas: u32,
    #[arg(long, default_value_t = 14)]
    pub min_side: u32,
    #[arg(long, default_value_t = 28)]
    pub max_side: u32,
    #[arg(long, default_value_t = 1)]
    pub distractors: usize,
    #[arg(long, default_value_t = 0.0)]
    pub novel_fraction: f64,
    #[arg(long, default_value = "scene")]
    pub prefix: String,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<Status> {
    match cli.command {
        Command::Train(a) => {
            let seed = seed_override()?;
            let record = cmd_train(&a.config, &a.data, &a.out, a.toy, seed, |step, total, loss| {
                if step % 25 == 0 || step == total {
                    eprintln!("step {step}/{total} loss {loss:.4}");
                }
            })?;
            eprintln!(
                "training acc50 {:.2} over {} samples, {:.1}s",
                record.report.acc50, record.report.total_count, record.wall_clock_secs
            );
            Ok(Status::Ok)
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a.ckpt, &a.data, &a.out)?;
            emit(&to_json(&report));
            Ok(Status::Ok)
        }
        Command::Verify(a) => {
            let report = cmd_verify(&a.train, &a.eval, a.out.as_deref())?;
            emit(&to_json(&report));
            Ok(if report.pass { Status::Ok } else { Status::CheckFailed })
        }
        Command::Report(a) => {
            for path in report::cmd_report(&a.input, &a.out)? {
                emit(&format!("{}\n", path.display()));
            }
            Ok(Status::Ok)
        }
        Command::Synth(a) => {
            let cfg = SynthConfig {
                canvas: a.canvas,
                min_side: a.min_side,
                max_side: a.max_side,
                distractors: a.distractors,
                novel_fraction: a.novel_fraction,
                id_prefix: a.prefix,
            };
            if a.scenes == 0 || a.min_side < 2 || a.min_side > a.max_side || a.max_side > a.canvas {
                return Err(CliError::Input {
                    path: a.out,
                    message: "need at least one scene and 2 <= min-side <= max-side <= canvas".into(),
                });
            }
            let set = ovg_core::data::generate_synthetic(a.scenes, &cfg, a.seed);
            emit(&format!("{}\n", write_synthetic(&a.out, &set)?.display()));
            Ok(Status::Ok)
        }
        Command::Oracle(a) => {
            let manifest = load_vg_manifest(&a.data)?;
            let table = AnswerTable::from_ground_truth(&manifest)?;
            Checkpoint::Answers { boxes: table.boxes }.save(&a.out)?;
            Ok(Status::Ok)
        }
    }
}

/// Seed from [`SEED_ENV`], if set.
pub fn seed_override() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| CliError::Seed(v)),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(v)) => Err(CliError::Seed(v.to_string_lossy().into_owned())),
    }
}

/// Train and write `run.json`, `losses.txt` and `checkpoint.json` into `out_dir`.
///
/// The manifest is validated before any training starts. `progress` sees
/// `(step, total_steps, loss)` after every step.
pub fn cmd_train(
    config_path: &Path,
    data_path: &Path,
    out_dir: &Path,
    toy: bool,
    seed: Option<u64>,
    mut progress: impl FnMut(usize, usize, f64),
) -> Result<RunRecord> {
    let base = if toy { ModelConfig::toy() } else { ModelConfig::default() };
    let mut cfg = ModelConfig::load(config_path, &base)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = load_vg_manifest(data_path)?;
    create_dir(out_dir)?;
    let total = cfg.train_steps;
    let (model, record) = train_on(&cfg, &manifest, data_path, total, |step, l| progress(step, total, l.total))?;
    write(&out_dir.join(RUN_FILE), &to_json(&record))?;
    write(&out_dir.join(LOSS_FILE), &record.loss_log())?;
    model.to_checkpoint().save(out_dir.join(CHECKPOINT_FILE))?;
    Ok(record)
}

/// Evaluate and write `report.json` and `predictions.json` into `out_dir`.
pub fn cmd_eval(ckpt_path: &Path, data_path: &Path, out_dir: &Path) -> Result<EvalReport> {
    let predictor = Predictor::from_checkpoint(Checkpoint::load(ckpt_path)?)?;
    let manifest = load_manifest(data_path)?;
    let (report, preds): (EvalReport, Vec<PredictionRecord>) =
        evaluate_manifest(predictor.grounder(), &manifest, data_path)?;
    create_dir(out_dir)?;
    write(&out_dir.join(REPORT_FILE), &to_json(&report))?;
    write(&out_dir.join(PREDICTIONS_FILE), &to_json(&preds))?;
    Ok(report)
}

/// Audit two manifests for shared images and base/novel name collisions.
pub fn cmd_verify(train_path: &Path, eval_path: &Path, out_dir: Option<&Path>) -> Result<DisjointnessReport> {
    let train = load_manifest(train_path)?;
    let eval = load_manifest(eval_path)?;
    let report = check_disjointness(&train, &eval);
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write(&dir.join(DISJOINTNESS_FILE), &to_json(&report))?;
    }
    Ok(report)
}

/// Write to stdout. A reader that closed the pipe early is not an error.
fn emit(text: &str) {
    use std::io::Write;
    if let Err(e) = io::stdout().lock().write_all(text.as_bytes()) {
        if e.kind() != io::ErrorKind::BrokenPipe {
            eprintln!("warning: cannot write to stdout: {e}");
        }
    }
}

pub(crate) fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub(crate) fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}
