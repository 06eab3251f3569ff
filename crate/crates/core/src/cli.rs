//! Command-line front end. Flags override values from `--config FILE` (JSON),
//! which override built-in defaults.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{
    load_dataset, save_dataset, split_dataset, synth_sequence, Dataset, RotationMode, SyntheticSpec,
};
use crate::diffcore::gradcheck::{op_suite, OP_NAMES};
use crate::losses::LossWeights;
use crate::metrics::Metric;
use crate::rank_oracle::{summary_csv, theorem1_experiment};
use crate::runner::{
    evaluate, length_sweep, load_checkpoint, save_checkpoint, sweep_csv, train, EvalMode,
    EvalOptions, TrainConfig, Width,
};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "nrsfm",
    version,
    about = "Sequence-to-sequence non-rigid structure from motion"
)]
pub struct Cli {
    /// JSON file with default values for the subcommand's options.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic low-rank sequence.
    Synth(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Finite-difference gradient checks of every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Monte-Carlo check of the reshuffled-rank bounds.
    VerifyTheorem(TheoremArgs),
    /// Evaluate a checkpoint at several chunk lengths.
    LengthSweep(SweepArgs),
}

fn parse_metric(s: &str) -> Result<Metric> {
    s.trim().parse()
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    /// smooth, components or random
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rot_mode: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    components: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SynthParams {
    frames: usize,
    points: usize,
    rank: usize,
    rot_mode: String,
    components: usize,
    noise: f64,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            frames: 2048,
            points: 15,
            rank: 3,
            rot_mode: "smooth".into(),
            components: 1,
            noise: 0.0,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seq_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    steps: Option<usize>,
    /// Comma-separated decay steps; default 40% and 80% of --steps.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    decay_at: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// standard or tiny
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    width: Option<String>,
    /// Global gradient-norm ceiling.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    clip_norm: Option<f64>,
    /// full, train or test
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Line-delimited JSON log; default `<out>.log.jsonl`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    log: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainParams {
    data: Option<PathBuf>,
    seq_len: usize,
    alpha: f64,
    lambda: f64,
    m: usize,
    lr: f64,
    steps: usize,
    decay_at: Option<Vec<usize>>,
    seed: u64,
    width: String,
    clip_norm: Option<f64>,
    split: String,
    train_fraction: f64,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
}

impl Default for TrainParams {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: None,
            seq_len: t.seq_len,
            alpha: t.weights.alpha,
            lambda: t.weights.lambda,
            m: t.weights.m_samples,
            lr: t.lr,
            steps: t.total_steps,
            decay_at: None,
            seed: t.seed,
            width: "standard".into(),
            clip_norm: t.clip_norm,
            split: "train".into(),
            train_fraction: 0.8,
            out: None,
            log: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// normal, shuffle, reverse or single_frame
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[arg(long, value_delimiter = ',', value_parser = parse_metric)]
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<Vec<Metric>>,
    /// Keep the better of each prediction and its depth flip.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    flip: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seq_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalParams {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    mode: String,
    metrics: Vec<Metric>,
    flip: bool,
    seq_len: Option<usize>,
    split: String,
    train_fraction: f64,
    seed: u64,
    out: Option<PathBuf>,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            ckpt: None,
            data: None,
            mode: "normal".into(),
            metrics: Metric::ALL.to_vec(),
            flip: false,
            seq_len: None,
            split: "test".into(),
            train_fraction: 0.8,
            seed: 0,
            out: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    op: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GradcheckParams {
    op: Option<String>,
    trials: usize,
    seed: u64,
}

impl Default for GradcheckParams {
    fn default() -> Self {
        Self {
            op: None,
            trials: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TheoremArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    rank: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    points: Option<usize>,
    /// One or more component counts, comma-separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    components: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    trials: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Summary table path.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TheoremParams {
    rank: usize,
    frames: usize,
    points: usize,
    components: Vec<usize>,
    trials: usize,
    tol: f64,
    seed: u64,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
}

impl Default for TheoremParams {
    fn default() -> Self {
        Self {
            rank: 3,
            frames: 60,
            points: 20,
            components: (1..=9).collect(),
            trials: 100,
            tol: 1e-8,
            seed: 0,
            out: None,
            csv: None,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    lengths: Option<Vec<usize>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    #[serde(skip_serializing_if = "Option::is_none")]
    flip: Option<bool>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    train_fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepParams {
    ckpt: Option<PathBuf>,
    data: Option<PathBuf>,
    lengths: Vec<usize>,
    flip: bool,
    split: String,
    train_fraction: f64,
    out: Option<PathBuf>,
}

impl Default for SweepParams {
    fn default() -> Self {
        Self {
            ckpt: None,
            data: None,
            lengths: vec![1, 4, 8, 16, 32],
            flip: true,
            split: "test".into(),
            train_fraction: 0.8,
            out: None,
        }
    }
}

/// Overlays explicitly passed flags on the config file's object.
fn resolve<A: Serialize, P: DeserializeOwned>(file: &Option<Value>, args: &A) -> Result<P> {
    let mut merged = match file {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => {
            return Err(Error::InvalidArgument(
                "config file must hold a JSON object".into(),
            ))
        }
        None => Map::new(),
    };
    if let Value::Object(flags) = serde_json::to_value(args)? {
        merged.extend(flags);
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Error::InvalidArgument(format!("config: {e}")))
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::InvalidArgument(format!("--{flag} is required")))
}

fn select_split(d: Dataset, split: &str, fraction: f64) -> Result<Dataset> {
    match split {
        "full" => Ok(d),
        "train" => Ok(split_dataset(&d, fraction, 0)?.0),
        "test" => Ok(split_dataset(&d, fraction, 0)?.1),
        other => Err(Error::InvalidArgument(format!(
            "unknown split {other:?} (full, train, test)"
        ))),
    }
}

fn write_json(path: &Option<PathBuf>, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn run_synth(file: &Option<Value>, a: &SynthArgs) -> Result<i32> {
    let p: SynthParams = resolve(file, a)?;
    let out = required(&p.out, "out")?;
    let spec = SyntheticSpec {
        frames: p.frames,
        points: p.points,
        rank: p.rank,
        rotation_mode: p.rot_mode.parse::<RotationMode>()?,
        components: p.components,
        noise_sigma: p.noise,
        seed: p.seed,
    };
    let d = synth_sequence(&spec)?;
    let m = save_dataset(out, &d, Some(p.seed))?;
    eprintln!(
        "wrote {} frames x {} points to {}",
        m.frames,
        m.points,
        out.display()
    );
    Ok(EXIT_OK)
}

fn run_train(file: &Option<Value>, a: &TrainArgs) -> Result<i32> {
    let p: TrainParams = resolve(file, a)?;
    let out = required(&p.out, "out")?;
    let (d, _) = load_dataset(required(&p.data, "data")?)?;
    let d = select_split(d, &p.split, p.train_fraction)?;
    let cfg = TrainConfig {
        seq_len: p.seq_len,
        lr: p.lr,
        decay_steps: p.decay_at,
        total_steps: p.steps,
        weights: LossWeights {
            alpha: p.alpha,
            lambda: p.lambda,
            m_samples: p.m,
        },
        seed: p.seed,
        width: p.width.parse::<Width>()?,
        clip_norm: p.clip_norm,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let log_path = p.log.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.jsonl");
        PathBuf::from(s)
    });
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let mut io_err = None;
    let result = train(&d, &cfg, &mut |r| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, r)
                .map_err(Error::from)
                .and_then(|_| Ok(writeln!(log)?))
            {
                io_err = Some(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e);
    }
    let run = result?;
    save_checkpoint(out, &run.checkpoint)?;
    if let Some(last) = run.log.last() {
        eprintln!(
            "step {} total {:.6e}; checkpoint {}",
            last.step,
            last.total,
            out.display()
        );
    }
    Ok(EXIT_OK)
}

fn run_eval(file: &Option<Value>, a: &EvalArgs) -> Result<i32> {
    let p: EvalParams = resolve(file, a)?;
    let ckpt = load_checkpoint(required(&p.ckpt, "ckpt")?)?;
    let (d, _) = load_dataset(required(&p.data, "data")?)?;
    let d = select_split(d, &p.split, p.train_fraction)?;
    let opts = EvalOptions {
        mode: p.mode.parse::<EvalMode>()?,
        metrics: p.metrics,
        flip: p.flip,
        seq_len: p.seq_len,
        seed: p.seed,
    };
    let report = evaluate(&ckpt.model()?, &d, &opts)?;
    for m in &report.metrics {
        eprintln!("{}: {:.6}", m.metric.name(), m.mean);
    }
    write_json(&p.out, &report)?;
    Ok(EXIT_OK)
}

fn run_gradcheck(file: &Option<Value>, a: &GradcheckArgs) -> Result<i32> {
    let p: GradcheckParams = resolve(file, a)?;
    if let Some(op) = &p.op {
        if !OP_NAMES.contains(&op.as_str()) {
            return Err(Error::InvalidArgument(format!(
                "unknown op {op:?}; expected one of {}",
                OP_NAMES.join(", ")
            )));
        }
    }
    let checks = op_suite(p.op.as_deref(), p.trials, p.seed)?;
    let mut failed = 0;
    for c in &checks {
        println!(
            "{} {:<14} trials {:>3} max rel err {:.3e} (tol {:.0e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.trials,
            c.max_rel_error,
            c.tolerance
        );
        failed += usize::from(!c.passed);
    }
    Ok(if failed == 0 {
        EXIT_OK
    } else {
        EXIT_VALIDATION
    })
}

fn run_theorem(file: &Option<Value>, a: &TheoremArgs) -> Result<i32> {
    let p: TheoremParams = resolve(file, a)?;
    let reports = p
        .components
        .iter()
        .map(|&s| theorem1_experiment(p.rank, p.frames, p.points, s, p.trials, p.tol, p.seed))
        .collect::<Result<Vec<_>>>()?;
    let csv = summary_csv(&reports);
    match &p.csv {
        Some(path) => fs::write(path, &csv)?,
        None => eprint!("{csv}"),
    }
    write_json(&p.out, &reports)?;
    let violations: usize = reports.iter().map(|r| r.violations).sum();
    Ok(if violations == 0 {
        EXIT_OK
    } else {
        EXIT_VALIDATION
    })
}

fn run_sweep(file: &Option<Value>, a: &SweepArgs) -> Result<i32> {
    let p: SweepParams = resolve(file, a)?;
    let ckpt = load_checkpoint(required(&p.ckpt, "ckpt")?)?;
    let (d, _) = load_dataset(required(&p.data, "data")?)?;
    let d = select_split(d, &p.split, p.train_fraction)?;
    let opts = EvalOptions {
        flip: p.flip,
        ..EvalOptions::default()
    };
    let rows = length_sweep(&ckpt.model()?, &d, &p.lengths, &opts)?;
    let csv = sweep_csv(&rows);
    match &p.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(EXIT_OK)
}

/// Exit code for an error: 1 for bad input, 2 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArgument(_)
        | Error::Parse { .. }
        | Error::SizeConflict(_)
        | Error::ShapeMismatch { .. }
        | Error::SequenceTooLong { .. }
        | Error::Checkpoint(_)
        | Error::Json(_) => EXIT_VALIDATION,
        Error::NonScalarLoss(_) | Error::SvdFailure { .. } | Error::NonFinite(_) | Error::Io(_) => {
            EXIT_RUNTIME
        }
    }
}

pub fn execute(cli: &Cli) -> Result<i32> {
    let file = match &cli.config {
        Some(path) => Some(serde_json::from_str::<Value>(&fs::read_to_string(path)?)?),
        None => None,
    };
    match &cli.command {
        Command::Synth(a) => run_synth(&file, a),
        Command::Train(a) => run_train(&file, a),
        Command::Eval(a) => run_eval(&file, a),
        Command::Gradcheck(a) => run_gradcheck(&file, a),
        Command::VerifyTheorem(a) => run_theorem(&file, a),
        Command::LengthSweep(a) => run_sweep(&file, a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
