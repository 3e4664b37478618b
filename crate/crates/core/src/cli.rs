//! Command-line entry point.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{self, CheckpointHeader};
use crate::config::RunConfig;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::experiment::{self, ExperimentKind};
use crate::fusion::FusionModel;
use crate::gradcheck;
use crate::metrics::MetricReport;
use crate::prompts::PromptKind;
use crate::tensor::{Float, Precision};

pub const RESOLVED: &str = "config.resolved";
pub const METRICS: &str = "metrics.csv";
pub const DIAGNOSTICS: &str = "diagnostics.csv";
pub const CONTINGENCY: &str = "contingency.csv";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const ROUTES: &str = "routes.csv";
pub const EVAL: &str = "eval.csv";
pub const REPORT: &str = "report.txt";
pub const GRADCHECK: &str = "gradcheck.csv";

/// Relative error above which `gradcheck` fails.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "mope", version, about = "Mixture-of-prompt-experts fusion on synthetic bimodal tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct RunFlags {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `precision` (32 or 64).
    #[arg(long, value_parser = ["32", "64"])]
    pub precision: Option<String>,
}

#[derive(Debug, Args, Clone)]
pub struct CheckpointFlags {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory; defaults to `<command>-<split>` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model, save the checkpoint and logs.
    Train(RunFlags),
    /// Evaluate a checkpoint on a split.
    Eval(CheckpointFlags),
    /// Finite-difference check of the full pipeline at 64-bit.
    Gradcheck(RunFlags),
    /// Run an experiment grid: ablation, k_vs_l, shots, dense_vs_sparse, importance_on_off.
    Sweep {
        experiment: String,
        #[command(flatten)]
        flags: RunFlags,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// All seven prompt-type subsets plus unimodal baselines.
    Ablate {
        #[command(flatten)]
        flags: RunFlags,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Per-instance routing, expert-group contingency and mutual information.
    Routes(CheckpointFlags),
}

/// Parses arguments, runs, and maps the outcome to a process exit code.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(flags) => cmd_train(&resolve(&flags)?),
        Command::Eval(flags) => cmd_eval(&flags),
        Command::Gradcheck(flags) => cmd_gradcheck(&resolve(&flags)?).map(|_| ()),
        Command::Sweep {
            experiment,
            flags,
            seeds,
        } => cmd_sweep(experiment.parse()?, &resolve(&flags)?, &seeds),
        Command::Ablate { flags, seeds } => cmd_sweep(ExperimentKind::Ablation, &resolve(&flags)?, &seeds),
        Command::Routes(flags) => cmd_routes(&flags),
    }
}

/// Config file plus command-line overrides, validated.
pub fn resolve(flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &flags.out {
        cfg.out_dir = out.display().to_string();
    }
    if let Some(p) = &flags.precision {
        cfg.precision = p.parse().map_err(|_| Error::Config(format!("precision: bad value {p}")))?;
    }
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn prepare_out(dir: &Path, resolved: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RESOLVED);
    fs::write(&path, resolved).map_err(|e| Error::io(&path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct EvalRow<'a> {
    split: &'a str,
    instances: usize,
    accuracy: f64,
    f1_macro: f64,
    f1_micro: f64,
}

fn eval_row<'a>(split: &'a str, r: &MetricReport) -> EvalRow<'a> {
    EvalRow {
        split,
        instances: r.instances,
        accuracy: r.accuracy,
        f1_macro: r.f1_macro,
        f1_micro: r.f1_micro,
    }
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    match cfg.precision {
        64 => train_as::<f64>(cfg),
        _ => train_as::<f32>(cfg),
    }
}

fn train_as<T: Float>(cfg: &RunConfig) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    let resolved = cfg.to_toml();
    prepare_out(&out, &resolved)?;
    let data = Dataset::generate(&cfg.task()?)?;
    let outcome = experiment::train::<T>(cfg, &data)?;
    let model = outcome.model;
    experiment::write_csv(&out.join(METRICS), &outcome.log)?;
    experiment::write_csv(&out.join(DIAGNOSTICS), &outcome.diagnostics)?;
    checkpoint::save(&model, &resolved, &out.join(CHECKPOINT))?;
    let val = model.evaluate(&data.val, cfg.eval_batch_size)?;
    let test = model.evaluate(&data.test, cfg.eval_batch_size)?;
    experiment::write_csv(&out.join(EVAL), &[eval_row("val", &val), eval_row("test", &test)])?;
    write_text(&out.join(REPORT), &test.render())?;
    if cfg.prompts.contains(&PromptKind::Dynamic) && !model.layers().is_empty() {
        let dump = experiment::diagnose(&model, &data.test, cfg.eval_batch_size)?;
        experiment::write_csv(&out.join(CONTINGENCY), &dump.contingency_rows(dump.last_layer().layer))?;
    }
    let counts = model.count_params();
    println!(
        "trained {} steps in {:.1}s; trainable {} / frozen {} params",
        outcome.log.len(),
        outcome.wall_clock_s,
        counts.trainable,
        counts.frozen
    );
    println!("test {}", test.render());
    Ok(())
}

struct Loaded<T> {
    model: FusionModel<T>,
    run: RunConfig,
    data: Dataset,
}

fn load_checkpoint<T: Float>(path: &Path, header: &CheckpointHeader) -> Result<Loaded<T>> {
    let (model, _) = checkpoint::load::<T>(path)?;
    let run = RunConfig::from_toml(&header.meta)
        .map_err(|e| Error::Checkpoint(format!("stored run config is unreadable: {e}")))?;
    let data = Dataset::generate(&run.task()?)?;
    Ok(Loaded { model, run, data })
}

fn checkpoint_out(flags: &CheckpointFlags, command: &str) -> PathBuf {
    flags.out.clone().unwrap_or_else(|| {
        flags
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default()
            .join(format!("{command}-{}", flags.split))
    })
}

pub fn cmd_eval(flags: &CheckpointFlags) -> Result<()> {
    let split: Split = flags.split.parse()?;
    let header = checkpoint::read_header(&flags.checkpoint)?;
    match header.precision {
        Precision::F64 => eval_as::<f64>(flags, split, &header),
        Precision::F32 => eval_as::<f32>(flags, split, &header),
    }
}

fn eval_as<T: Float>(flags: &CheckpointFlags, split: Split, header: &CheckpointHeader) -> Result<()> {
    let loaded = load_checkpoint::<T>(&flags.checkpoint, header)?;
    let out = checkpoint_out(flags, "eval");
    prepare_out(&out, &loaded.run.to_toml())?;
    let report = loaded
        .model
        .evaluate(loaded.data.split(split), loaded.run.eval_batch_size)?;
    experiment::write_csv(&out.join(METRICS), &[eval_row(&flags.split, &report)])?;
    let text = report.render();
    write_text(&out.join(REPORT), &text)?;
    print!("{text}");
    Ok(())
}

pub fn cmd_routes(flags: &CheckpointFlags) -> Result<()> {
    let split: Split = flags.split.parse()?;
    let header = checkpoint::read_header(&flags.checkpoint)?;
    if !header.fusion.prompt.has(PromptKind::Dynamic) {
        return Err(Error::Config("routes needs a checkpoint with the dynamic prompt enabled".into()));
    }
    match header.precision {
        Precision::F64 => routes_as::<f64>(flags, split, &header),
        Precision::F32 => routes_as::<f32>(flags, split, &header),
    }
}

fn routes_as<T: Float>(flags: &CheckpointFlags, split: Split, header: &CheckpointHeader) -> Result<()> {
    let loaded = load_checkpoint::<T>(&flags.checkpoint, header)?;
    let out = checkpoint_out(flags, "routes");
    prepare_out(&out, &loaded.run.to_toml())?;
    let instances = loaded.data.split(split);
    let dump = experiment::diagnose(&loaded.model, instances, loaded.run.eval_batch_size)?;
    let step = loaded.run.total_steps(loaded.data.train.len());
    let mut rows = Vec::new();
    for l in &dump.layers {
        for (expert_id, &importance) in l.importance.importance.iter().enumerate() {
            rows.push(experiment::DiagRow {
                step,
                layer: l.layer,
                expert_id,
                importance,
                cv: l.importance.cv,
                entropy_bits: l.mean_entropy_bits,
            });
        }
    }
    experiment::write_csv(&out.join(DIAGNOSTICS), &rows)?;
    experiment::write_csv(&out.join(ROUTES), &dump.routes)?;
    experiment::write_csv(&out.join(CONTINGENCY), &dump.contingency_rows(dump.last_layer().layer))?;
    for l in &dump.layers {
        println!(
            "layer {}: cv {:.4}, mean entropy {:.4} bits, I(expert; group) {:.4} bits",
            l.layer, l.importance.cv, l.mean_entropy_bits, l.mutual_information_bits
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct GradRow<'a> {
    param: &'a str,
    index: usize,
    analytic: f64,
    numeric: f64,
    rel_error: f64,
}

/// Runs the pipeline gradient check and returns its report; fails with a
/// numeric error when any sample exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<gradcheck::PipelineReport> {
    let cfg = RunConfig {
        precision: 64,
        noise_std: 0.0,
        ..cfg.clone()
    };
    let out = PathBuf::from(&cfg.out_dir);
    prepare_out(&out, &cfg.to_toml())?;
    let data = Dataset::generate(&cfg.task()?)?;
    let batch: Vec<_> = data.train.iter().take(cfg.gradcheck_batch).cloned().collect();
    let report = gradcheck::check_pipeline(
        &cfg.fusion()?,
        &batch,
        cfg.gradcheck_params,
        cfg.gradcheck_step,
        cfg.lambda_imp,
        cfg.gamma,
        cfg.seed,
    )?;
    let rows: Vec<GradRow> = report
        .samples
        .iter()
        .map(|s| GradRow {
            param: &s.param,
            index: s.index,
            analytic: s.analytic,
            numeric: s.numeric,
            rel_error: s.rel_error,
        })
        .collect();
    experiment::write_csv(&out.join(GRADCHECK), &rows)?;
    for (family, n, max) in report.by_family() {
        println!("{family:<12} {n:>4} samples  max rel err {max:.3e}");
    }
    println!(
        "checked {} parameters, max relative error {:.3e} (tolerance {GRADCHECK_TOLERANCE:e})",
        report.samples.len(),
        report.max_rel_error
    );
    if report.max_rel_error.is_nan() || report.max_rel_error > GRADCHECK_TOLERANCE {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e}",
            report.max_rel_error
        )));
    }
    Ok(report)
}

pub fn cmd_sweep(kind: ExperimentKind, cfg: &RunConfig, seeds: &[u64]) -> Result<()> {
    let out = PathBuf::from(&cfg.out_dir);
    prepare_out(&out, &cfg.to_toml())?;
    let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
    let progress = |r: &experiment::CellResult| {
        println!(
            "{:<24} acc {:.4}  f1_macro {:.4}  seq {:>3}  trainable {:>7}  {:.1}s",
            r.row.cell_id, r.row.accuracy, r.row.f1_macro, r.row.main_seq_len, r.row.trainable_params, r.row.wall_clock_s
        )
    };
    match cfg.precision {
        64 => experiment::run_experiment::<f64>(kind, cfg, &seeds, Some(&out), progress)?,
        _ => experiment::run_experiment::<f32>(kind, cfg, &seeds, Some(&out), progress)?,
    };
    Ok(())
}
