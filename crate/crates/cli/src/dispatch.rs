//! The `resq` subcommand surface. Every subcommand reads plain files and
//! writes plain files atomically; anything that fails is reported as a
//! single stderr line, and the exit code states the failure class (1
//! usage, 2 validation, 3 numeric divergence).
//!
//! Two environment variables participate: `RESQ_SEED` seeds any subcommand
//! that takes `--seed` (the flag wins over the variable, the variable over
//! the config file), and `RESQ_OUT_DIR` redirects the directory-writing
//! subcommands the same way.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use resq_core::metrics::{usage_histogram, MetricsReport, Provenance};
use resq_core::{LatentSequence, TokenGrid};
use resq_harness::{
    convergence_experiment, gen_synthetic, interleave_with_state, joint_train_with_state,
    vq_vs_rq_experiment, ComparisonBudget, RunReport, StageUsageRecord,
};

use crate::archive::{load_codebooks, save_codebooks, LoadedArchive};
use crate::config::load_config;
use crate::ingest::{
    read_features_raw_f32, read_features_text, read_token_grid, render_features_text,
    render_token_grid, FeatureMatrix,
};
use crate::{io_error, write_atomic, CliError, Result};

pub const SEED_ENV: &str = "RESQ_SEED";
pub const OUT_DIR_ENV: &str = "RESQ_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "resq",
    version,
    about = "Residual vector quantization: training, quantization, and usage metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the tokenizer and encoder on synthetic data, writing reports
    /// and a codebook archive to the output directory.
    Train(TrainArgs),
    /// Quantize a feature matrix with a saved codebook archive.
    Quantize(QuantizeArgs),
    /// Compute per-stage usage metrics for a token grid.
    Metrics(MetricsArgs),
    /// Drive codebook averaging on a constant stream and measure its
    /// distance from the closed-form limit.
    ConvergenceCheck(ConvergenceArgs),
    /// Compare a single-stage quantizer against a residual one at the
    /// same total code budget.
    CompareVqRq(CompareArgs),
    /// Generate a synthetic dataset as text files.
    GenData(GenDataArgs),
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Run configuration (TOML); built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; beats RESQ_SEED, which beats the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats RESQ_OUT_DIR. Defaults to "resq-run".
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum FeatureFormat {
    /// Whitespace-delimited text, optional header line.
    Text,
    /// Raw little-endian 32-bit floats with declared --rows and --cols.
    RawF32,
}

#[derive(clap::Args)]
struct QuantizeArgs {
    /// Codebook archive to quantize with.
    #[arg(long)]
    archive: PathBuf,
    /// Feature matrix; one row per position, one column per dimension.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value_t = FeatureFormat::Text)]
    format: FeatureFormat,
    /// Row count of a raw-f32 matrix.
    #[arg(long, required_if_eq("format", "raw-f32"))]
    rows: Option<usize>,
    /// Column count of a raw-f32 matrix.
    #[arg(long, required_if_eq("format", "raw-f32"))]
    cols: Option<usize>,
    /// Write the token grid here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct MetricsArgs {
    /// Token grid text file, as written by `quantize`.
    #[arg(long)]
    grid: PathBuf,
    /// Archive supplying the per-stage codebook sizes.
    #[arg(long)]
    archive: PathBuf,
    /// Write the TOML report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ConvergenceArgs {
    /// Decay factor of the averaging recursion.
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    /// Smoothing constant of the count normalizer.
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Constant-stream steps to run.
    #[arg(long, default_value_t = 5000)]
    steps: u64,
    #[arg(long, default_value_t = 16)]
    codebook_size: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Seed for the codebook and stream draw; beats RESQ_SEED.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the TOML report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct CompareArgs {
    /// Number of consecutive seeds to run, starting at the run seed.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Base seed; beats RESQ_SEED, which beats the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Run configuration supplying the schedule and dataset shape.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Codebook size of the single-stage arm.
    #[arg(long, default_value_t = 64)]
    vq_codes: usize,
    /// Stage count of the residual arm.
    #[arg(long, default_value_t = 4)]
    rq_stages: usize,
    /// Codes per stage of the residual arm.
    #[arg(long, default_value_t = 16)]
    rq_codes: usize,
    /// Write the TOML report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Run configuration; only its dataset table is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the dataset seed; beats RESQ_SEED, which beats the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; beats RESQ_OUT_DIR. Defaults to "resq-data".
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

/// Parses `argv` and runs the selected subcommand, returning the process
/// exit code. Help and version requests print to stdout and exit 0; all
/// failures print one `error: <class>: <detail>` line to stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            if matches!(
                err.kind(),
                ErrorKind::DisplayHelp
                    | ErrorKind::DisplayVersion
                    | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand
            ) {
                print!("{err}");
                return 0;
            }
            let text = err.to_string();
            let usage = CliError::Usage(
                text.strip_prefix("error: ").unwrap_or(&text).to_string(),
            );
            eprintln!("error: {}", usage.one_line());
            return usage.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {}", err.one_line());
            err.exit_code()
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => train(args),
        Command::Quantize(args) => quantize(args),
        Command::Metrics(args) => metrics(args),
        Command::ConvergenceCheck(args) => convergence_check(args),
        Command::CompareVqRq(args) => compare_vq_rq(args),
        Command::GenData(args) => gen_data(args),
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(text) => text.trim().parse().map(Some).map_err(|_| {
            CliError::Validation(format!(
                "{SEED_ENV} must be an unsigned integer, got {text:?}"
            ))
        }),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(std::env::VarError::NotUnicode(_)) => Err(CliError::Validation(format!(
            "{SEED_ENV} is not valid UTF-8"
        ))),
    }
}

/// Seed precedence: explicit flag, then `RESQ_SEED`, then whatever the
/// caller's fallback is (usually the config file).
fn effective_seed(flag: Option<u64>) -> Result<Option<u64>> {
    match flag {
        Some(seed) => Ok(Some(seed)),
        None => env_seed(),
    }
}

/// Output-directory precedence: explicit flag, then `RESQ_OUT_DIR`, then
/// the subcommand's default.
fn effective_out_dir(flag: Option<PathBuf>, default: &str) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(default))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value)
        .map_err(|err| CliError::Validation(format!("serializing report: {err}")))
}

fn write_text(path: &Path, text: &str, action: &'static str) -> Result<()> {
    write_atomic(path, text.as_bytes()).map_err(io_error(action, path))
}

fn emit(text: &str, out: Option<&Path>, action: &'static str) -> Result<()> {
    match out {
        Some(path) => write_text(path, text, action),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// One text line per training epoch, in phase order, with "-" marking
/// losses the phase does not compute.
fn render_run_log(report: &RunReport) -> String {
    let mut out = String::new();
    out.push_str("# phase iteration epoch prediction quantization alignment combined\n");
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| x.to_string());
    for phase in &report.phases {
        for epoch in &phase.epochs {
            writeln!(
                out,
                "{} {} {} {} {} {} {}",
                phase.kind,
                phase.iteration,
                epoch.epoch,
                cell(epoch.prediction_loss),
                cell(epoch.quantization_loss),
                cell(epoch.alignment_loss),
                cell(epoch.combined_loss),
            )
            .expect("writing to a string cannot fail");
        }
    }
    out
}

fn train(args: TrainArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let cfg = load_config(args.config.as_deref(), seed)?;
    cfg.validate()?;
    let out_dir = effective_out_dir(args.out_dir, "resq-run");
    std::fs::create_dir_all(&out_dir).map_err(io_error("creating output directory", &out_dir))?;

    let harness_cfg = cfg.to_harness_config()?;
    let data_spec = cfg.dataset_spec();
    let (report, state) = if cfg.joint_mode {
        joint_train_with_state(&data_spec, &harness_cfg)?
    } else {
        interleave_with_state(&data_spec, &harness_cfg)?
    };

    write_text(
        &out_dir.join("config.toml"),
        &cfg.to_toml(),
        "writing config echo",
    )?;
    write_text(
        &out_dir.join("run_report.toml"),
        &to_toml(&report)?,
        "writing run report",
    )?;
    write_text(
        &out_dir.join("run.log"),
        &render_run_log(&report),
        "writing run log",
    )?;
    save_codebooks(
        &out_dir.join("codebooks.brqc"),
        &state.quantizer,
        Some(&state.ema),
    )?;
    println!(
        "trained: accuracy {:.6}, quantization mse {:.6e}, outputs in {}",
        report.final_accuracy,
        report.final_quantization_mse,
        out_dir.display()
    );
    Ok(())
}

/// Quantizes at the archive's own float width; a 32-bit archive narrows
/// the input first so its tokens match a native 32-bit pipeline.
pub fn quantize_features(archive: &LoadedArchive, features: &FeatureMatrix) -> Result<TokenGrid> {
    if features.cols != archive.dim() {
        return Err(CliError::Validation(format!(
            "features have {} columns, the archive quantizes dimension {}",
            features.cols,
            archive.dim()
        )));
    }
    match archive {
        LoadedArchive::F64 { quantizer, .. } => {
            let z = LatentSequence::from_flat(features.cols, features.data.clone())?;
            Ok(quantizer.quantize(&z)?.token_grid().clone())
        }
        LoadedArchive::F32 { quantizer, .. } => {
            let data: Vec<f32> = features.data.iter().map(|&x| x as f32).collect();
            let z = LatentSequence::from_flat(features.cols, data)?;
            Ok(quantizer.quantize(&z)?.token_grid().clone())
        }
    }
}

fn quantize(args: QuantizeArgs) -> Result<()> {
    let archive = load_codebooks(&args.archive)?;
    let features = match args.format {
        FeatureFormat::Text => read_features_text(&args.features)?,
        FeatureFormat::RawF32 => {
            let rows = args.rows.expect("clap requires --rows for raw-f32");
            let cols = args.cols.expect("clap requires --cols for raw-f32");
            read_features_raw_f32(&args.features, rows, cols)?
        }
    };
    let grid = quantize_features(&archive, &features)?;
    emit(
        &render_token_grid(&grid),
        args.out.as_deref(),
        "writing token grid",
    )
}

/// The `metrics` subcommand's payload: provenance plus one record per
/// stage, serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsOutput {
    pub provenance: String,
    pub stages: Vec<StageUsageRecord>,
}

/// Histograms the grid against the stage sizes and derives the usage
/// metrics. Shared by the subcommand and the pipeline tests.
pub fn usage_metrics(grid: &TokenGrid, stage_sizes: &[usize]) -> Result<MetricsOutput> {
    let stats = usage_histogram::<f64>(grid, stage_sizes)?;
    let report = MetricsReport::from_stats(&stats, Provenance::PostTraining)?;
    Ok(MetricsOutput {
        provenance: report.provenance.as_str().to_string(),
        stages: report.stages.iter().map(StageUsageRecord::from).collect(),
    })
}

fn metrics(args: MetricsArgs) -> Result<()> {
    let archive = load_codebooks(&args.archive)?;
    let (positions, stages, tokens) = read_token_grid(&args.grid)?;
    let grid = TokenGrid::new(positions, stages, tokens)?;
    let output = usage_metrics(&grid, &archive.stage_sizes())?;
    emit(&to_toml(&output)?, args.out.as_deref(), "writing metrics")
}

fn convergence_check(args: ConvergenceArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?.unwrap_or(42);
    let report = convergence_experiment(
        args.codebook_size,
        args.dim,
        args.gamma,
        args.eps,
        args.steps,
        seed,
    )?;
    emit(
        &to_toml(&report)?,
        args.out.as_deref(),
        "writing convergence report",
    )
}

fn compare_vq_rq(args: CompareArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(CliError::Validation(
            "seeds: need at least one comparison seed".to_string(),
        ));
    }
    let seed = effective_seed(args.seed)?;
    let cfg = load_config(args.config.as_deref(), seed)?;
    cfg.validate()?;
    let budget = ComparisonBudget {
        vq_stage_sizes: vec![args.vq_codes],
        rq_stage_sizes: vec![args.rq_codes; args.rq_stages],
    };
    let base = cfg.to_harness_config()?;
    let spec = cfg.dataset_spec();
    let seeds: Vec<u64> = (0..args.seeds).map(|i| cfg.seed.wrapping_add(i)).collect();
    let report = vq_vs_rq_experiment(&spec, &budget, &base, &seeds)?;
    emit(
        &to_toml(&report)?,
        args.out.as_deref(),
        "writing comparison report",
    )
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let seed = effective_seed(args.seed)?;
    let cfg = load_config(args.config.as_deref(), seed)?;
    cfg.validate()?;
    let out_dir = effective_out_dir(args.out_dir, "resq-data");
    std::fs::create_dir_all(&out_dir).map_err(io_error("creating output directory", &out_dir))?;

    let spec = cfg.dataset_spec();
    let dataset = gen_synthetic(&spec)?;
    write_text(
        &out_dir.join("dataset.toml"),
        &to_toml(&spec)?,
        "writing dataset spec",
    )?;

    let mut labels = String::from("# sequence coarse-label fine-labels...\n");
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let matrix = FeatureMatrix {
            rows: spec.seq_len,
            cols: spec.feature_dim,
            data: seq.features.clone(),
        };
        write_text(
            &out_dir.join(format!("seq_{i:03}.txt")),
            &render_features_text(&matrix, "sequence features"),
            "writing sequence",
        )?;
        let fine: Vec<String> = seq.fine_labels.iter().map(usize::to_string).collect();
        writeln!(labels, "{i} {} {}", seq.coarse_label, fine.join(" "))
            .expect("writing to a string cannot fail");
    }
    write_text(&out_dir.join("labels.txt"), &labels, "writing labels")?;
    println!(
        "generated {} sequences in {}",
        dataset.sequences.len(),
        out_dir.display()
    );
    Ok(())
}
