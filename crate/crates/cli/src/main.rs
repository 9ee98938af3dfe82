use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gpe_core::gates::{run_gates, static_gates};
use gpe_core::replay::ReplayScheme;
use gpe_core::runner::{
    build_stream, export_results, export_sweep, load_config, run_experiment, run_sweep, ExperimentConfig,
    RunRecord, Variant, OUT_ROOT_ENV,
};
use gpe_core::streams::{text, TaskData};
use log::info;

#[derive(Parser)]
#[command(name = "gpe", version, about = "Domain-incremental learning with drift-constrained prototypes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration.
    Run(RunArgs),
    /// Run one configuration per value of a numeric field.
    Sweep(SweepArgs),
    /// Run the invariant gates; exits non-zero if any fails.
    Check(CheckArgs),
    /// Write the resolved config and the generated task stream.
    Export(ExportArgs),
}

#[derive(Args)]
struct Common {
    /// Configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to a folder under $GPE_OUT_ROOT (or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// gpe, lb (lower bound) or ub (upper bound).
    #[arg(long)]
    variant: Option<Variant>,
    /// Replay capacity; enables logit-matching replay unless a scheme is configured.
    #[arg(long)]
    buffer: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// Field to vary, e.g. gamma, k, lambda, learning_rate.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    values: Vec<f64>,
}

#[derive(Args)]
struct CheckArgs {
    /// Configuration trained by the determinism and stage-1 gates.
    #[arg(long, default_value = "configs/rmnist_md.cfg")]
    config: PathBuf,
    /// Truncate the training split for the training gates (0 keeps it whole).
    #[arg(long, default_value_t = 0)]
    train_limit: usize,
    /// Skip the gates that train models.
    #[arg(long)]
    no_training: bool,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.stream.seed = s;
    }
    if let Some(v) = common.variant {
        cfg.run.variant = v;
    }
    if let Some(n) = common.buffer {
        cfg.replay.capacity = n;
        if cfg.replay.scheme == ReplayScheme::None {
            cfg.replay.scheme = ReplayScheme::Der;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig, verb: &str) -> PathBuf {
    if let Some(o) = &common.out {
        return o.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    let stem = common
        .config
        .as_deref()
        .and_then(Path::file_stem)
        .map_or_else(|| "default".to_string(), |s| s.to_string_lossy().into_owned());
    root.join(format!("{stem}-{verb}-{}-s{}", cfg.run.variant, cfg.stream.seed))
}

fn report(record: &RunRecord) {
    println!("average metric: {:.4}", record.summary.average_metric);
    println!("final-stage metric: {:.4}", record.summary.final_metric);
    if let Some(v) = record.summary.stage1_domains_final {
        println!("final-stage AP on stage-1 domains: {v:.4}");
    }
    println!("wall clock: {:.1}s", record.summary.wall_seconds);
}

fn run(args: RunArgs) -> Result<ExitCode> {
    let cfg = resolve(&args.common)?;
    let dir = out_dir(&args.common, &cfg, "run");
    let record = run_experiment(&cfg)?;
    export_results(&record, &dir)?;
    report(&record);
    println!("results in {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn sweep(args: SweepArgs) -> Result<ExitCode> {
    let cfg = resolve(&args.common)?;
    let dir = out_dir(&args.common, &cfg, &format!("sweep-{}", args.axis));
    let records = run_sweep(&cfg, &args.axis, &args.values)?;
    let table = export_sweep(&args.axis, &args.values, &records, &dir)?;
    for (v, r) in args.values.iter().zip(&records) {
        println!("{} = {v}: average {:.4}", args.axis, r.summary.average_metric);
    }
    println!("table in {}", table.display());
    Ok(ExitCode::SUCCESS)
}

fn check(args: CheckArgs) -> Result<ExitCode> {
    let mut results = static_gates();
    if !args.no_training {
        let mut cfg = load_config(&args.config).with_context(|| format!("loading {}", args.config.display()))?;
        if args.train_limit > 0 {
            cfg.stream.train_limit = args.train_limit;
        }
        info!("training gates on {}", args.config.display());
        results.extend(run_gates(&cfg));
    }
    let failed = results.iter().filter(|g| !g.passed).count();
    for g in &results {
        println!("{g}");
    }
    println!("{} of {} gates passed", results.len() - failed, results.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn export(args: ExportArgs) -> Result<ExitCode> {
    let cfg = resolve(&args.common)?;
    let dir = out_dir(&args.common, &cfg, "export");
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let stream = build_stream(&cfg)?;
    std::fs::write(dir.join("config.toml"), cfg.to_text())?;
    let mut tasks = String::from("task,examples,angle\n");
    for t in &stream.tasks {
        let angle = t.angle().map_or_else(String::new, |a| a.to_string());
        tasks.push_str(&format!("{},{},{angle}\n", t.index, t.example_count()));
    }
    std::fs::write(dir.join("tasks.csv"), tasks)?;
    if matches!(stream.tasks.first().map(|t| &t.data), Some(TaskData::Sequences(_))) {
        std::fs::write(dir.join("samples.txt"), text::stream_records(&stream))?;
    }
    if stream.is_empty() {
        bail!("stream has no tasks");
    }
    println!("stream of {} tasks written to {}", stream.len(), dir.display());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(a) => run(a),
        Command::Sweep(a) => sweep(a),
        Command::Check(a) => check(a),
        Command::Export(a) => export(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
