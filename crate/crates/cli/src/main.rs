//! `qutelab`: train models and run the calibration, drift, and failure
//! experiments from a JSON config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qutelab::data::save_idx;
use qutelab::experiment::{
    build_corrupted_sets, emit_report, load_data, parse_config, run_experiment, ExperimentConfig, ReportFormat, RunManifest, RunOptions, Task,
};
use qutelab::{Error, Result};

#[derive(Parser)]
#[command(name = "qutelab", version, about = "Single-pass ensembles for uncertainty in tiny CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train (or load cached) models for every seed.
    Train(RunArgs),
    /// Write corrupted copies of the test split as IDX files.
    Corrupt(RunArgs),
    /// Calibration metrics on the clean test split.
    EvalCalib(RunArgs),
    /// Accuracy-drop detection over corrupted streams.
    Drift(RunArgs),
    /// Misclassification and out-of-distribution detection.
    Failure(RunArgs),
    /// Aggregate a finished run into tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "QUTELAB_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing `manifest.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Where tables go; defaults to `<out>/report`.
    #[arg(long)]
    dest: Option<PathBuf>,
}

fn load(args: &RunArgs, tasks: Vec<Task>) -> Result<(ExperimentConfig, RunOptions)> {
    let mut cfg = parse_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    cfg.tasks = tasks;
    let opts = RunOptions {
        out_dir: args.out.clone(),
        jobs: args.jobs.max(1),
        ..RunOptions::new(&args.data_dir)
    };
    Ok((cfg, opts))
}

fn run(args: &RunArgs, tasks: Vec<Task>) -> Result<RunManifest> {
    let (cfg, opts) = load(args, tasks)?;
    let m = run_experiment(&cfg, &opts)?;
    for s in &m.seeds {
        let from = if s.cached { "cached" } else { "trained" };
        println!("seed {}: {} ({from})", s.seed, s.checkpoint.display());
        if let Some(t) = s.temperature {
            println!("  temperature {t:.4}");
        }
        if let Some(c) = &s.calibration {
            println!("  f1 {:.4}  brier {:.4}  nll {:.4}  ece {:.4}", c.f1, c.brier, c.nll, c.ece);
        }
        if let Some(d) = &s.drift {
            println!("  accuracy-drop auprc {:.4}", d.auprc);
        }
        if let Some(f) = &s.failure {
            println!(
                "  auroc correct|incorrect {:.4}  correct|ood {:.4}",
                f.id_correct_vs_incorrect, f.id_correct_vs_ood
            );
        }
    }
    Ok(m)
}

fn corrupt(args: &RunArgs) -> Result<()> {
    let (cfg, opts) = load(args, vec![])?;
    let out = opts.out_dir.unwrap_or_else(|| cfg.output_dir.clone()).join("corrupted");
    std::fs::create_dir_all(&out)?;
    let data = load_data(&cfg, &opts.data_dir)?;
    for (name, ds) in build_corrupted_sets(&cfg, &data.test)? {
        let images = out.join(format!("{name}-images-idx3-ubyte"));
        save_idx(&ds, &images, out.join(format!("{name}-labels-idx1-ubyte")))?;
        println!("{}", images.display());
    }
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let manifest = RunManifest::load(&args.out)?;
    let format = match args.format {
        Format::Csv => ReportFormat::Csv,
        Format::Json => ReportFormat::Json,
    };
    let dest = args.dest.clone().unwrap_or_else(|| Path::new(&args.out).join("report"));
    for f in emit_report(&manifest, format, &dest)? {
        println!("{}", f.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => run(a, vec![]).map(drop),
        Command::Corrupt(a) => corrupt(a),
        Command::EvalCalib(a) => run(a, vec![Task::Calibration]).map(drop),
        Command::Drift(a) => run(a, vec![Task::Drift]).map(drop),
        Command::Failure(a) => run(a, vec![Task::Failure]).map(drop),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    e.exit_code().clamp(0, 255) as u8
}
