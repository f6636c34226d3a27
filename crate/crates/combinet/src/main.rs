use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use combinet::config::ExperimentConfig;
use combinet::export::read_json;
use combinet::report::RunReport;
use combinet::runner::{run_experiment, write_report};
use combinet::{Error, Result};

#[derive(Parser)]
#[command(name = "combinet", version, about = "Extend trained networks to new concepts by conceptual expansion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base classifier.
    TrainBase(RunArgs),
    /// Add one class to a trained classifier.
    ExpandClass(RunArgs),
    /// Add several classes at once.
    ExpandMulti(RunArgs),
    /// Standard, transfer or zero-shot baseline.
    Baseline(RunArgs),
    /// Train a source GAN.
    GanTrain(RunArgs),
    /// Combine source GANs into a generator for a novel concept.
    Combigan(RunArgs),
    /// Score a stored classifier or generator.
    Evaluate(RunArgs),
    /// Check a finished run and rewrite its report.md.
    Report {
        /// Run directory holding report.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Master seed, overriding the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory, overriding the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long)]
    workers: Option<usize>,
}

fn run(verb: &str, args: &RunArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if cfg.experiment.verb() != verb {
        return Err(Error::Config(format!(
            "{} describes a {} experiment, not {verb}",
            args.config.display(),
            cfg.experiment.verb()
        )));
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if args.workers.is_some() {
        cfg.workers = args.workers;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{verb}-{}", cfg.seed)));
    cfg.out = Some(out.clone());
    let report = run_experiment(&cfg, &out)?;
    print!("{}", report.to_markdown());
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn report(dir: &Path) -> Result<()> {
    let report: RunReport = read_json(&dir.join("report.json"))?;
    report.verify(dir)?;
    write_report(&report, dir)?;
    print!("{}", report.to_markdown());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::TrainBase(a) => run("train-base", a),
        Command::ExpandClass(a) => run("expand-class", a),
        Command::ExpandMulti(a) => run("expand-multi", a),
        Command::Baseline(a) => run("baseline", a),
        Command::GanTrain(a) => run("gan-train", a),
        Command::Combigan(a) => run("combigan", a),
        Command::Evaluate(a) => run("evaluate", a),
        Command::Report { out } => report(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
