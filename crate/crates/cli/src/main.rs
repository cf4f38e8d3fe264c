use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use skinbias_core::harness::{run_pipeline, run_step, RunConfig, RunLedger, Step, CONFIG_HELP};
use skinbias_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "skinbias",
    version,
    about = "Sex-ratio robustness experiments for skin cancer classifiers",
    after_long_help = CONFIG_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check metadata against the image directory and suggest corrections
    Audit(Common),
    /// Ingest the cohort and extract features (cached in features.csv)
    Extract(Common),
    /// Build test sets and training samples (split_plan.json)
    Split(Common),
    /// Train one logistic regression per training sample
    TrainLr(Common),
    /// Per-sex metrics for every prediction file, including external ones
    Evaluate(Common),
    /// Slope t-tests and Mann-Whitney U tests over metrics.csv
    Stats(Common),
    /// Plots and the text report
    Report(Common),
    /// Every step in order
    All(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// INI config file; see `--help` for keys
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    metadata: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    masks: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    #[arg(long)]
    corrections: Option<PathBuf>,
    /// Extra prediction directories (repeatable)
    #[arg(long = "predictions", value_name = "DIR")]
    predictions: Vec<PathBuf>,
    /// Master seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, short = 'j')]
    workers: Option<usize>,
    /// Female ratios, comma separated
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    testsets: Option<usize>,
    /// Use the fixed reference feature list instead of per-sample selection
    #[arg(long)]
    freeze_reference_features: bool,
}

impl Common {
    fn config(&self) -> skinbias_core::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        c.apply_env(|k| std::env::var(k).ok());
        if let Some(p) = &self.metadata {
            c.metadata = p.clone();
        }
        if let Some(p) = &self.images {
            c.images = p.clone();
        }
        if let Some(p) = &self.masks {
            c.masks = p.clone();
        }
        if let Some(p) = &self.output {
            c.output = p.clone();
        }
        if let Some(p) = &self.corrections {
            c.corrections = Some(p.clone());
        }
        c.extra_predictions.extend(self.predictions.iter().cloned());
        if let Some(s) = self.seed {
            c.master_seed = s;
        }
        if self.workers.is_some() {
            c.workers = self.workers;
        }
        if let Some(r) = &self.ratios {
            c.split.ratios = r.clone();
        }
        if let Some(r) = self.reps {
            c.split.reps = r;
        }
        if let Some(t) = self.testsets {
            c.split.n_testsets = t;
        }
        c.freeze_reference_features |= self.freeze_reference_features;
        Ok(c)
    }
}

fn print_output(config: &RunConfig, name: &str) {
    if let Ok(text) = fs::read_to_string(config.out(name)) {
        print!("{text}");
    }
}

fn run(command: Command) -> ExitCode {
    let (common, step) = match &command {
        Command::Audit(c) => (c, Some(Step::Audit)),
        Command::Extract(c) => (c, Some(Step::Extract)),
        Command::Split(c) => (c, Some(Step::Split)),
        Command::TrainLr(c) => (c, Some(Step::TrainLr)),
        Command::Evaluate(c) => (c, Some(Step::Evaluate)),
        Command::Stats(c) => (c, Some(Step::Stats)),
        Command::Report(c) => (c, Some(Step::Report)),
        Command::All(c) => (c, None),
    };
    let config = match common.config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let outcome: skinbias_core::Result<RunLedger> = match step {
        Some(step) => run_step(&config, step),
        None => run_pipeline(&config),
    };
    match outcome {
        Ok(ledger) => {
            match step {
                Some(Step::Audit) => print_output(&config, "audit.txt"),
                Some(Step::Evaluate) => print_output(&config, "summary.txt"),
                Some(Step::Stats) => print_output(&config, "stats.txt"),
                Some(Step::Report) | None => print_output(&config, "report.txt"),
                _ => {}
            }
            if ledger.ok() {
                ExitCode::SUCCESS
            } else {
                error!("{} job(s) failed; see the log above", ledger.failed_jobs());
                ExitCode::from(1)
            }
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    run(cli.command)
}
