use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leadi::commands::{self, Ctx};
use leadi::{CliError, RunConfig};
use leadi_core::dataio::Split;
use leadi_core::model::Task;

#[derive(Parser)]
#[command(name = "leadi", version, about = "Lead-I ECG interval estimation pipeline")]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config and LEADI_OUT_DIR.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print a JSON summary on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Recompute caches and accept artifacts from a different config.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus into the data directory.
    Synth {
        #[arg(long)]
        n: Option<usize>,
    },
    /// Read labels and waveforms, preprocess and cache.
    Ingest,
    /// Assign patients to train, validation and holdout.
    Split,
    /// Train one task, or every configured task.
    Train {
        #[arg(long)]
        task: Option<Task>,
    },
    /// Predict with trained checkpoints.
    Infer {
        #[arg(long)]
        task: Option<Task>,
        #[arg(long, default_value = "holdout")]
        split: Split,
    },
    /// Run the rule-based delineator.
    Delineate {
        #[arg(long, default_value = "holdout")]
        split: Split,
    },
    /// Score predictions against labels.
    Eval,
    /// Render evaluation outputs as report.json and report.txt.
    Report { inputs: Vec<PathBuf> },
    /// synth, ingest, split, train, infer, delineate, eval and report in turn.
    Run,
}

fn env_path(name: &str) -> Option<PathBuf> {
    std::env::var_os(name).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = env_path("LEADI_DATA_DIR") {
        cfg.paths.data_dir = p;
    }
    if let Some(p) = env_path("LEADI_CACHE_DIR") {
        cfg.paths.cache_dir = p;
    }
    if let Some(p) = env_path("LEADI_OUT_DIR") {
        cfg.paths.out_dir = p;
    }
    if let Some(p) = &cli.out {
        cfg.paths.out_dir = p.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::Synth { n: Some(n) } = cli.command {
        cfg.synth.n = n;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let ctx = Ctx::new(load_config(cli)?, cli.force)?;
    match &cli.command {
        Command::Synth { .. } => commands::cmd_synth(&ctx),
        Command::Ingest => commands::cmd_ingest(&ctx),
        Command::Split => commands::cmd_split(&ctx),
        Command::Train { task } => commands::cmd_train(&ctx, *task),
        Command::Infer { task, split } => commands::cmd_infer(&ctx, *task, *split),
        Command::Delineate { split } => commands::cmd_delineate(&ctx, *split),
        Command::Eval => commands::cmd_eval(&ctx),
        Command::Report { inputs } => commands::cmd_report(&ctx, inputs),
        Command::Run => commands::cmd_run(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            if cli.json {
                println!("{}", serde_json::json!({"error": e.to_string(), "exit_code": e.exit_code()}));
            }
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
