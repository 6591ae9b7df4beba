use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use commuter_core::config::{ConfigError, RunConfig};
use commuter_core::pipeline::{self, PipelineError, Stage};

/// Home/work anchor inference and commuter statistics from location pings.
#[derive(Parser, Debug)]
#[command(name = "commuter", version, about)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for synthetic corpora.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress to stderr (repeat for more detail).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic ping corpus with ground truth and POIs.
    Synth,
    /// Filter pings and select the cohort.
    Ingest,
    /// Infer home/work anchors and per-window presence.
    Cluster,
    /// Resolve work anchors to workplace names.
    Geocode,
    /// Assign workplace categories.
    Categorize,
    /// Write the report tables and bundle.
    Report,
    /// Run every stage in order.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, PipelineError> {
    let cfg = load_config(cli)?;
    let stage = match cli.command {
        Command::Synth => Some(Stage::Synth),
        Command::Ingest => Some(Stage::Ingest),
        Command::Cluster => Some(Stage::Cluster),
        Command::Geocode => Some(Stage::Geocode),
        Command::Categorize => Some(Stage::Categorize),
        Command::Report => Some(Stage::Report),
        Command::Pipeline => None,
    };
    let out = pipeline::with_workers(cfg.workers, || match stage {
        Some(s) => pipeline::run_stage(&cfg, s),
        None => pipeline::run_pipeline(&cfg),
    })??;
    Ok(out.files)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("COMMUTER_LOG")
        .format_timestamp(None)
        .init();

    match run(&cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({
                "error": e.kind(),
                "stage": e.stage(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
