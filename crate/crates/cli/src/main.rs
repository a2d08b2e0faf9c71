use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crashsev::pipeline::{self, NotConverged};
use crashsev::{Context, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "crashsev", version, about = "Crash hotspot districts and severity model stability")]
struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Crash CSV, overriding the configured input.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Output directory, overriding the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Halton draws for every model.
    #[arg(long, global = true)]
    draws: Option<usize>,
    /// Include wall-clock times in reports.
    #[arg(long, global = true)]
    stamp: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Bin crashes into grid cells.
    Rasterize,
    /// Global autocorrelation, hotspots and district extraction.
    Analyze,
    /// Fit severity models for districts and the pooled data.
    Fit {
        /// District id or `pooled`; all districts and the pooled model by default.
        #[arg(long)]
        district: Option<String>,
    },
    /// Transferability and pooled likelihood-ratio tests.
    Lrtests,
    /// Generate a synthetic crash file with planted clusters.
    Synth {
        /// Number of crashes.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Summarize existing artifacts.
    Report,
    /// analyze, fit, lrtests and report in sequence.
    Run,
}

fn context(cli: &Cli) -> Result<Context> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(p) = &cli.input {
        config.input.crashes = Some(p.clone());
    }
    if let Some(p) = &cli.out {
        config.output_dir = p.clone();
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(d) = cli.draws {
        config.set_draws(d);
    }
    Ok(Context::new(config, cli.stamp))
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = context(cli)?;
    match &cli.command {
        Command::Rasterize => pipeline::cmd_rasterize(&ctx),
        Command::Analyze => pipeline::cmd_analyze(&ctx),
        Command::Fit { district } => pipeline::cmd_fit(&ctx, district.as_deref()),
        Command::Lrtests => pipeline::cmd_lrtests(&ctx),
        Command::Synth { n } => pipeline::cmd_synth(&ctx, *n),
        Command::Report => pipeline::cmd_report(&ctx),
        Command::Run => pipeline::cmd_run(&ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<NotConverged>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
