//! `gradcil` — seeded incremental-learning experiments from the command
//! line. Exit codes: 0 success, 2 configuration error, 3 numeric
//! divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gradcil_cli::commands::{cmd_ablate, cmd_gen_data, cmd_run};
use gradcil_cli::config::ExperimentConfig;
use gradcil_cli::plot::cmd_plot;
use gradcil_cli::exit_code;
use gradcil_core::Result;

#[derive(Parser)]
#[command(
    name = "gradcil",
    version,
    about = "Class-incremental learning experiments with per-class gradient reweighting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config file; omitted means the built-in reference experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config's `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config's `protocol.seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic dataset as IDX files.
    GenData {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Execute one experiment; writes manifest.json and metrics.csv.
    Run {
        #[command(flatten)]
        common: ConfigArgs,
        /// Also write per-iteration correction factors to trace.csv.
        #[arg(long)]
        trace: bool,
    },
    /// Run the component ablation ladder and print a comparison table.
    Ablate {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Render SVG figures from one or more metrics.csv files.
    Plot {
        /// Metrics CSV paths, one series per file.
        #[arg(required = true)]
        csvs: Vec<PathBuf>,
        /// Directory for the SVG files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Load the config (or the defaults) and fold the flag overrides in.
fn effective_config(common: &ConfigArgs, trace: Option<bool>) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    }
    if let Some(seed) = common.seed {
        config.protocol.seed = seed;
    }
    if let Some(trace) = trace {
        config.output.trace = trace || config.output.trace;
    }
    Ok(config)
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => {
            let config = effective_config(&common, None)?;
            let written = cmd_gen_data(&config)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
        Command::Run { common, trace } => {
            let config = effective_config(&common, Some(trace))?;
            let artifacts = cmd_run(&config)?;
            println!("wrote {}", artifacts.manifest.display());
            println!("wrote {}", artifacts.metrics.display());
            if let Some(trace_path) = &artifacts.trace {
                println!("wrote {}", trace_path.display());
            }
            match artifacts.forgetting {
                Some(f) => println!(
                    "average accuracy {:.4}, forgetting {f:.4}",
                    artifacts.average_accuracy
                ),
                None => println!("average accuracy {:.4}", artifacts.average_accuracy),
            }
        }
        Command::Ablate { common } => {
            let config = effective_config(&common, None)?;
            let table = cmd_ablate(&config)?;
            print!("{table}");
        }
        Command::Plot { csvs, out } => {
            let written = cmd_plot(&csvs, &out)?;
            for path in written {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
