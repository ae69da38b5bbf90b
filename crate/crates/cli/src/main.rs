use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod error;
mod plot;
mod run;

use config::ExperimentConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "ifyot", version, about = "Inverse unbalanced OT experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write results.csv, summary.json and plots.
    Run {
        config: PathBuf,
        /// Output directory; overrides the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration without running it.
    Validate { config: PathBuf },
    /// Render a results file with a plot spec.
    Plot { results: PathBuf, spec: PathBuf },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("IFYOT_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .map_err(|_| CliError::Config(format!("IFYOT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n.max(1))
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out } => {
            init_threads()?;
            let cfg = ExperimentConfig::load(&config)?;
            let dir = out.or_else(|| cfg.output().cloned()).unwrap_or_else(|| {
                let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| cfg.name().into());
                PathBuf::from("results").join(stem)
            });
            let summary = run::run(&cfg, &dir)?;
            if let Some(pass) = summary.get("pass").and_then(|v| v.as_bool()) {
                println!("{}: {}", cfg.name(), if pass { "PASS" } else { "FAIL" });
            }
            println!("wrote {}", dir.display());
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!("{}: ok ({})", config.display(), cfg.name());
        }
        Command::Plot { results, spec } => {
            let spec = plot::PlotSpec::load(&spec)?;
            let series = plot::series_from_csv(&results, &spec)?;
            plot::write_plot(&spec.output, &series, &spec)?;
            println!("wrote {}", spec.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
