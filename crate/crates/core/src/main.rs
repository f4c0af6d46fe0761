//! Command-line runner for configured experiments.
//!
//! Exit codes: 0 on success, 2 when the configuration fails to load or
//! validate, 3 when a pipeline stage fails (the message names the stage).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use inventropy::config::{AnalysisConfig, ExperimentConfig};
use inventropy::pipeline::run_experiment;
use inventropy::Error;

#[derive(Parser)]
#[command(
    name = "inventropy",
    version,
    about = "Invariance-entropy bounds for bilinear control systems via induced projective flows"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a configuration's analysis pipeline and write its outputs
    Run {
        /// TOML experiment configuration
        config: PathBuf,
        /// Write outputs here instead of the configured directory
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Cap the worker thread count (default: all cores)
        #[arg(long)]
        threads: Option<usize>,
        /// Override the configured RNG seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a configuration without running it
    Validate {
        /// TOML experiment configuration
        config: PathBuf,
    },
    /// List the available pipeline stages
    ListAnalyses,
}

fn load_config(path: &Path) -> inventropy::Result<ExperimentConfig> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io(io) => Error::ConfigInvalid(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn dispatch(cli: Cli) -> inventropy::Result<()> {
    match cli.command {
        Command::Run {
            config,
            output_dir,
            threads,
            seed,
        } => {
            if let Some(n) = threads {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global()
                    .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))?;
            }
            let mut cfg = load_config(&config)?;
            if let Some(dir) = output_dir {
                cfg.output.directory = dir;
            }
            if let Some(s) = seed {
                cfg.seed = Some(s);
            }
            let summary = run_experiment(&cfg)?;
            for stage in &summary.stages {
                println!("[{}] {} ({} ms)", stage.index, stage.name, stage.millis);
                for file in &stage.files {
                    println!("    {} ({} bytes)", file.name, file.bytes);
                }
            }
            println!(
                "wrote {} files and manifest.toml to {}",
                summary.file_count(),
                summary.output_dir.display()
            );
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            cfg.validate()?;
            println!(
                "{} is valid: dimension {}, resolution {}, {} pipeline stage(s)",
                config.display(),
                cfg.system.dimension,
                cfg.grid.resolution,
                cfg.pipeline.len()
            );
            for (i, stage) in cfg.pipeline.iter().enumerate() {
                println!("  [{i}] {}", stage.name());
            }
            Ok(())
        }
        Command::ListAnalyses => {
            for name in AnalysisConfig::known_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::ConfigInvalid(_) => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
