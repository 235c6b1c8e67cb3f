//! Batch experiment runner for the torus-layer compressible primitive
//! equations.
//!
//! Exit codes: 0 success, 2 configuration error, 3 regime violation
//! (summary still written), 4 numeric failure.

use clap::{Args, Parser, Subcommand};
use cpe_core::config::RunConfig;
use cpe_core::error::Error;
use cpe_core::runner::{self, StudyAxis};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "cpe",
    about = "Heat-conducting compressible primitive equations: batch runs, refinement studies and structural audits"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config and CPE_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Random seed override for the initial-condition scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Execute the configured run; writes diagnostics.csv, field dumps and
    /// summary.json.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Rerun along a refinement axis and fit the observed order.
    Study {
        #[command(flatten)]
        common: Common,
        /// Refinement axis: dt, nz, nx or eps.
        #[arg(long)]
        axis: String,
        /// Number of refinement levels.
        #[arg(long, default_value_t = 3)]
        levels: usize,
    },
    /// Run the structural-identity suite and print pass/fail per invariant.
    Audit {
        #[command(flatten)]
        common: Common,
    },
    /// Print a desk-scale example configuration to stdout.
    ExampleConfig,
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.initial.seed = seed;
    }
    let out = runner::resolve_out_dir(&cfg, common.out.as_deref());
    Ok((cfg, out))
}

fn classify(err: &Error) -> u8 {
    match err {
        Error::InvalidConfig(_) | Error::InvalidGrid(_) | Error::Io(_) | Error::Json(_) => 2,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<u8, (Error, Option<PathBuf>)> = match &cli.command {
        Command::Run { common } => match load(common) {
            Err(e) => Err((e, None)),
            Ok((cfg, out)) => match runner::run(&cfg, &out, common.quiet) {
                Ok(artifacts) => Ok(artifacts.exit_code as u8),
                Err(e) => Err((e, Some(out))),
            },
        },
        Command::Study {
            common,
            axis,
            levels,
        } => match load(common).and_then(|(cfg, out)| {
            let axis = StudyAxis::from_name(axis)?;
            Ok((cfg, out, axis))
        }) {
            Err(e) => Err((e, None)),
            Ok((cfg, out, axis)) => match runner::study(&cfg, axis, *levels, &out, common.quiet) {
                Ok(_) => Ok(0),
                Err(e) => Err((e, Some(out))),
            },
        },
        Command::Audit { common } => match load(common) {
            Err(e) => Err((e, None)),
            Ok((cfg, out)) => match runner::audit(&cfg, &out, common.quiet) {
                Ok(summary) => Ok(if summary.all_pass { 0 } else { 1 }),
                Err(e) => Err((e, Some(out))),
            },
        },
        Command::ExampleConfig => {
            println!(
                "{}",
                serde_json::to_string_pretty(&RunConfig::example()).expect("serializable")
            );
            Ok(0)
        }
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err((e, out)) => {
            eprintln!("error: {e}");
            let code = classify(&e);
            // every exit path leaves a machine-readable summary
            if let Some(dir) = out {
                let _ = std::fs::create_dir_all(&dir);
                let _ = std::fs::write(
                    dir.join("summary.json"),
                    serde_json::json!({
                        "status": "error",
                        "error": e.to_string(),
                        "exit_code": code,
                    })
                    .to_string(),
                );
            }
            ExitCode::from(code)
        }
    }
}
