//! Command-line front end: configuration, sweeps, persistence and reports.
//!
//! Exit codes: 0 success, 1 validation or usage error, 2 runtime failure.

pub mod checkpoint;
pub mod config;
pub mod similarity;
pub mod summary;
pub mod sweep;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::dynamics::Component;
use crate::error::{Error, Result};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{load_config, save_config, ExperimentConfig, RunSpec};
pub use similarity::emit_similarity;
pub use summary::{emit_summary, SummaryOutput, SummaryRow};
pub use sweep::{mem_table, run_sweep, ResultRow, SweepOutcome};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "slao", version, about = "Single-LoRA continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the sweep described by a JSON config.
    Run { config: PathBuf },
    /// Aggregate a results CSV into per-strategy metrics.
    Summary { results: PathBuf },
    /// Cosine-similarity matrix of stored adapters.
    Similarity {
        dir: PathBuf,
        #[arg(long, value_parser = parse_component)]
        component: Component,
    },
    /// Run the training-dynamics check suite.
    Verify,
    /// Stored parameter counts per strategy and task count.
    MemTable { config: PathBuf },
}

fn parse_component(s: &str) -> std::result::Result<Component, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Parse { .. } => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<i32> {
    let w = |out: &mut dyn Write, text: &str| -> Result<()> {
        out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))
    };
    match command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let outcome = run_sweep(&cfg)?;
            w(
                out,
                &format!(
                    "{} runs, {} failed; results in {}\n",
                    outcome.runs,
                    outcome.failed,
                    outcome.results.display()
                ),
            )?;
            Ok(if outcome.failed > 0 { EXIT_RUNTIME } else { EXIT_OK })
        }
        Command::Summary { results } => {
            let s = emit_summary(&results)?;
            w(out, &s.table)?;
            Ok(EXIT_OK)
        }
        Command::Similarity { dir, component } => {
            let (path, m) = emit_similarity(&dir, component)?;
            w(out, &similarity::matrix_to_csv(&m))?;
            w(out, &format!("written to {}\n", path.display()))?;
            Ok(EXIT_OK)
        }
        Command::Verify => {
            let results = crate::verify::run_all();
            let mut all = true;
            for r in &results {
                all &= r.pass;
                w(out, &format!("{} {}: {}\n", if r.pass { "PASS" } else { "FAIL" }, r.name, r.detail))?;
            }
            Ok(if all { EXIT_OK } else { EXIT_RUNTIME })
        }
        Command::MemTable { config } => {
            let cfg = load_config(&config)?;
            w(out, &mem_table(&cfg)?)?;
            Ok(EXIT_OK)
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing normal output to `out` and errors to stderr.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
