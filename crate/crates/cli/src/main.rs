use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use radner_cli::commands::{comparison_table, report_table, run_compare, run_solve, run_verify, Overrides};
use radner_cli::config::Format;
use radner_cli::CliError;

#[derive(Debug, Parser)]
#[command(name = "radner", version, about = "Solve and verify a two-agent limited-participation equilibrium")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory (default: config, then $RADNER_OUT_DIR, then ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override for the Monte Carlo simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated artifact formats.
    #[arg(long, global = true, value_delimiter = ',')]
    format: Option<Vec<Format>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the BSDE system and export fields, paths and a summary.
    Solve { config: PathBuf },
    /// Run the verification battery; exits with 5 if a mandatory check fails.
    Verify {
        config: PathBuf,
        /// Negative control: scale the market price of risk in the deflator.
        #[arg(long, value_name = "F")]
        corrupt_kappa: Option<f64>,
    },
    /// Compare against the Pareto-efficient benchmark.
    Compare { config: PathBuf },
}

/// Writes to stdout, ignoring a closed pipe so `radner ... | head` does not panic.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ov = Overrides {
        out: cli.out,
        seed: cli.seed,
        formats: cli.format,
    };
    match cli.command {
        Command::Solve { config } => {
            let files = run_solve(&config, &ov)?;
            emit(&format!("wrote {} files\n", files.len()));
        }
        Command::Verify { config, corrupt_kappa } => {
            let outcome = run_verify(&config, &ov, corrupt_kappa)?;
            emit(&report_table(&outcome.report));
            emit(&format!("report written to {}\n", outcome.dir.display()));
            if !outcome.report.overall_pass {
                let failed: Vec<_> = outcome.report.failed().map(|c| c.name.as_str()).collect();
                return Err(CliError::VerificationFailed(failed.join(", ")));
            }
        }
        Command::Compare { config } => {
            let (rows, _) = run_compare(&config, &ov)?;
            emit(&comparison_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            let err = anyhow::Error::new(e);
            eprintln!("error: {err:#}");
            ExitCode::from(code as u8)
        }
    }
}
