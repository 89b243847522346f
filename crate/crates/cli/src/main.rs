//! `fbsde`: runs experiment configs against the scenario-tree solvers.

mod config;
mod error;
mod report;
mod run;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::report::Report;
use crate::run::Outcome;

#[derive(Debug, Parser)]
#[command(name = "fbsde", version, about = "Forward-backward difference equations on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the mode named in a config and write its report.
    Run(Invocation),
    /// Run the acceptance suite with the seed and selection of a config.
    Suite(Invocation),
    /// Check a config without solving anything.
    Validate(Invocation),
}

#[derive(Debug, Args)]
struct Invocation {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Output directory, overriding `output.directory`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed replacing every seed in the config.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Print nothing on success.
    #[arg(short, long)]
    quiet: bool,
}

impl Invocation {
    fn load(&self) -> CliResult<ExperimentConfig> {
        let mut config = config::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.override_seed(seed);
        }
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => args.load().and_then(|c| finish(args, &c, run::execute(&c))),
        Command::Suite(args) => args.load().and_then(|c| finish(args, &c, run::execute_suite(&c, false))),
        Command::Validate(args) => args.load().and_then(|c| {
            run::validate(&c)?;
            if !args.quiet {
                println!("{}: valid {} config", args.config.display(), c.mode.name());
            }
            Ok(())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code())
        }
    }
}

/// Writes the report of a finished run and turns its failure into the exit status.
fn finish(args: &Invocation, config: &ExperimentConfig, outcome: CliResult<Outcome>) -> CliResult<()> {
    let outcome = outcome?;
    let directory = config.output_directory(args.out.as_deref());
    let written = outcome.report.write(&directory)?;
    if !args.quiet {
        summarize(&outcome.report, &written);
    }
    outcome.failure.map_or(Ok(()), Err)
}

fn summarize(report: &Report, written: &[PathBuf]) {
    // A closed stdout, e.g. a pipe into `head`, is not an error of the run
    let _ = write_summary(&mut std::io::stdout().lock(), report, written);
}

fn write_summary(out: &mut impl Write, report: &Report, written: &[PathBuf]) -> std::io::Result<()> {
    writeln!(out, "mode {}: {}", report.mode, status_name(report))?;
    for outcome in report.suite.iter().flatten() {
        writeln!(out, "{outcome}")?;
    }
    if let Some(residual) = &report.residual {
        writeln!(out, "residual {:.3e}", residual.overall)?;
    }
    for (key, value) in report.residuals.iter().chain(&report.optimality) {
        writeln!(out, "{key} {value:.6e}")?;
    }
    if let Some(conditions) = &report.conditions {
        writeln!(
            out,
            "condition violations {} over {} samples",
            conditions.total_violations(),
            conditions.samples
        )?;
    }
    for (key, value) in report.solution.iter().flat_map(|s| &s.quantities) {
        writeln!(out, "{key} {value:.12}")?;
    }
    for path in written {
        writeln!(out, "wrote {}", path.display())?;
    }
    Ok(())
}

fn status_name(report: &Report) -> String {
    serde_json::to_value(report.status)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}
