use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use sg_core::harness::{self, Scenario};

/// Runs a market scenario in virtual time and writes the report.
#[derive(Parser)]
#[command(name = "sg-sim", version)]
struct Args {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Run twice and fail unless both reports are byte-identical.
    #[arg(long)]
    check_replay: bool,
}

fn main() -> anyhow::Result<ExitCode> {
    sg_cli::init_logging();
    let args = Args::parse();
    let scenario: Scenario = sg_cli::load_json(&args.scenario)?;
    let report = harness::run_scenario(&scenario)?;
    let mut bytes = report.to_canonical_json();
    bytes.push(b'\n');
    fs::write(&args.report, &bytes).with_context(|| format!("writing {}", args.report.display()))?;
    if args.check_replay {
        let again = harness::run_scenario(&scenario)?;
        if again.to_canonical_json() != report.to_canonical_json() {
            eprintln!("replay check failed: reports differ");
            return Ok(ExitCode::from(1));
        }
        eprintln!("replay check passed");
    }
    Ok(ExitCode::SUCCESS)
}
