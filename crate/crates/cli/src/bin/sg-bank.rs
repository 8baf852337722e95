use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use sg_core::bank::{self, BankConfig};

/// Bank service: accounts, balances and escrow.
#[derive(Parser)]
#[command(name = "sg-bank", version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> anyhow::Result<()> {
    sg_cli::init_logging();
    let args = Args::parse();
    let config: BankConfig = sg_cli::load_json(&args.config)?;
    let (_bank, server) = bank::start(&config).context("starting bank")?;
    log::info!("bank listening on {}", server.address());
    sg_cli::run_forever()
}
