use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use sg_core::broker::{self, BrokerConfig};

/// Broker service: cluster registry and lowest-price selection.
#[derive(Parser)]
#[command(name = "sg-broker", version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> anyhow::Result<()> {
    sg_cli::init_logging();
    let args = Args::parse();
    let config: BrokerConfig = sg_cli::load_json(&args.config)?;
    let (_broker, server) = broker::start(&config).context("starting broker")?;
    log::info!("broker listening on {}", server.address());
    sg_cli::run_forever()
}
