use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use sg_core::frontend::{self, NodeConfig};

/// Cluster front-end: prices and runs jobs for one cluster.
#[derive(Parser)]
#[command(name = "sg-node", version)]
struct Args {
    #[arg(long)]
    config: PathBuf,
}

fn main() -> anyhow::Result<()> {
    sg_cli::init_logging();
    let args = Args::parse();
    let config: NodeConfig = sg_cli::load_json(&args.config)?;
    let service = frontend::start(&config).context("starting front-end")?;
    log::info!(
        "front-end {} listening on {} ({:?} clock)",
        config.cluster_id,
        service.address(),
        config.clock_mode
    );
    sg_cli::run_forever()
}
