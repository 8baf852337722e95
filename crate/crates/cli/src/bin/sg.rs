use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use sg_core::client::{parse_spec, Client, ClientConfig, ClientError, SpecOverrides};
use sg_core::{Money, QosClass};

/// Submit and track jobs on the marketplace.
#[derive(Parser)]
#[command(name = "sg", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Find the cheapest cluster, escrow its price and submit.
    Submit {
        #[arg(long)]
        config: PathBuf,
        /// JSON object with job fields; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        nodes: Option<u64>,
        #[arg(long)]
        walltime: Option<u64>,
        #[arg(long = "feature")]
        features: Vec<String>,
        /// Millicredits.
        #[arg(long)]
        max_price: Option<u64>,
        #[arg(long)]
        qos: Option<String>,
        #[arg(long)]
        command: Option<String>,
        #[arg(long)]
        workdir: Option<String>,
    },
    /// Ask a front-end for a job's status.
    Status {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        job: String,
        #[arg(long)]
        node: String,
    },
    /// Show the account balance in millicredits.
    Balance {
        #[arg(long)]
        config: PathBuf,
    },
    /// Add funds to the account (test faucet).
    Deposit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        amount: u64,
    },
    /// Create the account named by the config's user.
    OpenAccount {
        #[arg(long)]
        config: PathBuf,
    },
}

fn client(config: &Path) -> Result<Client, ClientError> {
    Client::new(ClientConfig::load(config)?)
}

fn parse_qos(s: &str) -> Result<QosClass, ClientError> {
    serde_json::from_value(json!(s)).map_err(|_| {
        sg_core::ValidationError::new("qos_class", format!("unknown class {s:?}")).into()
    })
}

fn run(command: Command) -> Result<serde_json::Value, ClientError> {
    match command {
        Command::Submit {
            config,
            spec,
            nodes,
            walltime,
            features,
            max_price,
            qos,
            command,
            workdir,
        } => {
            let overrides = SpecOverrides {
                nodes,
                walltime_s: walltime,
                features,
                qos_class: qos.as_deref().map(parse_qos).transpose()?,
                max_price: max_price.map(Money::millicredits),
                command,
                workdir,
            };
            let template = parse_spec(spec.as_deref(), &overrides)?;
            let receipt = client(&config)?.submit_job(&template)?;
            Ok(serde_json::to_value(receipt).expect("receipt serializes"))
        }
        Command::Status { config, job, node } => {
            let status = client(&config)?.job_status(&job, &node)?;
            Ok(serde_json::to_value(status).expect("status serializes"))
        }
        Command::Balance { config } => Ok(json!({ "balance": client(&config)?.balance()? })),
        Command::Deposit { config, amount } => Ok(json!({
            "balance": client(&config)?.deposit(Money::millicredits(amount))?
        })),
        Command::OpenAccount { config } => {
            Ok(json!({ "account_id": client(&config)?.open_account()? }))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    match run(args.command) {
        Ok(value) => {
            println!("{}", sg_cli::canonical_line(&value));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("sg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
