//! User-side driver for the whole job lifecycle: parse the spec, ask the
//! broker for the cheapest cluster, hold escrow, submit, and watch status.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::bank::{AccountKind, BankClient, EscrowState};
use crate::broker::BrokerClient;
use crate::domain::{
    feature_set, is_endpoint, validate_jobspec, JobSpec, JobStatus, Money, QosClass, RawJobSpec,
    ValidationError,
};
use crate::frontend::NodeClient;
use crate::wire::RpcError;

fn default_timeout_ms() -> u64 {
    5000
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub broker: String,
    pub bank: String,
    pub user: String,
    pub secret: String,
    pub account_id: String,
    #[serde(default)]
    pub rng_seed: Option<u64>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), ValidationError> {
        if !is_endpoint(&self.broker) {
            return Err(ValidationError::new("broker", "expected host:port"));
        }
        if !is_endpoint(&self.bank) {
            return Err(ValidationError::new("bank", "expected host:port"));
        }
        if self.user.is_empty() {
            return Err(ValidationError::new("user", "must not be empty"));
        }
        if self.secret.is_empty() {
            return Err(ValidationError::new("secret", "must not be empty"));
        }
        if self.account_id.is_empty() {
            return Err(ValidationError::new("account_id", "must not be empty"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let text = fs::read_to_string(path).map_err(|e| ClientError::Io {
            path: path.to_owned(),
            source: e,
        })?;
        let config: ClientConfig =
            serde_json::from_str(&text).map_err(|e| ClientError::BadFile {
                path: path.to_owned(),
                reason: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }
}

/// Everything about a job except who submits it and its id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobTemplate {
    pub nodes: u32,
    pub walltime_s: u64,
    #[serde(default)]
    pub required_features: BTreeSet<String>,
    #[serde(default)]
    pub qos_class: QosClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_price: Option<Money>,
    pub command: String,
    pub workdir: String,
}

impl JobTemplate {
    pub fn into_spec(
        self,
        job_id: String,
        user: &str,
        secret: &str,
    ) -> Result<JobSpec, ValidationError> {
        validate_jobspec(RawJobSpec {
            job_id: Some(job_id),
            user: Some(user.to_owned()),
            secret: Some(secret.to_owned()),
            nodes: Some(u64::from(self.nodes)),
            walltime_s: Some(self.walltime_s),
            required_features: Some(self.required_features.into_iter().collect()),
            qos_class: Some(self.qos_class),
            max_price: self.max_price,
            command: Some(self.command),
            workdir: Some(self.workdir),
        })
    }
}

/// Command-line values that take precedence over the spec file.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SpecOverrides {
    pub nodes: Option<u64>,
    pub walltime_s: Option<u64>,
    /// Replaces the file's feature list when non-empty.
    pub features: Vec<String>,
    pub qos_class: Option<QosClass>,
    pub max_price: Option<Money>,
    pub command: Option<String>,
    pub workdir: Option<String>,
}

/// Merges an optional JSON spec file with flag overrides. Identity fields
/// (`job_id`, `user`, `secret`) are ignored if present in the file.
pub fn parse_spec(file: Option<&Path>, overrides: &SpecOverrides) -> Result<JobTemplate, ClientError> {
    let mut raw = match file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| ClientError::Io {
                path: path.to_owned(),
                source: e,
            })?;
            let value: Value = serde_json::from_str(&text).map_err(|e| ClientError::BadFile {
                path: path.to_owned(),
                reason: e.to_string(),
            })?;
            if !value.is_object() {
                return Err(ClientError::BadFile {
                    path: path.to_owned(),
                    reason: "spec file must hold a JSON object".into(),
                });
            }
            serde_json::from_value::<RawJobSpec>(value).map_err(|e| ClientError::BadFile {
                path: path.to_owned(),
                reason: e.to_string(),
            })?
        }
        None => RawJobSpec::default(),
    };

    if overrides.nodes.is_some() {
        raw.nodes = overrides.nodes;
    }
    if overrides.walltime_s.is_some() {
        raw.walltime_s = overrides.walltime_s;
    }
    if !overrides.features.is_empty() {
        raw.required_features = Some(overrides.features.clone());
    }
    if overrides.qos_class.is_some() {
        raw.qos_class = overrides.qos_class;
    }
    if overrides.max_price.is_some() {
        raw.max_price = overrides.max_price;
    }
    if overrides.command.is_some() {
        raw.command.clone_from(&overrides.command);
    }
    if overrides.workdir.is_some() {
        raw.workdir.clone_from(&overrides.workdir);
    }

    let nodes = raw.nodes.ok_or(ClientError::MissingRequiredField("nodes"))?;
    let walltime_s = raw
        .walltime_s
        .ok_or(ClientError::MissingRequiredField("walltime_s"))?;
    let command = raw
        .command
        .ok_or(ClientError::MissingRequiredField("command"))?;
    let workdir = raw
        .workdir
        .ok_or(ClientError::MissingRequiredField("workdir"))?;
    if nodes == 0 {
        return Err(ValidationError::new("nodes", "must be at least 1").into());
    }
    let nodes = u32::try_from(nodes).map_err(|_| ValidationError::new("nodes", "too large"))?;
    if walltime_s == 0 {
        return Err(ValidationError::new("walltime_s", "must be at least 1").into());
    }
    let required_features =
        feature_set("required_features", raw.required_features.unwrap_or_default())?;
    if command.is_empty() {
        return Err(ValidationError::new("command", "must not be empty").into());
    }
    if workdir.is_empty() {
        return Err(ValidationError::new("workdir", "must not be empty").into());
    }
    Ok(JobTemplate {
        nodes,
        walltime_s,
        required_features,
        qos_class: raw.qos_class.unwrap_or_default(),
        max_price: raw.max_price,
        command,
        workdir,
    })
}

/// Printed on successful submission.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionReceipt {
    pub job_id: String,
    pub cluster_id: String,
    pub address: String,
    pub price: Money,
    pub escrow_id: String,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("missing required field {0}")]
    MissingRequiredField(&'static str),
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    BadFile { path: PathBuf, reason: String },
    #[error("no eligible cluster: {0}")]
    NoEligibleCluster(String),
    #[error("insufficient funds: {0}")]
    InsufficientFunds(String),
    #[error("unknown job: {0}")]
    UnknownJob(String),
    #[error("unknown account: {0}")]
    UnknownAccount(String),
    #[error("submission rejected ({kind}); escrow {escrow_id} is {escrow_state:?}")]
    Rejected {
        kind: String,
        message: String,
        escrow_id: String,
        escrow_state: Option<EscrowState>,
    },
    #[error(transparent)]
    Rpc(RpcError),
}

impl ClientError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ClientError::NoEligibleCluster(_) => 2,
            ClientError::InsufficientFunds(_) => 3,
            ClientError::UnknownJob(_) | ClientError::UnknownAccount(_) => 4,
            ClientError::Rejected { .. } => 5,
            _ => 1,
        }
    }

    /// True for rejections that came from an expired quote.
    pub fn is_quote_expired(&self) -> bool {
        matches!(self, ClientError::Rejected { kind, .. } if kind == "quote_expired")
    }
}

impl From<RpcError> for ClientError {
    fn from(e: RpcError) -> Self {
        match e.app_kind() {
            Some("no_eligible_cluster") => ClientError::NoEligibleCluster(e.message),
            Some("insufficient_funds") => ClientError::InsufficientFunds(e.message),
            Some("unknown_job") => ClientError::UnknownJob(e.message),
            Some("unknown_account") => ClientError::UnknownAccount(e.message),
            _ => ClientError::Rpc(e),
        }
    }
}

/// 32 lowercase hex characters from `rng`.
pub fn mint_job_id<R: RngCore + ?Sized>(rng: &mut R) -> String {
    format!("{:032x}", rng.gen::<u128>())
}

pub struct Client {
    config: ClientConfig,
    rng: ChaCha8Rng,
}

impl Client {
    pub fn new(config: ClientConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let rng = match config.rng_seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_entropy(),
        };
        Ok(Client { config, rng })
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.config.timeout_ms)
    }

    fn bank(&self) -> BankClient {
        BankClient::new(self.config.bank.clone(), self.timeout())
    }

    /// Full submission: find the cheapest cluster, escrow its price, submit.
    /// A rejected submission has its escrow refunded by the front-end; the
    /// returned error reports the escrow's final state.
    pub fn submit_job(&mut self, template: &JobTemplate) -> Result<SubmissionReceipt, ClientError> {
        let job_id = mint_job_id(&mut self.rng);
        let spec = template
            .clone()
            .into_spec(job_id, &self.config.user, &self.config.secret)?;

        let broker = BrokerClient::new(self.config.broker.clone(), self.timeout());
        let selection = broker.find_cluster(&spec)?;

        let bank = self.bank();
        let escrow_id = bank.hold_escrow(
            &self.config.account_id,
            &selection.payee_account,
            selection.price,
            &spec.job_id,
        )?;

        let node = NodeClient::new(selection.address.clone(), self.timeout());
        match node.submit(&spec, &selection.bid_token, &escrow_id) {
            Ok(_) => Ok(SubmissionReceipt {
                job_id: spec.job_id,
                cluster_id: selection.cluster_id,
                address: selection.address,
                price: selection.price,
                escrow_id,
            }),
            Err(e) => {
                let escrow_state = bank.escrow(&escrow_id).ok().map(|r| r.state);
                if escrow_state == Some(EscrowState::Held) {
                    log::error!("escrow {escrow_id} is still held after rejection");
                }
                Err(ClientError::Rejected {
                    kind: e.app_kind().unwrap_or("transport").to_owned(),
                    message: e.message,
                    escrow_id,
                    escrow_state,
                })
            }
        }
    }

    pub fn job_status(&self, job_id: &str, cluster_address: &str) -> Result<JobStatus, ClientError> {
        Ok(NodeClient::new(cluster_address, self.timeout()).status(job_id)?)
    }

    pub fn balance(&self) -> Result<Money, ClientError> {
        Ok(self.bank().balance(&self.config.account_id)?)
    }

    pub fn deposit(&self, amount: Money) -> Result<Money, ClientError> {
        Ok(self.bank().deposit(&self.config.account_id, amount)?)
    }

    /// Creates this user's bank account.
    pub fn open_account(&self) -> Result<String, ClientError> {
        Ok(self.bank().create_account(&self.config.user, AccountKind::User)?)
    }
}
