//! Validated value types shared by every service, plus the canonical JSON
//! encoding used on the wire, in logs and in reports.
//!
//! Every type that arrives from the outside world deserializes through a
//! raw, all-optional shape and is validated on the way in, so a decoded
//! value always satisfies its invariants.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

/// Amount of currency in millicredits (1 credit = 1000 millicredits).
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Money {
    pub amount: u64,
}

impl Money {
    pub const ZERO: Money = Money { amount: 0 };

    pub const fn millicredits(amount: u64) -> Self {
        Money { amount }
    }

    pub const fn credits(credits: u64) -> Self {
        Money {
            amount: credits * 1000,
        }
    }

    pub fn is_zero(self) -> bool {
        self.amount == 0
    }

    pub fn checked_add(self, other: Money) -> Option<Money> {
        self.amount.checked_add(other.amount).map(Money::millicredits)
    }

    pub fn checked_sub(self, other: Money) -> Option<Money> {
        self.amount.checked_sub(other.amount).map(Money::millicredits)
    }
}

impl fmt::Display for Money {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.amount / 1000, self.amount % 1000)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("invalid {field}: {reason}")]
pub struct ValidationError {
    pub field: String,
    pub reason: String,
}

impl ValidationError {
    pub fn new(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ValidationError {
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn missing(field: &str) -> Self {
        ValidationError::new(field, "missing")
    }
}

/// Feature and capability names are lowercase tokens like `deadline`.
pub fn is_feature_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_lowercase() || b == b'_')
}

fn is_job_id(s: &str) -> bool {
    s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Checks a `host:port` endpoint string without resolving it.
pub fn is_endpoint(s: &str) -> bool {
    match s.rsplit_once(':') {
        Some((host, port)) => {
            !host.is_empty() && !host.chars().any(char::is_whitespace) && port.parse::<u16>().is_ok()
        }
        None => false,
    }
}

/// Turns a list of feature tokens into a set, rejecting duplicates and
/// malformed tokens.
pub fn feature_set(field: &str, items: Vec<String>) -> Result<BTreeSet<String>, ValidationError> {
    let mut set = BTreeSet::new();
    for item in items {
        if !is_feature_token(&item) {
            return Err(ValidationError::new(
                field,
                format!("{item:?} is not a lowercase feature token"),
            ));
        }
        if !set.insert(item.clone()) {
            return Err(ValidationError::new(field, format!("duplicate {item:?}")));
        }
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QosClass {
    #[default]
    Standard,
    Priority,
}

/// Complete description of one job as the client submits it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawJobSpec")]
pub struct JobSpec {
    pub job_id: String,
    pub user: String,
    pub secret: String,
    pub nodes: u32,
    pub walltime_s: u64,
    pub required_features: BTreeSet<String>,
    pub qos_class: QosClass,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_price: Option<Money>,
    pub command: String,
    pub workdir: String,
}

impl JobSpec {
    pub fn node_seconds(&self) -> u128 {
        u128::from(self.nodes) * u128::from(self.walltime_s)
    }
}

/// A JobSpec-shaped record whose fields may be missing or out of range.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawJobSpec {
    pub job_id: Option<String>,
    pub user: Option<String>,
    pub secret: Option<String>,
    pub nodes: Option<u64>,
    pub walltime_s: Option<u64>,
    pub required_features: Option<Vec<String>>,
    pub qos_class: Option<QosClass>,
    pub max_price: Option<Money>,
    pub command: Option<String>,
    pub workdir: Option<String>,
}

fn non_empty(field: &str, value: Option<String>) -> Result<String, ValidationError> {
    match value {
        None => Err(ValidationError::missing(field)),
        Some(s) if s.is_empty() => Err(ValidationError::new(field, "must not be empty")),
        Some(s) => Ok(s),
    }
}

/// Validates a raw job record, reporting the first offending field in
/// declaration order.
pub fn validate_jobspec(raw: RawJobSpec) -> Result<JobSpec, ValidationError> {
    let job_id = raw.job_id.ok_or_else(|| ValidationError::missing("job_id"))?;
    if !is_job_id(&job_id) {
        return Err(ValidationError::new(
            "job_id",
            "must be 32 lowercase hex characters",
        ));
    }
    let user = non_empty("user", raw.user)?;
    let secret = non_empty("secret", raw.secret)?;
    let nodes = match raw.nodes {
        None => return Err(ValidationError::missing("nodes")),
        Some(0) => return Err(ValidationError::new("nodes", "must be at least 1")),
        Some(n) => u32::try_from(n).map_err(|_| ValidationError::new("nodes", "too large"))?,
    };
    let walltime_s = match raw.walltime_s {
        None => return Err(ValidationError::missing("walltime_s")),
        Some(0) => return Err(ValidationError::new("walltime_s", "must be at least 1")),
        Some(w) => w,
    };
    let required_features =
        feature_set("required_features", raw.required_features.unwrap_or_default())?;
    let command = non_empty("command", raw.command)?;
    let workdir = non_empty("workdir", raw.workdir)?;
    Ok(JobSpec {
        job_id,
        user,
        secret,
        nodes,
        walltime_s,
        required_features,
        qos_class: raw.qos_class.unwrap_or_default(),
        max_price: raw.max_price,
        command,
        workdir,
    })
}

impl TryFrom<RawJobSpec> for JobSpec {
    type Error = ValidationError;

    fn try_from(raw: RawJobSpec) -> Result<Self, Self::Error> {
        validate_jobspec(raw)
    }
}

impl From<JobSpec> for RawJobSpec {
    fn from(spec: JobSpec) -> Self {
        RawJobSpec {
            job_id: Some(spec.job_id),
            user: Some(spec.user),
            secret: Some(spec.secret),
            nodes: Some(u64::from(spec.nodes)),
            walltime_s: Some(spec.walltime_s),
            required_features: Some(spec.required_features.into_iter().collect()),
            qos_class: Some(spec.qos_class),
            max_price: spec.max_price,
            command: Some(spec.command),
            workdir: Some(spec.workdir),
        }
    }
}

/// What a cluster front-end advertises to brokers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawClusterDescriptor")]
pub struct ClusterDescriptor {
    pub cluster_id: String,
    pub address: String,
    pub capacity_nodes: u32,
    pub capabilities: BTreeSet<String>,
    /// Price per node-second.
    pub base_rate: Money,
    pub payee_account: String,
}

#[derive(Deserialize)]
struct RawClusterDescriptor {
    cluster_id: String,
    address: String,
    capacity_nodes: u32,
    #[serde(default)]
    capabilities: Vec<String>,
    base_rate: Money,
    payee_account: String,
}

impl TryFrom<RawClusterDescriptor> for ClusterDescriptor {
    type Error = ValidationError;

    fn try_from(raw: RawClusterDescriptor) -> Result<Self, Self::Error> {
        if raw.cluster_id.is_empty() {
            return Err(ValidationError::new("cluster_id", "must not be empty"));
        }
        if !is_endpoint(&raw.address) {
            return Err(ValidationError::new("address", "expected host:port"));
        }
        if raw.capacity_nodes == 0 {
            return Err(ValidationError::new("capacity_nodes", "must be at least 1"));
        }
        let capabilities = feature_set("capabilities", raw.capabilities)?;
        if raw.base_rate.amount == 0 {
            return Err(ValidationError::new(
                "base_rate",
                "must be at least 1 millicredit per node-second",
            ));
        }
        if raw.payee_account.is_empty() {
            return Err(ValidationError::new("payee_account", "must not be empty"));
        }
        Ok(ClusterDescriptor {
            cluster_id: raw.cluster_id,
            address: raw.address,
            capacity_nodes: raw.capacity_nodes,
            capabilities,
            base_rate: raw.base_rate,
            payee_account: raw.payee_account,
        })
    }
}

impl ClusterDescriptor {
    pub fn validate(self) -> Result<Self, ValidationError> {
        RawClusterDescriptor {
            cluster_id: self.cluster_id,
            address: self.address,
            capacity_nodes: self.capacity_nodes,
            capabilities: self.capabilities.into_iter().collect(),
            base_rate: self.base_rate,
            payee_account: self.payee_account,
        }
        .try_into()
    }
}

/// A priced offer to run one specific job. Honored only when presented
/// before `expires_at` (seconds on the issuing cluster's clock).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub cluster_id: String,
    pub price: Money,
    pub bid_token: String,
    pub expires_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobState {
    Queued,
    Running,
    Completed,
    Failed,
    Rejected,
}

impl JobState {
    pub const ALL: [JobState; 5] = [
        JobState::Queued,
        JobState::Running,
        JobState::Completed,
        JobState::Failed,
        JobState::Rejected,
    ];

    pub fn can_transition(self, to: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, to),
            (Queued, Running) | (Running, Completed) | (Running, Failed)
        )
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            JobState::Completed | JobState::Failed | JobState::Rejected
        )
    }
}

impl fmt::Display for JobState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            JobState::Queued => "QUEUED",
            JobState::Running => "RUNNING",
            JobState::Completed => "COMPLETED",
            JobState::Failed => "FAILED",
            JobState::Rejected => "REJECTED",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobStatus {
    pub state: JobState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitted_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
#[error("illegal job transition {from} -> {to}")]
pub struct IllegalTransition {
    pub from: JobState,
    pub to: JobState,
}

impl JobStatus {
    pub fn queued(at: u64) -> Self {
        JobStatus {
            state: JobState::Queued,
            submitted_at: Some(at),
            started_at: None,
            finished_at: None,
            exit_code: None,
        }
    }

    pub fn rejected(at: u64) -> Self {
        JobStatus {
            state: JobState::Rejected,
            submitted_at: Some(at),
            started_at: None,
            finished_at: Some(at),
            exit_code: None,
        }
    }

    /// Moves to `to` at time `at`, stamping the matching timestamp.
    pub fn advance(&mut self, to: JobState, at: u64) -> Result<(), IllegalTransition> {
        if !self.state.can_transition(to) {
            return Err(IllegalTransition {
                from: self.state,
                to,
            });
        }
        match to {
            JobState::Running => self.started_at = Some(at),
            JobState::Completed => {
                self.finished_at = Some(at);
                self.exit_code = Some(0);
            }
            JobState::Failed => self.finished_at = Some(at),
            _ => {}
        }
        self.state = to;
        Ok(())
    }
}

/// Deterministic bytes for any serializable value: compact JSON, object
/// keys sorted bytewise, UTF-8.
pub fn canonical_encode<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let value = serde_json::to_value(value).expect("domain values serialize to JSON");
    canonical_value_bytes(&value)
}

pub fn canonical_value_bytes(value: &Value) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    write_canonical(value, &mut out);
    out
}

fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(&String, &Value)> = map.iter().collect();
            entries.sort_unstable_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
            out.push(b'{');
            for (i, (key, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, key).expect("string serialization");
                out.push(b':');
                write_canonical(v, out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(v, out);
            }
            out.push(b']');
        }
        scalar => serde_json::to_writer(&mut *out, scalar).expect("scalar serialization"),
    }
}
