//! Deterministic market simulation.
//!
//! Boots a bank, a broker and one front-end per cluster on loopback
//! sockets, then walks virtual time one second at a time: due submissions
//! are delivered in workload order through the regular client, then every
//! front-end is ticked once. The harness is the only caller of `node.tick`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{self, account_id_for, AccountKind, Bank, BankClient, EscrowState};
use crate::broker::{self, BrokerConfig};
use crate::clock::ManualClock;
use crate::client::{Client, ClientConfig, JobTemplate};
use crate::domain::{canonical_encode, JobState, Money};
use crate::frontend::{
    self, ClockMode, NodeClient, NodeConfig, NodeService, PolicyKind, Ratio, DEFAULT_HORIZON_S,
    DEFAULT_QUOTE_TTL_S,
};
use crate::wire::ServerHandle;

const AUDIT_EVERY_S: u64 = 10;
const RPC_TIMEOUT: Duration = Duration::from_secs(10);

fn default_quote_ttl() -> u64 {
    DEFAULT_QUOTE_TTL_S
}
fn default_horizon() -> u64 {
    DEFAULT_HORIZON_S
}
fn ratio_one() -> Ratio {
    Ratio::ONE
}
fn default_bid_timeout() -> u64 {
    2000
}
fn default_announce_ttl() -> u64 {
    60
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioCluster {
    pub cluster_id: String,
    pub capacity_nodes: u32,
    #[serde(default)]
    pub capabilities: Vec<String>,
    pub base_rate: Money,
    #[serde(default)]
    pub policy: PolicyKind,
    #[serde(default = "ratio_one")]
    pub load_coefficient: Ratio,
    #[serde(default)]
    pub feature_multipliers: BTreeMap<String, Ratio>,
    #[serde(default = "default_quote_ttl")]
    pub quote_ttl_s: u64,
    #[serde(default = "default_horizon")]
    pub horizon_s: u64,
}

impl ScenarioCluster {
    pub fn homogeneous(cluster_id: &str, capacity_nodes: u32, base_rate: u64) -> Self {
        ScenarioCluster {
            cluster_id: cluster_id.to_owned(),
            capacity_nodes,
            capabilities: Vec::new(),
            base_rate: Money::millicredits(base_rate),
            policy: PolicyKind::LoadProportional,
            load_coefficient: Ratio::ONE,
            feature_multipliers: BTreeMap::new(),
            quote_ttl_s: DEFAULT_QUOTE_TTL_S,
            horizon_s: DEFAULT_HORIZON_S,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioUser {
    pub login: String,
    #[serde(default)]
    pub secret: Option<String>,
    pub initial_deposit: Money,
}

impl ScenarioUser {
    fn secret(&self) -> String {
        self.secret
            .clone()
            .unwrap_or_else(|| format!("pw-{}", self.login))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkItem {
    pub submit_at: u64,
    pub user: String,
    pub job: JobTemplate,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub clusters: Vec<ScenarioCluster>,
    pub users: Vec<ScenarioUser>,
    pub workload: Vec<WorkItem>,
    pub duration_s: u64,
    pub seed: u64,
    #[serde(default = "default_bid_timeout")]
    pub bid_timeout_ms: u64,
    #[serde(default = "default_announce_ttl")]
    pub announce_ttl_s: u64,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    ScenarioInvalid(String),
    #[error("service failed to start: {0}")]
    Startup(String),
}

impl Scenario {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::ScenarioInvalid(m));
        let mut ids = BTreeSet::new();
        for c in &self.clusters {
            if c.cluster_id.is_empty() || !ids.insert(c.cluster_id.as_str()) {
                return bad(format!("cluster id {:?} empty or repeated", c.cluster_id));
            }
        }
        let mut logins = BTreeSet::new();
        for u in &self.users {
            if u.login.is_empty() || !logins.insert(u.login.as_str()) {
                return bad(format!("user {:?} empty or repeated", u.login));
            }
        }
        let mut last = 0;
        for (i, w) in self.workload.iter().enumerate() {
            if w.submit_at < last {
                return bad(format!("workload item {i} is out of order"));
            }
            last = w.submit_at;
            if w.submit_at >= self.duration_s {
                return bad(format!("workload item {i} is at or after duration_s"));
            }
            if !logins.contains(w.user.as_str()) {
                return bad(format!("workload item {i} names unknown user {:?}", w.user));
            }
        }
        if !(broker::MIN_TTL_S..=broker::MAX_TTL_S).contains(&self.announce_ttl_s) {
            return bad("announce_ttl_s out of range".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PricePoint {
    pub time: u64,
    pub cluster_id: String,
    pub price: Money,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JobOutcome {
    pub job_id: String,
    pub user: String,
    pub cluster_id: String,
    pub price: Money,
    pub submitted_at: u64,
    pub state: JobState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmissionFailure {
    pub time: u64,
    pub user: String,
    pub exit_code: i32,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarketReport {
    pub jobs_per_cluster: BTreeMap<String, u64>,
    pub price_series: Vec<PricePoint>,
    pub final_balances: BTreeMap<String, Money>,
    pub conservation_ok: bool,
    pub all_jobs_terminal: bool,
    pub jobs: Vec<JobOutcome>,
    pub failures: Vec<SubmissionFailure>,
}

impl MarketReport {
    pub fn to_canonical_json(&self) -> Vec<u8> {
        canonical_encode(self)
    }
}

fn cluster_secret(cluster_id: &str) -> String {
    format!("secret-{cluster_id}")
}

/// Per-user seed derived from the scenario seed.
fn user_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

struct Market {
    bank: Arc<Bank>,
    bank_server: ServerHandle,
    broker_clock: Arc<ManualClock>,
    broker_server: ServerHandle,
    nodes: Vec<NodeService>,
}

impl Market {
    fn boot(scenario: &Scenario) -> Result<Self, HarnessError> {
        let startup = |e: &dyn std::fmt::Display| HarnessError::Startup(e.to_string());
        let secrets = scenario
            .clusters
            .iter()
            .map(|c| (c.cluster_id.clone(), cluster_secret(&c.cluster_id)))
            .collect();
        let bank = Arc::new(Bank::new(secrets));
        bank.ensure_cluster_accounts().map_err(|e| startup(&e))?;
        let bank_server =
            crate::wire::serve("127.0.0.1:0", bank::router(Arc::clone(&bank))).map_err(|e| startup(&e))?;

        let broker_clock = Arc::new(ManualClock::new(0));
        let (_, broker_server) = broker::start_with_clock(
            &BrokerConfig {
                listen: "127.0.0.1:0".into(),
                bid_timeout_ms: scenario.bid_timeout_ms,
                default_ttl_s: scenario.announce_ttl_s,
            },
            broker_clock.clone(),
        )
        .map_err(|e| startup(&e))?;

        let users: BTreeMap<String, String> = scenario
            .users
            .iter()
            .map(|u| (u.login.clone(), u.secret()))
            .collect();
        let mut nodes = Vec::new();
        for c in &scenario.clusters {
            let config = NodeConfig {
                cluster_id: c.cluster_id.clone(),
                listen: "127.0.0.1:0".into(),
                advertise: None,
                broker: None,
                bank: bank_server.address(),
                capacity_nodes: c.capacity_nodes,
                capabilities: c.capabilities.clone(),
                base_rate: c.base_rate,
                policy: c.policy,
                load_coefficient: c.load_coefficient,
                feature_multipliers: c.feature_multipliers.clone(),
                quote_ttl_s: c.quote_ttl_s,
                horizon_s: c.horizon_s,
                clock_mode: ClockMode::Virtual,
                wall_ms_per_s: 1000,
                users: users.clone(),
                payee_account: account_id_for(&c.cluster_id, AccountKind::Cluster),
                bank_secret: cluster_secret(&c.cluster_id),
                announce_ttl_s: scenario.announce_ttl_s,
                announce_retry_ms: 100,
                rpc_timeout_ms: RPC_TIMEOUT.as_millis() as u64,
                log_path: None,
            };
            nodes.push(frontend::start(&config).map_err(|e| startup(&e))?);
        }
        Ok(Market {
            bank,
            bank_server,
            broker_clock,
            broker_server,
            nodes,
        })
    }

    fn announce_all(&self, ttl_s: u64) -> Result<(), HarnessError> {
        for n in &self.nodes {
            n.node
                .announce_once(&self.broker_server.address(), ttl_s, RPC_TIMEOUT)
                .map_err(|e| HarnessError::Startup(format!("announce: {e}")))?;
        }
        Ok(())
    }

    fn shutdown(self) {
        for n in self.nodes {
            n.shutdown();
        }
        self.broker_server.shutdown();
        self.bank_server.shutdown();
    }
}

/// Runs `scenario` to `duration_s` and reports on the market.
pub fn run_scenario(scenario: &Scenario) -> Result<MarketReport, HarnessError> {
    scenario.validate()?;
    let market = Market::boot(scenario)?;
    let result = drive(scenario, &market);
    market.shutdown();
    result
}

fn drive(scenario: &Scenario, market: &Market) -> Result<MarketReport, HarnessError> {
    let bank_addr = market.bank_server.address();
    let broker_addr = market.broker_server.address();

    let mut clients: BTreeMap<String, Client> = BTreeMap::new();
    let mut deposits: u128 = 0;
    for (i, u) in scenario.users.iter().enumerate() {
        let client = Client::new(ClientConfig {
            broker: broker_addr.clone(),
            bank: bank_addr.clone(),
            user: u.login.clone(),
            secret: u.secret(),
            account_id: account_id_for(&u.login, AccountKind::User),
            rng_seed: Some(user_seed(scenario.seed, i)),
            timeout_ms: RPC_TIMEOUT.as_millis() as u64,
        })
        .map_err(|e| HarnessError::ScenarioInvalid(e.to_string()))?;
        client
            .open_account()
            .map_err(|e| HarnessError::Startup(e.to_string()))?;
        if !u.initial_deposit.is_zero() {
            client
                .deposit(u.initial_deposit)
                .map_err(|e| HarnessError::Startup(e.to_string()))?;
            deposits += u128::from(u.initial_deposit.amount);
        }
        clients.insert(u.login.clone(), client);
    }

    let refresh = (scenario.announce_ttl_s / 2).max(1);
    let bank_client = BankClient::new(bank_addr, RPC_TIMEOUT);
    let mut conservation_ok = true;
    let audit = |conservation_ok: &mut bool| match bank_client.audit() {
        Ok(a) => *conservation_ok &= a.total() == deposits,
        Err(e) => {
            log::error!("audit failed: {e}");
            *conservation_ok = false;
        }
    };

    let mut jobs_per_cluster: BTreeMap<String, u64> = scenario
        .clusters
        .iter()
        .map(|c| (c.cluster_id.clone(), 0))
        .collect();
    let mut price_series = Vec::new();
    let mut accepted = Vec::new();
    let mut failures = Vec::new();
    let mut work = scenario.workload.iter().peekable();

    for t in 0..scenario.duration_s {
        market.broker_clock.set(t);
        if t % refresh == 0 {
            market.announce_all(scenario.announce_ttl_s)?;
        }
        while let Some(item) = work.next_if(|w| w.submit_at == t) {
            let client = clients.get_mut(&item.user).expect("validated user");
            match client.submit_job(&item.job) {
                Ok(receipt) => {
                    *jobs_per_cluster.entry(receipt.cluster_id.clone()).or_default() += 1;
                    price_series.push(PricePoint {
                        time: t,
                        cluster_id: receipt.cluster_id.clone(),
                        price: receipt.price,
                    });
                    accepted.push((item.user.clone(), t, receipt));
                }
                Err(e) => failures.push(SubmissionFailure {
                    time: t,
                    user: item.user.clone(),
                    exit_code: e.exit_code(),
                    error: e.to_string(),
                }),
            }
        }
        for n in &market.nodes {
            NodeClient::new(n.address(), RPC_TIMEOUT)
                .tick(1)
                .map_err(|e| HarnessError::Startup(format!("tick: {e}")))?;
        }
        if (t + 1) % AUDIT_EVERY_S == 0 {
            audit(&mut conservation_ok);
        }
    }
    audit(&mut conservation_ok);

    let mut all_jobs_terminal = true;
    let mut jobs = Vec::new();
    for (user, submitted_at, receipt) in accepted {
        let state = NodeClient::new(receipt.address.clone(), RPC_TIMEOUT)
            .status(&receipt.job_id)
            .map(|s| s.state)
            .unwrap_or(JobState::Failed);
        all_jobs_terminal &= state.is_terminal();
        jobs.push(JobOutcome {
            job_id: receipt.job_id,
            user,
            cluster_id: receipt.cluster_id,
            price: receipt.price,
            submitted_at,
            state,
        });
    }
    all_jobs_terminal &= market
        .bank
        .escrows()
        .iter()
        .all(|e| e.state != EscrowState::Held);

    let final_balances = market
        .bank
        .accounts()
        .into_iter()
        .map(|a| (a.account_id, a.balance))
        .collect();

    Ok(MarketReport {
        jobs_per_cluster,
        price_series,
        final_balances,
        conservation_ok,
        all_jobs_terminal,
        jobs,
        failures,
    })
}

/// Runs the scenario twice and compares the canonical report bytes.
pub fn replay_check(scenario: &Scenario) -> Result<bool, HarnessError> {
    let first = run_scenario(scenario)?;
    let second = run_scenario(scenario)?;
    Ok(first.to_canonical_json() == second.to_canonical_json())
}
