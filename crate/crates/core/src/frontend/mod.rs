//! Cluster front-end: prices jobs, accepts escrow-backed submissions and
//! runs them on the simulated scheduler.
//!
//! One mutex guards scheduler, quotes and settlement bookkeeping. Calls to
//! the bank never happen while it is held; jobs waiting on the bank sit in
//! a settlement-pending set instead.

pub mod pricing;
pub mod scheduler;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{Bank, BankClient, BankError, SettleOutcome};
use crate::domain::{Bid, ClusterDescriptor, JobSpec, JobStatus, Money, ValidationError};
use crate::wire::{self, AppError, Router, RpcError, ServerHandle};

pub use pricing::{PolicyKind, PricingPolicy, Ratio};
pub use scheduler::{LifecycleEvent, Scheduler};

pub const DEFAULT_QUOTE_TTL_S: u64 = 60;
pub const DEFAULT_HORIZON_S: u64 = 3600;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Virtual,
    Wall,
}

fn default_quote_ttl() -> u64 {
    DEFAULT_QUOTE_TTL_S
}
fn default_horizon() -> u64 {
    DEFAULT_HORIZON_S
}
fn default_wall_ms() -> u64 {
    1000
}
fn default_announce_ttl() -> u64 {
    30
}
fn default_rpc_timeout() -> u64 {
    2000
}
fn default_retry_ms() -> u64 {
    500
}

/// `sg-node` configuration file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeConfig {
    pub cluster_id: String,
    pub listen: String,
    /// Address announced to brokers; defaults to the bound listen address.
    #[serde(default)]
    pub advertise: Option<String>,
    #[serde(default)]
    pub broker: Option<String>,
    pub bank: String,
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
    #[serde(default)]
    pub clock_mode: ClockMode,
    /// Wall milliseconds per virtual second in wall mode.
    #[serde(default = "default_wall_ms")]
    pub wall_ms_per_s: u64,
    #[serde(default)]
    pub users: BTreeMap<String, String>,
    pub payee_account: String,
    /// Shared secret this cluster uses to report outcomes to the bank.
    pub bank_secret: String,
    #[serde(default = "default_announce_ttl")]
    pub announce_ttl_s: u64,
    #[serde(default = "default_retry_ms")]
    pub announce_retry_ms: u64,
    #[serde(default = "default_rpc_timeout")]
    pub rpc_timeout_ms: u64,
    #[serde(default)]
    pub log_path: Option<PathBuf>,
}

fn ratio_one() -> Ratio {
    Ratio::ONE
}

/// Why a cluster declines to price a job.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoBidReason {
    UnsupportedFeature,
    InsufficientCapacity,
    OverMaxPrice,
    PriceOverflow,
}

impl NoBidReason {
    pub fn as_str(self) -> &'static str {
        match self {
            NoBidReason::UnsupportedFeature => "unsupported_feature",
            NoBidReason::InsufficientCapacity => "insufficient_capacity",
            NoBidReason::OverMaxPrice => "over_max_price",
            NoBidReason::PriceOverflow => "price_overflow",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum QuoteReply {
    Bid(Bid),
    NoBid { reason: NoBidReason },
}

/// A price promised for one job, redeemable once before it expires.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuoteRecord {
    pub bid_token: String,
    pub job_id: String,
    pub price: Money,
    pub expires_at: u64,
    spec: JobSpec,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubmitError {
    #[error("user credentials rejected")]
    AuthFailed,
    #[error("no live quote {0}")]
    UnknownQuote(String),
    #[error("quote {0} has expired")]
    QuoteExpired(String),
    #[error("job spec differs from the quoted one")]
    SpecMismatch,
    #[error("escrow {0} does not cover the quoted price")]
    EscrowInvalid(String),
    #[error("job {0} already accepted")]
    DuplicateJob(String),
    #[error("bank unavailable: {0}")]
    BankUnavailable(String),
}

impl AppError for SubmitError {
    fn kind(&self) -> &'static str {
        match self {
            SubmitError::AuthFailed => "auth_failed",
            SubmitError::UnknownQuote(_) => "unknown_quote",
            SubmitError::QuoteExpired(_) => "quote_expired",
            SubmitError::SpecMismatch => "spec_mismatch",
            SubmitError::EscrowInvalid(_) => "escrow_invalid",
            SubmitError::DuplicateJob(_) => "duplicate_job",
            SubmitError::BankUnavailable(_) => "bank_unavailable",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NodeError {
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("node.tick is only available in virtual clock mode")]
    NotVirtual,
}

impl AppError for NodeError {
    fn kind(&self) -> &'static str {
        match self {
            NodeError::UnknownJob(_) => "unknown_job",
            NodeError::NotVirtual => "not_virtual",
        }
    }
}

/// The part of the bank a front-end needs.
pub trait EscrowAgent: Send + Sync {
    fn verify(
        &self,
        escrow_id: &str,
        payee: &str,
        job_id: &str,
        min_amount: Money,
    ) -> Result<bool, String>;

    /// `Ok` once the escrow is settled, including when it already was.
    fn settle(&self, escrow_id: &str, outcome: SettleOutcome, secret: &str) -> Result<(), String>;
}

impl EscrowAgent for BankClient {
    fn verify(
        &self,
        escrow_id: &str,
        payee: &str,
        job_id: &str,
        min_amount: Money,
    ) -> Result<bool, String> {
        self.verify_escrow(escrow_id, payee, job_id, min_amount)
            .map_err(|e| e.to_string())
    }

    fn settle(&self, escrow_id: &str, outcome: SettleOutcome, secret: &str) -> Result<(), String> {
        match self.settle_escrow(escrow_id, outcome, secret) {
            Ok(_) => Ok(()),
            Err(e) if e.app_kind() == Some("already_settled") => Ok(()),
            Err(e) => Err(e.to_string()),
        }
    }
}

impl EscrowAgent for Bank {
    fn verify(
        &self,
        escrow_id: &str,
        payee: &str,
        job_id: &str,
        min_amount: Money,
    ) -> Result<bool, String> {
        Ok(self.verify_escrow(escrow_id, payee, job_id, min_amount))
    }

    fn settle(&self, escrow_id: &str, outcome: SettleOutcome, secret: &str) -> Result<(), String> {
        match self.settle_escrow(escrow_id, outcome, secret) {
            Ok(_) | Err(BankError::AlreadySettled(_)) => Ok(()),
            Err(e) => Err(e.to_string()),
        }
    }
}

struct NodeState {
    scheduler: Scheduler,
    quotes: HashMap<String, QuoteRecord>,
    next_quote: u64,
    /// Escrow backing each accepted job until it is settled.
    escrow_of: HashMap<String, String>,
    /// Completed jobs whose release has not reached the bank yet.
    pending_settlement: BTreeMap<String, String>,
    settling: BTreeSet<String>,
    rejected: HashMap<String, JobStatus>,
}

pub struct Frontend {
    descriptor: ClusterDescriptor,
    policy: PricingPolicy,
    quote_ttl_s: u64,
    horizon_s: u64,
    clock_mode: ClockMode,
    users: BTreeMap<String, String>,
    bank_secret: String,
    bank: Arc<dyn EscrowAgent>,
    state: Mutex<NodeState>,
}

/// Result of one `tick`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickReport {
    pub clock: u64,
    pub events: Vec<LifecycleEvent>,
}

impl Frontend {
    pub fn new(
        config: &NodeConfig,
        address: String,
        bank: Arc<dyn EscrowAgent>,
    ) -> Result<Self, ValidationError> {
        let descriptor = ClusterDescriptor {
            cluster_id: config.cluster_id.clone(),
            address,
            capacity_nodes: config.capacity_nodes,
            capabilities: crate::domain::feature_set("capabilities", config.capabilities.clone())?,
            base_rate: config.base_rate,
            payee_account: config.payee_account.clone(),
        }
        .validate()?;
        let policy = PricingPolicy {
            policy_id: config.policy,
            base_rate: config.base_rate,
            load_coefficient: config.load_coefficient,
            feature_multipliers: config.feature_multipliers.clone(),
        };
        policy.validate(&descriptor.capabilities)?;
        if config.horizon_s == 0 {
            return Err(ValidationError::new("horizon_s", "must be positive"));
        }
        if config.bank_secret.is_empty() {
            return Err(ValidationError::new("bank_secret", "must not be empty"));
        }
        Ok(Frontend {
            policy,
            quote_ttl_s: config.quote_ttl_s,
            horizon_s: config.horizon_s,
            clock_mode: config.clock_mode,
            users: config.users.clone(),
            bank_secret: config.bank_secret.clone(),
            bank,
            state: Mutex::new(NodeState {
                scheduler: Scheduler::new(descriptor.capacity_nodes),
                quotes: HashMap::new(),
                next_quote: 0,
                escrow_of: HashMap::new(),
                pending_settlement: BTreeMap::new(),
                settling: BTreeSet::new(),
                rejected: HashMap::new(),
            }),
            descriptor,
        })
    }

    fn lock(&self) -> MutexGuard<'_, NodeState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn describe(&self) -> ClusterDescriptor {
        self.descriptor.clone()
    }

    pub fn clock(&self) -> u64 {
        self.lock().scheduler.clock()
    }

    pub fn busy_nodes(&self) -> u32 {
        self.lock().scheduler.busy_nodes()
    }

    pub fn pending_settlements(&self) -> usize {
        self.lock().pending_settlement.len()
    }

    pub fn quote(&self, spec: &JobSpec) -> QuoteReply {
        if !spec.required_features.is_subset(&self.descriptor.capabilities) {
            return QuoteReply::NoBid {
                reason: NoBidReason::UnsupportedFeature,
            };
        }
        if spec.nodes > self.descriptor.capacity_nodes {
            return QuoteReply::NoBid {
                reason: NoBidReason::InsufficientCapacity,
            };
        }
        let mut st = self.lock();
        let Some(price) = self.policy.price(
            spec,
            st.scheduler.committed_node_seconds(),
            self.descriptor.capacity_nodes,
            self.horizon_s,
        ) else {
            return QuoteReply::NoBid {
                reason: NoBidReason::PriceOverflow,
            };
        };
        if spec.max_price.is_some_and(|cap| price > cap) {
            return QuoteReply::NoBid {
                reason: NoBidReason::OverMaxPrice,
            };
        }
        st.next_quote += 1;
        let bid_token = format!("{}-q{:08}", self.descriptor.cluster_id, st.next_quote);
        let expires_at = st.scheduler.clock() + self.quote_ttl_s;
        st.quotes.insert(
            bid_token.clone(),
            QuoteRecord {
                bid_token: bid_token.clone(),
                job_id: spec.job_id.clone(),
                price,
                expires_at,
                spec: spec.clone(),
            },
        );
        QuoteReply::Bid(Bid {
            cluster_id: self.descriptor.cluster_id.clone(),
            price,
            bid_token,
            expires_at,
        })
    }

    /// Checks the quote is redeemable for this exact spec right now.
    fn live_quote(st: &NodeState, spec: &JobSpec, token: &str) -> Result<Money, SubmitError> {
        if st.scheduler.contains(&spec.job_id) {
            return Err(SubmitError::DuplicateJob(spec.job_id.clone()));
        }
        let q = st
            .quotes
            .get(token)
            .ok_or_else(|| SubmitError::UnknownQuote(token.to_owned()))?;
        if q.job_id != spec.job_id {
            return Err(SubmitError::UnknownQuote(token.to_owned()));
        }
        if st.scheduler.clock() >= q.expires_at {
            return Err(SubmitError::QuoteExpired(token.to_owned()));
        }
        if q.spec != *spec {
            return Err(SubmitError::SpecMismatch);
        }
        Ok(q.price)
    }

    /// Accepts a job against a live quote and a held escrow. On rejection
    /// the escrow, if it is a held escrow for this job payable to this
    /// cluster, is refunded to the payer.
    pub fn submit(
        &self,
        spec: &JobSpec,
        bid_token: &str,
        escrow_id: &str,
    ) -> Result<JobStatus, SubmitError> {
        let result = self.try_submit(spec, bid_token, escrow_id);
        if let Err(err) = &result {
            self.reject(spec, escrow_id, err);
        }
        result
    }

    fn try_submit(
        &self,
        spec: &JobSpec,
        bid_token: &str,
        escrow_id: &str,
    ) -> Result<JobStatus, SubmitError> {
        if self.users.get(&spec.user) != Some(&spec.secret) {
            return Err(SubmitError::AuthFailed);
        }
        let price = Self::live_quote(&self.lock(), spec, bid_token)?;
        let covered = self
            .bank
            .verify(escrow_id, &self.descriptor.payee_account, &spec.job_id, price)
            .map_err(SubmitError::BankUnavailable)?;
        if !covered {
            return Err(SubmitError::EscrowInvalid(escrow_id.to_owned()));
        }
        let mut st = self.lock();
        // The quote may have been redeemed or expired while we were at the bank.
        Self::live_quote(&st, spec, bid_token)?;
        st.quotes.remove(bid_token);
        st.escrow_of
            .insert(spec.job_id.clone(), escrow_id.to_owned());
        st.rejected.remove(&spec.job_id);
        Ok(st
            .scheduler
            .enqueue(&spec.job_id, spec.nodes, spec.walltime_s))
    }

    fn reject(&self, spec: &JobSpec, escrow_id: &str, err: &SubmitError) {
        {
            let mut st = self.lock();
            if st.scheduler.contains(&spec.job_id) {
                return;
            }
            let now = st.scheduler.clock();
            st.rejected
                .insert(spec.job_id.clone(), JobStatus::rejected(now));
        }
        log::info!("{}: rejected job {}: {err}", self.descriptor.cluster_id, spec.job_id);
        let refundable = self
            .bank
            .verify(escrow_id, &self.descriptor.payee_account, &spec.job_id, Money::ZERO)
            .unwrap_or(false);
        if refundable {
            if let Err(e) = self
                .bank
                .settle(escrow_id, SettleOutcome::Failed, &self.bank_secret)
            {
                log::warn!("refund of {escrow_id} failed: {e}");
            }
        }
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatus, NodeError> {
        let st = self.lock();
        st.scheduler
            .status(job_id)
            .or_else(|| st.rejected.get(job_id))
            .cloned()
            .ok_or_else(|| NodeError::UnknownJob(job_id.to_owned()))
    }

    /// Advances the scheduler and releases escrow for every job that
    /// completed, retrying releases that failed on earlier ticks.
    pub fn tick(&self, dt: u64) -> TickReport {
        let (clock, events, batch) = {
            let mut st = self.lock();
            let events = st.scheduler.tick(dt);
            let clock = st.scheduler.clock();
            st.quotes.retain(|_, q| q.expires_at > clock);
            for ev in &events {
                if ev.state == crate::domain::JobState::Completed {
                    if let Some(esc) = st.escrow_of.remove(&ev.job_id) {
                        st.pending_settlement.insert(ev.job_id.clone(), esc);
                    }
                }
            }
            let batch: Vec<(String, String)> = st
                .pending_settlement
                .iter()
                .filter(|(job, _)| !st.settling.contains(*job))
                .map(|(j, e)| (j.clone(), e.clone()))
                .collect();
            for (job, _) in &batch {
                st.settling.insert(job.clone());
            }
            (clock, events, batch)
        };
        for (job_id, escrow_id) in batch {
            let outcome = self
                .bank
                .settle(&escrow_id, SettleOutcome::Completed, &self.bank_secret);
            let mut st = self.lock();
            st.settling.remove(&job_id);
            match outcome {
                Ok(()) => {
                    st.pending_settlement.remove(&job_id);
                }
                Err(e) => log::warn!("release of {escrow_id} for {job_id} failed: {e}"),
            }
        }
        TickReport { clock, events }
    }

    /// Registers with a broker once.
    pub fn announce_once(
        &self,
        broker: &str,
        ttl_s: u64,
        timeout: Duration,
    ) -> Result<(), RpcError> {
        crate::broker::BrokerClient::new(broker, timeout).register_cluster(&self.descriptor, ttl_s)
    }
}

#[derive(Deserialize)]
struct QuoteParams {
    spec: JobSpec,
}

#[derive(Serialize, Deserialize)]
struct SubmitParams {
    spec: JobSpec,
    bid_token: String,
    escrow_id: String,
}

#[derive(Serialize, Deserialize)]
struct JobParams {
    job_id: String,
}

#[derive(Serialize, Deserialize)]
struct TickParams {
    dt: u64,
}

#[derive(Serialize, Deserialize)]
struct Empty {}

pub fn router(node: Arc<Frontend>) -> Router {
    let n = Arc::clone(&node);
    let router = Router::new().route("node.quote", move |p: QuoteParams| {
        Ok::<_, NodeError>(n.quote(&p.spec))
    });
    let n = Arc::clone(&node);
    let router = router.route("node.submit", move |p: SubmitParams| {
        n.submit(&p.spec, &p.bid_token, &p.escrow_id)
    });
    let n = Arc::clone(&node);
    let router = router.route("node.status", move |p: JobParams| n.status(&p.job_id));
    let n = Arc::clone(&node);
    let router = router.route("node.tick", move |p: TickParams| {
        if n.clock_mode != ClockMode::Virtual {
            return Err(NodeError::NotVirtual);
        }
        Ok(n.tick(p.dt))
    });
    let n = node;
    router.route("node.describe", move |_: Empty| Ok::<_, NodeError>(n.describe()))
}

/// Background thread that calls a closure on a fixed period until stopped.
pub struct Periodic {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Periodic {
    /// `step` returns how long to wait before the next call.
    pub fn spawn<F>(name: &str, mut step: F) -> Self
    where
        F: FnMut() -> Duration + Send + 'static,
    {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let handle = thread::Builder::new()
            .name(name.to_owned())
            .spawn(move || {
                while !flag.load(Ordering::SeqCst) {
                    let wait = step();
                    let until = Instant::now() + wait;
                    while !flag.load(Ordering::SeqCst) && Instant::now() < until {
                        thread::sleep(Duration::from_millis(10).min(wait));
                    }
                }
            })
            .expect("spawn periodic thread");
        Periodic {
            stop,
            handle: Some(handle),
        }
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for Periodic {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Keeps a front-end registered with a broker: re-announces every `ttl/2`
/// seconds and retries every `retry` after a failure.
pub fn spawn_announcer(
    node: Arc<Frontend>,
    broker: String,
    ttl_s: u64,
    retry: Duration,
    timeout: Duration,
) -> Periodic {
    let refresh = Duration::from_secs((ttl_s / 2).max(1));
    Periodic::spawn("announcer", move || {
        match node.announce_once(&broker, ttl_s, timeout) {
            Ok(()) => refresh,
            Err(e) => {
                log::warn!("announce to {broker} failed: {e}; retrying");
                retry
            }
        }
    })
}

/// A running `sg-node`: RPC server plus its background threads.
pub struct NodeService {
    pub node: Arc<Frontend>,
    pub server: ServerHandle,
    background: Vec<Periodic>,
}

impl NodeService {
    pub fn address(&self) -> String {
        self.node.descriptor.address.clone()
    }

    pub fn shutdown(self) {
        for p in self.background {
            p.stop();
        }
        self.server.shutdown();
    }
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Config(#[from] ValidationError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Binds and starts a front-end with its bank link, wall-clock ticker and
/// broker announcer as configured.
pub fn start(config: &NodeConfig) -> Result<NodeService, StartError> {
    let timeout = Duration::from_millis(config.rpc_timeout_ms);
    let bank: Arc<dyn EscrowAgent> = Arc::new(BankClient::new(config.bank.clone(), timeout));
    let listener = std::net::TcpListener::bind(&config.listen)?;
    let address = match &config.advertise {
        Some(a) => a.clone(),
        None => listener.local_addr()?.to_string(),
    };
    let node = Arc::new(Frontend::new(config, address, bank)?);
    let server = wire::serve_on(listener, router(Arc::clone(&node)))?;

    let mut background = Vec::new();
    if config.clock_mode == ClockMode::Wall {
        let n = Arc::clone(&node);
        let period = Duration::from_millis(config.wall_ms_per_s.max(1));
        background.push(Periodic::spawn("ticker", move || {
            n.tick(1);
            period
        }));
    }
    if let Some(broker) = &config.broker {
        background.push(spawn_announcer(
            Arc::clone(&node),
            broker.clone(),
            config.announce_ttl_s,
            Duration::from_millis(config.announce_retry_ms),
            timeout,
        ));
    }
    Ok(NodeService {
        node,
        server,
        background,
    })
}

/// RPC client for a remote front-end.
#[derive(Clone, Debug)]
pub struct NodeClient {
    pub address: String,
    pub timeout: Duration,
}

impl NodeClient {
    pub fn new(address: impl Into<String>, timeout: Duration) -> Self {
        NodeClient {
            address: address.into(),
            timeout,
        }
    }

    pub fn quote(&self, spec: &JobSpec) -> Result<QuoteReply, RpcError> {
        wire::call(
            &self.address,
            "node.quote",
            &serde_json::json!({ "spec": spec }),
            self.timeout,
        )
    }

    pub fn submit(
        &self,
        spec: &JobSpec,
        bid_token: &str,
        escrow_id: &str,
    ) -> Result<JobStatus, RpcError> {
        wire::call(
            &self.address,
            "node.submit",
            &SubmitParams {
                spec: spec.clone(),
                bid_token: bid_token.into(),
                escrow_id: escrow_id.into(),
            },
            self.timeout,
        )
    }

    pub fn status(&self, job_id: &str) -> Result<JobStatus, RpcError> {
        wire::call(
            &self.address,
            "node.status",
            &JobParams {
                job_id: job_id.into(),
            },
            self.timeout,
        )
    }

    pub fn tick(&self, dt: u64) -> Result<TickReport, RpcError> {
        wire::call(&self.address, "node.tick", &TickParams { dt }, self.timeout)
    }

    pub fn describe(&self) -> Result<ClusterDescriptor, RpcError> {
        wire::call(&self.address, "node.describe", &Empty {}, self.timeout)
    }
}
