//! Cluster registry and lowest-price selection.
//!
//! Front-ends push their descriptors with a TTL. `find_cluster` asks every
//! live cluster for a quote in parallel, each call bounded by the bid
//! timeout, and picks the cheapest bid; equal prices go to the smallest
//! `cluster_id` (bytewise).

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, WallClock};
use crate::domain::{Bid, ClusterDescriptor, JobSpec, Money, ValidationError};
use crate::frontend::{NodeClient, QuoteReply};
use crate::wire::{self, AppError, Router, RpcError, ServerHandle};

pub const MIN_TTL_S: u64 = 5;
pub const MAX_TTL_S: u64 = 3600;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registration {
    pub descriptor: ClusterDescriptor,
    pub registered_at: u64,
    pub ttl_s: u64,
}

impl Registration {
    pub fn is_live(&self, now: u64) -> bool {
        now <= self.registered_at + self.ttl_s
    }
}

/// The broker's answer: where to submit, for how much, with which token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub cluster_id: String,
    pub address: String,
    pub price: Money,
    pub bid_token: String,
    /// Account the escrow must be payable to.
    pub payee_account: String,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BrokerError {
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("no eligible cluster ({})", format_reasons(.reasons))]
    NoEligibleCluster { reasons: BTreeMap<String, String> },
}

fn format_reasons(reasons: &BTreeMap<String, String>) -> String {
    if reasons.is_empty() {
        return "none registered".to_owned();
    }
    reasons
        .iter()
        .map(|(k, v)| format!("{k}: {v}"))
        .collect::<Vec<_>>()
        .join(", ")
}

impl AppError for BrokerError {
    fn kind(&self) -> &'static str {
        match self {
            BrokerError::InvalidDescriptor(_) => "invalid_descriptor",
            BrokerError::NoEligibleCluster { .. } => "no_eligible_cluster",
        }
    }
}

impl From<ValidationError> for BrokerError {
    fn from(e: ValidationError) -> Self {
        BrokerError::InvalidDescriptor(e.to_string())
    }
}

/// What came back from one cluster during a fan-out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BidResult {
    Bid(Bid),
    Excluded(String),
}

/// Minimum price, ties to the bytewise-smallest cluster id.
pub fn select_lowest<'a, I>(bids: I) -> Option<&'a Bid>
where
    I: IntoIterator<Item = &'a Bid>,
{
    bids.into_iter()
        .min_by(|a, b| (a.price, a.cluster_id.as_bytes()).cmp(&(b.price, b.cluster_id.as_bytes())))
}

pub struct Broker {
    registry: RwLock<BTreeMap<String, Registration>>,
    clock: Arc<dyn Clock>,
    bid_timeout: Duration,
    default_ttl_s: u64,
}

impl Broker {
    pub fn new(clock: Arc<dyn Clock>, bid_timeout: Duration, default_ttl_s: u64) -> Self {
        Broker {
            registry: RwLock::new(BTreeMap::new()),
            clock,
            bid_timeout,
            default_ttl_s,
        }
    }

    pub fn bid_timeout(&self) -> Duration {
        self.bid_timeout
    }

    pub fn register_cluster(
        &self,
        descriptor: ClusterDescriptor,
        ttl_s: Option<u64>,
    ) -> Result<(), BrokerError> {
        let descriptor = descriptor.validate()?;
        let ttl_s = ttl_s.unwrap_or(self.default_ttl_s);
        if !(MIN_TTL_S..=MAX_TTL_S).contains(&ttl_s) {
            return Err(BrokerError::InvalidDescriptor(format!(
                "ttl_s {ttl_s} outside [{MIN_TTL_S}, {MAX_TTL_S}]"
            )));
        }
        let now = self.clock.now();
        let mut reg = self.registry.write().unwrap_or_else(|p| p.into_inner());
        reg.retain(|_, r| r.is_live(now));
        reg.insert(
            descriptor.cluster_id.clone(),
            Registration {
                descriptor,
                registered_at: now,
                ttl_s,
            },
        );
        Ok(())
    }

    fn live(&self) -> Vec<ClusterDescriptor> {
        let now = self.clock.now();
        self.registry
            .read()
            .unwrap_or_else(|p| p.into_inner())
            .values()
            .filter(|r| r.is_live(now))
            .map(|r| r.descriptor.clone())
            .collect()
    }

    /// Live descriptors sorted by cluster id.
    pub fn list_clusters(&self) -> Vec<ClusterDescriptor> {
        self.live()
    }

    /// Collects one quote per live cluster, concurrently. The registry lock
    /// is not held while waiting on the network.
    pub fn collect_bids(&self, spec: &JobSpec) -> Vec<(ClusterDescriptor, BidResult)> {
        let clusters = self.live();
        let timeout = self.bid_timeout;
        thread::scope(|s| {
            let pending: Vec<_> = clusters
                .into_iter()
                .map(|d| {
                    let target = d.clone();
                    let handle = s.spawn(move || {
                        let result = NodeClient::new(target.address.clone(), timeout).quote(spec);
                        classify(&target, result)
                    });
                    (d, handle)
                })
                .collect();
            pending
                .into_iter()
                .map(|(d, h)| {
                    let r = h
                        .join()
                        .unwrap_or_else(|_| BidResult::Excluded("internal error".into()));
                    (d, r)
                })
                .collect()
        })
    }

    pub fn find_cluster(&self, spec: &JobSpec) -> Result<Selection, BrokerError> {
        let results = self.collect_bids(spec);
        let bids: Vec<&Bid> = results
            .iter()
            .filter_map(|(_, r)| match r {
                BidResult::Bid(b) => Some(b),
                BidResult::Excluded(_) => None,
            })
            .collect();
        match select_lowest(bids.iter().copied()) {
            Some(winner) => {
                let (d, _) = results
                    .iter()
                    .find(|(d, _)| d.cluster_id == winner.cluster_id)
                    .expect("winner came from a registration");
                Ok(Selection {
                    cluster_id: winner.cluster_id.clone(),
                    address: d.address.clone(),
                    price: winner.price,
                    bid_token: winner.bid_token.clone(),
                    payee_account: d.payee_account.clone(),
                })
            }
            None => Err(BrokerError::NoEligibleCluster {
                reasons: results
                    .into_iter()
                    .map(|(d, r)| match r {
                        BidResult::Excluded(why) => (d.cluster_id, why),
                        BidResult::Bid(_) => unreachable!("no bids were collected"),
                    })
                    .collect(),
            }),
        }
    }
}

fn classify(d: &ClusterDescriptor, result: Result<QuoteReply, RpcError>) -> BidResult {
    match result {
        Ok(QuoteReply::Bid(bid)) if bid.cluster_id == d.cluster_id => BidResult::Bid(bid),
        Ok(QuoteReply::Bid(bid)) => {
            BidResult::Excluded(format!("bid signed by {:?}", bid.cluster_id))
        }
        Ok(QuoteReply::NoBid { reason }) => BidResult::Excluded(format!("no_bid: {}", reason.as_str())),
        Err(e) if e.code == wire::RpcErrorCode::Timeout => {
            BidResult::Excluded(format!("timeout: {}", e.message))
        }
        Err(e) => BidResult::Excluded(format!("error: {e}")),
    }
}

fn default_bid_timeout() -> u64 {
    2000
}
fn default_ttl() -> u64 {
    30
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerConfig {
    pub listen: String,
    #[serde(default = "default_bid_timeout")]
    pub bid_timeout_ms: u64,
    #[serde(default = "default_ttl")]
    pub default_ttl_s: u64,
}

#[derive(Serialize, Deserialize)]
struct RegisterParams {
    descriptor: ClusterDescriptor,
    #[serde(default)]
    ttl_s: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct FindParams {
    spec: JobSpec,
}

#[derive(Serialize, Deserialize)]
struct Empty {}

pub fn router(broker: Arc<Broker>) -> Router {
    let b = Arc::clone(&broker);
    let router = Router::new().route("broker.register_cluster", move |p: RegisterParams| {
        b.register_cluster(p.descriptor, p.ttl_s)
            .map(|()| serde_json::json!({ "ok": true }))
    });
    let b = Arc::clone(&broker);
    let router = router.route("broker.find_cluster", move |p: FindParams| b.find_cluster(&p.spec));
    let b = broker;
    router.route("broker.list_clusters", move |_: Empty| {
        Ok::<_, BrokerError>(b.list_clusters())
    })
}

/// Starts a broker on the wall clock.
pub fn start(config: &BrokerConfig) -> std::io::Result<(Arc<Broker>, ServerHandle)> {
    start_with_clock(config, Arc::new(WallClock))
}

pub fn start_with_clock(
    config: &BrokerConfig,
    clock: Arc<dyn Clock>,
) -> std::io::Result<(Arc<Broker>, ServerHandle)> {
    let broker = Arc::new(Broker::new(
        clock,
        Duration::from_millis(config.bid_timeout_ms),
        config.default_ttl_s,
    ));
    let server = wire::serve(&config.listen, router(Arc::clone(&broker)))?;
    Ok((broker, server))
}

#[derive(Clone, Debug)]
pub struct BrokerClient {
    pub address: String,
    pub timeout: Duration,
}

impl BrokerClient {
    pub fn new(address: impl Into<String>, timeout: Duration) -> Self {
        BrokerClient {
            address: address.into(),
            timeout,
        }
    }

    pub fn register_cluster(&self, descriptor: &ClusterDescriptor, ttl_s: u64) -> Result<(), RpcError> {
        let _: serde_json::Value = wire::call(
            &self.address,
            "broker.register_cluster",
            &RegisterParams {
                descriptor: descriptor.clone(),
                ttl_s: Some(ttl_s),
            },
            self.timeout,
        )?;
        Ok(())
    }

    pub fn find_cluster(&self, spec: &JobSpec) -> Result<Selection, RpcError> {
        wire::call(
            &self.address,
            "broker.find_cluster",
            &FindParams { spec: spec.clone() },
            self.timeout,
        )
    }

    pub fn list_clusters(&self) -> Result<Vec<ClusterDescriptor>, RpcError> {
        wire::call(&self.address, "broker.list_clusters", &Empty {}, self.timeout)
    }
}
