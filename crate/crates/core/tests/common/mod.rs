//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use rand::Rng;
use serde_json::{Map, Value};

use sg_core::bank::{self, account_id_for, AccountKind, Bank};
use sg_core::broker::{self, BrokerConfig};
use sg_core::client::{Client, ClientConfig, JobTemplate};
use sg_core::frontend::{
    self, ClockMode, NodeConfig, NodeService, PolicyKind, Ratio, DEFAULT_HORIZON_S,
    DEFAULT_QUOTE_TTL_S,
};
use sg_core::harness::{Scenario, ScenarioCluster, ScenarioUser, WorkItem};
use sg_core::wire::ServerHandle;
use sg_core::{Bid, Money};

pub mod checks;

pub const TIMEOUT: Duration = Duration::from_secs(5);

pub fn template(nodes: u32, walltime_s: u64) -> JobTemplate {
    JobTemplate {
        nodes,
        walltime_s,
        required_features: BTreeSet::new(),
        qos_class: Default::default(),
        max_price: None,
        command: "sim".into(),
        workdir: "/scratch".into(),
    }
}

pub fn user(login: &str, deposit: u64) -> ScenarioUser {
    ScenarioUser {
        login: login.into(),
        secret: None,
        initial_deposit: Money::millicredits(deposit),
    }
}

/// Identical jobs from one user, one per virtual second starting at 0.
pub fn sequential(jobs: usize, nodes: u32, walltime_s: u64) -> Vec<WorkItem> {
    (0..jobs)
        .map(|i| WorkItem {
            submit_at: i as u64,
            user: "alice".into(),
            job: template(nodes, walltime_s),
        })
        .collect()
}

pub fn scenario(clusters: Vec<ScenarioCluster>, deposit: u64, workload: Vec<WorkItem>, duration_s: u64, seed: u64) -> Scenario {
    Scenario {
        clusters,
        users: vec![user("alice", deposit)],
        workload,
        duration_s,
        seed,
        bid_timeout_ms: 2000,
        announce_ttl_s: 60,
    }
}

pub fn one_cluster_one_job(seed: u64) -> Scenario {
    scenario(
        vec![ScenarioCluster::homogeneous("A", 8, 1)],
        10_000,
        sequential(1, 4, 100),
        102,
        seed,
    )
}

pub fn four_by_eight() -> Scenario {
    let clusters = ["A", "B", "C", "D"]
        .iter()
        .map(|id| ScenarioCluster::homogeneous(id, 8, 1))
        .collect();
    scenario(clusters, 1_000_000, sequential(8, 4, 100), 9, 7)
}

/// Homogeneous clusters and identical sequential jobs, with walltimes long
/// enough that every extra job moves a cluster's price by well over one
/// millicredit.
pub fn random_homogeneous<R: Rng>(rng: &mut R, seed: u64) -> Scenario {
    let n_clusters = rng.gen_range(2..=6usize);
    let capacity = rng.gen_range(2..=16u32);
    let base = rng.gen_range(100..=1000u64);
    let jobs = rng.gen_range(n_clusters..=4 * n_clusters);
    let nodes = rng.gen_range(1..=capacity);
    let walltime = rng.gen_range(20 * jobs as u64..=2000);
    let clusters = (0..n_clusters)
        .map(|i| ScenarioCluster::homogeneous(&format!("c{i:02}"), capacity, base))
        .collect();
    scenario(
        clusters,
        u64::MAX / 4,
        sequential(jobs, nodes, walltime),
        jobs as u64 + 1,
        seed,
    )
}

/// Price from first principles with arbitrary precision rationals.
#[allow(clippy::too_many_arguments)]
pub fn oracle_price(
    base: u64,
    nodes: u64,
    walltime: u64,
    committed: u128,
    capacity: u64,
    horizon: u64,
    coefficient: (u64, u64),
    multipliers: &[(u64, u64)],
) -> BigUint {
    let r = |n: u128, d: u128| BigRational::new(n.into(), d.into());
    let load = r(committed, capacity as u128 * horizon as u128);
    let mut p = r(base as u128 * nodes as u128 * walltime as u128, 1)
        * (BigRational::one() + r(coefficient.0 as u128, coefficient.1 as u128) * load);
    for &(n, d) in multipliers {
        p *= r(n as u128, d as u128);
    }
    p.ceil().to_integer().to_biguint().expect("non-negative")
}

pub fn big_to_u64(v: &BigUint) -> Option<u64> {
    v.to_u64()
}

/// Start and finish times for each job under strict FIFO with head-of-line
/// blocking, computed by scanning candidate start times.
///
/// A job starts at the first instant no earlier than its arrival and the
/// previous job's start at which the nodes held by earlier jobs leave room.
pub fn fifo_oracle(capacity: u32, jobs: &[(u64, u32, u64)]) -> Vec<(u64, u64)> {
    let mut out: Vec<(u64, u64)> = Vec::new();
    for (i, &(arrive, nodes, walltime)) in jobs.iter().enumerate() {
        let mut t = arrive.max(out.last().map_or(0, |&(s, _)| s));
        loop {
            let used: u32 = (0..i)
                .filter(|&j| out[j].0 <= t && t < out[j].1)
                .map(|j| jobs[j].1)
                .sum();
            if used + nodes <= capacity {
                break;
            }
            t += 1;
        }
        out.push((t, t + walltime));
    }
    out
}

/// Minimum price, ties to the lexicographically smallest cluster id, by
/// sorting a copy.
pub fn argmin_oracle(bids: &[Bid]) -> Option<Bid> {
    let mut sorted = bids.to_vec();
    sorted.sort_by(|a, b| {
        a.price
            .cmp(&b.price)
            .then_with(|| a.cluster_id.as_bytes().cmp(b.cluster_id.as_bytes()))
    });
    sorted.into_iter().next()
}

/// Sorted-key compact JSON written without going through the crate.
pub fn oracle_canonical(v: &Value) -> String {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), oracle_canonical(&m[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(a) => {
            let body: Vec<String> = a.iter().map(oracle_canonical).collect();
            format!("[{}]", body.join(","))
        }
        other => other.to_string(),
    }
}

pub fn random_value<R: Rng>(rng: &mut R, depth: u32) -> Value {
    let leaf = depth == 0;
    match rng.gen_range(0..if leaf { 5 } else { 7 }) {
        0 => Value::Null,
        1 => Value::Bool(rng.gen()),
        2 => Value::from(rng.gen::<i64>()),
        3 => Value::from(rng.gen::<u64>()),
        4 => Value::String(random_string(rng)),
        5 => Value::Array((0..rng.gen_range(0..4)).map(|_| random_value(rng, depth - 1)).collect()),
        _ => {
            let mut m = Map::new();
            for _ in 0..rng.gen_range(0..4) {
                m.insert(random_string(rng), random_value(rng, depth - 1));
            }
            Value::Object(m)
        }
    }
}

pub fn random_string<R: Rng>(rng: &mut R) -> String {
    const POOL: &[char] = &['a', 'b', 'Z', '0', ' ', '\n', '\r', '\t', '"', '\\', '/', 'é', '\u{1F600}', '\u{0}', '\u{7f}', '.', '_'];
    (0..rng.gen_range(0..8))
        .map(|_| POOL[rng.gen_range(0..POOL.len())])
        .collect()
}

pub fn cluster_secret(id: &str) -> String {
    format!("secret-{id}")
}

pub struct ClusterSpec {
    pub id: &'static str,
    pub capacity: u32,
    pub base_rate: u64,
    pub capabilities: Vec<String>,
    pub multipliers: BTreeMap<String, Ratio>,
}

impl ClusterSpec {
    pub fn plain(id: &'static str) -> Self {
        ClusterSpec {
            id,
            capacity: 8,
            base_rate: 1,
            capabilities: Vec::new(),
            multipliers: BTreeMap::new(),
        }
    }
}

pub fn node_config(c: &ClusterSpec, bank: &str, broker: Option<String>) -> NodeConfig {
    NodeConfig {
        cluster_id: c.id.into(),
        listen: "127.0.0.1:0".into(),
        advertise: None,
        broker,
        bank: bank.into(),
        capacity_nodes: c.capacity,
        capabilities: c.capabilities.clone(),
        base_rate: Money::millicredits(c.base_rate),
        policy: PolicyKind::LoadProportional,
        load_coefficient: Ratio::ONE,
        feature_multipliers: c.multipliers.clone(),
        quote_ttl_s: DEFAULT_QUOTE_TTL_S,
        horizon_s: DEFAULT_HORIZON_S,
        clock_mode: ClockMode::Virtual,
        wall_ms_per_s: 1000,
        users: [("alice".to_owned(), "pw-alice".to_owned())].into(),
        payee_account: account_id_for(c.id, AccountKind::Cluster),
        bank_secret: cluster_secret(c.id),
        announce_ttl_s: 30,
        announce_retry_ms: 50,
        rpc_timeout_ms: 2000,
        log_path: None,
    }
}

/// Bank, wall-clock broker and announcing front-ends on loopback.
pub struct LiveMarket {
    pub bank: Arc<Bank>,
    pub bank_server: ServerHandle,
    pub broker_server: ServerHandle,
    pub nodes: Vec<NodeService>,
}

impl LiveMarket {
    pub fn start(clusters: &[ClusterSpec], bid_timeout_ms: u64) -> Self {
        let secrets = clusters
            .iter()
            .map(|c| (c.id.to_owned(), cluster_secret(c.id)))
            .collect();
        let (bank, bank_server) = bank::start(&bank::BankConfig {
            listen: "127.0.0.1:0".into(),
            cluster_secrets: secrets,
            log_path: None,
        })
        .unwrap();
        let (_, broker_server) = broker::start(&BrokerConfig {
            listen: "127.0.0.1:0".into(),
            bid_timeout_ms,
            default_ttl_s: 30,
        })
        .unwrap();
        let nodes = clusters
            .iter()
            .map(|c| {
                frontend::start(&node_config(
                    c,
                    &bank_server.address(),
                    Some(broker_server.address()),
                ))
                .unwrap()
            })
            .collect();
        let market = LiveMarket {
            bank,
            bank_server,
            broker_server,
            nodes,
        };
        market.wait_for_clusters(clusters.len());
        market
    }

    pub fn wait_for_clusters(&self, n: usize) {
        let client = broker::BrokerClient::new(self.broker_server.address(), TIMEOUT);
        let deadline = std::time::Instant::now() + Duration::from_secs(5);
        while client.list_clusters().unwrap().len() < n {
            assert!(std::time::Instant::now() < deadline, "clusters never announced");
            std::thread::sleep(Duration::from_millis(10));
        }
    }

    pub fn client(&self, seed: u64) -> Client {
        Client::new(ClientConfig {
            broker: self.broker_server.address(),
            bank: self.bank_server.address(),
            user: "alice".into(),
            secret: "pw-alice".into(),
            account_id: account_id_for("alice", AccountKind::User),
            rng_seed: Some(seed),
            timeout_ms: 5000,
        })
        .unwrap()
    }

    pub fn shutdown(self) {
        for n in self.nodes {
            n.shutdown();
        }
        self.broker_server.shutdown();
        self.bank_server.shutdown();
    }
}
