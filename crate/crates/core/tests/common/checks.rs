//! Property checks shared by the focused integration tests and the
//! acceptance run. Each returns `Err` with a description of the first
//! counterexample.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Map;

use sg_core::bank::{self, account_id_for, AccountKind, Bank, BankError, SettleOutcome};
use sg_core::broker::{select_lowest, Broker};
use sg_core::clock::WallClock;
use sg_core::frontend::Scheduler;
use sg_core::wire::{decode_message, encode_message, Message, RpcError, RpcErrorCode, RpcRequest, RpcResponse};
use sg_core::{Bid, ClusterDescriptor, JobState, Money};

use super::{argmin_oracle, fifo_oracle, random_string, random_value, ClusterSpec, LiveMarket};

const CLUSTERS: [&str; 3] = ["A", "B", "C"];

/// Mirror of the bank kept by the test: balances, held escrows and the sum
/// of every accepted deposit.
#[derive(Default)]
struct Model {
    balances: BTreeMap<String, u64>,
    kinds: BTreeMap<String, AccountKind>,
    escrows: BTreeMap<String, (String, String, u64, bool)>,
    held_jobs: BTreeMap<String, String>,
    deposited: u128,
    next_escrow: u64,
}

/// One random operation sequence against a bank and a mirror model. The
/// audit must equal cumulative deposits after every step.
pub fn bank_sequence(seed: u64, ops: usize, log: Option<&Path>) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let secrets: BTreeMap<String, String> = CLUSTERS
        .iter()
        .map(|c| (c.to_string(), format!("s-{c}")))
        .collect();
    let bank = match log {
        Some(path) => Bank::with_log(secrets.clone(), path).map_err(|e| e.to_string())?,
        None => Bank::new(secrets.clone()),
    };
    let mut m = Model::default();
    let users = ["u1", "u2", "u3", "u4"];
    let jobs: Vec<String> = (0..6).map(|i| format!("{i:032x}")).collect();

    for step in 0..ops {
        let ctx = |what: &str| format!("seed {seed} step {step}: {what}");
        match rng.gen_range(0..10) {
            0 => {
                let (owner, kind) = if rng.gen_bool(0.5) {
                    (*users.choose(&mut rng).unwrap(), AccountKind::User)
                } else {
                    (*CLUSTERS.choose(&mut rng).unwrap(), AccountKind::Cluster)
                };
                let id = account_id_for(owner, kind);
                let got = bank.create_account(owner, kind);
                let fresh = !m.kinds.contains_key(&id);
                match got {
                    Ok(_) if fresh => {
                        m.kinds.insert(id.clone(), kind);
                        m.balances.insert(id, 0);
                    }
                    Err(BankError::DuplicateAccount { .. }) if !fresh => {}
                    other => return Err(ctx(&format!("create {id}: {other:?}"))),
                }
            }
            1..=3 => {
                let id = random_account(&mut rng, &users);
                let amount = match rng.gen_range(0..10) {
                    0 => 0,
                    _ => rng.gen_range(1..=5000),
                };
                let got = bank.deposit(&id, Money::millicredits(amount));
                let expect_ok = m.kinds.contains_key(&id) && amount > 0;
                match got {
                    Ok(bal) if expect_ok => {
                        let b = m.balances.get_mut(&id).unwrap();
                        *b += amount;
                        m.deposited += u128::from(amount);
                        if bal.amount != *b {
                            return Err(ctx("deposit returned wrong balance"));
                        }
                    }
                    Err(_) if !expect_ok => {}
                    other => return Err(ctx(&format!("deposit {id} {amount}: {other:?}"))),
                }
            }
            4..=6 => {
                let payer = random_account(&mut rng, &users);
                let payee = random_account(&mut rng, &users);
                let amount = rng.gen_range(0..=3000);
                let job = jobs.choose(&mut rng).unwrap().clone();
                let got = bank.hold_escrow(&payer, &payee, Money::millicredits(amount), &job);
                let expect_ok = m.kinds.get(&payer) == Some(&AccountKind::User)
                    && m.kinds.get(&payee) == Some(&AccountKind::Cluster)
                    && amount > 0
                    && !m.held_jobs.contains_key(&job)
                    && m.balances[&payer] >= amount;
                match got {
                    Ok(esc) if expect_ok => {
                        m.next_escrow += 1;
                        if esc != format!("esc-{:06}", m.next_escrow) {
                            return Err(ctx(&format!("unexpected escrow id {esc}")));
                        }
                        *m.balances.get_mut(&payer).unwrap() -= amount;
                        m.held_jobs.insert(job, esc.clone());
                        m.escrows.insert(esc, (payer, payee, amount, true));
                    }
                    Err(_) if !expect_ok => {}
                    other => return Err(ctx(&format!("hold {payer}->{payee} {amount}: {other:?}"))),
                }
            }
            _ => {
                if m.escrows.is_empty() || rng.gen_bool(0.1) {
                    if bank.settle_escrow("esc-999999", SettleOutcome::Completed, "s-A").is_ok() {
                        return Err(ctx("settled an unknown escrow"));
                    }
                    continue;
                }
                let ids: Vec<&String> = m.escrows.keys().collect();
                let esc = (*ids.choose(&mut rng).unwrap()).clone();
                let (payer, payee, amount, held) = m.escrows[&esc].clone();
                let owner = payee.trim_start_matches("cluster:");
                let honest = rng.gen_bool(0.8);
                let secret = if honest {
                    format!("s-{owner}")
                } else {
                    "wrong".to_owned()
                };
                let outcome = if rng.gen_bool(0.5) {
                    SettleOutcome::Completed
                } else {
                    SettleOutcome::Failed
                };
                let got = bank.settle_escrow(&esc, outcome, &secret);
                match got {
                    Ok(_) if honest && held => {
                        let target = match outcome {
                            SettleOutcome::Completed => payee,
                            SettleOutcome::Failed => payer,
                        };
                        *m.balances.get_mut(&target).unwrap() += amount;
                        m.escrows.get_mut(&esc).unwrap().3 = false;
                        m.held_jobs.retain(|_, e| *e != esc);
                    }
                    Err(BankError::BadReporter(_)) if !honest => {}
                    Err(BankError::AlreadySettled(_)) if honest && !held => {}
                    other => return Err(ctx(&format!("settle {esc}: {other:?}"))),
                }
            }
        }

        let audit = bank.audit();
        if audit.total() != m.deposited {
            return Err(ctx(&format!(
                "audit {} + {} != deposits {}",
                audit.total_balances, audit.total_held, m.deposited
            )));
        }
        let held: u128 = m
            .escrows
            .values()
            .filter(|e| e.3)
            .map(|e| u128::from(e.2))
            .sum();
        if u128::from(audit.total_held.amount) != held {
            return Err(ctx("held total disagrees with the model"));
        }
    }

    for (id, bal) in &m.balances {
        if bank.balance(id).map_err(|e| e.to_string())?.amount != *bal {
            return Err(format!("seed {seed}: final balance of {id} disagrees"));
        }
    }
    if let Some(path) = log {
        let replayed = bank::replay(path, secrets).map_err(|e| e.to_string())?;
        if replayed.snapshot() != bank.snapshot() {
            return Err(format!("seed {seed}: replayed log differs from live state"));
        }
    }
    Ok(())
}

fn random_account<R: Rng>(rng: &mut R, users: &[&str]) -> String {
    match rng.gen_range(0..9) {
        0 => "user:nobody".to_owned(),
        1..=5 => account_id_for(users.choose(rng).unwrap(), AccountKind::User),
        _ => account_id_for(CLUSTERS.choose(rng).unwrap(), AccountKind::Cluster),
    }
}

/// Drives the real scheduler with one random submission sequence and
/// compares every start and finish with the FIFO oracle.
pub fn scheduler_sequence(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = rng.gen_range(1..=16u32);
    let count = rng.gen_range(1..=30usize);
    let mut t = 0;
    let mut jobs = Vec::with_capacity(count);
    for _ in 0..count {
        if rng.gen_bool(0.6) {
            t += rng.gen_range(0..=20);
        }
        jobs.push((t, rng.gen_range(1..=capacity), rng.gen_range(1..=40u64)));
    }
    let expected = fifo_oracle(capacity, &jobs);

    let mut s = Scheduler::new(capacity);
    let mut started = vec![None; count];
    let mut finished = vec![None; count];
    let ids: Vec<String> = (0..count).map(|i| format!("j{i:03}")).collect();
    let mut record = |events: Vec<sg_core::frontend::LifecycleEvent>| {
        for e in events {
            let i: usize = e.job_id[1..].parse().unwrap();
            match e.state {
                JobState::Running => started[i] = Some(e.time),
                JobState::Completed => finished[i] = Some(e.time),
                other => panic!("unexpected event state {other:?}"),
            }
        }
    };
    for (i, &(arrive, nodes, walltime)) in jobs.iter().enumerate() {
        let dt = arrive - s.clock();
        if dt > 0 {
            record(s.tick(dt));
        }
        s.enqueue(&ids[i], nodes, walltime);
    }
    let horizon = expected.iter().map(|&(_, f)| f).max().unwrap_or(0);
    record(s.tick(horizon - s.clock() + 1));

    for i in 0..count {
        let got = (started[i], finished[i]);
        let want = (Some(expected[i].0), Some(expected[i].1));
        if got != want {
            return Err(format!(
                "seed {seed} capacity {capacity} job {i} {:?}: got {got:?}, oracle {want:?}",
                jobs[i]
            ));
        }
        let st = s.status(&ids[i]).unwrap();
        if (st.started_at, st.finished_at) != want || st.state != JobState::Completed {
            return Err(format!("seed {seed} job {i}: status {st:?} disagrees"));
        }
    }
    Ok(())
}

/// All orderings of every bid set of up to five bids whose prices come
/// from a three-value pool, so ties of every shape occur. Returns the
/// number of orderings checked.
pub fn argmin_exhaustive() -> Result<usize, String> {
    let ids = ["b", "B", "a", "ab", "A0"];
    let mut checked = 0;
    for k in 1..=ids.len() {
        let combos = 3usize.pow(k as u32);
        for code in 0..combos {
            let mut c = code;
            let bids: Vec<Bid> = ids[..k]
                .iter()
                .map(|id| {
                    let price = (c % 3) as u64 * 10 + 5;
                    c /= 3;
                    Bid {
                        cluster_id: id.to_string(),
                        price: Money::millicredits(price),
                        bid_token: format!("{id}-q"),
                        expires_at: 60,
                    }
                })
                .collect();
            let want = argmin_oracle(&bids).unwrap();
            let mut order: Vec<usize> = (0..k).collect();
            loop {
                let perm: Vec<Bid> = order.iter().map(|&i| bids[i].clone()).collect();
                let got = select_lowest(perm.iter()).unwrap();
                if *got != want {
                    return Err(format!("order {order:?} of {bids:?}: picked {got:?}"));
                }
                checked += 1;
                if !next_permutation(&mut order) {
                    break;
                }
            }
        }
    }
    if select_lowest(std::iter::empty()).is_some() {
        return Err("empty bid set produced a winner".into());
    }
    Ok(checked)
}

fn next_permutation(v: &mut [usize]) -> bool {
    let Some(i) = (1..v.len()).rev().find(|&i| v[i - 1] < v[i]) else {
        return false;
    };
    let j = (i..v.len()).rev().find(|&j| v[j] > v[i - 1]).unwrap();
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// One healthy front-end and one socket that accepts connections but never
/// answers. Returns the winner and the time `find_cluster` took.
pub fn isolation(bid_timeout: Duration) -> Result<(String, Duration), String> {
    let market = LiveMarket::start(&[ClusterSpec::plain("B")], 60_000);
    let silent = TcpListener::bind("127.0.0.1:0").map_err(|e| e.to_string())?;
    let broker = Broker::new(Arc::new(WallClock), bid_timeout, 30);
    let healthy = market.nodes[0].node.describe();
    let dead = ClusterDescriptor {
        cluster_id: "A".into(),
        address: silent.local_addr().unwrap().to_string(),
        capacity_nodes: 8,
        capabilities: Default::default(),
        base_rate: Money::millicredits(1),
        payee_account: "cluster:A".into(),
    };
    broker.register_cluster(dead, None).map_err(|e| e.to_string())?;
    broker.register_cluster(healthy, None).map_err(|e| e.to_string())?;

    let spec = super::template(4, 100)
        .into_spec(format!("{:032x}", 1), "alice", "pw-alice")
        .map_err(|e| e.to_string())?;
    let began = Instant::now();
    let result = broker.find_cluster(&spec);
    let elapsed = began.elapsed();
    drop(silent);
    market.shutdown();
    let sel = result.map_err(|e| e.to_string())?;
    if sel.price != Money::millicredits(400) {
        return Err(format!("unexpected price {}", sel.price));
    }
    Ok((sel.cluster_id, elapsed))
}

pub fn random_message<R: Rng>(rng: &mut R) -> Message {
    let id = loop {
        let s = random_string(rng);
        if !s.is_empty() {
            break s;
        }
    };
    if rng.gen_bool(0.5) {
        let method: String = (0..rng.gen_range(1..12))
            .map(|_| *b"abcxyz_.".choose(rng).unwrap() as char)
            .collect();
        let mut params = Map::new();
        for _ in 0..rng.gen_range(0..4) {
            params.insert(random_string(rng), random_value(rng, 3));
        }
        Message::Request(RpcRequest { id, method, params })
    } else {
        let outcome = if rng.gen_bool(0.5) {
            Ok(random_value(rng, 3))
        } else {
            let code = *[
                RpcErrorCode::Malformed,
                RpcErrorCode::UnknownMethod,
                RpcErrorCode::InvalidParams,
                RpcErrorCode::ApplicationError,
                RpcErrorCode::Timeout,
            ]
            .choose(rng)
            .unwrap();
            Err(RpcError::new(code, random_string(rng)))
        };
        Message::Response(RpcResponse { id, outcome })
    }
}

/// Encodes and decodes `n` generated messages.
pub fn wire_round_trip(seed: u64, n: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n {
        let msg = random_message(&mut rng);
        let bytes = encode_message(&msg);
        let (last, body) = bytes.split_last().unwrap();
        if *last != b'\n' || body.contains(&b'\n') || body.contains(&b'\r') {
            return Err(format!("message {i}: bad framing {:?}", String::from_utf8_lossy(&bytes)));
        }
        match decode_message(body) {
            Ok(back) if back == msg => {}
            other => return Err(format!("message {i}: {msg:?} came back as {other:?}")),
        }
    }
    Ok(())
}

/// Feeds `n` random lines to the decoder: raw bytes, byte-mutated valid
/// messages and truncations. Returns how many were accepted.
pub fn wire_fuzz(seed: u64, n: usize) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted = 0;
    for i in 0..n {
        let line: Vec<u8> = match i % 3 {
            0 => (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect(),
            1 => {
                let mut b = encode_message(&random_message(&mut rng));
                b.pop();
                for _ in 0..rng.gen_range(1..4) {
                    if b.is_empty() {
                        break;
                    }
                    let at = rng.gen_range(0..b.len());
                    b[at] = rng.gen();
                }
                b
            }
            _ => {
                let mut b = encode_message(&random_message(&mut rng));
                b.pop();
                let cut = rng.gen_range(0..=b.len());
                b.truncate(cut);
                b
            }
        };
        let outcome = std::panic::catch_unwind(|| decode_message(&line));
        match outcome {
            Ok(Ok(_)) => accepted += 1,
            Ok(Err(_)) => {}
            Err(_) => return Err(format!("decoder panicked on {line:?}")),
        }
    }
    Ok(accepted)
}
