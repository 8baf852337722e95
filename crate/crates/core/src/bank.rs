//! Accounts, balances and escrow.
//!
//! All mutations go through one write lock and are appended to an optional
//! operation log (one canonical JSON line per successful operation) before
//! they are applied. Replaying the log reproduces the ledger exactly.
//!
//! Conservation: `sum(balances) + sum(HELD escrows)` changes only through
//! [`Bank::deposit`], and by exactly the deposited amount.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{canonical_encode, Money};
use crate::wire::{self, AppError, Router, RpcError, ServerHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AccountKind {
    User,
    Cluster,
}

impl AccountKind {
    fn prefix(self) -> &'static str {
        match self {
            AccountKind::User => "user",
            AccountKind::Cluster => "cluster",
        }
    }
}

/// Account ids are derived from `(kind, owner)` so configuration files can
/// name an account before the bank has created it.
pub fn account_id_for(owner: &str, kind: AccountKind) -> String {
    format!("{}:{owner}", kind.prefix())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Account {
    pub account_id: String,
    pub owner: String,
    pub kind: AccountKind,
    pub balance: Money,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EscrowState {
    Held,
    Released,
    Refunded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EscrowRecord {
    pub escrow_id: String,
    pub payer: String,
    pub payee: String,
    pub amount: Money,
    pub job_id: String,
    pub state: EscrowState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SettleOutcome {
    Completed,
    Failed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub total_balances: Money,
    pub total_held: Money,
}

impl Audit {
    pub fn total(&self) -> u128 {
        u128::from(self.total_balances.amount) + u128::from(self.total_held.amount)
    }
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("account for {owner} ({kind:?}) already exists")]
    DuplicateAccount { owner: String, kind: AccountKind },
    #[error("unknown account {0}")]
    UnknownAccount(String),
    #[error("amount must be positive")]
    NonPositiveAmount,
    #[error("balance {balance} is below {requested}")]
    InsufficientFunds { balance: Money, requested: Money },
    #[error("job {0} already has a held escrow")]
    DuplicateEscrow(String),
    #[error("unknown escrow {0}")]
    UnknownEscrow(String),
    #[error("escrow {0} is already settled")]
    AlreadySettled(String),
    #[error("reporter is not authorized to settle escrow {0}")]
    BadReporter(String),
    #[error("account {account} must be a {expected:?} account")]
    WrongAccountKind {
        account: String,
        expected: AccountKind,
    },
    #[error("owner must not be empty")]
    EmptyOwner,
    #[error("balance overflow")]
    Overflow,
    #[error("operation log: {0}")]
    Log(#[from] io::Error),
    #[error("corrupt operation log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
}

impl AppError for BankError {
    fn kind(&self) -> &'static str {
        match self {
            BankError::DuplicateAccount { .. } => "duplicate_account",
            BankError::UnknownAccount(_) => "unknown_account",
            BankError::NonPositiveAmount => "non_positive_amount",
            BankError::InsufficientFunds { .. } => "insufficient_funds",
            BankError::DuplicateEscrow(_) => "duplicate_escrow",
            BankError::UnknownEscrow(_) => "unknown_escrow",
            BankError::AlreadySettled(_) => "already_settled",
            BankError::BadReporter(_) => "bad_reporter",
            BankError::WrongAccountKind { .. } => "wrong_account_kind",
            BankError::EmptyOwner => "empty_owner",
            BankError::Overflow => "overflow",
            BankError::Log(_) | BankError::CorruptLog { .. } => "internal",
        }
    }
}

/// One successful mutation, as written to the operation log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogEntry {
    CreateAccount {
        owner: String,
        kind: AccountKind,
    },
    Deposit {
        account_id: String,
        amount: Money,
    },
    HoldEscrow {
        escrow_id: String,
        payer: String,
        payee: String,
        amount: Money,
        job_id: String,
    },
    SettleEscrow {
        escrow_id: String,
        outcome: SettleOutcome,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
struct Ledger {
    accounts: BTreeMap<String, Account>,
    escrows: BTreeMap<String, EscrowRecord>,
    /// job_id -> escrow_id of the HELD escrow for that job.
    held_by_job: BTreeMap<String, String>,
    next_escrow: u64,
}

impl Ledger {
    fn account(&self, id: &str) -> Result<&Account, BankError> {
        self.accounts
            .get(id)
            .ok_or_else(|| BankError::UnknownAccount(id.to_owned()))
    }

    fn next_escrow_id(&self) -> String {
        format!("esc-{:06}", self.next_escrow + 1)
    }

    /// Checks `entry` against the current state without changing anything.
    fn check(&self, entry: &LogEntry) -> Result<(), BankError> {
        match entry {
            LogEntry::CreateAccount { owner, kind } => {
                if owner.is_empty() {
                    return Err(BankError::EmptyOwner);
                }
                if self.accounts.contains_key(&account_id_for(owner, *kind)) {
                    return Err(BankError::DuplicateAccount {
                        owner: owner.clone(),
                        kind: *kind,
                    });
                }
            }
            LogEntry::Deposit { account_id, amount } => {
                let acct = self.account(account_id)?;
                if amount.is_zero() {
                    return Err(BankError::NonPositiveAmount);
                }
                acct.balance.checked_add(*amount).ok_or(BankError::Overflow)?;
                self.total_with(*amount)?;
            }
            LogEntry::HoldEscrow {
                payer,
                payee,
                amount,
                job_id,
                ..
            } => {
                let from = self.account(payer)?;
                let to = self.account(payee)?;
                if from.kind != AccountKind::User {
                    return Err(BankError::WrongAccountKind {
                        account: payer.clone(),
                        expected: AccountKind::User,
                    });
                }
                if to.kind != AccountKind::Cluster {
                    return Err(BankError::WrongAccountKind {
                        account: payee.clone(),
                        expected: AccountKind::Cluster,
                    });
                }
                if amount.is_zero() {
                    return Err(BankError::NonPositiveAmount);
                }
                if self.held_by_job.contains_key(job_id) {
                    return Err(BankError::DuplicateEscrow(job_id.clone()));
                }
                if from.balance < *amount {
                    return Err(BankError::InsufficientFunds {
                        balance: from.balance,
                        requested: *amount,
                    });
                }
            }
            LogEntry::SettleEscrow { escrow_id, outcome } => {
                let esc = self
                    .escrows
                    .get(escrow_id)
                    .ok_or_else(|| BankError::UnknownEscrow(escrow_id.clone()))?;
                if esc.state != EscrowState::Held {
                    return Err(BankError::AlreadySettled(escrow_id.clone()));
                }
                let target = match outcome {
                    SettleOutcome::Completed => &esc.payee,
                    SettleOutcome::Failed => &esc.payer,
                };
                self.account(target)?
                    .balance
                    .checked_add(esc.amount)
                    .ok_or(BankError::Overflow)?;
            }
        }
        Ok(())
    }

    /// Grand total stays representable as Money after adding `extra`.
    fn total_with(&self, extra: Money) -> Result<(), BankError> {
        let audit = self.audit();
        let total = audit.total() + u128::from(extra.amount);
        if total > u128::from(u64::MAX) {
            return Err(BankError::Overflow);
        }
        Ok(())
    }

    /// Applies an entry that has already passed [`Ledger::check`].
    fn commit(&mut self, entry: &LogEntry) {
        match entry {
            LogEntry::CreateAccount { owner, kind } => {
                let id = account_id_for(owner, *kind);
                self.accounts.insert(
                    id.clone(),
                    Account {
                        account_id: id,
                        owner: owner.clone(),
                        kind: *kind,
                        balance: Money::ZERO,
                    },
                );
            }
            LogEntry::Deposit { account_id, amount } => {
                let acct = self.accounts.get_mut(account_id).expect("checked");
                acct.balance = acct.balance.checked_add(*amount).expect("checked");
            }
            LogEntry::HoldEscrow {
                escrow_id,
                payer,
                payee,
                amount,
                job_id,
            } => {
                let acct = self.accounts.get_mut(payer).expect("checked");
                acct.balance = acct.balance.checked_sub(*amount).expect("checked");
                self.next_escrow += 1;
                self.held_by_job.insert(job_id.clone(), escrow_id.clone());
                self.escrows.insert(
                    escrow_id.clone(),
                    EscrowRecord {
                        escrow_id: escrow_id.clone(),
                        payer: payer.clone(),
                        payee: payee.clone(),
                        amount: *amount,
                        job_id: job_id.clone(),
                        state: EscrowState::Held,
                    },
                );
            }
            LogEntry::SettleEscrow { escrow_id, outcome } => {
                let esc = self.escrows.get_mut(escrow_id).expect("checked");
                let (target, state) = match outcome {
                    SettleOutcome::Completed => (esc.payee.clone(), EscrowState::Released),
                    SettleOutcome::Failed => (esc.payer.clone(), EscrowState::Refunded),
                };
                esc.state = state;
                let amount = esc.amount;
                self.held_by_job.remove(&esc.job_id);
                let acct = self.accounts.get_mut(&target).expect("checked");
                acct.balance = acct.balance.checked_add(amount).expect("checked");
            }
        }
    }

    fn apply(&mut self, entry: &LogEntry) -> Result<(), BankError> {
        self.check(entry)?;
        self.commit(entry);
        Ok(())
    }

    fn audit(&self) -> Audit {
        let balances: u64 = self.accounts.values().map(|a| a.balance.amount).sum();
        let held: u64 = self
            .escrows
            .values()
            .filter(|e| e.state == EscrowState::Held)
            .map(|e| e.amount.amount)
            .sum();
        Audit {
            total_balances: Money::millicredits(balances),
            total_held: Money::millicredits(held),
        }
    }
}

struct Inner {
    ledger: Ledger,
    log: Option<File>,
}

impl Inner {
    /// Check, append to the log, then mutate: a failed log write leaves the
    /// ledger untouched.
    fn execute(&mut self, entry: LogEntry) -> Result<(), BankError> {
        self.ledger.check(&entry)?;
        if let Some(log) = self.log.as_mut() {
            let mut line = canonical_encode(&entry);
            line.push(b'\n');
            log.write_all(&line)?;
            log.flush()?;
        }
        self.ledger.commit(&entry);
        Ok(())
    }
}

/// The bank. Cheap to share behind an `Arc`; every method takes `&self`.
pub struct Bank {
    inner: RwLock<Inner>,
    cluster_secrets: BTreeMap<String, String>,
}

impl Bank {
    /// In-memory bank without an operation log.
    pub fn new(cluster_secrets: BTreeMap<String, String>) -> Self {
        Bank {
            inner: RwLock::new(Inner {
                ledger: Ledger::default(),
                log: None,
            }),
            cluster_secrets,
        }
    }

    /// Opens a bank backed by the log at `path`, replaying whatever the log
    /// already holds.
    pub fn with_log(
        cluster_secrets: BTreeMap<String, String>,
        path: &Path,
    ) -> Result<Self, BankError> {
        let ledger = if path.exists() {
            replay_log(path)?
        } else {
            Ledger::default()
        };
        let log = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Bank {
            inner: RwLock::new(Inner {
                ledger,
                log: Some(log),
            }),
            cluster_secrets,
        })
    }

    /// Creates a CLUSTER account for every configured cluster that lacks one.
    pub fn ensure_cluster_accounts(&self) -> Result<(), BankError> {
        for cluster_id in self.cluster_secrets.keys() {
            match self.create_account(cluster_id, AccountKind::Cluster) {
                Ok(_) | Err(BankError::DuplicateAccount { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Inner> {
        self.inner.write().unwrap_or_else(|p| p.into_inner())
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Inner> {
        self.inner.read().unwrap_or_else(|p| p.into_inner())
    }

    pub fn create_account(&self, owner: &str, kind: AccountKind) -> Result<String, BankError> {
        self.write().execute(LogEntry::CreateAccount {
            owner: owner.to_owned(),
            kind,
        })?;
        Ok(account_id_for(owner, kind))
    }

    pub fn deposit(&self, account_id: &str, amount: Money) -> Result<Money, BankError> {
        let mut inner = self.write();
        inner.execute(LogEntry::Deposit {
            account_id: account_id.to_owned(),
            amount,
        })?;
        Ok(inner.ledger.accounts[account_id].balance)
    }

    pub fn hold_escrow(
        &self,
        payer: &str,
        payee: &str,
        amount: Money,
        job_id: &str,
    ) -> Result<String, BankError> {
        let mut inner = self.write();
        let escrow_id = inner.ledger.next_escrow_id();
        inner.execute(LogEntry::HoldEscrow {
            escrow_id: escrow_id.clone(),
            payer: payer.to_owned(),
            payee: payee.to_owned(),
            amount,
            job_id: job_id.to_owned(),
        })?;
        Ok(escrow_id)
    }

    /// Completes or refunds a held escrow. Only the payee cluster, proving
    /// itself with its registered secret, may report the outcome.
    pub fn settle_escrow(
        &self,
        escrow_id: &str,
        outcome: SettleOutcome,
        reporter_secret: &str,
    ) -> Result<EscrowRecord, BankError> {
        let mut inner = self.write();
        let esc = inner
            .ledger
            .escrows
            .get(escrow_id)
            .ok_or_else(|| BankError::UnknownEscrow(escrow_id.to_owned()))?;
        let payee_owner = &inner.ledger.account(&esc.payee)?.owner;
        match self.cluster_secrets.get(payee_owner) {
            Some(secret) if secret == reporter_secret => {}
            _ => return Err(BankError::BadReporter(escrow_id.to_owned())),
        }
        inner.execute(LogEntry::SettleEscrow {
            escrow_id: escrow_id.to_owned(),
            outcome,
        })?;
        Ok(inner.ledger.escrows[escrow_id].clone())
    }

    pub fn verify_escrow(
        &self,
        escrow_id: &str,
        payee: &str,
        job_id: &str,
        min_amount: Money,
    ) -> bool {
        self.read().ledger.escrows.get(escrow_id).is_some_and(|e| {
            e.state == EscrowState::Held
                && e.payee == payee
                && e.job_id == job_id
                && e.amount >= min_amount
        })
    }

    pub fn audit(&self) -> Audit {
        self.read().ledger.audit()
    }

    pub fn balance(&self, account_id: &str) -> Result<Money, BankError> {
        Ok(self.read().ledger.account(account_id)?.balance)
    }

    pub fn escrow(&self, escrow_id: &str) -> Result<EscrowRecord, BankError> {
        self.read()
            .ledger
            .escrows
            .get(escrow_id)
            .cloned()
            .ok_or_else(|| BankError::UnknownEscrow(escrow_id.to_owned()))
    }

    pub fn escrows(&self) -> Vec<EscrowRecord> {
        self.read().ledger.escrows.values().cloned().collect()
    }

    pub fn accounts(&self) -> Vec<Account> {
        self.read().ledger.accounts.values().cloned().collect()
    }

    /// Canonical bytes of the whole ledger; equal iff states are equal.
    pub fn snapshot(&self) -> Vec<u8> {
        canonical_encode(&self.read().ledger)
    }
}

fn replay_log(path: &Path) -> Result<Ledger, BankError> {
    let mut ledger = Ledger::default();
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let entry: LogEntry = serde_json::from_str(&line).map_err(|e| BankError::CorruptLog {
            line: i + 1,
            reason: e.to_string(),
        })?;
        ledger.apply(&entry).map_err(|e| BankError::CorruptLog {
            line: i + 1,
            reason: e.to_string(),
        })?;
    }
    Ok(ledger)
}

/// Rebuilds a bank from its operation log without opening it for writing.
pub fn replay(path: &Path, cluster_secrets: BTreeMap<String, String>) -> Result<Bank, BankError> {
    let ledger = replay_log(path)?;
    Ok(Bank {
        inner: RwLock::new(Inner { ledger, log: None }),
        cluster_secrets,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BankConfig {
    pub listen: String,
    #[serde(default)]
    pub cluster_secrets: BTreeMap<String, String>,
    #[serde(default)]
    pub log_path: Option<PathBuf>,
}

#[derive(Deserialize)]
struct CreateAccountParams {
    owner: String,
    kind: AccountKind,
}

#[derive(Deserialize)]
struct DepositParams {
    account_id: String,
    amount: Money,
}

#[derive(Serialize, Deserialize)]
struct HoldParams {
    payer: String,
    payee: String,
    amount: Money,
    job_id: String,
}

#[derive(Serialize, Deserialize)]
struct SettleParams {
    escrow_id: String,
    outcome: SettleOutcome,
    reporter_secret: String,
}

#[derive(Serialize, Deserialize)]
struct VerifyParams {
    escrow_id: String,
    payee: String,
    job_id: String,
    min_amount: Money,
}

#[derive(Serialize, Deserialize)]
struct AccountParams {
    account_id: String,
}

#[derive(Serialize, Deserialize)]
struct EscrowParams {
    escrow_id: String,
}

#[derive(Serialize, Deserialize)]
struct Empty {}

pub fn router(bank: Arc<Bank>) -> Router {
    let b = Arc::clone(&bank);
    let router = Router::new().route("bank.create_account", move |p: CreateAccountParams| {
        b.create_account(&p.owner, p.kind)
            .map(|account_id| serde_json::json!({ "account_id": account_id }))
    });
    let b = Arc::clone(&bank);
    let router = router.route("bank.deposit", move |p: DepositParams| {
        b.deposit(&p.account_id, p.amount)
            .map(|balance| serde_json::json!({ "balance": balance }))
    });
    let b = Arc::clone(&bank);
    let router = router.route("bank.hold_escrow", move |p: HoldParams| {
        b.hold_escrow(&p.payer, &p.payee, p.amount, &p.job_id)
            .map(|escrow_id| serde_json::json!({ "escrow_id": escrow_id }))
    });
    let b = Arc::clone(&bank);
    let router = router.route("bank.settle_escrow", move |p: SettleParams| {
        b.settle_escrow(&p.escrow_id, p.outcome, &p.reporter_secret)
    });
    let b = Arc::clone(&bank);
    let router = router.route("bank.verify_escrow", move |p: VerifyParams| {
        Ok::<_, BankError>(b.verify_escrow(&p.escrow_id, &p.payee, &p.job_id, p.min_amount))
    });
    let b = Arc::clone(&bank);
    let router = router.route("bank.audit", move |_: Empty| Ok::<_, BankError>(b.audit()));
    let b = Arc::clone(&bank);
    let router = router.route("bank.balance", move |p: AccountParams| {
        b.balance(&p.account_id)
            .map(|balance| serde_json::json!({ "balance": balance }))
    });
    let b = Arc::clone(&bank);
    let router = router.route("bank.escrow", move |p: EscrowParams| b.escrow(&p.escrow_id));
    let b = bank;
    router.route("bank.escrows", move |_: Empty| Ok::<_, BankError>(b.escrows()))
}

/// Starts the bank service described by `config`.
pub fn start(config: &BankConfig) -> Result<(Arc<Bank>, ServerHandle), BankError> {
    let bank = match &config.log_path {
        Some(path) => Bank::with_log(config.cluster_secrets.clone(), path)?,
        None => Bank::new(config.cluster_secrets.clone()),
    };
    bank.ensure_cluster_accounts()?;
    let bank = Arc::new(bank);
    let handle = wire::serve(&config.listen, router(Arc::clone(&bank)))?;
    Ok((bank, handle))
}

/// RPC client for a remote bank.
#[derive(Clone, Debug)]
pub struct BankClient {
    pub address: String,
    pub timeout: Duration,
}

#[derive(Deserialize)]
struct AccountIdResult {
    account_id: String,
}

#[derive(Deserialize)]
struct BalanceResult {
    balance: Money,
}

#[derive(Deserialize)]
struct EscrowIdResult {
    escrow_id: String,
}

impl BankClient {
    pub fn new(address: impl Into<String>, timeout: Duration) -> Self {
        BankClient {
            address: address.into(),
            timeout,
        }
    }

    fn call<P: Serialize, R: serde::de::DeserializeOwned>(
        &self,
        method: &str,
        params: &P,
    ) -> Result<R, RpcError> {
        wire::call(&self.address, method, params, self.timeout)
    }

    pub fn create_account(&self, owner: &str, kind: AccountKind) -> Result<String, RpcError> {
        let r: AccountIdResult = self.call(
            "bank.create_account",
            &serde_json::json!({ "owner": owner, "kind": kind }),
        )?;
        Ok(r.account_id)
    }

    pub fn deposit(&self, account_id: &str, amount: Money) -> Result<Money, RpcError> {
        let r: BalanceResult = self.call(
            "bank.deposit",
            &serde_json::json!({ "account_id": account_id, "amount": amount }),
        )?;
        Ok(r.balance)
    }

    pub fn hold_escrow(
        &self,
        payer: &str,
        payee: &str,
        amount: Money,
        job_id: &str,
    ) -> Result<String, RpcError> {
        let r: EscrowIdResult = self.call(
            "bank.hold_escrow",
            &HoldParams {
                payer: payer.into(),
                payee: payee.into(),
                amount,
                job_id: job_id.into(),
            },
        )?;
        Ok(r.escrow_id)
    }

    pub fn settle_escrow(
        &self,
        escrow_id: &str,
        outcome: SettleOutcome,
        reporter_secret: &str,
    ) -> Result<EscrowRecord, RpcError> {
        self.call(
            "bank.settle_escrow",
            &SettleParams {
                escrow_id: escrow_id.into(),
                outcome,
                reporter_secret: reporter_secret.into(),
            },
        )
    }

    pub fn verify_escrow(
        &self,
        escrow_id: &str,
        payee: &str,
        job_id: &str,
        min_amount: Money,
    ) -> Result<bool, RpcError> {
        self.call(
            "bank.verify_escrow",
            &VerifyParams {
                escrow_id: escrow_id.into(),
                payee: payee.into(),
                job_id: job_id.into(),
                min_amount,
            },
        )
    }

    pub fn audit(&self) -> Result<Audit, RpcError> {
        self.call("bank.audit", &Empty {})
    }

    pub fn balance(&self, account_id: &str) -> Result<Money, RpcError> {
        let r: BalanceResult = self.call(
            "bank.balance",
            &AccountParams {
                account_id: account_id.into(),
            },
        )?;
        Ok(r.balance)
    }

    pub fn escrow(&self, escrow_id: &str) -> Result<EscrowRecord, RpcError> {
        self.call(
            "bank.escrow",
            &EscrowParams {
                escrow_id: escrow_id.into(),
            },
        )
    }

    pub fn escrows(&self) -> Result<Vec<EscrowRecord>, RpcError> {
        self.call("bank.escrows", &Empty {})
    }
}
