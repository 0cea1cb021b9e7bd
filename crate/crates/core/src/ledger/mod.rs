//! Simulated ledger with instant finality, plus the adapter interface the
//! nodes use to talk to any chain.
//!
//! Every transaction is a payment that may carry a note. A committed
//! transaction is final immediately. The indexer side of the adapter
//! (`lookup`) is allowed to return duplicates and to transiently drop
//! entries, mirroring a flaky public indexer; the monitor is responsible
//! for turning that into exactly-once delivery.

mod clock;
pub mod http;
mod remote;
mod sim;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clock::{Clock, ManualClock, SystemClock};
pub use remote::RemoteChain;
pub use sim::{IndexerFaults, SimLedger};

/// Integer microALGO. 1 ALGO = 1_000_000 microALGO.
pub type MicroAlgo = u64;

pub const MICROALGO_PER_ALGO: MicroAlgo = 1_000_000;

/// Flat fee charged on every non-mint transaction.
pub const NETWORK_FEE: MicroAlgo = 1_000;

/// Sender of faucet mints. Never holds a balance.
pub const GENESIS: &str = "GENESIS";

/// Account credited with network fees.
pub const FEE_SINK: &str = "FEE_SINK";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Address(String);

impl Address {
    pub fn new(s: impl Into<String>) -> Self {
        Address(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn genesis() -> Self {
        Address(GENESIS.to_string())
    }

    pub fn fee_sink() -> Self {
        Address(FEE_SINK.to_string())
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Address {
    fn from(s: &str) -> Self {
        Address(s.to_string())
    }
}

impl From<String> for Address {
    fn from(s: String) -> Self {
        Address(s)
    }
}

/// A committed ledger entry. Serialized form is one commit-log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: String,
    pub sender: Address,
    pub receiver: Address,
    pub amount: MicroAlgo,
    #[serde(with = "b64")]
    pub note: Vec<u8>,
    pub round: u64,
    pub timestamp: i64,
}

impl Transaction {
    pub fn is_mint(&self) -> bool {
        self.sender.as_str() == GENESIS
    }
}

/// What a submitter asks the ledger to commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaymentRequest {
    pub sender: Address,
    pub receiver: Address,
    pub amount: MicroAlgo,
    #[serde(with = "b64")]
    pub note: Vec<u8>,
}

impl PaymentRequest {
    pub fn new(sender: Address, receiver: Address, amount: MicroAlgo, note: Vec<u8>) -> Self {
        Self {
            sender,
            receiver,
            amount,
            note,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail", rename_all = "snake_case")]
pub enum LedgerError {
    #[error("unknown sender {0}")]
    UnknownSender(Address),
    #[error("insufficient balance for {address}: have {balance}, need {needed}")]
    InsufficientBalance {
        address: Address,
        balance: MicroAlgo,
        needed: MicroAlgo,
    },
    #[error("reserved address {0} cannot send payments")]
    ReservedSender(Address),
    #[error("duplicate transaction id {0}")]
    DuplicateId(String),
    #[error("commit log out of order at round {0}")]
    OutOfOrder(u64),
    #[error("operation not supported by this chain: {0}")]
    Unsupported(String),
    #[error("commit log io: {0}")]
    Io(String),
    #[error("chain transport: {0}")]
    Transport(String),
}

/// The surface a node needs from a chain.
///
/// `lookup` returns every committed transaction to `recipient` with
/// `timestamp >= min_timestamp` at least once, eventually. It may return
/// duplicates and may return them out of order.
pub trait ChainAdapter: Send + Sync {
    fn submit(&self, req: PaymentRequest) -> Result<Transaction, LedgerError>;

    fn lookup(&self, recipient: &Address, min_timestamp: i64) -> Result<Vec<Transaction>, LedgerError>;

    fn balance(&self, address: &Address) -> Result<MicroAlgo, LedgerError>;

    /// Transactions sent or received by `address`, in commit order.
    fn history(&self, address: &Address) -> Result<Vec<Transaction>, LedgerError>;

    /// Full commit log in commit order.
    fn commit_log(&self) -> Result<Vec<Transaction>, LedgerError>;

    /// Mint test funds. Only simulated chains support this.
    fn faucet(&self, address: &Address, amount: MicroAlgo) -> Result<Transaction, LedgerError>;

    fn network_fee(&self) -> MicroAlgo {
        NETWORK_FEE
    }
}

/// Balances reconstructed from a commit log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BalanceSheet {
    /// Every account except the fee sink.
    pub accounts: BTreeMap<Address, MicroAlgo>,
    pub fee_sink: MicroAlgo,
    pub minted: u128,
}

impl BalanceSheet {
    pub fn balance(&self, address: &Address) -> MicroAlgo {
        if address.as_str() == FEE_SINK {
            return self.fee_sink;
        }
        self.accounts.get(address).copied().unwrap_or(0)
    }

    pub fn total_held(&self) -> u128 {
        self.accounts.values().map(|&v| v as u128).sum::<u128>()
    }

    pub fn exists(&self, address: &Address) -> bool {
        self.accounts.contains_key(address)
    }

    /// Checks that `txn` could be applied, without applying it.
    pub fn check(&self, txn: &Transaction, fee: MicroAlgo) -> Result<(), LedgerError> {
        if txn.is_mint() {
            return Ok(());
        }
        if txn.sender.as_str() == FEE_SINK {
            return Err(LedgerError::ReservedSender(txn.sender.clone()));
        }
        let balance = *self
            .accounts
            .get(&txn.sender)
            .ok_or_else(|| LedgerError::UnknownSender(txn.sender.clone()))?;
        let needed = txn.amount.saturating_add(fee);
        if balance < needed {
            return Err(LedgerError::InsufficientBalance {
                address: txn.sender.clone(),
                balance,
                needed,
            });
        }
        Ok(())
    }

    /// Validates and applies one transaction.
    pub fn apply(&mut self, txn: &Transaction, fee: MicroAlgo) -> Result<(), LedgerError> {
        self.check(txn, fee)?;
        if txn.is_mint() {
            *self.accounts.entry(txn.receiver.clone()).or_insert(0) += txn.amount;
            self.minted += txn.amount as u128;
            return Ok(());
        }
        let needed = txn.amount + fee;
        *self.accounts.get_mut(&txn.sender).expect("checked") -= needed;
        if txn.receiver.as_str() == FEE_SINK {
            self.fee_sink += txn.amount;
        } else {
            *self.accounts.entry(txn.receiver.clone()).or_insert(0) += txn.amount;
        }
        self.fee_sink += fee;
        Ok(())
    }
}

/// Replays a commit log from genesis.
pub fn replay(log: &[Transaction], fee: MicroAlgo) -> Result<BalanceSheet, LedgerError> {
    let mut sheet = BalanceSheet::default();
    let mut last: Option<(u64, i64)> = None;
    for txn in log {
        if let Some((round, ts)) = last {
            if txn.round <= round || txn.timestamp < ts {
                return Err(LedgerError::OutOfOrder(txn.round));
            }
        }
        sheet.apply(txn, fee)?;
        last = Some((txn.round, txn.timestamp));
    }
    Ok(sheet)
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        STANDARD.decode(s.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx(round: u64, from: &str, to: &str, amount: u64) -> Transaction {
        Transaction {
            id: format!("t{round}"),
            sender: from.into(),
            receiver: to.into(),
            amount,
            note: vec![],
            round,
            timestamp: round as i64,
        }
    }

    #[test]
    fn replay_rejects_overdraw() {
        let log = vec![tx(1, GENESIS, "A", 500), tx(2, "A", "B", 1_000)];
        assert!(matches!(
            replay(&log, NETWORK_FEE),
            Err(LedgerError::InsufficientBalance { .. })
        ));
    }

    #[test]
    fn replay_rejects_reordered_rounds() {
        let log = vec![tx(2, GENESIS, "A", 500), tx(1, GENESIS, "A", 500)];
        assert_eq!(replay(&log, NETWORK_FEE), Err(LedgerError::OutOfOrder(1)));
    }

    #[test]
    fn commit_log_line_shape() {
        let mut t = tx(7, "A", "B", 3);
        t.note = b"hi".to_vec();
        let line = serde_json::to_string(&t).unwrap();
        assert_eq!(
            line,
            r#"{"id":"t7","sender":"A","receiver":"B","amount":3,"note":"aGk=","round":7,"timestamp":7}"#
        );
        let back: Transaction = serde_json::from_str(&line).unwrap();
        assert_eq!(back, t);
    }
}
