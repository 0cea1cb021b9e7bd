use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    Address, BalanceSheet, ChainAdapter, Clock, LedgerError, MicroAlgo, PaymentRequest, SystemClock, Transaction,
    GENESIS, NETWORK_FEE,
};

/// Indexer misbehaviour to inject into `lookup`. All off by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndexerFaults {
    /// Probability that a returned transaction is returned twice.
    pub duplicate_prob: f64,
    /// Probability that a matching transaction is left out of one lookup.
    /// Each lookup draws independently, so a skipped entry reappears later.
    pub skip_prob: f64,
    /// Shuffle the result order.
    pub reorder: bool,
    pub seed: u64,
}

impl Default for IndexerFaults {
    fn default() -> Self {
        Self {
            duplicate_prob: 0.0,
            skip_prob: 0.0,
            reorder: false,
            seed: 0,
        }
    }
}

impl IndexerFaults {
    fn active(&self) -> bool {
        self.duplicate_prob > 0.0 || self.skip_prob > 0.0 || self.reorder
    }
}

#[derive(Default)]
struct State {
    log: Vec<Transaction>,
    sheet: BalanceSheet,
    ids: HashSet<String>,
    by_recipient: HashMap<Address, Vec<usize>>,
    by_party: HashMap<Address, Vec<usize>>,
    round: u64,
    last_ts: i64,
}

impl State {
    fn commit(&mut self, txn: Transaction, fee: MicroAlgo) -> Result<(), LedgerError> {
        if self.ids.contains(&txn.id) {
            return Err(LedgerError::DuplicateId(txn.id));
        }
        if !self.log.is_empty() && (txn.round <= self.round || txn.timestamp < self.last_ts) {
            return Err(LedgerError::OutOfOrder(txn.round));
        }
        self.sheet.apply(&txn, fee)?;
        let idx = self.log.len();
        self.by_recipient.entry(txn.receiver.clone()).or_default().push(idx);
        self.by_party.entry(txn.sender.clone()).or_default().push(idx);
        if txn.receiver != txn.sender {
            self.by_party.entry(txn.receiver.clone()).or_default().push(idx);
        }
        self.round = txn.round;
        self.last_ts = txn.timestamp;
        self.ids.insert(txn.id.clone());
        self.log.push(txn);
        Ok(())
    }
}

/// In-process ledger. One lock serializes commits, so concurrent submitters
/// observe a single total order.
pub struct SimLedger {
    state: RwLock<State>,
    clock: Arc<dyn Clock>,
    fee: MicroAlgo,
    faults: Mutex<(IndexerFaults, ChaCha8Rng)>,
    log_file: Option<Mutex<BufWriter<File>>>,
}

impl SimLedger {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        Self {
            state: RwLock::new(State::default()),
            clock,
            fee: NETWORK_FEE,
            faults: Mutex::new((IndexerFaults::default(), ChaCha8Rng::seed_from_u64(0))),
            log_file: None,
        }
    }

    pub fn with_system_clock() -> Self {
        Self::new(Arc::new(SystemClock))
    }

    /// Opens a persistent ledger. An existing commit log is replayed first;
    /// new commits are appended one JSON object per line.
    pub fn open(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, LedgerError> {
        let path = path.as_ref();
        let mut ledger = Self::new(clock);
        if path.exists() {
            let file = File::open(path).map_err(io_err)?;
            let mut state = State::default();
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(io_err)?;
                if line.trim().is_empty() {
                    continue;
                }
                let txn: Transaction =
                    serde_json::from_str(&line).map_err(|e| LedgerError::Io(format!("line {}: {e}", n + 1)))?;
                state.commit(txn, ledger.fee)?;
            }
            ledger.state = RwLock::new(state);
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        ledger.log_file = Some(Mutex::new(BufWriter::new(file)));
        Ok(ledger)
    }

    pub fn set_faults(&self, faults: IndexerFaults) {
        let mut guard = self.faults.lock().unwrap();
        *guard = (faults, ChaCha8Rng::seed_from_u64(faults.seed));
    }

    pub fn fee(&self) -> MicroAlgo {
        self.fee
    }

    pub fn balance_sheet(&self) -> BalanceSheet {
        self.state.read().unwrap().sheet.clone()
    }

    pub fn len(&self) -> usize {
        self.state.read().unwrap().log.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn commit_request(&self, req: PaymentRequest) -> Result<Transaction, LedgerError> {
        let mut state = self.state.write().unwrap();
        let round = state.round + 1;
        let timestamp = self.clock.now_ms().max(state.last_ts);
        let txn = Transaction {
            id: txn_id(round, &req, timestamp),
            sender: req.sender,
            receiver: req.receiver,
            amount: req.amount,
            note: req.note,
            round,
            timestamp,
        };
        // validate before writing so the log never holds a rejected entry
        state.sheet.check(&txn, self.fee)?;
        if let Some(file) = &self.log_file {
            let mut w = file.lock().unwrap();
            let line = serde_json::to_string(&txn).map_err(|e| LedgerError::Io(e.to_string()))?;
            writeln!(w, "{line}").map_err(io_err)?;
            w.flush().map_err(io_err)?;
        }
        state.commit(txn.clone(), self.fee)?;
        Ok(txn)
    }
}

fn io_err(e: std::io::Error) -> LedgerError {
    LedgerError::Io(e.to_string())
}

fn txn_id(round: u64, req: &PaymentRequest, timestamp: i64) -> String {
    let mut h = Sha256::new();
    h.update(round.to_be_bytes());
    h.update(timestamp.to_be_bytes());
    h.update(req.sender.as_str().as_bytes());
    h.update([0]);
    h.update(req.receiver.as_str().as_bytes());
    h.update([0]);
    h.update(req.amount.to_be_bytes());
    h.update(&req.note);
    hex::encode(&h.finalize()[..16]).to_uppercase()
}

impl ChainAdapter for SimLedger {
    fn submit(&self, req: PaymentRequest) -> Result<Transaction, LedgerError> {
        if req.sender.as_str() == GENESIS {
            return Err(LedgerError::ReservedSender(req.sender));
        }
        self.commit_request(req)
    }

    fn lookup(&self, recipient: &Address, min_timestamp: i64) -> Result<Vec<Transaction>, LedgerError> {
        let matching: Vec<Transaction> = {
            let state = self.state.read().unwrap();
            match state.by_recipient.get(recipient) {
                None => Vec::new(),
                Some(idxs) => {
                    // timestamps are non-decreasing in commit order
                    let start = idxs.partition_point(|&i| state.log[i].timestamp < min_timestamp);
                    idxs[start..].iter().map(|&i| state.log[i].clone()).collect()
                }
            }
        };
        let mut guard = self.faults.lock().unwrap();
        let (faults, rng) = &mut *guard;
        if !faults.active() {
            return Ok(matching);
        }
        let mut out = Vec::with_capacity(matching.len());
        for txn in matching {
            if faults.skip_prob > 0.0 && rng.random_bool(faults.skip_prob.min(1.0)) {
                continue;
            }
            if faults.duplicate_prob > 0.0 && rng.random_bool(faults.duplicate_prob.min(1.0)) {
                out.push(txn.clone());
            }
            out.push(txn);
        }
        if faults.reorder {
            out.shuffle(rng);
        }
        Ok(out)
    }

    fn balance(&self, address: &Address) -> Result<MicroAlgo, LedgerError> {
        Ok(self.state.read().unwrap().sheet.balance(address))
    }

    fn history(&self, address: &Address) -> Result<Vec<Transaction>, LedgerError> {
        let state = self.state.read().unwrap();
        Ok(state
            .by_party
            .get(address)
            .map(|idxs| idxs.iter().map(|&i| state.log[i].clone()).collect())
            .unwrap_or_default())
    }

    fn commit_log(&self) -> Result<Vec<Transaction>, LedgerError> {
        Ok(self.state.read().unwrap().log.clone())
    }

    fn faucet(&self, address: &Address, amount: MicroAlgo) -> Result<Transaction, LedgerError> {
        self.commit_request(PaymentRequest::new(
            Address::genesis(),
            address.clone(),
            amount,
            Vec::new(),
        ))
    }

    fn network_fee(&self) -> MicroAlgo {
        self.fee
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::{replay, ManualClock, FEE_SINK};

    fn ledger() -> (SimLedger, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new(1_000));
        (SimLedger::new(clock.clone()), clock)
    }

    fn pay(l: &SimLedger, from: &str, to: &str, amount: u64, note: &[u8]) -> Result<Transaction, LedgerError> {
        l.submit(PaymentRequest::new(from.into(), to.into(), amount, note.to_vec()))
    }

    #[test]
    fn payment_moves_amount_and_fee() {
        let (l, _) = ledger();
        l.faucet(&"A".into(), 10_000_000).unwrap();
        l.faucet(&"B".into(), 10_000_000).unwrap();
        pay(&l, "A", "B", 3_000_000, b"").unwrap();
        assert_eq!(l.balance(&"A".into()).unwrap(), 6_999_000);
        assert_eq!(l.balance(&"B".into()).unwrap(), 13_000_000);
        assert_eq!(l.balance(&FEE_SINK.into()).unwrap(), 1_000);
    }

    #[test]
    fn self_payment_costs_only_the_fee() {
        let (l, _) = ledger();
        l.faucet(&"A".into(), 5_000).unwrap();
        let t = pay(&l, "A", "A", 0, b"n").unwrap();
        assert_eq!(t.note, b"n");
        assert_eq!(l.balance(&"A".into()).unwrap(), 4_000);
    }

    #[test]
    fn overdraw_is_rejected_without_state_change() {
        let (l, _) = ledger();
        l.faucet(&"A".into(), 500).unwrap();
        let before = l.commit_log().unwrap();
        let err = pay(&l, "A", "B", 1_000, b"").unwrap_err();
        assert!(matches!(err, LedgerError::InsufficientBalance { .. }));
        assert_eq!(l.balance(&"A".into()).unwrap(), 500);
        assert_eq!(l.balance(&"B".into()).unwrap(), 0);
        assert_eq!(l.commit_log().unwrap(), before);
    }

    #[test]
    fn unknown_sender_is_rejected() {
        let (l, _) = ledger();
        assert_eq!(
            pay(&l, "nobody", "B", 0, b"").unwrap_err(),
            LedgerError::UnknownSender("nobody".into())
        );
    }

    #[test]
    fn genesis_cannot_submit() {
        let (l, _) = ledger();
        assert!(matches!(
            pay(&l, GENESIS, "B", 1, b""),
            Err(LedgerError::ReservedSender(_))
        ));
    }

    #[test]
    fn faucet_mints_and_is_additive() {
        let (l, _) = ledger();
        l.faucet(&"A".into(), 500_000_000).unwrap();
        l.faucet(&"A".into(), 500_000_000).unwrap();
        let (m, _) = ledger();
        m.faucet(&"A".into(), 1_000_000_000).unwrap();
        assert_eq!(l.balance(&"A".into()).unwrap(), m.balance(&"A".into()).unwrap());
        let zero = l.faucet(&"A".into(), 0).unwrap();
        assert_eq!(zero.amount, 0);
        assert_eq!(l.len(), 3);
        assert_eq!(l.balance_sheet().minted, 1_000_000_000);
    }

    #[test]
    fn rounds_and_timestamps_are_monotone_even_if_clock_goes_back() {
        let (l, clock) = ledger();
        l.faucet(&"A".into(), 10).unwrap();
        clock.set(10);
        let t = l.faucet(&"A".into(), 10).unwrap();
        assert_eq!(t.round, 2);
        assert_eq!(t.timestamp, 1_000);
    }

    #[test]
    fn lookup_filters_by_recipient_and_time() {
        let (l, clock) = ledger();
        assert!(l.lookup(&"A".into(), 0).unwrap().is_empty());
        l.faucet(&"A".into(), 1).unwrap();
        clock.advance(10);
        l.faucet(&"A".into(), 2).unwrap();
        l.faucet(&"B".into(), 3).unwrap();
        let got = l.lookup(&"A".into(), 1_005).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].amount, 2);
        assert!(l.lookup(&"A".into(), 5_000).unwrap().is_empty());
    }

    #[test]
    fn duplicate_injection_keeps_every_id() {
        let (l, _) = ledger();
        let ids: Vec<String> = (0..3).map(|i| l.faucet(&"A".into(), i).unwrap().id).collect();
        l.set_faults(IndexerFaults {
            duplicate_prob: 0.9,
            reorder: true,
            seed: 3,
            ..Default::default()
        });
        let got = l.lookup(&"A".into(), 0).unwrap();
        assert!(got.len() > 3);
        for id in &ids {
            assert!(got.iter().any(|t| &t.id == id));
        }
    }

    #[test]
    fn persistent_log_replays_on_open() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let clock = Arc::new(ManualClock::new(5));
        {
            let l = SimLedger::open(&path, clock.clone()).unwrap();
            l.faucet(&"A".into(), 9_000).unwrap();
            clock.advance(1);
            pay(&l, "A", "B", 2_000, b"x").unwrap();
        }
        let l = SimLedger::open(&path, clock.clone()).unwrap();
        assert_eq!(l.balance(&"A".into()).unwrap(), 6_000);
        assert_eq!(l.balance(&"B".into()).unwrap(), 2_000);
        let log = l.commit_log().unwrap();
        assert_eq!(replay(&log, NETWORK_FEE).unwrap(), l.balance_sheet());
        // appending after reopen continues the round counter
        let t = pay(&l, "B", "A", 1, b"").unwrap();
        assert_eq!(t.round, 3);
    }
}
