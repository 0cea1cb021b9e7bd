//! In-process harness: one simulated ledger, one oracle, synchronous steps.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use predictchain::ledger::{Address, ChainAdapter, MicroAlgo, PaymentRequest, SimLedger, Transaction};
use predictchain::monitor::{Event, Monitor};
use predictchain::oracle::{Oracle, OracleConfig};
use predictchain::protocol::{decode_note, encode_note, NoteEnvelope, Opcode};
use serde_json::Value;
use tempfile::TempDir;

pub const ORACLE: &str = "ORACLE";

pub struct Harness {
    pub dir: TempDir,
    pub chain: Arc<SimLedger>,
    pub oracle: Arc<Oracle>,
    monitor: Monitor,
}

impl Harness {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let chain = Arc::new(
            SimLedger::open(
                dir.path().join("ledger.jsonl"),
                Arc::new(predictchain::ledger::SystemClock),
            )
            .unwrap(),
        );
        let oracle = start_oracle(&dir, &chain);
        let monitor = oracle.monitor().unwrap();
        Self {
            dir,
            chain,
            oracle,
            monitor,
        }
    }

    pub fn config(dir: &TempDir) -> OracleConfig {
        let mut config = OracleConfig::new(ORACLE, dir.path().join("oracle"));
        config.funding = Some(predictchain::oracle::DEFAULT_FUNDING);
        config.schedule_path = Some(dir.path().join("oracle").join("schedule.txt"));
        config
    }

    /// Drops the oracle and starts a fresh one on the same storage.
    pub fn restart(&mut self) {
        self.oracle = start_oracle(&self.dir, &self.chain);
        self.monitor = self.oracle.monitor().unwrap();
    }

    /// Reopens the ledger from its commit log as well.
    pub fn restart_all(&mut self) {
        self.chain = Arc::new(
            SimLedger::open(
                self.dir.path().join("ledger.jsonl"),
                Arc::new(predictchain::ledger::SystemClock),
            )
            .unwrap(),
        );
        self.restart();
    }

    pub fn oracle_address(&self) -> Address {
        Address::new(ORACLE)
    }

    pub fn user(&self, name: &str, amount: MicroAlgo) -> Address {
        let a = Address::new(name);
        self.chain.faucet(&a, amount).unwrap();
        a
    }

    pub fn inbox_file(&self, name: &str, bytes: &[u8]) -> String {
        let inbox = self.oracle.config().inbox();
        std::fs::write(inbox.join(name), bytes).unwrap();
        format!("local://{name}")
    }

    pub fn send(&self, from: &Address, op: Opcode, args: &[(&str, &str)], amount: MicroAlgo) -> Transaction {
        let mut env = NoteEnvelope::new(op);
        for (k, v) in args {
            env = env.arg(k, *v);
        }
        self.send_env(from, &env, amount)
    }

    pub fn send_env(&self, from: &Address, env: &NoteEnvelope, amount: MicroAlgo) -> Transaction {
        let note = encode_note(env).unwrap();
        self.chain
            .submit(PaymentRequest::new(from.clone(), self.oracle_address(), amount, note))
            .unwrap()
    }

    /// One monitor pass then every runnable job.
    pub fn step(&mut self) -> usize {
        let oracle = Arc::clone(&self.oracle);
        let mut dispatch = |e: &Event| oracle.on_event(e);
        self.monitor.step(self.chain.as_ref(), &mut dispatch).unwrap();
        self.oracle.run_pending().unwrap()
    }

    /// Every note the oracle sent that answers or rewards `req`.
    pub fn sent_for(&self, req: &str) -> Vec<(Transaction, NoteEnvelope)> {
        self.chain
            .history(&self.oracle_address())
            .unwrap()
            .into_iter()
            .filter(|t| t.sender == self.oracle_address())
            .filter_map(|t| decode_note(&t.note).ok().map(|e| (t, e)))
            .filter(|(_, e)| e.get("req").as_deref() == Some(req))
            .collect()
    }

    pub fn responses(&self, req: &str) -> Vec<(Transaction, NoteEnvelope)> {
        self.sent_for(req)
            .into_iter()
            .filter(|(_, e)| e.opcode().is_ok_and(Opcode::is_response))
            .collect()
    }

    pub fn rewards(&self, req: &str) -> Vec<(Transaction, NoteEnvelope)> {
        self.sent_for(req)
            .into_iter()
            .filter(|(_, e)| matches!(e.opcode(), Ok(Opcode::Reward)))
            .collect()
    }

    pub fn only_response(&self, req: &str) -> (Transaction, NoteEnvelope) {
        let mut r = self.responses(req);
        assert_eq!(r.len(), 1, "expected one response to {req}, got {r:?}");
        r.pop().unwrap()
    }

    pub fn quote(&self, kind: predictchain::tokenomics::PriceKind, params: &[(&str, &str)]) -> MicroAlgo {
        let params: BTreeMap<String, String> = params.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        self.oracle.quote(kind, &params).unwrap().price_microalgo
    }

    pub fn storage(&self) -> PathBuf {
        self.dir.path().join("oracle")
    }
}

fn start_oracle(dir: &TempDir, chain: &Arc<SimLedger>) -> Arc<Oracle> {
    let chain: Arc<dyn ChainAdapter> = chain.clone();
    Oracle::start(Harness::config(dir), chain).unwrap()
}

pub fn arg(env: &NoteEnvelope, key: &str) -> String {
    env.get(key).unwrap_or_else(|| panic!("missing {key} in {env:?}"))
}

pub fn str_args(env: &NoteEnvelope) -> BTreeMap<String, String> {
    env.args
        .iter()
        .map(|(k, v)| (k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string)))
        .collect()
}

pub fn value_str(v: &Value) -> String {
    v.as_str().map_or_else(|| v.to_string(), str::to_string)
}

pub mod nodes;
