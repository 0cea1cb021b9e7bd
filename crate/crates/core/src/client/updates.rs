//! Per-user FIFO of oracle answers awaiting pickup.
//!
//! `updates.jsonl` records every queued update; `delivered.jsonl` records
//! how far each user has drained. The delivery mark is written before a
//! drain returns, so an update is handed out at most once, and updates are
//! keyed by transaction id, so a monitor re-delivery after a crash does not
//! queue it twice.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datastore::{append_jsonl, read_jsonl, DatastoreError};
use crate::ledger::{Address, MicroAlgo};
use crate::monitor::Event;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Update {
    pub seq: u64,
    pub user: String,
    pub txn_id: String,
    pub op: String,
    /// Dataset or model the update is about.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<String>,
    pub from: Address,
    pub amount: MicroAlgo,
    pub round: u64,
    pub timestamp: i64,
    pub args: BTreeMap<String, Value>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Delivered {
    user: String,
    upto: u64,
}

#[derive(Default)]
struct State {
    next_seq: u64,
    pending: HashMap<String, VecDeque<Update>>,
    known: HashSet<(String, String)>,
}

pub struct UpdateQueue {
    dir: PathBuf,
    state: Mutex<State>,
}

impl UpdateQueue {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, DatastoreError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut cursor: HashMap<String, u64> = HashMap::new();
        for d in read_jsonl::<Delivered>(&dir.join("delivered.jsonl"))? {
            let c = cursor.entry(d.user).or_default();
            *c = (*c).max(d.upto);
        }
        let mut state = State::default();
        for u in read_jsonl::<Update>(&dir.join("updates.jsonl"))? {
            state.next_seq = state.next_seq.max(u.seq + 1);
            state.known.insert((u.user.clone(), u.txn_id.clone()));
            if cursor.get(&u.user).is_none_or(|&c| u.seq > c) {
                state.pending.entry(u.user.clone()).or_default().push_back(u);
            }
        }
        Ok(Self {
            dir,
            state: Mutex::new(state),
        })
    }

    /// Queues an inbound transaction for `user`. Returns false if it was
    /// already queued.
    pub fn push(&self, user: &str, event: &Event) -> Result<bool, DatastoreError> {
        let mut guard = self.state.lock().expect("update lock");
        let state = &mut *guard;
        let key = (user.to_string(), event.txn.id.clone());
        if state.known.contains(&key) {
            return Ok(false);
        }
        let env = &event.envelope;
        let update = Update {
            seq: state.next_seq,
            user: user.to_string(),
            txn_id: event.txn.id.clone(),
            op: env.op.clone(),
            name: ["model_name", "ds_name", "ref_name"].iter().find_map(|k| env.get(k)),
            status: env.get("status"),
            from: event.txn.sender.clone(),
            amount: event.txn.amount,
            round: event.txn.round,
            timestamp: event.txn.timestamp,
            args: env.args.clone(),
        };
        append_jsonl(&self.dir.join("updates.jsonl"), &update)?;
        state.next_seq += 1;
        state.known.insert(key);
        state.pending.entry(user.to_string()).or_default().push_back(update);
        Ok(true)
    }

    /// Removes and returns everything queued for `user`, oldest first.
    pub fn drain(&self, user: &str) -> Result<Vec<Update>, DatastoreError> {
        let mut state = self.state.lock().expect("update lock");
        let Some(queue) = state.pending.get_mut(user) else {
            return Ok(Vec::new());
        };
        let Some(last) = queue.back() else {
            return Ok(Vec::new());
        };
        append_jsonl(
            &self.dir.join("delivered.jsonl"),
            &Delivered {
                user: user.to_string(),
                upto: last.seq,
            },
        )?;
        Ok(queue.drain(..).collect())
    }

    pub fn pending(&self, user: &str) -> usize {
        self.state
            .lock()
            .expect("update lock")
            .pending
            .get(user)
            .map_or(0, VecDeque::len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::Transaction;
    use crate::protocol::{NoteEnvelope, Opcode};

    fn event(id: &str, ts: i64) -> Event {
        Event {
            txn: Transaction {
                id: id.into(),
                sender: "ORACLE".into(),
                receiver: "U".into(),
                amount: 0,
                note: Vec::new(),
                round: ts as u64,
                timestamp: ts,
            },
            envelope: NoteEnvelope::new(Opcode::ModelTrained)
                .arg("model_name", "m")
                .arg("loss", "0.1")
                .arg("accuracy", "0.9")
                .arg("status", "ok"),
        }
    }

    #[test]
    fn drains_in_arrival_order_at_most_once() {
        let dir = tempfile::tempdir().unwrap();
        let q = UpdateQueue::open(dir.path()).unwrap();
        assert!(q.push("alice", &event("t1", 1)).unwrap());
        assert!(q.push("alice", &event("t2", 2)).unwrap());
        assert!(!q.push("alice", &event("t1", 1)).unwrap());
        let got = q.drain("alice").unwrap();
        assert_eq!(got.iter().map(|u| u.txn_id.as_str()).collect::<Vec<_>>(), ["t1", "t2"]);
        assert_eq!(got[0].name.as_deref(), Some("m"));
        assert_eq!(got[0].args["accuracy"], "0.9");
        assert!(q.drain("alice").unwrap().is_empty());
        assert!(q.drain("nobody").unwrap().is_empty());
    }

    #[test]
    fn reopen_keeps_undelivered_and_drops_delivered() {
        let dir = tempfile::tempdir().unwrap();
        {
            let q = UpdateQueue::open(dir.path()).unwrap();
            q.push("a", &event("t1", 1)).unwrap();
            q.drain("a").unwrap();
            q.push("a", &event("t2", 2)).unwrap();
            q.push("b", &event("t3", 3)).unwrap();
        }
        let q = UpdateQueue::open(dir.path()).unwrap();
        assert!(!q.push("a", &event("t1", 1)).unwrap());
        assert_eq!(q.drain("a").unwrap()[0].txn_id, "t2");
        assert_eq!(q.pending("b"), 1);
        q.push("a", &event("t4", 4)).unwrap();
        let seqs: Vec<u64> = q.drain("a").unwrap().iter().map(|u| u.seq).collect();
        assert_eq!(seqs, [3]);
    }
}
