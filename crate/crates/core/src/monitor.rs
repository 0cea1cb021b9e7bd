//! Polling monitor: turns an at-least-once, unordered indexer into
//! exactly-once, ordered event dispatch.
//!
//! Two pieces of state do the work. `min_timestamp` bounds each lookup and
//! trails the newest dispatched timestamp by a lateness window, so an entry
//! the indexer skipped once is still inside the next lookup. `seen` holds the
//! ids already dispatched so duplicates and re-deliveries are dropped. An id
//! is marked seen only after the dispatcher returns, and the mark is appended
//! to the state file before the next event is handled, which makes a restart
//! safe.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use tracing::{debug, warn};

use crate::ledger::{Address, ChainAdapter, LedgerError, Transaction};
use crate::protocol::{decode_note, NoteEnvelope, ProtocolError};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(1);
pub const DEFAULT_LATENESS_MS: i64 = 60_000;

#[derive(Debug, Clone, Copy)]
pub struct MonitorConfig {
    pub poll_interval: Duration,
    /// How far `min_timestamp` trails the newest dispatched timestamp.
    pub lateness_ms: i64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            poll_interval: DEFAULT_POLL_INTERVAL,
            lateness_ms: DEFAULT_LATENESS_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub txn: Transaction,
    pub envelope: NoteEnvelope,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonitorState {
    pub watched: Address,
    pub min_timestamp: i64,
    /// id -> transaction timestamp, used for compaction.
    pub seen: HashMap<String, i64>,
    pub newest_ts: i64,
}

impl MonitorState {
    pub fn new(watched: Address) -> Self {
        Self {
            watched,
            min_timestamp: 0,
            seen: HashMap::new(),
            newest_ts: i64::MIN,
        }
    }

    pub fn has_seen(&self, id: &str) -> bool {
        self.seen.contains_key(id)
    }
}

/// Plain payments (empty note) are expected; anything else is worth a warning.
fn log_undecodable(txn: &Transaction, e: &impl std::fmt::Display) {
    if txn.note.is_empty() {
        debug!(id = %txn.id, "skipping payment without note");
    } else {
        warn!(id = %txn.id, error = %e, "skipping undecodable note");
    }
}

/// Outcome of one polling step.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct StepReport {
    pub dispatched: usize,
    pub failed: usize,
    pub undecodable: usize,
}

/// Inbound transaction after de-duplication, before dispatch.
#[derive(Debug, Clone)]
pub struct Incoming {
    pub txn: Transaction,
    pub decoded: Result<NoteEnvelope, ProtocolError>,
}

/// Cooperative shutdown flag that also interrupts sleeps.
#[derive(Clone, Default)]
pub struct Shutdown(Arc<(Mutex<bool>, Condvar)>);

impl Shutdown {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        let (flag, cv) = &*self.0;
        *flag.lock().unwrap() = true;
        cv.notify_all();
    }

    pub fn is_triggered(&self) -> bool {
        *self.0 .0.lock().unwrap()
    }

    /// Sleeps up to `dur`; returns true if shutdown was requested.
    pub fn wait(&self, dur: Duration) -> bool {
        let (flag, cv) = &*self.0;
        let guard = flag.lock().unwrap();
        let (guard, _) = cv.wait_timeout_while(guard, dur, |stop| !*stop).unwrap();
        *guard
    }
}

/// Persisted monitor state: `min_timestamp=<int>` then one `<id> <timestamp>`
/// per line. A line without a timestamp takes `min_timestamp`.
#[derive(Debug, Clone)]
pub struct StateFile {
    path: PathBuf,
}

impl StateFile {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn load(&self, watched: Address) -> io::Result<MonitorState> {
        let mut state = MonitorState::new(watched);
        if !self.path.exists() {
            return Ok(state);
        }
        let reader = BufReader::new(File::open(&self.path)?);
        let mut lines = reader.lines();
        if let Some(first) = lines.next() {
            let first = first?;
            let value = first
                .strip_prefix("min_timestamp=")
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad monitor state header"))?;
            state.min_timestamp = value;
        }
        for line in lines {
            let line = line?;
            let mut parts = line.split_whitespace();
            let Some(id) = parts.next() else { continue };
            let ts = match parts.next() {
                Some(ts) => ts
                    .parse()
                    .map_err(|_| io::Error::new(io::ErrorKind::InvalidData, format!("bad timestamp for {id}")))?,
                None => state.min_timestamp,
            };
            state.seen.insert(id.to_string(), ts);
            state.newest_ts = state.newest_ts.max(ts);
        }
        Ok(state)
    }

    pub fn append(&self, id: &str, timestamp: i64) -> io::Result<()> {
        if !self.path.exists() {
            fs::write(&self.path, "min_timestamp=0\n")?;
        }
        let mut f = OpenOptions::new().append(true).open(&self.path)?;
        writeln!(f, "{id} {timestamp}")?;
        f.flush()
    }

    /// Rewrites the file with the current state.
    pub fn store(&self, state: &MonitorState) -> io::Result<()> {
        let mut ids: Vec<(&String, &i64)> = state.seen.iter().collect();
        ids.sort_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(b.0)));
        let mut body = format!("min_timestamp={}\n", state.min_timestamp);
        for (id, ts) in ids {
            body.push_str(&format!("{id} {ts}\n"));
        }
        let tmp = self.path.with_extension("tmp");
        fs::write(&tmp, body)?;
        fs::rename(&tmp, &self.path)
    }
}

pub struct Monitor {
    state: MonitorState,
    config: MonitorConfig,
    store: Option<StateFile>,
}

impl Monitor {
    pub fn new(watched: Address, config: MonitorConfig) -> Self {
        Self {
            state: MonitorState::new(watched),
            config,
            store: None,
        }
    }

    /// A monitor whose state survives restarts.
    pub fn persistent(watched: Address, config: MonitorConfig, store: StateFile) -> io::Result<Self> {
        let state = store.load(watched)?;
        Ok(Self {
            state,
            config,
            store: Some(store),
        })
    }

    pub fn state(&self) -> &MonitorState {
        &self.state
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn watched(&self) -> &Address {
        &self.state.watched
    }

    /// New, de-duplicated inbound transactions in (timestamp, id) order.
    /// Does not change state.
    pub fn fetch(&self, chain: &dyn ChainAdapter) -> Result<Vec<Incoming>, LedgerError> {
        let mut txns = chain.lookup(&self.state.watched, self.state.min_timestamp)?;
        txns.retain(|t| t.receiver == self.state.watched && !self.state.has_seen(&t.id));
        txns.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.id.cmp(&b.id)));
        txns.dedup_by(|a, b| a.id == b.id);
        Ok(txns
            .into_iter()
            .map(|txn| Incoming {
                decoded: decode_note(&txn.note),
                txn,
            })
            .collect())
    }

    /// Records that `txn` has been handled.
    pub fn mark_seen(&mut self, txn: &Transaction) -> io::Result<()> {
        if self.state.has_seen(&txn.id) {
            return Ok(());
        }
        if let Some(store) = &self.store {
            store.append(&txn.id, txn.timestamp)?;
        }
        self.state.seen.insert(txn.id.clone(), txn.timestamp);
        self.state.newest_ts = self.state.newest_ts.max(txn.timestamp);
        Ok(())
    }

    /// Moves `min_timestamp` up to the lateness bound and drops ids the
    /// indexer can no longer return.
    pub fn advance(&mut self) -> io::Result<()> {
        if self.state.newest_ts != i64::MIN {
            let bound = self.state.newest_ts.saturating_sub(self.config.lateness_ms);
            if bound > self.state.min_timestamp {
                self.state.min_timestamp = bound;
                let min = self.state.min_timestamp;
                self.state.seen.retain(|_, ts| *ts >= min);
            }
        }
        if let Some(store) = &self.store {
            store.store(&self.state)?;
        }
        Ok(())
    }

    /// One poll: returns the newly seen decodable events and marks every new
    /// transaction seen. Undecodable notes are logged and skipped. On adapter
    /// failure nothing changes.
    pub fn poll_once(&mut self, chain: &dyn ChainAdapter) -> Result<Vec<Event>, LedgerError> {
        let incoming = self.fetch(chain)?;
        let mut events = Vec::new();
        for inc in incoming {
            self.mark_seen(&inc.txn).map_err(|e| LedgerError::Io(e.to_string()))?;
            match inc.decoded {
                Ok(envelope) => events.push(Event { txn: inc.txn, envelope }),
                Err(e) => log_undecodable(&inc.txn, &e),
            }
        }
        self.advance().map_err(|e| LedgerError::Io(e.to_string()))?;
        Ok(events)
    }

    /// Fetches and dispatches one batch. A dispatcher error or panic is
    /// logged and the event still counts as seen.
    pub fn step<F, E>(&mut self, chain: &dyn ChainAdapter, dispatcher: &mut F) -> io::Result<StepReport>
    where
        F: FnMut(&Event) -> Result<(), E>,
        E: std::fmt::Display,
    {
        let mut report = StepReport::default();
        let incoming = match self.fetch(chain) {
            Ok(v) => v,
            Err(e) => {
                warn!(error = %e, "indexer lookup failed, retrying next poll");
                return Ok(report);
            }
        };
        for inc in incoming {
            match inc.decoded {
                Ok(envelope) => {
                    let event = Event { txn: inc.txn, envelope };
                    match catch_unwind(AssertUnwindSafe(|| dispatcher(&event))) {
                        Ok(Ok(())) => report.dispatched += 1,
                        Ok(Err(e)) => {
                            warn!(id = %event.txn.id, error = %e, "dispatcher failed");
                            report.failed += 1;
                        }
                        Err(_) => {
                            warn!(id = %event.txn.id, "dispatcher panicked");
                            report.failed += 1;
                        }
                    }
                    self.mark_seen(&event.txn)?;
                }
                Err(e) => {
                    log_undecodable(&inc.txn, &e);
                    report.undecodable += 1;
                    self.mark_seen(&inc.txn)?;
                }
            }
        }
        self.advance()?;
        if report != StepReport::default() {
            debug!(watched = %self.state.watched, ?report, "monitor step");
        }
        Ok(report)
    }

    /// Polls until `shutdown` fires, then persists state.
    pub fn run<F, E>(&mut self, chain: &dyn ChainAdapter, mut dispatcher: F, shutdown: &Shutdown) -> io::Result<()>
    where
        F: FnMut(&Event) -> Result<(), E>,
        E: std::fmt::Display,
    {
        while !shutdown.is_triggered() {
            if let Err(e) = self.step(chain, &mut dispatcher) {
                warn!(error = %e, "monitor state write failed");
            }
            if shutdown.wait(self.config.poll_interval) {
                break;
            }
        }
        self.advance()
    }
}
