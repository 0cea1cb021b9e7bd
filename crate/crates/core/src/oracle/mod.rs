//! Oracle node: watches its address for paid requests, runs them through a
//! persisted job queue, and answers each with one response payment plus any
//! reward payments. Every effect carries a note naming the request id, so
//! the chain alone is an audit log and a restarted oracle can tell which
//! effects were already sent.

mod handlers;
pub mod http;
mod jobs;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::datastore::{ColumnKind, DataStore, DatasetMeta, DatastoreError, Environment};
use crate::decimal::Decimal;
use crate::ledger::{Address, ChainAdapter, LedgerError, MicroAlgo, Transaction, MICROALGO_PER_ALGO};
use crate::models::{Archetype, Hyperparams, ModelError, ModelMeta, ModelStore};
use crate::monitor::{Event, Monitor, MonitorConfig, Shutdown, StateFile};
use crate::protocol::{decode_note, NoteEnvelope, Opcode, ProtocolError};
use crate::tokenomics::{
    replay_mult_updates, PriceContext, PriceKind, RewardSchedule, ScheduleBook, ScheduleField, TokenomicsError,
};

pub use jobs::{JobQueue, JobStatus, PendingJob, Settlement};

/// Balance a simulated-ledger oracle is topped up to at startup.
pub const DEFAULT_FUNDING: MicroAlgo = 1_000_000 * MICROALGO_PER_ALGO;
pub const DEFAULT_MAX_FETCH_BYTES: u64 = 256 << 20;

/// Hyperparameters assumed by price quotes that leave them out.
pub const DEFAULT_HIDDEN_DIM: usize = 5;
pub const DEFAULT_LAYERS: usize = 1;
pub const DEFAULT_LOOKBACK: usize = 10;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Data(#[from] DatastoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tokenomics(#[from] TokenomicsError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad price query: {0}")]
    BadQuery(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("unknown model {0:?}")]
    UnknownModel(String),
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub address: Address,
    pub storage_root: PathBuf,
    /// `key=value` schedule file. Differences from the on-chain schedule are
    /// committed as `<MULT_UPDATE>` entries at startup.
    pub schedule_path: Option<PathBuf>,
    pub dataset_env: Environment,
    pub model_env: Environment,
    pub monitor: MonitorConfig,
    pub worker_count: usize,
    pub train_seed: u64,
    /// Faucet top-up target at startup; only simulated ledgers support it.
    pub funding: Option<MicroAlgo>,
    pub max_fetch_bytes: u64,
    pub retry_delay: Duration,
}

impl OracleConfig {
    pub fn new(address: impl Into<Address>, storage_root: impl Into<PathBuf>) -> Self {
        Self {
            address: address.into(),
            storage_root: storage_root.into(),
            schedule_path: None,
            dataset_env: Environment::Cas,
            model_env: Environment::Cas,
            monitor: MonitorConfig::default(),
            worker_count: 1,
            train_seed: 0,
            funding: None,
            max_fetch_bytes: DEFAULT_MAX_FETCH_BYTES,
            retry_delay: Duration::from_secs(1),
        }
    }

    /// Where `local://` request links are resolved.
    pub fn inbox(&self) -> PathBuf {
        self.storage_root.join("inbox")
    }
}

/// Answer to a price query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quote {
    pub kind: PriceKind,
    pub price_microalgo: MicroAlgo,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ds_size: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complexity: Option<Decimal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleInfo {
    pub address: Address,
    pub balance: MicroAlgo,
    pub network_fee: MicroAlgo,
    pub pending_jobs: usize,
    pub datasets: usize,
    pub models: usize,
}

pub struct Oracle {
    config: OracleConfig,
    chain: Arc<dyn ChainAdapter>,
    datasets: DataStore,
    models: ModelStore,
    schedule: RwLock<ScheduleBook>,
    jobs: JobQueue,
}

impl Oracle {
    /// Opens storage, funds the account if configured, rebuilds the schedule
    /// from the chain and applies the schedule file, then re-queues any
    /// request on the chain that has neither a job nor a response.
    pub fn start(config: OracleConfig, chain: Arc<dyn ChainAdapter>) -> Result<Arc<Self>, OracleError> {
        fs::create_dir_all(&config.storage_root)?;
        fs::create_dir_all(config.inbox())?;
        let datasets = DataStore::open(config.storage_root.join("datasets"))?;
        let models = ModelStore::open(config.storage_root.join("models"))?;
        let jobs = JobQueue::open(config.storage_root.join("jobs.jsonl"))?;
        let address = config.address.clone();

        if let Some(target) = config.funding {
            let balance = chain.balance(&address)?;
            if balance < target {
                chain.faucet(&address, target - balance)?;
            }
        }

        let history = chain.history(&address)?;
        let mut book = replay_mult_updates(RewardSchedule::default(), &history, &address);
        if let Some(path) = &config.schedule_path {
            if path.exists() {
                let wanted = RewardSchedule::load(path)?;
                for field in ScheduleField::ALL {
                    if wanted.get(field) != book.current().get(field) {
                        let txn = book.update(field, wanted.get(field).clone(), chain.as_ref(), &address)?;
                        info!(%field, value = %wanted.get(field), round = txn.round, "schedule file change logged");
                    }
                }
            } else {
                book.current().save(path)?;
            }
        }

        let oracle = Arc::new(Self {
            config,
            chain,
            datasets,
            models,
            schedule: RwLock::new(book),
            jobs,
        });
        oracle.recover(&history)?;
        Ok(oracle)
    }

    fn recover(&self, history: &[Transaction]) -> Result<(), OracleError> {
        let address = &self.config.address;
        let mut answered = std::collections::HashSet::new();
        for txn in history.iter().filter(|t| &t.sender == address) {
            if let Ok(env) = decode_note(&txn.note) {
                if env.opcode().is_ok_and(Opcode::is_response) {
                    if let Some(req) = env.get("req") {
                        answered.insert(req);
                    }
                }
            }
        }
        for txn in history
            .iter()
            .filter(|t| &t.receiver == address && &t.sender != address)
        {
            if answered.contains(&txn.id) || self.jobs.get(&txn.id).is_some() {
                continue;
            }
            if let Ok(env) = decode_note(&txn.note) {
                if self.enqueue(txn, &env)? {
                    info!(id = %txn.id, "recovered unanswered request");
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &OracleConfig {
        &self.config
    }

    pub fn address(&self) -> &Address {
        &self.config.address
    }

    pub fn chain(&self) -> &Arc<dyn ChainAdapter> {
        &self.chain
    }

    pub fn datasets(&self) -> &DataStore {
        &self.datasets
    }

    pub fn models(&self) -> &ModelStore {
        &self.models
    }

    pub fn jobs(&self) -> &JobQueue {
        &self.jobs
    }

    pub fn schedule(&self) -> RewardSchedule {
        self.schedule.read().expect("schedule lock").current().clone()
    }

    /// Schedule in force for a request committed at `round`.
    pub fn schedule_at(&self, round: u64) -> RewardSchedule {
        self.schedule.read().expect("schedule lock").at_round(round).clone()
    }

    /// Changes one schedule field, logging it on-chain and in the schedule file.
    pub fn update_schedule(&self, field: ScheduleField, value: Decimal) -> Result<Transaction, OracleError> {
        let mut book = self.schedule.write().expect("schedule lock");
        let txn = book.update(field, value, self.chain.as_ref(), &self.config.address)?;
        if let Some(path) = &self.config.schedule_path {
            book.current().save(path)?;
        }
        Ok(txn)
    }

    pub fn info(&self) -> Result<OracleInfo, OracleError> {
        Ok(OracleInfo {
            address: self.config.address.clone(),
            balance: self.chain.balance(&self.config.address)?,
            network_fee: self.chain.network_fee(),
            pending_jobs: self.jobs.pending(),
            datasets: self.datasets.list().len(),
            models: self.models.list().len(),
        })
    }

    pub fn list_datasets(&self) -> Vec<DatasetMeta> {
        self.datasets.list()
    }

    pub fn list_models(&self) -> Vec<ModelMeta> {
        self.models.list()
    }

    /// Price of `kind` under the current schedule. `params` uses the request
    /// argument names: `ds_size`; `raw_model`, `ds_name`, `hidden_dim`,
    /// `num_hidden_layers`, `training_lookback`; or `model_name`.
    pub fn quote(&self, kind: PriceKind, params: &BTreeMap<String, String>) -> Result<Quote, OracleError> {
        let ctx = self.price_context(kind, params)?;
        let price_microalgo = self.schedule().price(kind, &ctx)?;
        let (ds_size, complexity) = match ctx {
            PriceContext::DatasetSize(s) => (Some(s), None),
            PriceContext::Complexity(c) => (None, Some(c)),
        };
        Ok(Quote {
            kind,
            price_microalgo,
            ds_size,
            complexity,
        })
    }

    pub(crate) fn price_context(
        &self,
        kind: PriceKind,
        params: &BTreeMap<String, String>,
    ) -> Result<PriceContext, OracleError> {
        let need = |key: &str| {
            params
                .get(key)
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| OracleError::BadQuery(format!("{kind} needs {key}")))
        };
        let int_or = |key: &str, default: usize| -> Result<usize, OracleError> {
            match params.get(key) {
                None => Ok(default),
                Some(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| OracleError::BadQuery(format!("{key} must be an integer, got {v:?}"))),
            }
        };
        match kind {
            PriceKind::DatasetUpload => {
                let raw = need("ds_size")?;
                let size = raw
                    .parse()
                    .map_err(|_| OracleError::BadQuery(format!("ds_size must be an integer, got {raw:?}")))?;
                Ok(PriceContext::DatasetSize(size))
            }
            PriceKind::TrainModel => {
                let archetype: Archetype = need("raw_model")?.parse()?;
                let ds_name = need("ds_name")?;
                let meta = self
                    .datasets
                    .get(ds_name)
                    .ok_or_else(|| OracleError::UnknownDataset(ds_name.to_string()))?;
                let hp = Hyperparams {
                    num_epochs: 1,
                    target_attrib: String::new(),
                    hidden_dim: int_or("hidden_dim", DEFAULT_HIDDEN_DIM)?,
                    num_hidden_layers: int_or("num_hidden_layers", DEFAULT_LAYERS)?,
                    time_lag: 0,
                    training_lookback: int_or("training_lookback", DEFAULT_LOOKBACK)?,
                    sub_split_value: None,
                };
                hp.validate()?;
                Ok(PriceContext::Complexity(train_complexity(archetype, &meta, &hp)))
            }
            PriceKind::QueryModel => {
                let name = need("model_name")?;
                let meta = self
                    .models
                    .get(name)
                    .ok_or_else(|| OracleError::UnknownModel(name.to_string()))?;
                Ok(PriceContext::Complexity(meta.complexity))
            }
        }
    }

    /// Monitor callback: queues paid requests. Other notes are ignored.
    pub fn on_event(&self, event: &Event) -> Result<(), OracleError> {
        if event.txn.sender == self.config.address {
            return Ok(());
        }
        self.enqueue(&event.txn, &event.envelope)?;
        Ok(())
    }

    fn enqueue(&self, txn: &Transaction, env: &NoteEnvelope) -> Result<bool, OracleError> {
        match env.opcode() {
            Ok(op) if op.is_request() => {}
            Ok(op) => {
                debug!(id = %txn.id, %op, "ignoring non-request note");
                return Ok(false);
            }
            Err(e) => {
                warn!(id = %txn.id, error = %e, "ignoring unknown opcode");
                return Ok(false);
            }
        }
        let job = PendingJob {
            request_txn_id: txn.id.clone(),
            op: env.op.clone(),
            args: env.args.clone(),
            payer: txn.sender.clone(),
            paid: txn.amount,
            round: txn.round,
            timestamp: txn.timestamp,
            status: JobStatus::Queued,
            error: None,
            settlement: None,
        };
        Ok(self.jobs.enqueue(job)?)
    }

    /// Runs every runnable job now, in arrival order. Stops at the first
    /// infrastructure failure, leaving that job queued.
    pub fn run_pending(&self) -> Result<usize, OracleError> {
        let mut done = 0;
        while let Some(job) = self.jobs.claim()? {
            if let Err(e) = self.process(&job) {
                self.jobs.release(&job.request_txn_id);
                return Err(e);
            }
            done += 1;
        }
        Ok(done)
    }

    /// Worker loop. A job in progress when shutdown fires runs to completion.
    pub fn run_worker(&self, shutdown: &Shutdown) {
        while !shutdown.is_triggered() {
            match self.jobs.claim_wait(Duration::from_millis(200)) {
                Ok(Some(job)) => {
                    if let Err(e) = self.process(&job) {
                        warn!(id = %job.request_txn_id, error = %e, "job failed, will retry");
                        self.jobs.release(&job.request_txn_id);
                        shutdown.wait(self.config.retry_delay);
                    }
                }
                Ok(None) => {}
                Err(e) => {
                    warn!(error = %e, "job queue unavailable");
                    shutdown.wait(self.config.retry_delay);
                }
            }
        }
    }

    /// Builds the oracle's monitor, persisted under the storage root.
    pub fn monitor(&self) -> io::Result<Monitor> {
        Monitor::persistent(
            self.config.address.clone(),
            self.config.monitor,
            StateFile::new(self.config.storage_root.join("monitor.state")),
        )
    }

    /// Runs the monitor and the workers until `shutdown` fires.
    pub fn serve(self: &Arc<Self>, shutdown: &Shutdown) -> io::Result<()> {
        let mut monitor = self.monitor()?;
        let workers: Vec<_> = (0..self.config.worker_count.max(1))
            .map(|_| {
                let oracle = Arc::clone(self);
                let shutdown = shutdown.clone();
                std::thread::spawn(move || oracle.run_worker(&shutdown))
            })
            .collect();
        let chain = Arc::clone(&self.chain);
        let result = monitor.run(chain.as_ref(), |e: &Event| self.on_event(e), shutdown);
        self.jobs.notify_all();
        for w in workers {
            let _ = w.join();
        }
        result
    }
}

/// `param_count × archetype multiplier` for a model trained on `meta`.
/// Inputs are every numeric column of the dataset.
pub fn train_complexity(archetype: Archetype, meta: &DatasetMeta, hp: &Hyperparams) -> Decimal {
    let input_dim = meta.schema.iter().filter(|c| c.kind == ColumnKind::Numeric).count();
    let params = hp.shape(archetype, input_dim.max(1)).param_count();
    Decimal::from_u64(params as u64).mul(&archetype.complexity_multiplier())
}
