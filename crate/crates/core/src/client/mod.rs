//! Client node: a gateway that turns user actions into priced request
//! payments to the oracle, watches each user's address for the oracle's
//! answers, and queues them until the user fetches them.

pub mod http;
mod updates;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, warn};

use crate::audit::{audit_chain, AuditReport};
use crate::datastore::{sha256_hex, write_atomic, BlobStore, DatasetMeta, DatastoreError, Environment};
use crate::ledger::{Address, ChainAdapter, Clock, LedgerError, MicroAlgo, PaymentRequest, SystemClock, Transaction};
use crate::models::ModelMeta;
use crate::monitor::{Event, Monitor, MonitorConfig, Shutdown, StateFile};
use crate::net::{HttpError, JsonHttp};
use crate::oracle::{Oracle, OracleError, OracleInfo, Quote};
use crate::protocol::{decode_note, encode_note, validate_args, NoteEnvelope, Opcode};
use crate::tokenomics::PriceKind;

pub use updates::{Update, UpdateQueue};

#[derive(Debug, Error)]
pub enum ClientError {
    /// The caller's input was rejected before anything was sent.
    #[error("{0}")]
    Input(String),
    #[error("unknown user {0:?}")]
    UnknownUser(String),
    #[error("oracle unreachable: {0}")]
    Transport(String),
    #[error("oracle: {message}")]
    Oracle { status: u16, message: String },
    #[error("price rose to {quoted} microALGO, above the accepted {max}")]
    PriceRose { quoted: MicroAlgo, max: MicroAlgo },
    #[error("insufficient funds: balance {balance}, need {needed}")]
    InsufficientFunds { balance: MicroAlgo, needed: MicroAlgo },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Data(#[from] DatastoreError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<HttpError> for ClientError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::Transport(m) => ClientError::Transport(m),
            HttpError::Api { status, .. } => ClientError::Oracle {
                status,
                message: e.api_message().unwrap_or_default(),
            },
        }
    }
}

impl From<OracleError> for ClientError {
    fn from(e: OracleError) -> Self {
        ClientError::Oracle {
            status: crate::oracle::http::status_of(&e).as_u16(),
            message: e.to_string(),
        }
    }
}

/// What the client needs from an oracle. Implemented over HTTP and, for
/// in-process deployments, directly by [`Oracle`].
pub trait OracleApi: Send + Sync {
    fn quote(&self, kind: PriceKind, params: &BTreeMap<String, String>) -> Result<Quote, ClientError>;
    fn datasets(&self) -> Result<Vec<DatasetMeta>, ClientError>;
    fn models(&self) -> Result<Vec<ModelMeta>, ClientError>;
    fn info(&self) -> Result<OracleInfo, ClientError>;
}

pub struct HttpOracle {
    http: JsonHttp,
}

impl HttpOracle {
    pub fn new(base_url: &str) -> Self {
        Self {
            http: JsonHttp::new(base_url),
        }
    }
}

impl OracleApi for HttpOracle {
    fn quote(&self, kind: PriceKind, params: &BTreeMap<String, String>) -> Result<Quote, ClientError> {
        let mut query: Vec<(&str, String)> = vec![("kind", kind.as_str().to_string())];
        query.extend(params.iter().map(|(k, v)| (k.as_str(), v.clone())));
        Ok(self.http.get("/price", &query)?)
    }

    fn datasets(&self) -> Result<Vec<DatasetMeta>, ClientError> {
        Ok(self.http.get("/datasets", &[])?)
    }

    fn models(&self) -> Result<Vec<ModelMeta>, ClientError> {
        Ok(self.http.get("/models", &[])?)
    }

    fn info(&self) -> Result<OracleInfo, ClientError> {
        Ok(self.http.get("/info", &[])?)
    }
}

impl OracleApi for Oracle {
    fn quote(&self, kind: PriceKind, params: &BTreeMap<String, String>) -> Result<Quote, ClientError> {
        Ok(Oracle::quote(self, kind, params)?)
    }

    fn datasets(&self) -> Result<Vec<DatasetMeta>, ClientError> {
        Ok(self.list_datasets())
    }

    fn models(&self) -> Result<Vec<ModelMeta>, ClientError> {
        Ok(self.list_models())
    }

    fn info(&self) -> Result<OracleInfo, ClientError> {
        Ok(Oracle::info(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub storage_root: PathBuf,
    pub monitor: MonitorConfig,
    /// Base URL other nodes use to reach this client, for blob links.
    pub public_url: Option<String>,
}

impl ClientConfig {
    pub fn new(storage_root: impl Into<PathBuf>) -> Self {
        Self {
            storage_root: storage_root.into(),
            monitor: MonitorConfig::default(),
            public_url: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NameKind {
    Datasets,
    Models,
}

impl std::str::FromStr for NameKind {
    type Err = ClientError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "datasets" | "dataset" => Ok(NameKind::Datasets),
            "models" | "model" => Ok(NameKind::Models),
            other => Err(ClientError::Input(format!(
                "unknown name kind {other:?}, expected datasets|models"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NamesCache {
    pub datasets: Vec<String>,
    pub models: Vec<String>,
    pub last_refresh_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamesReply {
    pub kind: NameKind,
    pub names: Vec<String>,
    /// True when the oracle could not be reached and the list is the last
    /// one seen.
    pub stale: bool,
    pub last_refresh_ms: Option<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub user: String,
    pub op: String,
    #[serde(default)]
    pub args: BTreeMap<String, Value>,
    /// Reject instead of paying if the fresh quote is above this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_price: Option<MicroAlgo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitReceipt {
    pub txn_id: String,
    pub op: String,
    pub user: String,
    pub address: Address,
    pub price: MicroAlgo,
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub user: String,
    pub address: Address,
    pub balance: MicroAlgo,
}

/// A transaction plus its decoded note, for history views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    #[serde(flatten)]
    pub txn: Transaction,
    pub decoded: Option<NoteEnvelope>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobReceipt {
    pub cas: String,
    pub link: String,
    pub size: u64,
}

/// The ledger address the client uses for `user`.
pub fn user_address(user: &str) -> Address {
    Address::new(format!("USER-{}", sha256_hex(user.as_bytes())[..24].to_uppercase()))
}

fn check_user_name(user: &str) -> Result<(), ClientError> {
    let ok =
        !user.is_empty() && user.len() <= 64 && user.bytes().all(|b| b.is_ascii_alphanumeric() || b"_-.@".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(ClientError::Input(format!(
            "user name {user:?} must be 1-64 characters of letters, digits, _ - . @"
        )))
    }
}

pub struct Client {
    config: ClientConfig,
    chain: Arc<dyn ChainAdapter>,
    oracle: Arc<dyn OracleApi>,
    oracle_address: Address,
    accounts: RwLock<BTreeMap<String, Address>>,
    monitors: Mutex<BTreeMap<String, Monitor>>,
    updates: UpdateQueue,
    names: RwLock<NamesCache>,
    blobs: BlobStore,
    public_url: RwLock<Option<String>>,
}

impl Client {
    /// Opens client storage, learns the oracle address and restores a
    /// monitor for every known user.
    pub fn start(
        config: ClientConfig,
        chain: Arc<dyn ChainAdapter>,
        oracle: Arc<dyn OracleApi>,
    ) -> Result<Arc<Self>, ClientError> {
        fs::create_dir_all(config.storage_root.join("monitors"))?;
        let oracle_address = oracle.info()?.address;
        let accounts: BTreeMap<String, Address> = match fs::read(config.storage_root.join("accounts.json")) {
            Ok(bytes) => {
                serde_json::from_slice(&bytes).map_err(|e| ClientError::Input(format!("corrupt accounts.json: {e}")))?
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let updates = UpdateQueue::open(config.storage_root.join("updates"))?;
        let client = Self {
            blobs: BlobStore::new(config.storage_root.join("blobs")),
            public_url: RwLock::new(config.public_url.clone()),
            config,
            chain,
            oracle,
            oracle_address,
            accounts: RwLock::new(BTreeMap::new()),
            monitors: Mutex::new(BTreeMap::new()),
            updates,
            names: RwLock::new(NamesCache::default()),
        };
        for (user, address) in accounts {
            client.attach(&user, address)?;
        }
        let _ = client.refresh_names();
        Ok(Arc::new(client))
    }

    pub fn oracle_address(&self) -> &Address {
        &self.oracle_address
    }

    pub fn chain(&self) -> &Arc<dyn ChainAdapter> {
        &self.chain
    }

    pub fn set_public_url(&self, url: String) {
        let mut slot = self.public_url.write().expect("url lock");
        if slot.is_none() {
            *slot = Some(url);
        }
    }

    fn attach(&self, user: &str, address: Address) -> Result<(), ClientError> {
        let state = StateFile::new(self.config.storage_root.join("monitors").join(format!("{user}.state")));
        let monitor = Monitor::persistent(address.clone(), self.config.monitor, state)?;
        self.monitors
            .lock()
            .expect("monitor lock")
            .insert(user.to_string(), monitor);
        self.accounts
            .write()
            .expect("accounts lock")
            .insert(user.to_string(), address);
        Ok(())
    }

    /// Address of `user`, creating the account and its monitor on first use.
    pub fn ensure_user(&self, user: &str) -> Result<Address, ClientError> {
        check_user_name(user)?;
        if let Some(a) = self.accounts.read().expect("accounts lock").get(user) {
            return Ok(a.clone());
        }
        let address = user_address(user);
        self.attach(user, address.clone())?;
        let snapshot = self.accounts.read().expect("accounts lock").clone();
        let json = serde_json::to_vec_pretty(&snapshot).expect("accounts serialize");
        write_atomic(&self.config.storage_root.join("accounts.json"), &json)?;
        Ok(address)
    }

    pub fn users(&self) -> Vec<(String, Address)> {
        self.accounts
            .read()
            .expect("accounts lock")
            .iter()
            .map(|(u, a)| (u.clone(), a.clone()))
            .collect()
    }

    pub fn account(&self, user: &str) -> Result<Account, ClientError> {
        let address = self.ensure_user(user)?;
        Ok(Account {
            user: user.to_string(),
            balance: self.chain.balance(&address)?,
            address,
        })
    }

    pub fn faucet(&self, user: &str, amount: MicroAlgo) -> Result<Transaction, ClientError> {
        let address = self.ensure_user(user)?;
        Ok(self.chain.faucet(&address, amount)?)
    }

    /// Forwards a price query to the oracle. Nothing is sent on-chain.
    pub fn price(&self, kind: &str, params: &BTreeMap<String, String>) -> Result<Quote, ClientError> {
        let kind: PriceKind = kind.parse().map_err(|e: crate::tokenomics::TokenomicsError| {
            ClientError::Input(format!("{e}; expected dataset_upload|train_model|query_model"))
        })?;
        self.oracle.quote(kind, params)
    }

    /// Validates, quotes and pays for one request.
    pub fn submit(&self, req: &SubmitRequest) -> Result<SubmitReceipt, ClientError> {
        let op: Opcode = req
            .op
            .parse()
            .map_err(|_| ClientError::Input(format!("unknown opcode {:?}", req.op)))?;
        let kind =
            PriceKind::for_request(op).ok_or_else(|| ClientError::Input(format!("{op} is not a request operation")))?;
        let valid = validate_args(op, &req.args).map_err(|e| ClientError::Input(e.to_string()))?;
        let envelope = valid.to_envelope();
        let note = encode_note(&envelope).map_err(|e| ClientError::Input(e.to_string()))?;
        let address = self.ensure_user(&req.user)?;

        let params: BTreeMap<String, String> = envelope
            .args
            .iter()
            .filter_map(|(k, v)| v.as_str().map(|s| (k.clone(), s.to_string())))
            .collect();
        let price = self.oracle.quote(kind, &params)?.price_microalgo;
        if let Some(max) = req.max_price {
            if price > max {
                return Err(ClientError::PriceRose { quoted: price, max });
            }
        }
        let balance = self.chain.balance(&address)?;
        let needed = price + self.chain.network_fee();
        if balance < needed {
            return Err(ClientError::InsufficientFunds { balance, needed });
        }
        let txn = self.chain.submit(PaymentRequest::new(
            address.clone(),
            self.oracle_address.clone(),
            price,
            note,
        ))?;
        debug!(user = %req.user, id = %txn.id, %op, price, "request submitted");
        if let Err(e) = self.refresh_names() {
            debug!(error = %e, "name refresh after submit failed");
        }
        Ok(SubmitReceipt {
            txn_id: txn.id,
            op: op.as_str().to_string(),
            user: req.user.clone(),
            address,
            price,
            round: txn.round,
        })
    }

    pub fn refresh_names(&self) -> Result<(), ClientError> {
        let datasets = self.oracle.datasets()?.into_iter().map(|d| d.ds_name).collect();
        let models = self.oracle.models()?.into_iter().map(|m| m.model_name).collect();
        let now = now_ms();
        *self.names.write().expect("names lock") = NamesCache {
            datasets,
            models,
            last_refresh_ms: Some(now),
        };
        Ok(())
    }

    /// Current names from the oracle, or the cached list marked stale when
    /// the oracle is unreachable.
    pub fn names(&self, kind: NameKind) -> NamesReply {
        let stale = match self.refresh_names() {
            Ok(()) => false,
            Err(e) => {
                warn!(error = %e, "serving cached names");
                true
            }
        };
        let cache = self.names.read().expect("names lock");
        NamesReply {
            kind,
            names: match kind {
                NameKind::Datasets => cache.datasets.clone(),
                NameKind::Models => cache.models.clone(),
            },
            stale,
            last_refresh_ms: cache.last_refresh_ms,
        }
    }

    /// Drains and returns the user's queued updates.
    pub fn fetch_updates(&self, user: &str) -> Result<Vec<Update>, ClientError> {
        Ok(self.updates.drain(user)?)
    }

    pub fn history(&self, address: &Address) -> Result<Vec<HistoryEntry>, ClientError> {
        Ok(self
            .chain
            .history(address)?
            .into_iter()
            .map(|txn| HistoryEntry {
                decoded: decode_note(&txn.note).ok(),
                txn,
            })
            .collect())
    }

    pub fn audit(&self) -> Result<AuditReport, ClientError> {
        let datasets = self.oracle.datasets()?;
        let models = self.oracle.models()?;
        Ok(audit_chain(
            self.chain.as_ref(),
            &self.oracle_address,
            &datasets,
            &models,
        )?)
    }

    /// Stores bytes for the oracle to fetch and returns their links.
    pub fn put_blob(&self, bytes: &[u8]) -> Result<BlobReceipt, ClientError> {
        let cas = self.blobs.put(Environment::Cas, bytes, "")?;
        let hash = cas.trim_start_matches("cas://");
        let base = self.public_url.read().expect("url lock").clone().unwrap_or_default();
        Ok(BlobReceipt {
            link: format!("{base}/api/blobs/{hash}"),
            cas,
            size: bytes.len() as u64,
        })
    }

    pub fn get_blob(&self, hash: &str) -> Result<Vec<u8>, ClientError> {
        Ok(self.blobs.get(&format!("cas://{hash}"))?)
    }

    /// One polling pass over every user's monitor. A transaction is marked
    /// seen only once its update is on disk, so a failed write is retried.
    pub fn poll(&self) -> usize {
        let mut monitors = self.monitors.lock().expect("monitor lock");
        let mut delivered = 0;
        for (user, monitor) in monitors.iter_mut() {
            match self.poll_one(user, monitor) {
                Ok(n) => delivered += n,
                Err(e) => warn!(%user, error = %e, "update delivery failed, retrying next poll"),
            }
        }
        delivered
    }

    fn poll_one(&self, user: &str, monitor: &mut Monitor) -> Result<usize, ClientError> {
        let mut delivered = 0;
        for inc in monitor.fetch(self.chain.as_ref())? {
            if let Ok(envelope) = &inc.decoded {
                let event = Event {
                    txn: inc.txn.clone(),
                    envelope: envelope.clone(),
                };
                if self.updates.push(user, &event)? {
                    delivered += 1;
                }
            }
            monitor.mark_seen(&inc.txn)?;
        }
        monitor.advance()?;
        Ok(delivered)
    }

    /// Polls every `poll_interval` until `shutdown` fires.
    pub fn run_monitors(&self, shutdown: &Shutdown) {
        while !shutdown.is_triggered() {
            self.poll();
            if shutdown.wait(self.config.monitor.poll_interval) {
                break;
            }
        }
    }
}

fn now_ms() -> i64 {
    SystemClock.now_ms()
}
