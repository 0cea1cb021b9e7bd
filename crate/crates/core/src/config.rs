//! TOML configuration for the two node types. Keys are flat; relative
//! paths are resolved against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::client::ClientConfig;
use crate::datastore::Environment;
use crate::ledger::MicroAlgo;
use crate::monitor::{MonitorConfig, DEFAULT_LATENESS_MS};
use crate::oracle::{OracleConfig, DEFAULT_FUNDING};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LedgerMode {
    /// The oracle hosts a simulated ledger and serves it under `/chain`.
    Simulated,
    /// Another process serves the ledger at `chain_url`.
    Adapter,
}

fn default_ledger() -> LedgerMode {
    LedgerMode::Simulated
}
fn default_poll_ms() -> u64 {
    1000
}
fn default_workers() -> usize {
    1
}
fn default_listen() -> String {
    "127.0.0.1:8700".into()
}
fn default_client_listen() -> String {
    "127.0.0.1:8710".into()
}
fn default_env() -> String {
    "cas".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleFile {
    pub oracle_address: String,
    #[serde(default = "default_ledger")]
    pub ledger: LedgerMode,
    /// Ledger server for `adapter` mode.
    pub chain_url: Option<String>,
    pub schedule_path: Option<PathBuf>,
    pub storage_root: PathBuf,
    #[serde(default = "default_poll_ms")]
    pub poll_interval_ms: u64,
    #[serde(default = "default_workers")]
    pub worker_count: usize,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub train_seed: u64,
    /// Oracle balance topped up from the faucet at startup. Simulated
    /// ledgers default to `DEFAULT_FUNDING`.
    pub funding: Option<MicroAlgo>,
    #[serde(default = "default_env")]
    pub dataset_env: String,
    #[serde(default = "default_env")]
    pub model_env: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientFile {
    #[serde(default = "default_client_listen")]
    pub listen: String,
    pub oracle_url: String,
    /// Ledger server; defaults to `oracle_url`, which hosts a simulated one.
    pub chain_url: Option<String>,
    pub storage_root: PathBuf,
    #[serde(default = "default_poll_ms")]
    pub poll_interval_ms: u64,
    /// Base URL the oracle uses to fetch blobs from this client.
    pub public_url: Option<String>,
}

fn load<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn monitor(poll_interval_ms: u64) -> MonitorConfig {
    MonitorConfig {
        poll_interval: Duration::from_millis(poll_interval_ms.max(1)),
        lateness_ms: DEFAULT_LATENESS_MS,
    }
}

impl OracleFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut file: Self = load(path)?;
        let base = base_dir(path);
        file.storage_root = resolve(&base, &file.storage_root);
        file.schedule_path = file.schedule_path.map(|p| resolve(&base, &p));
        if file.ledger == LedgerMode::Adapter && file.chain_url.is_none() {
            return Err(ConfigError::Invalid("ledger = \"adapter\" needs chain_url".into()));
        }
        Ok(file)
    }

    pub fn oracle_config(&self) -> Result<OracleConfig, ConfigError> {
        let env = |s: &str| -> Result<Environment, ConfigError> {
            s.parse()
                .map_err(|_| ConfigError::Invalid(format!("unknown environment {s:?}, expected local|cas")))
        };
        let mut config = OracleConfig::new(self.oracle_address.as_str(), &self.storage_root);
        config.schedule_path = self.schedule_path.clone();
        config.dataset_env = env(&self.dataset_env)?;
        config.model_env = env(&self.model_env)?;
        config.monitor = monitor(self.poll_interval_ms);
        config.worker_count = self.worker_count.max(1);
        config.train_seed = self.train_seed;
        config.funding = self
            .funding
            .or((self.ledger == LedgerMode::Simulated).then_some(DEFAULT_FUNDING));
        Ok(config)
    }
}

impl ClientFile {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut file: Self = load(path)?;
        file.storage_root = resolve(&base_dir(path), &file.storage_root);
        Ok(file)
    }

    pub fn chain_url(&self) -> &str {
        self.chain_url.as_deref().unwrap_or(&self.oracle_url)
    }

    pub fn client_config(&self) -> ClientConfig {
        let mut config = ClientConfig::new(&self.storage_root);
        config.monitor = monitor(self.poll_interval_ms);
        config.public_url = self.public_url.clone();
        config
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_file_defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.toml");
        fs::write(
            &path,
            "oracle_address = \"ORACLE\"\nstorage_root = \"data\"\nschedule_path = \"mults.txt\"\n",
        )
        .unwrap();
        let f = OracleFile::load(&path).unwrap();
        assert_eq!(f.ledger, LedgerMode::Simulated);
        assert_eq!(f.storage_root, dir.path().join("data"));
        let c = f.oracle_config().unwrap();
        assert_eq!(c.worker_count, 1);
        assert_eq!(c.schedule_path, Some(dir.path().join("mults.txt")));
        assert_eq!(c.monitor.poll_interval, Duration::from_secs(1));
    }

    #[test]
    fn rejects_unknown_keys_and_adapter_without_url() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.toml");
        fs::write(&path, "oracle_address = \"O\"\nstorage_root = \"d\"\nbogus = 1\n").unwrap();
        assert!(matches!(OracleFile::load(&path), Err(ConfigError::Parse { .. })));
        fs::write(
            &path,
            "oracle_address = \"O\"\nstorage_root = \"d\"\nledger = \"adapter\"\n",
        )
        .unwrap();
        assert!(matches!(OracleFile::load(&path), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn client_chain_url_falls_back_to_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(
            &path,
            "oracle_url = \"http://o:1\"\nstorage_root = \"/tmp/c\"\npoll_interval_ms = 50\n",
        )
        .unwrap();
        let f = ClientFile::load(&path).unwrap();
        assert_eq!(f.chain_url(), "http://o:1");
        assert_eq!(f.storage_root, PathBuf::from("/tmp/c"));
        assert_eq!(f.client_config().monitor.poll_interval, Duration::from_millis(50));
    }
}
