//! Dataset storage: byte storage across environments, CSV parsing, and the
//! node's dataset registry.

mod frame;
mod storage;
pub mod synthetic;

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::Address;

pub use frame::{ColumnKind, SchemaColumn, TableFrame};
pub(crate) use storage::write_atomic;
pub use storage::{cas_link, sha256_hex, BlobStore, Environment, Link};

pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DatastoreError {
    #[error("dataset {0:?} already registered")]
    Duplicate(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("unparseable CSV: {0}")]
    Csv(String),
    #[error("dataset has no data rows")]
    Empty,
    #[error("numeric column {column:?} has an empty cell at data row {row}")]
    MissingNumeric { column: String, row: usize },
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("column {0:?} is not numeric")]
    NotNumeric(String),
    #[error("row {row} out of range ({rows} rows)")]
    RowOutOfRange { row: usize, rows: usize },
    #[error("split index {index} out of range ({distinct} distinct values)")]
    SplitIndexOutOfRange { index: usize, distinct: usize },
    #[error("train fraction {0} not in (0, 1)")]
    InvalidFraction(f64),
    #[error("need at least 2 rows to split, have {0}")]
    TooFewRows(usize),
    #[error("column {column:?} value {value:?} is not a recognised time")]
    TimeFormat { column: String, value: String },
    #[error("bad link {0}")]
    BadLink(String),
    #[error("missing object {0}")]
    MissingObject(String),
    #[error("integrity check failed: expected {expected}, got {actual}")]
    Integrity { expected: String, actual: String },
    #[error("corrupt registry line {line}: {reason}")]
    CorruptRegistry { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub ds_name: String,
    pub ds_link: String,
    pub ds_size: u64,
    pub uploader: Address,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_attrib: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sub_split_attrib: Option<String>,
    pub schema: Vec<SchemaColumn>,
    pub row_count: usize,
    /// Id of the request transaction that created the entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SaveRequest {
    pub ds_name: String,
    pub environment: Environment,
    pub uploader: Address,
    pub time_attrib: Option<String>,
    pub sub_split_attrib: Option<String>,
    pub request: Option<String>,
}

impl SaveRequest {
    pub fn new(ds_name: impl Into<String>, environment: Environment, uploader: Address) -> Self {
        Self {
            ds_name: ds_name.into(),
            environment,
            uploader,
            time_attrib: None,
            sub_split_attrib: None,
            request: None,
        }
    }
}

/// File name for a dataset in the local environment: a readable prefix
/// plus a hash of the full name so distinct names never collide.
fn local_file_name(ds_name: &str) -> String {
    let readable: String = ds_name
        .chars()
        .take(40)
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{readable}-{}.csv", &sha256_hex(ds_name.as_bytes())[..12])
}

/// Datasets and their registry. Registry writes are serialized; reads see
/// the last committed registry.
pub struct DataStore {
    blobs: BlobStore,
    registry_path: PathBuf,
    registry: RwLock<Vec<DatasetMeta>>,
    write_lock: Mutex<()>,
}

impl DataStore {
    /// Opens (or creates) a store rooted at `root`, reloading `datasets.jsonl`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatastoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let registry_path = root.join("datasets.jsonl");
        let registry = read_jsonl(&registry_path)?;
        Ok(Self {
            blobs: BlobStore::new(root),
            registry_path,
            registry: RwLock::new(registry),
            write_lock: Mutex::new(()),
        })
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    pub fn get(&self, ds_name: &str) -> Option<DatasetMeta> {
        self.registry
            .read()
            .expect("registry lock")
            .iter()
            .find(|m| m.ds_name == ds_name)
            .cloned()
    }

    pub fn list(&self) -> Vec<DatasetMeta> {
        self.registry.read().expect("registry lock").clone()
    }

    /// Parses, stores and registers a dataset. `ds_size` is the stored byte
    /// length.
    pub fn save_dataset(&self, raw: &[u8], req: SaveRequest) -> Result<DatasetMeta, DatastoreError> {
        let _guard = self.write_lock.lock().expect("write lock");
        if self.get(&req.ds_name).is_some() {
            return Err(DatastoreError::Duplicate(req.ds_name));
        }
        let mut frame = TableFrame::parse_csv(raw)?;
        if let Some(t) = &req.time_attrib {
            frame.sort_by_time(t)?;
        }
        if let Some(s) = &req.sub_split_attrib {
            frame.column_index(s)?;
        }
        let ds_link = self.blobs.put(req.environment, raw, &local_file_name(&req.ds_name))?;
        let meta = DatasetMeta {
            ds_name: req.ds_name,
            ds_link,
            ds_size: raw.len() as u64,
            uploader: req.uploader,
            time_attrib: req.time_attrib,
            sub_split_attrib: req.sub_split_attrib,
            schema: frame.schema().to_vec(),
            row_count: frame.row_count(),
            request: req.request,
        };
        append_jsonl(&self.registry_path, &meta)?;
        self.registry.write().expect("registry lock").push(meta.clone());
        Ok(meta)
    }

    pub fn load_dataset(&self, ds_link: &str) -> Result<TableFrame, DatastoreError> {
        TableFrame::parse_csv(&self.blobs.get(ds_link)?)
    }

    /// Loads a registered dataset, time-sorted when it has a time attribute.
    pub fn load_named(&self, ds_name: &str) -> Result<(DatasetMeta, TableFrame), DatastoreError> {
        let meta = self
            .get(ds_name)
            .ok_or_else(|| DatastoreError::UnknownDataset(ds_name.to_string()))?;
        let mut frame = self.load_dataset(&meta.ds_link)?;
        if let Some(t) = &meta.time_attrib {
            frame.sort_by_time(t)?;
        }
        Ok((meta, frame))
    }
}

pub(crate) fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, DatastoreError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| DatastoreError::CorruptRegistry {
            line: i + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub(crate) fn append_jsonl<T: Serialize>(path: &Path, item: &T) -> Result<(), DatastoreError> {
    let mut line = serde_json::to_string(item).expect("registry entries serialize");
    line.push('\n');
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(line.as_bytes())?;
    f.sync_data()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uploader() -> Address {
        "alice".into()
    }

    #[test]
    fn save_measures_exact_size_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let store = DataStore::open(dir.path()).unwrap();
        let raw = synthetic::market_csv_of_size(5_000_000, 7).unwrap();
        let meta = store
            .save_dataset(raw.as_bytes(), SaveRequest::new("dj", Environment::Local, uploader()))
            .unwrap();
        assert_eq!(meta.ds_size, 5_000_000);
        let frame = store.load_dataset(&meta.ds_link).unwrap();
        assert_eq!(frame.row_count(), meta.row_count);
        assert_eq!(
            fs::read(store.blobs().path_of(&meta.ds_link).unwrap()).unwrap(),
            raw.as_bytes()
        );
    }

    #[test]
    fn cas_save_of_reference_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let store = DataStore::open(dir.path()).unwrap();
        let meta = store
            .save_dataset(b"a,b\n1,2\n", SaveRequest::new("ab", Environment::Cas, uploader()))
            .unwrap();
        assert_eq!(
            meta.ds_link,
            "cas://492d5ea496056f1a6a6592241032fab764c321596317930b4fa0e1e8bc3b7470"
        );
        let again = store
            .save_dataset(b"a,b\n1,2\n", SaveRequest::new("ab2", Environment::Cas, uploader()))
            .unwrap();
        assert_eq!(again.ds_link, meta.ds_link);
    }

    #[test]
    fn save_errors() {
        let dir = tempfile::tempdir().unwrap();
        let store = DataStore::open(dir.path()).unwrap();
        let req = || SaveRequest::new("d", Environment::Local, uploader());
        store.save_dataset(b"a\n1\n", req()).unwrap();
        assert!(matches!(
            store.save_dataset(b"a\n1\n", req()),
            Err(DatastoreError::Duplicate(_))
        ));
        let other = |n: &str| SaveRequest::new(n, Environment::Local, uploader());
        assert!(matches!(
            store.save_dataset(b"a\n", other("e")),
            Err(DatastoreError::Empty)
        ));
        assert!(matches!(
            store.save_dataset(b"a,b\n1\n", other("f")),
            Err(DatastoreError::Csv(_))
        ));
        let mut bad_time = other("g");
        bad_time.time_attrib = Some("zzz".into());
        assert!(matches!(
            store.save_dataset(b"a\n1\n", bad_time),
            Err(DatastoreError::UnknownColumn(_))
        ));
        assert_eq!(store.list().len(), 1);
    }

    #[test]
    fn registry_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = DataStore::open(dir.path()).unwrap();
            let mut req = SaveRequest::new("s", Environment::Cas, uploader());
            req.time_attrib = Some("date".into());
            store
                .save_dataset(synthetic::sine_csv(30, 0.1, 1).as_bytes(), req)
                .unwrap();
        }
        let store = DataStore::open(dir.path()).unwrap();
        let (meta, frame) = store.load_named("s").unwrap();
        assert_eq!(meta.row_count, 30);
        assert_eq!(frame.row_count(), 30);
        assert_eq!(meta.time_attrib.as_deref(), Some("date"));
    }

    #[test]
    fn local_names_do_not_collide() {
        assert_ne!(local_file_name("a/b"), local_file_name("a_b"));
        assert!(local_file_name("../../etc/passwd").starts_with("______etc_passwd-"));
    }
}
