use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DatastoreError;

/// Where an object lives. `local://` links name a file path (absolute, or
/// relative to the store root); `cas://` links name the lowercase hex
/// SHA-256 of the content, which is verified on every read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Environment {
    Local,
    Cas,
}

impl FromStr for Environment {
    type Err = DatastoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Environment::Local),
            "cas" | "remote" => Ok(Environment::Cas),
            other => Err(DatastoreError::BadLink(format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Link {
    Local(PathBuf),
    Cas(String),
}

impl FromStr for Link {
    type Err = DatastoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(path) = s.strip_prefix("local://") {
            if path.is_empty() {
                return Err(DatastoreError::BadLink(s.to_string()));
            }
            return Ok(Link::Local(PathBuf::from(path)));
        }
        if let Some(hash) = s.strip_prefix("cas://") {
            let ok = hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
            if !ok {
                return Err(DatastoreError::BadLink(s.to_string()));
            }
            return Ok(Link::Cas(hash.to_string()));
        }
        Err(DatastoreError::BadLink(s.to_string()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn cas_link(bytes: &[u8]) -> String {
    format!("cas://{}", sha256_hex(bytes))
}

/// Byte storage shared by datasets and model blobs.
#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn cas_path(&self, hash: &str) -> PathBuf {
        self.root.join("cas").join(hash)
    }

    fn local_path(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    /// Stores bytes and returns their link. `local_name` is the file name
    /// used under `local/` for the local environment.
    pub fn put(&self, env: Environment, bytes: &[u8], local_name: &str) -> Result<String, DatastoreError> {
        match env {
            Environment::Cas => {
                let hash = sha256_hex(bytes);
                let path = self.cas_path(&hash);
                if !path.exists() {
                    write_atomic(&path, bytes)?;
                }
                Ok(format!("cas://{hash}"))
            }
            Environment::Local => {
                let rel = Path::new("local").join(local_name);
                write_atomic(&self.root.join(&rel), bytes)?;
                Ok(format!("local://{}", rel.display()))
            }
        }
    }

    pub fn get(&self, link: &str) -> Result<Vec<u8>, DatastoreError> {
        let (path, expected) = match link.parse::<Link>()? {
            Link::Local(p) => (self.local_path(&p), None),
            Link::Cas(hash) => (self.cas_path(&hash), Some(hash)),
        };
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            ErrorKind::NotFound => DatastoreError::MissingObject(link.to_string()),
            _ => DatastoreError::Io(e),
        })?;
        if let Some(expected) = expected {
            let actual = sha256_hex(&bytes);
            if actual != expected {
                return Err(DatastoreError::Integrity { expected, actual });
            }
        }
        Ok(bytes)
    }

    /// Filesystem location of a link, for diagnostics and tests.
    pub fn path_of(&self, link: &str) -> Result<PathBuf, DatastoreError> {
        Ok(match link.parse::<Link>()? {
            Link::Local(p) => self.local_path(&p),
            Link::Cas(hash) => self.cas_path(&hash),
        })
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DatastoreError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
