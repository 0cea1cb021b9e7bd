use std::fs;
use std::path::PathBuf;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{decode_model, encode_model, Archetype, Model, ModelError};
use crate::datastore::{append_jsonl, read_jsonl, sha256_hex, BlobStore, Environment};
use crate::decimal::Decimal;
use crate::ledger::Address;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model_name: String,
    pub archetype: Archetype,
    pub ds_name: String,
    pub complexity: Decimal,
    pub trainer: Address,
    pub link: String,
    pub accuracy: f64,
    pub final_loss: f64,
    /// Id of the request transaction that created the entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request: Option<String>,
}

/// Registry fields supplied by the caller when saving a model.
#[derive(Debug, Clone)]
pub struct ModelInfo {
    pub model_name: String,
    pub ds_name: String,
    pub trainer: Address,
    pub accuracy: f64,
    pub final_loss: f64,
    pub request: Option<String>,
}

/// Model blobs plus the `models.jsonl` registry.
pub struct ModelStore {
    blobs: BlobStore,
    registry_path: PathBuf,
    registry: RwLock<Vec<ModelMeta>>,
    write_lock: Mutex<()>,
}

impl ModelStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ModelError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(crate::datastore::DatastoreError::from)?;
        let registry_path = root.join("models.jsonl");
        let registry = read_jsonl(&registry_path)?;
        Ok(Self {
            blobs: BlobStore::new(root),
            registry_path,
            registry: RwLock::new(registry),
            write_lock: Mutex::new(()),
        })
    }

    pub fn get(&self, model_name: &str) -> Option<ModelMeta> {
        self.registry
            .read()
            .expect("registry lock")
            .iter()
            .find(|m| m.model_name == model_name)
            .cloned()
    }

    pub fn list(&self) -> Vec<ModelMeta> {
        self.registry.read().expect("registry lock").clone()
    }

    pub fn save(&self, model: &Model, info: ModelInfo, env: Environment) -> Result<ModelMeta, ModelError> {
        let _guard = self.write_lock.lock().expect("write lock");
        if self.get(&info.model_name).is_some() {
            return Err(ModelError::Duplicate(info.model_name));
        }
        let name = format!("model-{}.bin", &sha256_hex(info.model_name.as_bytes())[..16]);
        let link = self.blobs.put(env, &encode_model(model), &name)?;
        let meta = ModelMeta {
            model_name: info.model_name,
            archetype: model.archetype(),
            ds_name: info.ds_name,
            complexity: model.complexity(),
            trainer: info.trainer,
            link,
            accuracy: info.accuracy,
            final_loss: info.final_loss,
            request: info.request,
        };
        append_jsonl(&self.registry_path, &meta)?;
        self.registry.write().expect("registry lock").push(meta.clone());
        Ok(meta)
    }

    pub fn load_link(&self, link: &str) -> Result<Model, ModelError> {
        decode_model(&self.blobs.get(link)?)
    }

    pub fn load(&self, model_name: &str) -> Result<(ModelMeta, Model), ModelError> {
        let meta = self
            .get(model_name)
            .ok_or_else(|| ModelError::UnknownModel(model_name.to_string()))?;
        let model = self.load_link(&meta.link)?;
        Ok((meta, model))
    }
}
