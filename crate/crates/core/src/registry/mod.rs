//! Metadata stores for agents and data sources.

mod agents;
mod data;
mod lexical;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value as Json};
use thiserror::Error;

pub use agents::{
    vector_text as agent_vector_text, AgentOverrides, AgentRecord, AgentRegistry, AgentRegistryError, Usage,
};
pub use data::{
    vector_text as source_vector_text, Connection, CostHints, DataRegistry, DataRegistryError, DataSourceRecord, Level,
    Modality, SourcePath,
};
pub use lexical::{tokenize, EmbeddingProvider, LexVector, LexicalEmbedder};

pub const REGISTRY_FILE_VERSION: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersistError {
    #[error("cannot read {path}: {reason}")]
    Read { path: String, reason: String },
    #[error("cannot write {path}: {reason}")]
    Write { path: String, reason: String },
    #[error("unsupported registry file version {0}")]
    Version(u64),
}

/// Reads a list from a `.json`, `.yaml` or `.yml` file. A JSON object with
/// the list under `items` is accepted too.
pub fn read_seed_list<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PersistError> {
    let read_err = |reason: String| PersistError::Read {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
    let is_yaml = matches!(path.extension().and_then(|e| e.to_str()), Some("yaml") | Some("yml"));
    let raw: Json = if is_yaml {
        serde_yaml::from_str(&text).map_err(|e| read_err(e.to_string()))?
    } else {
        serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?
    };
    let list = match raw {
        Json::Object(mut m) if m.contains_key("items") => m.remove("items").unwrap_or_default(),
        other => other,
    };
    serde_json::from_value(list).map_err(|e| read_err(e.to_string()))
}

fn load_versioned<T: DeserializeOwned>(path: &Path, key: &str) -> Result<Vec<T>, PersistError> {
    let read_err = |reason: String| PersistError::Read {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
    let raw: Json = serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))?;
    let version = raw.get("version").and_then(Json::as_u64).unwrap_or(0);
    if version != REGISTRY_FILE_VERSION {
        return Err(PersistError::Version(version));
    }
    serde_json::from_value(raw.get(key).cloned().unwrap_or(Json::Array(vec![]))).map_err(|e| read_err(e.to_string()))
}

/// Rewrites the whole file through a temporary sibling and a rename.
fn write_versioned<T: Serialize>(path: &Path, key: &str, items: &[T]) -> Result<(), PersistError> {
    let write_err = |reason: String| PersistError::Write {
        path: path.display().to_string(),
        reason,
    };
    let body = json!({"version": REGISTRY_FILE_VERSION, key: items});
    let text = serde_json::to_string_pretty(&body).map_err(|e| write_err(e.to_string()))?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| write_err(e.to_string()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| write_err(e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| write_err(e.to_string()))
}
