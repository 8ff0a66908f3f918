use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lexical::{EmbeddingProvider, LexVector, LexicalEmbedder};
use super::{load_versioned, write_versioned, PersistError};
use crate::optimizer::QosVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataRegistryError {
    #[error("source {0} is already registered")]
    DuplicatePath(SourcePath),
    #[error("parent of {0} is not registered")]
    OrphanPath(SourcePath),
    #[error("unknown source {0}")]
    UnknownPath(SourcePath),
    #[error("invalid source path {0:?}")]
    InvalidPath(String),
    #[error("invalid record {path}: {reason}")]
    InvalidRecord { path: SourcePath, reason: String },
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Level {
    Registry,
    Source,
    Database,
    Collection,
}

/// Slash-separated location in the catalog, e.g. `/hr/HR/Jobs`. The empty
/// path `/` is the registry root.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SourcePath {
    segments: Vec<String>,
}

impl SourcePath {
    pub fn root() -> Self {
        Self { segments: Vec::new() }
    }

    pub fn parse(raw: &str) -> Result<Self, DataRegistryError> {
        let trimmed = raw.trim();
        let body = trimmed
            .strip_prefix('/')
            .ok_or_else(|| DataRegistryError::InvalidPath(raw.to_string()))?;
        if body.is_empty() {
            return Ok(Self::root());
        }
        let segments: Vec<String> = body.split('/').map(str::to_string).collect();
        if segments.len() > 3 || segments.iter().any(|s| s.trim().is_empty()) {
            return Err(DataRegistryError::InvalidPath(raw.to_string()));
        }
        Ok(Self { segments })
    }

    pub fn segments(&self) -> &[String] {
        &self.segments
    }

    pub fn level(&self) -> Level {
        match self.segments.len() {
            0 => Level::Registry,
            1 => Level::Source,
            2 => Level::Database,
            _ => Level::Collection,
        }
    }

    pub fn parent(&self) -> Option<SourcePath> {
        if self.segments.is_empty() {
            return None;
        }
        Some(Self {
            segments: self.segments[..self.segments.len() - 1].to_vec(),
        })
    }

    /// Last segment, e.g. `Jobs`.
    pub fn leaf(&self) -> &str {
        self.segments.last().map(String::as_str).unwrap_or("")
    }
}

impl fmt::Display for SourcePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "/{}", self.segments.join("/"))
    }
}

impl TryFrom<String> for SourcePath {
    type Error = DataRegistryError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        SourcePath::parse(&value)
    }
}

impl From<SourcePath> for String {
    fn from(p: SourcePath) -> Self {
        p.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Modality {
    Relational,
    Document,
    Graph,
    Keyvalue,
    Model,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

/// How an executor reaches the data. Secrets are referenced by name only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Connection {
    pub driver: String,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credentials_ref: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub options: BTreeMap<String, serde_json::Value>,
}

const SECRET_KEYS: [&str; 6] = ["password", "secret", "token", "api_key", "apikey", "credentials"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostHints {
    pub per_call_cost: f64,
    pub latency_ms: f64,
    pub quality: f64,
}

impl Default for CostHints {
    fn default() -> Self {
        Self {
            per_call_cost: 0.0,
            latency_ms: 0.0,
            quality: 1.0,
        }
    }
}

impl CostHints {
    pub fn qos(&self) -> QosVector {
        QosVector::new(self.per_call_cost, self.latency_ms, self.quality)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSourceRecord {
    pub path: SourcePath,
    pub modality: Modality,
    #[serde(default)]
    pub description: String,
    /// Field name to type for tabular and document sources; edge and label
    /// summary for graphs.
    #[serde(default)]
    pub schema: BTreeMap<String, String>,
    /// What a MODEL source can answer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<String>,
    #[serde(default)]
    pub connection: Connection,
    #[serde(default)]
    pub indices: Vec<String>,
    #[serde(default)]
    pub vector: LexVector,
    #[serde(default)]
    pub cost_hints: CostHints,
}

impl DataSourceRecord {
    pub fn new(path: &str, modality: Modality, description: &str) -> Self {
        Self {
            path: SourcePath::parse(path).expect("valid path"),
            modality,
            description: description.to_string(),
            schema: BTreeMap::new(),
            capability: None,
            connection: Connection::default(),
            indices: Vec::new(),
            vector: LexVector::default(),
            cost_hints: CostHints::default(),
        }
    }

    pub fn with_capability(mut self, capability: &str) -> Self {
        self.capability = Some(capability.to_string());
        self
    }

    fn validate(&self) -> Result<(), String> {
        if self.path.level() == Level::Registry {
            return Err("the registry root cannot be registered".into());
        }
        QosVector::validate(&self.cost_hints.qos())?;
        if self.modality == Modality::Model && self.capability.as_deref().map(str::trim).unwrap_or("").is_empty() {
            return Err("MODEL sources need a capability description".into());
        }
        if let Some(k) = self
            .connection
            .options
            .keys()
            .find(|k| SECRET_KEYS.contains(&k.to_ascii_lowercase().as_str()))
        {
            return Err(format!(
                "connection option {k:?} looks like an inline secret; use credentials_ref"
            ));
        }
        Ok(())
    }
}

/// Description, schema text, and capability, the text a source is vectorized from.
pub fn vector_text(r: &DataSourceRecord) -> String {
    let mut parts = vec![r.description.clone()];
    for (k, v) in &r.schema {
        parts.push(format!("{k} {v}"));
    }
    if let Some(c) = &r.capability {
        parts.push(c.clone());
    }
    parts.join(" ")
}

pub struct DataRegistry {
    records: RwLock<BTreeMap<SourcePath, DataSourceRecord>>,
    embedder: Arc<dyn EmbeddingProvider>,
    path: Option<PathBuf>,
    write_lock: Mutex<()>,
}

impl Default for DataRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl DataRegistry {
    pub fn new() -> Self {
        Self {
            records: RwLock::new(BTreeMap::new()),
            embedder: Arc::new(LexicalEmbedder),
            path: None,
            write_lock: Mutex::new(()),
        }
    }

    pub fn open(path: &Path) -> Result<Self, DataRegistryError> {
        let mut reg = Self::new();
        reg.path = Some(path.to_path_buf());
        if path.exists() {
            let records: Vec<DataSourceRecord> = load_versioned(path, "sources")?;
            let mut map = reg.records.write();
            for r in records {
                map.insert(r.path.clone(), r);
            }
        }
        Ok(reg)
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.read().is_empty()
    }

    pub fn register_source(&self, mut record: DataSourceRecord) -> Result<SourcePath, DataRegistryError> {
        record.validate().map_err(|reason| DataRegistryError::InvalidRecord {
            path: record.path.clone(),
            reason,
        })?;
        record.vector = self.embedder.embed(&vector_text(&record));
        let _w = self.write_lock.lock();
        let path = record.path.clone();
        {
            let mut map = self.records.write();
            if map.contains_key(&path) {
                return Err(DataRegistryError::DuplicatePath(path));
            }
            let parent = path.parent().expect("non-root");
            if parent.level() != Level::Registry && !map.contains_key(&parent) {
                return Err(DataRegistryError::OrphanPath(path));
            }
            map.insert(path.clone(), record);
        }
        if let Some(file) = &self.path {
            write_versioned(file, "sources", &self.list())?;
        }
        Ok(path)
    }

    /// Registers every record of a JSON or YAML list file, parents first.
    pub fn load_seed(&self, path: &Path) -> Result<usize, DataRegistryError> {
        let mut records: Vec<DataSourceRecord> = super::read_seed_list(path)?;
        records.sort_by_key(|r| r.path.segments().len());
        let n = records.len();
        for r in records {
            self.register_source(r)?;
        }
        Ok(n)
    }

    pub fn get(&self, path: &SourcePath) -> Option<DataSourceRecord> {
        self.records.read().get(path).cloned()
    }

    pub fn list(&self) -> Vec<DataSourceRecord> {
        self.records.read().values().cloned().collect()
    }

    /// Records of one modality, in path order.
    pub fn by_modality(&self, modality: Modality) -> Vec<DataSourceRecord> {
        self.records
            .read()
            .values()
            .filter(|r| r.modality == modality)
            .cloned()
            .collect()
    }

    /// Cosine-ranked records, ties broken by path. A modality filter keeps
    /// only connected sources of that modality, not the containers above them.
    pub fn discover(
        &self,
        query: &str,
        modality: Option<Modality>,
        k: usize,
    ) -> Result<Vec<(DataSourceRecord, f64)>, DataRegistryError> {
        if k == 0 {
            return Err(DataRegistryError::InvalidK);
        }
        let qv = self.embedder.embed(query);
        let records = self.records.read();
        let parents: BTreeSet<SourcePath> = records.values().filter_map(|r| r.path.parent()).collect();
        let mut scored: Vec<(DataSourceRecord, f64)> = records
            .values()
            .filter(|r| modality.is_none_or(|m| r.modality == m && !parents.contains(&r.path)))
            .map(|r| (r.clone(), qv.cosine(&r.vector)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.path.cmp(&b.0.path))
        });
        scored.truncate(k);
        Ok(scored)
    }

    pub fn resolve(&self, path: &SourcePath) -> Result<Connection, DataRegistryError> {
        self.records
            .read()
            .get(path)
            .map(|r| r.connection.clone())
            .ok_or_else(|| DataRegistryError::UnknownPath(path.clone()))
    }

    /// Direct children in lexicographic order. The root lists top-level sources.
    pub fn list_children(&self, path: &SourcePath) -> Result<Vec<SourcePath>, DataRegistryError> {
        let map = self.records.read();
        if path.level() != Level::Registry && !map.contains_key(path) {
            return Err(DataRegistryError::UnknownPath(path.clone()));
        }
        let mut children: Vec<SourcePath> = map
            .keys()
            .filter(|p| p.parent().as_ref() == Some(path))
            .cloned()
            .collect();
        children.sort_by_key(|p| p.to_string());
        Ok(children)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(s: &str) -> SourcePath {
        SourcePath::parse(s).unwrap()
    }

    fn catalog() -> DataRegistry {
        let r = DataRegistry::new();
        r.register_source(DataSourceRecord::new("/hr", Modality::Relational, "hr systems"))
            .unwrap();
        r.register_source(DataSourceRecord::new("/hr/HR", Modality::Relational, "hr database"))
            .unwrap();
        let mut jobs = DataSourceRecord::new("/hr/HR/Jobs", Modality::Relational, "job postings");
        jobs.schema.insert("title".into(), "TEXT".into());
        jobs.schema.insert("city".into(), "TEXT".into());
        jobs.connection = Connection {
            driver: "csv".into(),
            locator: "jobs.csv".into(),
            ..Default::default()
        };
        r.register_source(jobs).unwrap();
        r.register_source(DataSourceRecord::new("/kg", Modality::Graph, "knowledge graphs"))
            .unwrap();
        r
    }

    #[test]
    fn paths_parse_and_level() {
        assert_eq!(p("/hr/HR/Jobs").level(), Level::Collection);
        assert_eq!(p("/").level(), Level::Registry);
        assert_eq!(p("/hr/HR/Jobs").to_string(), "/hr/HR/Jobs");
        assert!(SourcePath::parse("hr").is_err());
        assert!(SourcePath::parse("/a//b").is_err());
        assert!(SourcePath::parse("/a/b/c/d").is_err());
    }

    #[test]
    fn orphan_and_duplicate_rejected() {
        let r = catalog();
        assert!(matches!(
            r.register_source(DataSourceRecord::new("/x/Y/Z", Modality::Document, "")),
            Err(DataRegistryError::OrphanPath(_))
        ));
        assert!(matches!(
            r.register_source(DataSourceRecord::new("/hr", Modality::Relational, "")),
            Err(DataRegistryError::DuplicatePath(_))
        ));
    }

    #[test]
    fn children_sorted_and_leaf_empty() {
        let r = catalog();
        assert_eq!(r.list_children(&p("/hr/HR")).unwrap(), vec![p("/hr/HR/Jobs")]);
        assert!(r.list_children(&p("/hr/HR/Jobs")).unwrap().is_empty());
        assert_eq!(r.list_children(&p("/")).unwrap(), vec![p("/hr"), p("/kg")]);
        assert!(r.list_children(&p("/nope")).is_err());
    }

    #[test]
    fn discover_ranks_and_filters() {
        let r = catalog();
        let hits = r.discover("job postings with titles and cities", None, 3).unwrap();
        assert_eq!(hits[0].0.path, p("/hr/HR/Jobs"));
        let graphs = r.discover("anything", Some(Modality::Graph), 5).unwrap();
        assert_eq!(graphs.len(), 1);
    }

    #[test]
    fn resolve_and_secret_rejection() {
        let r = catalog();
        assert_eq!(r.resolve(&p("/hr/HR/Jobs")).unwrap().locator, "jobs.csv");
        assert!(matches!(r.resolve(&p("/none")), Err(DataRegistryError::UnknownPath(_))));
        let mut bad = DataSourceRecord::new("/hr/HR/Secret", Modality::Relational, "");
        bad.connection.options.insert("password".into(), "hunter2".into());
        assert!(matches!(
            r.register_source(bad),
            Err(DataRegistryError::InvalidRecord { .. })
        ));
    }

    #[test]
    fn model_needs_capability() {
        let r = DataRegistry::new();
        r.register_source(
            DataSourceRecord::new("/models", Modality::Model, "models").with_capability("answers questions"),
        )
        .unwrap();
        assert!(r
            .register_source(DataSourceRecord::new("/m2", Modality::Model, "no capability"))
            .is_err());
    }
}
