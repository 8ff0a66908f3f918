use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::lexical::{tokenize, EmbeddingProvider, LexVector, LexicalEmbedder};
use super::{load_versioned, write_versioned, PersistError};
use crate::optimizer::QosVector;
use crate::runtime::{AgentDescriptor, UsageRecorder};
use crate::stream::{Clock, SystemClock, TagFilter};
use crate::value::Value;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentRegistryError {
    #[error("agent {0:?} is already registered")]
    DuplicateName(String),
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("invalid descriptor for {name:?}: {}", problems.join("; "))]
    InvalidDescriptor { name: String, problems: Vec<String> },
    #[error("k must be at least 1")]
    InvalidK,
    #[error(transparent)]
    Persist(#[from] PersistError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub invocations: u64,
    pub failures: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub descriptor: AgentDescriptor,
    pub vector: LexVector,
    #[serde(default)]
    pub usage: Usage,
    pub created_ms: u64,
    pub updated_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
}

impl AgentRecord {
    pub fn name(&self) -> &str {
        &self.descriptor.name
    }
}

/// Text the record vector is computed from: name, description, and the
/// descriptions of every parameter.
pub fn vector_text(d: &AgentDescriptor) -> String {
    let mut parts = vec![d.name.clone(), d.description.clone()];
    parts.extend(d.inputs.iter().chain(d.outputs.iter()).map(|p| p.description.clone()));
    parts.join(" ")
}

/// Changes applied when deriving an agent from an existing one.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentOverrides {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    /// New defaults for input parameters, keyed by parameter name.
    #[serde(default)]
    pub defaults: BTreeMap<String, Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen_rules: Option<TagFilter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worker_pool_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_hints: Option<QosVector>,
}

pub struct AgentRegistry {
    records: RwLock<BTreeMap<String, AgentRecord>>,
    embedder: Arc<dyn EmbeddingProvider>,
    clock: Arc<dyn Clock>,
    path: Option<PathBuf>,
    write_lock: parking_lot::Mutex<()>,
}

impl Default for AgentRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl AgentRegistry {
    pub fn new() -> Self {
        Self::with_parts(Arc::new(LexicalEmbedder), Arc::new(SystemClock), None)
    }

    pub fn with_parts(embedder: Arc<dyn EmbeddingProvider>, clock: Arc<dyn Clock>, path: Option<PathBuf>) -> Self {
        Self {
            records: RwLock::new(BTreeMap::new()),
            embedder,
            clock,
            path,
            write_lock: parking_lot::Mutex::new(()),
        }
    }

    /// Opens a registry persisted at `path`, loading it if the file exists.
    pub fn open(path: &Path) -> Result<Self, AgentRegistryError> {
        let reg = Self::with_parts(
            Arc::new(LexicalEmbedder),
            Arc::new(SystemClock),
            Some(path.to_path_buf()),
        );
        if path.exists() {
            let records: Vec<AgentRecord> = load_versioned(path, "agents")?;
            let mut map = reg.records.write();
            for r in records {
                map.insert(r.descriptor.name.to_lowercase(), r);
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

    pub fn register(&self, descriptor: AgentDescriptor) -> Result<AgentRecord, AgentRegistryError> {
        self.insert(descriptor, None)
    }

    fn insert(
        &self,
        descriptor: AgentDescriptor,
        derived_from: Option<String>,
    ) -> Result<AgentRecord, AgentRegistryError> {
        descriptor
            .validate()
            .map_err(|problems| AgentRegistryError::InvalidDescriptor {
                name: descriptor.name.clone(),
                problems,
            })?;
        let _w = self.write_lock.lock();
        let key = descriptor.name.to_lowercase();
        let now = self.clock.now_ms();
        let record = AgentRecord {
            vector: self.embedder.embed(&vector_text(&descriptor)),
            descriptor,
            usage: Usage::default(),
            created_ms: now,
            updated_ms: now,
            derived_from,
        };
        {
            let mut map = self.records.write();
            if map.contains_key(&key) {
                return Err(AgentRegistryError::DuplicateName(record.descriptor.name));
            }
            map.insert(key, record.clone());
        }
        self.persist()?;
        Ok(record)
    }

    /// Registers every descriptor in a JSON or YAML list file.
    pub fn load_seed(&self, path: &Path) -> Result<usize, AgentRegistryError> {
        let descriptors: Vec<AgentDescriptor> = super::read_seed_list(path)?;
        let n = descriptors.len();
        for d in descriptors {
            self.register(d)?;
        }
        Ok(n)
    }

    pub fn get(&self, name: &str) -> Option<AgentRecord> {
        self.records.read().get(&name.to_lowercase()).cloned()
    }

    pub fn descriptor(&self, name: &str) -> Option<AgentDescriptor> {
        self.get(name).map(|r| r.descriptor)
    }

    /// All records ordered by lowercase name.
    pub fn list(&self) -> Vec<AgentRecord> {
        self.records.read().values().cloned().collect()
    }

    /// Ranks by: exact name match, then records containing every query
    /// token in name or description, then by number of matched tokens.
    /// Ties go to the lexicographically smaller name. Records matching no
    /// token are omitted.
    pub fn search_keyword(&self, query: &str, k: usize) -> Result<Vec<AgentRecord>, AgentRegistryError> {
        if k == 0 {
            return Err(AgentRegistryError::InvalidK);
        }
        let q: Vec<String> = {
            let mut t = tokenize(query);
            t.sort();
            t.dedup();
            t
        };
        if q.is_empty() {
            return Ok(Vec::new());
        }
        let query_norm = tokenize(query).join(" ");
        let mut scored: Vec<((u8, usize), AgentRecord)> = self
            .records
            .read()
            .values()
            .filter_map(|r| {
                let mut toks = tokenize(&r.descriptor.name);
                toks.extend(tokenize(&r.descriptor.description));
                let hits = q.iter().filter(|t| toks.contains(t)).count();
                if hits == 0 {
                    return None;
                }
                let tier = if tokenize(&r.descriptor.name).join(" ") == query_norm {
                    0
                } else if hits == q.len() {
                    1
                } else {
                    2
                };
                Some(((tier, q.len() - hits), r.clone()))
            })
            .collect();
        scored.sort_by(|a, b| {
            a.0.cmp(&b.0)
                .then_with(|| a.1.descriptor.name.cmp(&b.1.descriptor.name))
        });
        Ok(scored.into_iter().take(k).map(|(_, r)| r).collect())
    }

    /// Descending cosine similarity between the query vector and each record
    /// vector, ties broken by name.
    pub fn search_vector(&self, query: &str, k: usize) -> Result<Vec<(AgentRecord, f64)>, AgentRegistryError> {
        if k == 0 {
            return Err(AgentRegistryError::InvalidK);
        }
        let qv = self.embedder.embed(query);
        let mut scored: Vec<(AgentRecord, f64)> = self
            .records
            .read()
            .values()
            .map(|r| (r.clone(), qv.cosine(&r.vector)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.0.descriptor.name.cmp(&b.0.descriptor.name))
        });
        scored.truncate(k);
        Ok(scored)
    }

    /// Copies the base descriptor, applies overrides, and registers the
    /// result with a link back to the base. The base is left untouched.
    pub fn derive(&self, base: &str, overrides: AgentOverrides) -> Result<AgentRecord, AgentRegistryError> {
        let base_record = self
            .get(base)
            .ok_or_else(|| AgentRegistryError::UnknownAgent(base.to_string()))?;
        let mut d = base_record.descriptor.clone();
        d.name = overrides.name;
        if let Some(desc) = overrides.description {
            d.description = desc;
        }
        for (param, value) in overrides.defaults {
            match d.inputs.iter_mut().find(|p| p.name == param) {
                Some(p) => p.default = Some(value),
                None => {
                    return Err(AgentRegistryError::InvalidDescriptor {
                        name: d.name.clone(),
                        problems: vec![format!("no input parameter {param:?}")],
                    })
                }
            }
        }
        if let Some(rules) = overrides.listen_rules {
            d.listen_rules = Some(rules);
        }
        if let Some(n) = overrides.worker_pool_size {
            d.worker_pool_size = n;
        }
        if let Some(c) = overrides.cost_hints {
            d.cost_hints = Some(c);
        }
        self.insert(d, Some(base_record.descriptor.name))
    }

    fn persist(&self) -> Result<(), AgentRegistryError> {
        if let Some(path) = &self.path {
            let records = self.list();
            write_versioned(path, "agents", &records)?;
        }
        Ok(())
    }
}

impl UsageRecorder for AgentRegistry {
    fn record_invocation(&self, agent: &str, failed: bool) {
        let now = self.clock.now_ms();
        if let Some(r) = self.records.write().get_mut(&agent.to_lowercase()) {
            r.usage.invocations += 1;
            if failed {
                r.usage.failures += 1;
            }
            r.updated_ms = now;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::ParamSpec;
    use crate::value::SemanticType;
    use serde_json::json;

    fn agent(name: &str, description: &str) -> AgentDescriptor {
        let mut d = AgentDescriptor::new(name, description);
        d.inputs = vec![ParamSpec::new("Criteria", SemanticType::Text).optional(None)];
        d.outputs = vec![ParamSpec::new("Out", SemanticType::Text)];
        d.deployment.insert("image".into(), json!("builtin:test"));
        d
    }

    fn seeded() -> AgentRegistry {
        let r = AgentRegistry::new();
        r.register(agent(
            "Job Matcher",
            "match job seeker profiles with available job listings",
        ))
        .unwrap();
        r.register(agent("Summarizer", "summarize applicants for a job"))
            .unwrap();
        r.register(agent("Query Summarizer", "explain query results")).unwrap();
        r
    }

    #[test]
    fn duplicate_name_rejected_case_insensitively() {
        let r = seeded();
        assert!(matches!(
            r.register(agent("job matcher", "x")),
            Err(AgentRegistryError::DuplicateName(_))
        ));
    }

    #[test]
    fn round_trip() {
        let r = seeded();
        let d = agent("Echo", "echo");
        r.register(d.clone()).unwrap();
        assert_eq!(r.descriptor("Echo").unwrap(), d);
    }

    #[test]
    fn exact_name_ranks_first() {
        let r = seeded();
        let hits = r.search_keyword("Summarizer", 5).unwrap();
        assert_eq!(hits[0].name(), "Summarizer");
        assert_eq!(hits.len(), 2);
        assert!(r.search_keyword("zebra", 5).unwrap().is_empty());
    }

    #[test]
    fn vector_self_similarity() {
        let r = seeded();
        let hits = r.search_vector("explain query results", 3).unwrap();
        assert_eq!(hits[0].0.name(), "Query Summarizer");
        let zero = r.search_vector("zebra quokka", 3).unwrap();
        assert!(zero.iter().all(|(_, s)| *s == 0.0));
    }

    #[test]
    fn derive_copies_without_mutating_base() {
        let r = seeded();
        let derived = r
            .derive(
                "Job Matcher",
                AgentOverrides {
                    name: "Strict Matcher".into(),
                    defaults: [("Criteria".to_string(), Value::text("exact title"))]
                        .into_iter()
                        .collect(),
                    ..Default::default()
                },
            )
            .unwrap();
        assert_eq!(derived.derived_from.as_deref(), Some("Job Matcher"));
        assert_eq!(derived.descriptor.inputs[0].default, Some(Value::text("exact title")));
        assert_eq!(r.descriptor("Job Matcher").unwrap().inputs[0].default, None);
        assert!(matches!(
            r.derive(
                "Nobody",
                AgentOverrides {
                    name: "X".into(),
                    ..Default::default()
                }
            ),
            Err(AgentRegistryError::UnknownAgent(_))
        ));
    }

    #[test]
    fn persists_and_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("agents.json");
        {
            let r = AgentRegistry::open(&path).unwrap();
            r.register(agent("Echo", "echo things")).unwrap();
        }
        let r = AgentRegistry::open(&path).unwrap();
        assert_eq!(r.descriptor("Echo").unwrap().description, "echo things");
    }

    #[test]
    fn usage_recorded() {
        let r = seeded();
        r.record_invocation("Summarizer", false);
        r.record_invocation("Summarizer", true);
        assert_eq!(
            r.get("Summarizer").unwrap().usage,
            Usage {
                invocations: 2,
                failures: 1
            }
        );
    }
}
