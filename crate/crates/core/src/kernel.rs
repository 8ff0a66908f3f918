//! One process-wide composition of the substrate, runtime, registries,
//! planners, coordinator and session manager, loaded from seed files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builtins::{self, BuiltinServices};
use crate::coordinator::{Coordinator, CoordinatorConfig};
use crate::dataplan::{DataPlanner, DataStore};
use crate::model::{HttpModel, MockLlm, ModelBackend, NoModel};
use crate::planner::{load_templates, TaskPlanner};
use crate::registry::{AgentRegistry, DataRegistry, Modality};
use crate::runtime::{AgentRuntime, RuntimeConfig};
use crate::session::{SessionConfig, SessionError, SessionManager};
use crate::stream::{tags, MessageKind, SessionId, StreamError, StreamId, Substrate, SubstrateConfig};
use crate::value::{EventRecord, Value};

/// Producer id of user-originated messages.
pub const USER: &str = "USER";
/// Event action of a submitted form; such events also carry FORM_SUBMIT.
pub const SUBMIT_ACTION: &str = "submit";

#[derive(Debug, Error)]
pub enum KernelError {
    /// A seed or data file is missing or malformed.
    #[error("{file}: {reason}")]
    Seed { file: PathBuf, reason: String },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

impl KernelError {
    fn seed(file: &Path, reason: impl ToString) -> Self {
        KernelError::Seed {
            file: file.to_path_buf(),
            reason: reason.to_string(),
        }
    }
}

/// Seed file locations. Relative data locators resolve against `data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedPaths {
    pub agents: PathBuf,
    pub catalog: PathBuf,
    pub templates: PathBuf,
    pub data: PathBuf,
}

impl SeedPaths {
    /// Standard layout: `agents.json`, `catalog.json`, `templates.json`
    /// and `data/` under `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            agents: dir.join("agents.json"),
            catalog: dir.join("catalog.json"),
            templates: dir.join("templates.json"),
            data: dir.join("data"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct KernelConfig {
    pub seeds: SeedPaths,
    pub substrate: SubstrateConfig,
    pub runtime: RuntimeConfig,
    pub coordinator: CoordinatorConfig,
    /// Query Summarizer phrases answers with the model backend.
    pub summarize_with_model: bool,
    /// Timeout of an HTTP model backend.
    pub model_timeout: Duration,
}

impl KernelConfig {
    pub fn from_seed_dir(dir: &Path) -> Self {
        Self {
            seeds: SeedPaths::in_dir(dir),
            substrate: SubstrateConfig::default(),
            runtime: RuntimeConfig::default(),
            coordinator: CoordinatorConfig::default(),
            summarize_with_model: false,
            model_timeout: Duration::from_secs(30),
        }
    }
}

/// Counts of what a seed load registered.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedCounts {
    pub agents: usize,
    pub sources: usize,
    pub templates: usize,
    pub tables: BTreeMap<String, usize>,
}

pub struct Kernel {
    pub substrate: Substrate,
    pub runtime: Arc<AgentRuntime>,
    pub agents: Arc<AgentRegistry>,
    pub data: Arc<DataRegistry>,
    pub store: Arc<DataStore>,
    pub model: Arc<dyn ModelBackend>,
    pub planner: Arc<TaskPlanner>,
    pub data_planner: Arc<DataPlanner>,
    pub coordinator: Coordinator,
    pub sessions: Arc<SessionManager>,
    user_streams: Mutex<BTreeMap<SessionId, StreamId>>,
    event_streams: Mutex<BTreeMap<SessionId, StreamId>>,
}

/// Model backend named by the first MODEL source with a connection.
fn model_backend(
    data: &DataRegistry,
    data_dir: &Path,
    timeout: Duration,
) -> Result<Arc<dyn ModelBackend>, KernelError> {
    let Some(source) = data
        .by_modality(Modality::Model)
        .into_iter()
        .find(|r| !r.connection.driver.is_empty())
    else {
        return Ok(Arc::new(NoModel));
    };
    let c = &source.connection;
    match c.driver.as_str() {
        "mock" => {
            let file = data_dir.join(&c.locator);
            Ok(Arc::new(MockLlm::load(&file).map_err(|e| KernelError::seed(&file, e))?))
        }
        "http" => Ok(Arc::new(
            HttpModel::new(&c.locator, timeout).map_err(|e| KernelError::seed(Path::new(&c.locator), e))?,
        )),
        other => Err(KernelError::seed(
            Path::new(&source.path.to_string()),
            format!("unsupported model driver {other:?}"),
        )),
    }
}

impl Kernel {
    pub fn load(config: KernelConfig) -> Result<Self, KernelError> {
        let seeds = &config.seeds;
        let agents = Arc::new(AgentRegistry::new());
        agents
            .load_seed(&seeds.agents)
            .map_err(|e| KernelError::seed(&seeds.agents, e))?;
        let data = Arc::new(DataRegistry::new());
        data.load_seed(&seeds.catalog)
            .map_err(|e| KernelError::seed(&seeds.catalog, e))?;
        let templates = load_templates(&seeds.templates).map_err(|e| KernelError::seed(&seeds.templates, e))?;
        let store = Arc::new(DataStore::load(&data, &seeds.data).map_err(|e| {
            let file = match &e {
                crate::dataplan::StoreError::MissingFile(f) | crate::dataplan::StoreError::Parse { path: f, .. } => {
                    f.clone()
                }
                _ => seeds.catalog.clone(),
            };
            KernelError::seed(&file, e)
        })?);
        let model = model_backend(&data, &seeds.data, config.model_timeout)?;

        let substrate = Substrate::new(config.substrate.clone());
        let runtime = Arc::new(AgentRuntime::new(substrate.clone(), config.runtime.clone()));
        runtime.set_usage_recorder(agents.clone());
        let planner = Arc::new(TaskPlanner::new(agents.clone(), templates));
        let data_planner = Arc::new(DataPlanner::new(data.clone(), store.clone(), model.clone()));
        let coordinator = Coordinator::new(
            runtime.clone(),
            agents.clone(),
            planner.clone(),
            data_planner.clone(),
            config.coordinator.clone(),
        );
        builtins::register(
            &runtime,
            BuiltinServices {
                data: data_planner.clone(),
                planner: planner.clone(),
                coordinator: coordinator.clone(),
                summarize_with_model: config.summarize_with_model,
            },
        );
        let sessions = Arc::new(SessionManager::new(
            runtime.clone(),
            agents.clone(),
            coordinator.clone(),
        ));
        Ok(Self {
            substrate,
            runtime,
            agents,
            data,
            store,
            model,
            planner,
            data_planner,
            coordinator,
            sessions,
            user_streams: Mutex::new(BTreeMap::new()),
            event_streams: Mutex::new(BTreeMap::new()),
        })
    }

    pub fn from_seed_dir(dir: &Path) -> Result<Self, KernelError> {
        Self::load(KernelConfig::from_seed_dir(dir))
    }

    pub fn counts(&self) -> SeedCounts {
        SeedCounts {
            agents: self.agents.list().len(),
            sources: self.data.len(),
            templates: self.planner.templates().len(),
            tables: self
                .store
                .table_names()
                .into_iter()
                .map(|n| {
                    let rows = self.store.table(&n).map(|t| t.len()).unwrap_or(0);
                    (n, rows)
                })
                .collect(),
        }
    }

    /// Agents that react to tags on their own: every seeded descriptor
    /// with listen rules, in registry order.
    pub fn listening_agents(&self) -> Vec<String> {
        self.agents
            .list()
            .into_iter()
            .filter(|r| r.descriptor.listen_rules.is_some())
            .map(|r| r.descriptor.name.clone())
            .collect()
    }

    /// Session with the listening agents joined unless `config` names agents.
    pub fn create_session(&self, mut config: SessionConfig) -> Result<SessionId, KernelError> {
        if config.agents.is_empty() {
            config.agents = self.listening_agents();
        }
        Ok(self.sessions.create_session(config)?)
    }

    fn input_stream(
        &self,
        streams: &Mutex<BTreeMap<SessionId, StreamId>>,
        session: &SessionId,
        tag: &str,
    ) -> Result<StreamId, KernelError> {
        let mut map = streams.lock();
        if let Some(s) = map.get(session) {
            return Ok(s.clone());
        }
        let s = self.substrate.create_stream(session, USER, tags([tag]))?;
        map.insert(session.clone(), s.id.clone());
        Ok(s.id)
    }

    /// Appends a user utterance to the session's USER stream.
    pub fn post_utterance(&self, session: &SessionId, text: &str) -> Result<(StreamId, u64), KernelError> {
        self.require_active(session)?;
        let stream = self.input_stream(&self.user_streams, session, "USER")?;
        let seq = self
            .substrate
            .append(&stream, MessageKind::Data, Value::text(text), tags(["USER"]))?;
        Ok((stream, seq))
    }

    /// Appends a UI event to the session's EVENT stream. Form submissions
    /// are additionally tagged FORM_SUBMIT.
    pub fn post_event(&self, session: &SessionId, event: EventRecord) -> Result<(StreamId, u64), KernelError> {
        self.require_active(session)?;
        let stream = self.input_stream(&self.event_streams, session, "EVENT")?;
        let mut t = tags(["EVENT"]);
        if event.action == SUBMIT_ACTION {
            t.insert("FORM_SUBMIT".into());
        }
        let seq = self
            .substrate
            .append(&stream, MessageKind::Data, Value::Event(event), t)?;
        Ok((stream, seq))
    }

    fn require_active(&self, session: &SessionId) -> Result<(), KernelError> {
        let view = self.sessions.view(session)?;
        if view.state != crate::session::SessionState::Active {
            return Err(SessionError::SessionClosed(session.clone()).into());
        }
        Ok(())
    }

    /// Blocks until no delivery or invocation is in flight. False on timeout.
    pub fn settle(&self, timeout: Duration) -> bool {
        self.substrate.activity().wait_idle(timeout)
    }

    pub fn close_session(&self, session: &SessionId, drain: Duration) -> Result<(), KernelError> {
        self.sessions.close_session(session, drain)?;
        self.user_streams.lock().remove(session);
        self.event_streams.lock().remove(session);
        Ok(())
    }
}
