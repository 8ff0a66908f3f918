//! Sessions: the scope agents collaborate in. Each session owns a session
//! stream (entry and exit announcements, stream creation, plans, budget
//! events), a tree of named scopes, its participants, and a budget.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::coordinator::{ApprovalMode, Budget, Coordinator, CoordinatorError, InvalidBudget};
use crate::registry::AgentRegistry;
use crate::runtime::{AgentInstance, AgentRuntime, RuntimeError};
use crate::stream::{tags, MessageKind, SessionId, StreamError, StreamRef, Substrate};
use crate::value::Value;

/// Grace period for in-flight processors when a session closes.
pub const DEFAULT_DRAIN: Duration = Duration::from_secs(5);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error(transparent)]
    InvalidBudget(#[from] InvalidBudget),
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} is closed")]
    SessionClosed(SessionId),
    #[error("scope {0} already exists")]
    DuplicateScope(String),
    #[error("unknown scope {0}")]
    UnknownScope(String),
    #[error("invalid scope name {0:?}")]
    InvalidScopeName(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Coordinator(#[from] CoordinatorError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionState {
    Active,
    Closed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Agents instantiated at creation.
    #[serde(default)]
    pub agents: Vec<String>,
    #[serde(default)]
    pub budget: Budget,
    #[serde(default)]
    pub approval: ApprovalMode,
}

/// Snapshot of a session, derivable from its session stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionView {
    pub id: SessionId,
    pub state: SessionState,
    pub participants: Vec<String>,
    pub scopes: Vec<String>,
    pub session_stream: StreamRef,
    pub approval: ApprovalMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<Budget>,
}

struct SessionRecord {
    state: SessionState,
    scopes: BTreeSet<String>,
    approval: ApprovalMode,
}

pub struct SessionManager {
    substrate: Substrate,
    runtime: Arc<AgentRuntime>,
    agents: Arc<AgentRegistry>,
    coordinator: Coordinator,
    next_id: AtomicU64,
    sessions: Mutex<BTreeMap<SessionId, SessionRecord>>,
}

impl SessionManager {
    pub fn new(runtime: Arc<AgentRuntime>, agents: Arc<AgentRegistry>, coordinator: Coordinator) -> Self {
        Self {
            substrate: runtime.substrate().clone(),
            runtime,
            agents,
            coordinator,
            next_id: AtomicU64::new(1),
            sessions: Mutex::new(BTreeMap::new()),
        }
    }

    /// Opens `S<n>` with the next counter value, attaches the coordinator,
    /// and instantiates the configured agents in order.
    pub fn create_session(&self, config: SessionConfig) -> Result<SessionId, SessionError> {
        config.budget.validate()?;
        for name in &config.agents {
            if self.agents.get(name).is_none() {
                return Err(SessionError::UnknownAgent(name.clone()));
            }
        }
        let id = SessionId::new(format!("S{}", self.next_id.fetch_add(1, Ordering::SeqCst)));
        self.substrate.open_session(&id)?;
        self.sessions.lock().insert(
            id.clone(),
            SessionRecord {
                state: SessionState::Active,
                scopes: [id.root_scope()].into_iter().collect(),
                approval: config.approval,
            },
        );
        self.coordinator.attach(&id, config.budget, config.approval)?;
        for name in &config.agents {
            self.add_agent(&id, name)?;
        }
        Ok(id)
    }

    fn require_active(&self, session: &SessionId) -> Result<(), SessionError> {
        match self.sessions.lock().get(session).map(|r| r.state) {
            None => Err(SessionError::UnknownSession(session.clone())),
            Some(SessionState::Closed) => Err(SessionError::SessionClosed(session.clone())),
            Some(SessionState::Active) => Ok(()),
        }
    }

    pub fn exists(&self, session: &SessionId) -> bool {
        self.sessions.lock().contains_key(session)
    }

    pub fn add_agent(&self, session: &SessionId, name: &str) -> Result<AgentInstance, SessionError> {
        self.require_active(session)?;
        let descriptor = self
            .agents
            .descriptor(name)
            .ok_or_else(|| SessionError::UnknownAgent(name.to_string()))?;
        Ok(self.runtime.instantiate(&descriptor, session)?)
    }

    /// Opens `name` under `parent` (the session root when `None`) and
    /// returns the scope id, e.g. `SESSION:S1:Profile`.
    pub fn open_scope(&self, session: &SessionId, parent: Option<&str>, name: &str) -> Result<String, SessionError> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(SessionError::InvalidScopeName(name.to_string()));
        }
        self.require_active(session)?;
        let mut sessions = self.sessions.lock();
        let record = sessions.get_mut(session).expect("checked active");
        let parent = parent.map(str::to_string).unwrap_or_else(|| session.root_scope());
        if !record.scopes.contains(&parent) {
            return Err(SessionError::UnknownScope(parent));
        }
        let scope = format!("{parent}:{name}");
        if !record.scopes.insert(scope.clone()) {
            return Err(SessionError::DuplicateScope(scope));
        }
        self.substrate.append_from(
            &session.stream_id(),
            "SESSION_MANAGER",
            MessageKind::Control,
            Value::control("OPEN_SCOPE", [("scope", json!(scope))]),
            tags(["SCOPE"]),
        )?;
        Ok(scope)
    }

    /// Retires instances (each gets `drain` to finish), stops the
    /// coordinator, and appends EOS to every open stream. Idempotent.
    pub fn close_session(&self, session: &SessionId, drain: Duration) -> Result<(), SessionError> {
        match self.sessions.lock().get(session).map(|r| r.state) {
            None => return Err(SessionError::UnknownSession(session.clone())),
            Some(SessionState::Closed) => return Ok(()),
            Some(SessionState::Active) => {}
        }
        self.runtime.retire_session(session, drain)?;
        self.coordinator.detach(session);
        self.substrate.seal_session(session)?;
        if let Some(r) = self.sessions.lock().get_mut(session) {
            r.state = SessionState::Closed;
        }
        Ok(())
    }

    pub fn view(&self, session: &SessionId) -> Result<SessionView, SessionError> {
        let (state, scopes, approval) = {
            let sessions = self.sessions.lock();
            let r = sessions
                .get(session)
                .ok_or_else(|| SessionError::UnknownSession(session.clone()))?;
            (r.state, r.scopes.iter().cloned().collect(), r.approval)
        };
        Ok(SessionView {
            id: session.clone(),
            state,
            participants: self
                .runtime
                .instances(session)
                .iter()
                .map(|i| i.name().to_string())
                .collect(),
            scopes,
            session_stream: self.substrate.stream_ref(&session.stream_id())?,
            approval,
            budget: self.coordinator.budget(session),
        })
    }

    pub fn list(&self) -> Vec<SessionId> {
        self.sessions.lock().keys().cloned().collect()
    }
}
