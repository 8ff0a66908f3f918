//! Executes approved task plans. A per-session service watches the session
//! stream for plan proposals, user decisions, and node completions; each
//! plan runs on its own thread that dispatches nodes through `EXECUTE`
//! control messages, binds edges (through the data planner when a
//! transform is needed), and enforces the session budget.

mod budget;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Select, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

pub use budget::{Accrual, Allocation, Budget, BudgetCheck, InvalidBudget, ViolationPolicy};

use crate::dataplan::DataPlanner;
use crate::optimizer::{self, CostNode, Dimension, QosVector};
use crate::planner::{Binding, NodeStatus, PlanError, PlanState, TaskPlan, TaskPlanner};
use crate::registry::AgentRegistry;
use crate::runtime::{AgentDescriptor, AgentRuntime, Charge, ParamSpec, EXECUTE_TAG};
use crate::stream::{
    tags, ActivityGuard, Delivery, Message, MessageKind, SessionId, StreamError, StreamId, StreamRef, Substrate,
    TagFilter,
};
use crate::value::{json_text, Value};

pub const COORDINATOR: &str = "TASK_COORDINATOR";
pub const PLANNER: &str = "TASK_PLANNER";
pub const DATA_PLANNER: &str = "DATA_PLANNER";
pub const USER: &str = "USER";

/// Instructions routed from the session stream to a running plan.
const MAILBOX_INSTRUCTIONS: [&str; 6] = ["APPROVE", "REVISE", "REJECT", "CONFIRM", "DONE", "FAILED"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ApprovalMode {
    #[default]
    Auto,
    Interactive,
}

#[derive(Clone, Debug)]
pub struct CoordinatorConfig {
    /// How long a proposed plan waits for the user.
    pub approval_timeout: Duration,
    /// How long a budget confirmation waits for the user.
    pub confirm_timeout: Duration,
    /// Upper bound on waiting for a dispatched node beyond its own timeout.
    pub node_grace: Duration,
    pub node_timeout: Duration,
    pub max_replans: u32,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            approval_timeout: Duration::from_secs(120),
            confirm_timeout: Duration::from_secs(120),
            node_grace: Duration::from_secs(5),
            node_timeout: crate::runtime::DEFAULT_PROCESSOR_TIMEOUT,
            max_replans: 1,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordinatorError {
    #[error("session {0} is not attached to the coordinator")]
    UnknownSession(SessionId),
    #[error("unknown plan {0}")]
    UnknownPlan(String),
    #[error("plan {plan} is {state:?}, not PROPOSED")]
    NotProposed { plan: String, state: PlanState },
    #[error("plan {0} is not awaiting a budget confirmation")]
    NotAwaitingConfirm(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Budget(#[from] InvalidBudget),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

/// Coordinator-side view of a plan.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlanRecord {
    pub session: SessionId,
    pub plan: TaskPlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Set while the plan waits for a budget confirmation.
    pub awaiting_confirm: bool,
}

struct SessionEntry {
    mode: ApprovalMode,
    budget: Mutex<Budget>,
    mailboxes: Mutex<BTreeMap<String, Sender<Delivery>>>,
    stop: Mutex<Option<Sender<()>>>,
    service: Mutex<Option<JoinHandle<()>>>,
    execute_stream: Mutex<Option<StreamRef>>,
    replans: Mutex<BTreeMap<String, u32>>,
}

struct Inner {
    substrate: Substrate,
    runtime: Arc<AgentRuntime>,
    agents: Arc<AgentRegistry>,
    planner: Arc<TaskPlanner>,
    data: Arc<DataPlanner>,
    config: CoordinatorConfig,
    sessions: Mutex<BTreeMap<SessionId, Arc<SessionEntry>>>,
    plans: RwLock<BTreeMap<String, PlanRecord>>,
}

#[derive(Clone)]
pub struct Coordinator {
    inner: Arc<Inner>,
}

impl Coordinator {
    pub fn new(
        runtime: Arc<AgentRuntime>,
        agents: Arc<AgentRegistry>,
        planner: Arc<TaskPlanner>,
        data: Arc<DataPlanner>,
        config: CoordinatorConfig,
    ) -> Self {
        Self {
            inner: Arc::new(Inner {
                substrate: runtime.substrate().clone(),
                runtime,
                agents,
                planner,
                data,
                config,
                sessions: Mutex::new(BTreeMap::new()),
                plans: RwLock::new(BTreeMap::new()),
            }),
        }
    }

    pub fn config(&self) -> &CoordinatorConfig {
        &self.inner.config
    }

    /// Starts the session's coordination service.
    pub fn attach(&self, session: &SessionId, budget: Budget, mode: ApprovalMode) -> Result<(), CoordinatorError> {
        budget.validate()?;
        let mut sessions = self.inner.sessions.lock();
        if sessions.contains_key(session) {
            return Ok(());
        }
        let (stop_tx, stop_rx) = unbounded();
        let entry = Arc::new(SessionEntry {
            mode,
            budget: Mutex::new(budget),
            mailboxes: Mutex::new(BTreeMap::new()),
            stop: Mutex::new(Some(stop_tx)),
            service: Mutex::new(None),
            execute_stream: Mutex::new(None),
            replans: Mutex::new(BTreeMap::new()),
        });
        let sub = self
            .inner
            .substrate
            .subscribe_tracked(TagFilter::include(["PLAN", "NODE", "BUDGET"]).in_session(session.clone()));
        let inner = self.inner.clone();
        let svc_entry = entry.clone();
        let svc_session = session.clone();
        let handle = thread::spawn(move || loop {
            let mut select = Select::new();
            let stop_idx = select.recv(&stop_rx);
            let sub_idx = select.recv(sub.receiver());
            let op = select.select();
            if op.index() == stop_idx {
                let _ = op.recv(&stop_rx);
                break;
            }
            debug_assert_eq!(op.index(), sub_idx);
            match op.recv(sub.receiver()) {
                Ok(d) => inner.on_session_message(&svc_session, &svc_entry, d),
                Err(_) => break,
            }
        });
        *entry.service.lock() = Some(handle);
        sessions.insert(session.clone(), entry);
        Ok(())
    }

    /// Stops the session's service. Running plans see their mailbox close.
    pub fn detach(&self, session: &SessionId) {
        let entry = self.inner.sessions.lock().remove(session);
        if let Some(entry) = entry {
            entry.stop.lock().take();
            entry.mailboxes.lock().clear();
            if let Some(h) = entry.service.lock().take() {
                let _ = h.join();
            }
        }
    }

    pub fn is_attached(&self, session: &SessionId) -> bool {
        self.inner.sessions.lock().contains_key(session)
    }

    pub fn mode(&self, session: &SessionId) -> Option<ApprovalMode> {
        self.inner.sessions.lock().get(session).map(|e| e.mode)
    }

    pub fn budget(&self, session: &SessionId) -> Option<Budget> {
        self.inner.sessions.lock().get(session).map(|e| e.budget.lock().clone())
    }

    /// Posts a plan on the session stream as the task planner.
    pub fn propose(&self, session: &SessionId, plan: TaskPlan) -> Result<u64, CoordinatorError> {
        self.inner.propose(session, plan)
    }

    pub fn plan(&self, id: &str) -> Option<PlanRecord> {
        self.inner.plans.read().get(id).cloned()
    }

    pub fn plans(&self, session: &SessionId) -> Vec<PlanRecord> {
        self.inner
            .plans
            .read()
            .values()
            .filter(|r| &r.session == session)
            .cloned()
            .collect()
    }

    /// Error unless the plan is awaiting approval.
    pub fn require_proposed(&self, id: &str) -> Result<PlanRecord, CoordinatorError> {
        let record = self
            .plan(id)
            .ok_or_else(|| CoordinatorError::UnknownPlan(id.to_string()))?;
        if record.plan.state != PlanState::Proposed {
            return Err(CoordinatorError::NotProposed {
                plan: id.to_string(),
                state: record.plan.state,
            });
        }
        Ok(record)
    }

    /// Appends a user decision on a proposed plan: APPROVE, REJECT, or
    /// REVISE with extra fields.
    pub fn decide(
        &self,
        session: &SessionId,
        plan: &str,
        instruction: &str,
        extra: BTreeMap<String, Json>,
    ) -> Result<u64, CoordinatorError> {
        let record = self.require_proposed(plan)?;
        if &record.session != session {
            return Err(CoordinatorError::UnknownPlan(plan.to_string()));
        }
        let mut fields: Vec<(String, Json)> = vec![("plan".into(), json!(plan))];
        fields.extend(extra);
        Ok(self.inner.substrate.append_from(
            &session.stream_id(),
            USER,
            MessageKind::Control,
            Value::control(instruction, fields),
            tags(["PLAN", instruction]),
        )?)
    }

    /// Appends the user's answer to a budget confirmation request.
    pub fn confirm(&self, session: &SessionId, plan: &str, approve: bool) -> Result<u64, CoordinatorError> {
        let record = self
            .plan(plan)
            .ok_or_else(|| CoordinatorError::UnknownPlan(plan.to_string()))?;
        if &record.session != session {
            return Err(CoordinatorError::UnknownPlan(plan.to_string()));
        }
        if !record.awaiting_confirm {
            return Err(CoordinatorError::NotAwaitingConfirm(plan.to_string()));
        }
        Ok(self.inner.substrate.append_from(
            &session.stream_id(),
            USER,
            MessageKind::Control,
            Value::control("CONFIRM", [("plan", json!(plan)), ("approve", json!(approve))]),
            tags(["BUDGET", "CONFIRM"]),
        )?)
    }
}

impl Inner {
    fn propose(&self, session: &SessionId, plan: TaskPlan) -> Result<u64, CoordinatorError> {
        Ok(self.substrate.append_from(
            &session.stream_id(),
            PLANNER,
            MessageKind::Data,
            Value::Plan(Box::new(plan)),
            tags(["PLAN"]),
        )?)
    }

    fn record(&self, session: &SessionId, plan: &TaskPlan) {
        let mut plans = self.plans.write();
        let entry = plans.entry(plan.id.clone()).or_insert_with(|| PlanRecord {
            session: session.clone(),
            plan: plan.clone(),
            reason: None,
            awaiting_confirm: false,
        });
        entry.plan = plan.clone();
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut PlanRecord)) {
        if let Some(r) = self.plans.write().get_mut(id) {
            f(r);
        }
    }

    fn on_session_message(self: &Arc<Self>, session: &SessionId, entry: &Arc<SessionEntry>, d: Delivery) {
        match (&d.message.kind, &d.message.payload) {
            (MessageKind::Data, Value::Plan(plan)) => {
                let plan = (**plan).clone();
                if entry.mailboxes.lock().contains_key(&plan.id) {
                    return;
                }
                let (tx, rx) = unbounded();
                entry.mailboxes.lock().insert(plan.id.clone(), tx);
                self.record(session, &plan);
                let guard = self.substrate.activity().enter();
                let exec = Execution {
                    inner: self.clone(),
                    session: session.clone(),
                    entry: entry.clone(),
                    plan,
                    mailbox: rx,
                    pending: VecDeque::new(),
                    guard: Some(guard),
                    overage_approved: false,
                    outputs: BTreeMap::new(),
                };
                thread::spawn(move || exec.run());
            }
            (MessageKind::Control, payload) => {
                let Some(instruction) = payload.instruction() else {
                    return;
                };
                let Some(plan_id) = payload.field("plan").and_then(Json::as_str) else {
                    return;
                };
                if instruction == "REPLAN" && d.message.producer == COORDINATOR {
                    self.replan(session, entry, plan_id);
                    return;
                }
                if !MAILBOX_INSTRUCTIONS.contains(&instruction) {
                    return;
                }
                if let Some(tx) = entry.mailboxes.lock().get(plan_id) {
                    let _ = tx.send(d);
                }
            }
            _ => {}
        }
    }

    /// Consumes a replan request by planning the request again.
    fn replan(&self, session: &SessionId, entry: &Arc<SessionEntry>, plan_id: &str) {
        let Some(record) = self.plans.read().get(plan_id).cloned() else {
            return;
        };
        *entry
            .replans
            .lock()
            .entry(record.plan.base_id().to_string())
            .or_insert(0) += 1;
        let result = self
            .planner
            .replan(&record.plan)
            .map_err(CoordinatorError::from)
            .and_then(|p| self.propose(session, p));
        if let Err(e) = result {
            tracing::warn!(plan = plan_id, error = %e, "replanning failed");
            let _ = self.control(
                session,
                "ABORTED",
                vec![("plan", json!(plan_id)), ("reason", json!("REPLAN_FAILED"))],
                &["PLAN", "ABORTED"],
            );
        }
    }

    fn control(
        &self,
        session: &SessionId,
        instruction: &str,
        fields: Vec<(&str, Json)>,
        t: &[&str],
    ) -> Result<u64, StreamError> {
        self.substrate.append_from(
            &session.stream_id(),
            COORDINATOR,
            MessageKind::Control,
            Value::control(instruction, fields),
            tags(t.iter().copied()),
        )
    }
}

enum Decision {
    Approved,
    Rejected(String),
}

enum NodeOutcome {
    Done(BTreeMap<String, (StreamId, u64)>, Charge),
    Failed(String),
}

struct Execution {
    inner: Arc<Inner>,
    session: SessionId,
    entry: Arc<SessionEntry>,
    plan: TaskPlan,
    mailbox: Receiver<Delivery>,
    pending: VecDeque<Delivery>,
    guard: Option<ActivityGuard>,
    overage_approved: bool,
    /// Output values keyed by (node, param).
    outputs: BTreeMap<(String, String), (Value, StreamId, u64)>,
}

impl Execution {
    fn run(mut self) {
        if let Err(e) = self.run_inner() {
            tracing::warn!(plan = %self.plan.id, error = %e, "plan execution stopped");
        }
        self.entry.mailboxes.lock().remove(&self.plan.id);
    }

    fn control(&self, instruction: &str, mut fields: Vec<(&str, Json)>, t: &[&str]) -> Result<u64, StreamError> {
        fields.insert(0, ("plan", json!(self.plan.id)));
        self.inner.control(&self.session, instruction, fields, t)
    }

    fn set_state(&mut self, state: PlanState, reason: Option<String>) {
        self.plan.state = state;
        let plan = self.plan.clone();
        self.inner.update(&self.plan.id, |r| {
            r.plan = plan;
            if reason.is_some() {
                r.reason = reason;
            }
        });
    }

    fn set_node(&mut self, node: &str, status: NodeStatus) {
        if let Some(n) = self.plan.node_mut(node) {
            n.status = status;
        }
        let plan = self.plan.clone();
        self.inner.update(&self.plan.id, |r| r.plan = plan);
    }

    /// Next mailbox message accepted by `want`, or `None` on timeout or
    /// session teardown. With `idle`, the activity guard is released while
    /// waiting so the system reads as quiescent until the user acts.
    fn await_message(&mut self, timeout: Duration, idle: bool, want: impl Fn(&Message) -> bool) -> Option<Message> {
        if let Some(pos) = self.pending.iter().position(|d| want(&d.message)) {
            return self.pending.remove(pos).map(|d| d.message);
        }
        if idle {
            self.guard = None;
        }
        let deadline = Instant::now() + timeout;
        let result = loop {
            let remaining = deadline.saturating_duration_since(Instant::now());
            match self.mailbox.recv_timeout(remaining) {
                Ok(d) => {
                    if self.guard.is_none() {
                        self.guard = Some(self.inner.substrate.activity().enter());
                    }
                    if want(&d.message) {
                        break Some(d.message);
                    }
                    self.pending.push_back(d);
                }
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => break None,
            }
        };
        if self.guard.is_none() {
            self.guard = Some(self.inner.substrate.activity().enter());
        }
        result
    }

    fn run_inner(&mut self) -> Result<(), CoordinatorError> {
        match self.await_approval()? {
            Decision::Rejected(reason) => {
                self.set_state(PlanState::Aborted, Some(reason.clone()));
                self.control("REJECTED", vec![("reason", json!(reason))], &["PLAN", "REJECTED"])?;
                return Ok(());
            }
            Decision::Approved => {}
        }
        self.set_state(PlanState::Approved, None);
        self.control("APPROVED", vec![], &["PLAN", "APPROVED"])?;
        let projected = self.projection();
        if let Some(p) = projected {
            self.entry.budget.lock().projected = Some(p);
        }
        self.set_state(PlanState::Executing, None);
        self.control(
            "EXECUTING",
            vec![("projected", projected.map(|p| json!(p)).unwrap_or(Json::Null))],
            &["PLAN", "EXECUTING"],
        )?;
        self.execute()
    }

    fn await_approval(&mut self) -> Result<Decision, CoordinatorError> {
        if self.entry.mode == ApprovalMode::Auto {
            return Ok(Decision::Approved);
        }
        loop {
            let id = self.plan.id.clone();
            let msg = self.await_message(self.inner.config.approval_timeout, true, |m| {
                matches!(m.instruction(), Some("APPROVE" | "REJECT" | "REVISE"))
                    && m.payload.field("plan").and_then(Json::as_str) == Some(id.as_str())
            });
            let Some(msg) = msg else {
                return Ok(Decision::Rejected("APPROVAL_TIMEOUT".into()));
            };
            match msg.instruction() {
                Some("APPROVE") => return Ok(Decision::Approved),
                Some("REJECT") => return Ok(Decision::Rejected("USER_REJECTED".into())),
                _ => self.apply_revision(&msg.payload)?,
            }
        }
    }

    fn apply_revision(&mut self, payload: &Value) -> Result<(), CoordinatorError> {
        let planner = &self.inner.planner;
        let revised = if let Some(raw) = payload.field("revised") {
            serde_json::from_value::<TaskPlan>(raw.clone())
                .map(|p| planner.revise_with(&self.plan, p))
                .map_err(|e| e.to_string())
        } else {
            let node = payload.field("node").and_then(Json::as_str).unwrap_or_default();
            let agent = payload.field("agent").and_then(Json::as_str).unwrap_or_default();
            planner.revise(&self.plan, node, agent).map_err(|e| e.to_string())
        };
        let revised = revised.and_then(|p| {
            let report = planner.validate(&p);
            if report.is_ok() {
                Ok(p)
            } else {
                Err(report
                    .violations
                    .iter()
                    .map(|v| v.detail.clone())
                    .collect::<Vec<_>>()
                    .join("; "))
            }
        });
        match revised {
            Ok(p) => {
                let (tx, rx) = unbounded();
                self.entry.mailboxes.lock().insert(p.id.clone(), tx);
                // Messages for the new id arrive on the new mailbox.
                let old = std::mem::replace(&mut self.mailbox, rx);
                self.pending.extend(old.try_iter());
                self.entry.mailboxes.lock().remove(&self.plan.id);
                self.set_state(PlanState::Aborted, Some(format!("REVISED_AS {}", p.id)));
                self.plan = p.clone();
                self.inner.record(&self.session, &p);
                self.inner.propose(&self.session, p)?;
            }
            Err(detail) => {
                self.control(
                    "REVISION_INVALID",
                    vec![("detail", json!(detail))],
                    &["PLAN", "INVALID"],
                )?;
            }
        }
        Ok(())
    }

    fn descriptor(&self, agent: &str) -> Option<AgentDescriptor> {
        self.inner.agents.descriptor(agent)
    }

    fn hints(&self, agent: &str) -> QosVector {
        self.descriptor(agent)
            .and_then(|d| d.cost_hints)
            .unwrap_or(QosVector::new(0.0, 0.0, 1.0))
    }

    fn projection(&self) -> Option<QosVector> {
        let nodes: Vec<CostNode> = self
            .plan
            .nodes
            .iter()
            .map(|n| CostNode {
                id: n.id.clone(),
                qos: self.descriptor(&n.agent).and_then(|d| d.cost_hints),
                deps: self.plan.dependencies(&n.id).into_iter().collect(),
            })
            .collect();
        optimizer::estimate(&nodes).ok()
    }

    fn execute(&mut self) -> Result<(), CoordinatorError> {
        let order = self.plan.topo_order().unwrap_or_default();
        let mut failed: BTreeSet<String> = BTreeSet::new();
        let mut first_failure: Option<String> = None;
        for node_id in order {
            let deps = self.plan.dependencies(&node_id);
            if deps.iter().any(|d| failed.contains(d)) {
                failed.insert(node_id.clone());
                self.set_node(&node_id, NodeStatus::Skipped);
                self.control("SKIPPED", vec![("node", json!(node_id))], &["NODE", "SKIPPED"])?;
                continue;
            }
            let agent = self.plan.node(&node_id).expect("ordered node").agent.clone();
            let estimate = self.hints(&agent);
            if !self.overage_approved {
                let check = self.entry.budget.lock().check(&estimate);
                if let BudgetCheck::Violation(dims) = check {
                    if !self.on_violation(&node_id, &estimate, &dims)? {
                        return Ok(());
                    }
                }
            }
            match self.run_node(&node_id)? {
                NodeOutcome::Done(refs, charge) => {
                    for (param, (stream, seq)) in refs {
                        let value = self.inner.substrate.message(&stream, seq)?.payload;
                        self.outputs.insert((node_id.clone(), param), (value, stream, seq));
                    }
                    self.set_node(&node_id, NodeStatus::Done);
                    self.charge(&node_id, charge, estimate.quality)?;
                }
                NodeOutcome::Failed(reason) => {
                    self.set_node(&node_id, NodeStatus::Failed);
                    failed.insert(node_id.clone());
                    first_failure.get_or_insert(format!("{node_id}: {reason}"));
                }
            }
        }
        if let Some(reason) = first_failure {
            let node = reason.split(':').next().unwrap_or_default().to_string();
            self.set_state(PlanState::Aborted, Some(format!("NODE_FAILED {reason}")));
            self.control(
                "ABORTED",
                vec![("reason", json!("NODE_FAILED")), ("node", json!(node))],
                &["PLAN", "ABORTED"],
            )?;
            return Ok(());
        }
        let results = self.publish_results()?;
        self.set_state(PlanState::Completed, None);
        self.control("COMPLETED", vec![("results", results)], &["PLAN", "COMPLETED"])?;
        Ok(())
    }

    /// Applies the session's violation policy. Returns whether to continue.
    fn on_violation(&mut self, node: &str, estimate: &QosVector, dims: &[Dimension]) -> Result<bool, CoordinatorError> {
        let budget = self.entry.budget.lock().clone();
        let dims_json = json!(dims);
        let mut policy = budget.policy;
        if policy == ViolationPolicy::Replan {
            let base = self.plan.base_id().to_string();
            let used = self.entry.replans.lock().get(&base).copied().unwrap_or(0);
            if used >= self.inner.config.max_replans {
                policy = ViolationPolicy::Abort;
            }
        }
        match policy {
            ViolationPolicy::Abort => {
                self.abort_budget(node, dims_json)?;
                Ok(false)
            }
            ViolationPolicy::Replan => {
                self.set_state(PlanState::Aborted, Some("REPLANNED".into()));
                self.control(
                    "REPLAN",
                    vec![("node", json!(node)), ("dimensions", dims_json)],
                    &["PLAN", "REPLAN"],
                )?;
                Ok(false)
            }
            ViolationPolicy::Confirm => {
                self.inner.update(&self.plan.id, |r| r.awaiting_confirm = true);
                self.control(
                    "CONFIRM_REQUEST",
                    vec![
                        ("node", json!(node)),
                        ("dimensions", dims_json.clone()),
                        ("estimate", json!(estimate)),
                        ("accrued", budget.accrued_json()),
                        ("allocated", budget.allocated_json()),
                    ],
                    &["BUDGET", "CONFIRM"],
                )?;
                let id = self.plan.id.clone();
                let answer = self.await_message(self.inner.config.confirm_timeout, true, |m| {
                    m.instruction() == Some("CONFIRM")
                        && m.payload.field("plan").and_then(Json::as_str) == Some(id.as_str())
                });
                self.inner.update(&self.plan.id, |r| r.awaiting_confirm = false);
                let approved = answer
                    .as_ref()
                    .and_then(|m| m.payload.field("approve"))
                    .and_then(Json::as_bool)
                    .unwrap_or(false);
                if approved {
                    self.overage_approved = true;
                    self.control("OVERAGE_APPROVED", vec![("node", json!(node))], &["BUDGET"])?;
                    Ok(true)
                } else {
                    let reason = if answer.is_some() {
                        "CONFIRM_DECLINED"
                    } else {
                        "CONFIRM_TIMEOUT"
                    };
                    self.set_state(PlanState::Aborted, Some(reason.into()));
                    self.control(
                        "ABORTED",
                        vec![
                            ("reason", json!(reason)),
                            ("node", json!(node)),
                            ("dimensions", dims_json),
                        ],
                        &["PLAN", "ABORTED"],
                    )?;
                    Ok(false)
                }
            }
        }
    }

    fn abort_budget(&mut self, node: &str, dims: Json) -> Result<(), CoordinatorError> {
        self.set_state(PlanState::Aborted, Some("BUDGET_EXCEEDED".into()));
        self.control(
            "ABORTED",
            vec![
                ("reason", json!("BUDGET_EXCEEDED")),
                ("node", json!(node)),
                ("dimensions", dims),
            ],
            &["PLAN", "ABORTED"],
        )?;
        Ok(())
    }

    fn charge(&mut self, node: &str, charge: Charge, quality: f64) -> Result<(), CoordinatorError> {
        let (accrued, allocated) = {
            let mut b = self.entry.budget.lock();
            b.accrue(charge.cost, charge.latency_ms, quality);
            (b.accrued_json(), b.allocated_json())
        };
        self.control(
            "BUDGET",
            vec![
                ("node", json!(node)),
                ("charge", charge.to_json()),
                ("accrued", accrued),
                ("allocated", allocated),
            ],
            &["BUDGET"],
        )?;
        Ok(())
    }

    fn run_node(&mut self, node_id: &str) -> Result<NodeOutcome, CoordinatorError> {
        let node = self.plan.node(node_id).expect("node exists").clone();
        let Some(desc) = self.descriptor(&node.agent) else {
            return self.fail_node(
                node_id,
                &node.agent,
                "UNKNOWN_AGENT",
                format!("agent {:?} is not registered", node.agent),
            );
        };
        let mut transform_charge = Charge::default();
        let mut inputs = serde_json::Map::new();
        for (param, binding) in &node.inputs {
            let spec = desc
                .input(param)
                .cloned()
                .unwrap_or_else(|| ParamSpec::new(param, crate::value::SemanticType::Text));
            let raw = match self.resolve(&binding.binding) {
                Ok(v) => v,
                Err(reason) => return self.fail_node(node_id, &desc.name, "UNBOUND", reason),
            };
            let needs = binding.needs_transform || !raw.conforms_to(spec.semantic_type);
            let value = if needs {
                match self.transform(node_id, &spec, &raw, binding.needs_transform) {
                    Ok((v, c)) => {
                        transform_charge.cost += c.cost;
                        transform_charge.latency_ms += c.latency_ms;
                        v
                    }
                    Err(reason) => return self.fail_node(node_id, &desc.name, "TRANSFORM_FAILED", reason),
                }
            } else {
                raw
            };
            inputs.insert(param.clone(), value.to_json());
        }
        if let Err(e) = self.inner.runtime.instantiate(&desc, &self.session) {
            return self.fail_node(node_id, &desc.name, "INSTANTIATE_FAILED", e.to_string());
        }
        self.set_node(node_id, NodeStatus::Running);
        let stream = self.execute_stream()?;
        self.inner.substrate.append(
            &stream,
            MessageKind::Control,
            Value::control(
                "EXECUTE",
                [
                    ("agent", json!(desc.name)),
                    ("plan", json!(self.plan.id)),
                    ("node", json!(node_id)),
                    ("inputs", Json::Object(inputs)),
                ],
            ),
            tags([EXECUTE_TAG]),
        )?;
        let timeout = desc
            .timeout_ms
            .map(Duration::from_millis)
            .unwrap_or(self.inner.config.node_timeout)
            + self.inner.config.node_grace;
        let (plan_id, nid) = (self.plan.id.clone(), node_id.to_string());
        let msg = self.await_message(timeout, false, |m| {
            matches!(m.instruction(), Some("DONE" | "FAILED"))
                && m.payload.field("plan").and_then(Json::as_str) == Some(plan_id.as_str())
                && m.payload.field("node").and_then(Json::as_str) == Some(nid.as_str())
        });
        let Some(msg) = msg else {
            return self.fail_node(node_id, &desc.name, "TIMEOUT", "no completion from the agent".into());
        };
        let reported: Charge = msg
            .payload
            .field("charge")
            .and_then(|c| serde_json::from_value(c.clone()).ok())
            .unwrap_or_default();
        if msg.instruction() == Some("FAILED") {
            let detail = msg.payload.field("detail").map(json_text).unwrap_or_default();
            return Ok(NodeOutcome::Failed(detail));
        }
        let mut refs = BTreeMap::new();
        if let Some(Json::Object(outs)) = msg.payload.field("outputs") {
            for (param, r) in outs {
                let stream = r.get("stream").and_then(Json::as_str).unwrap_or_default();
                let seq = r.get("seq").and_then(Json::as_u64).unwrap_or(0);
                refs.insert(param.clone(), (StreamId::new(stream), seq));
            }
        }
        let static_cost = desc.cost_hints.map(|h| h.cost).unwrap_or(0.0);
        let charge = Charge {
            cost: static_cost + reported.cost + transform_charge.cost,
            latency_ms: reported.latency_ms + transform_charge.latency_ms,
        };
        Ok(NodeOutcome::Done(refs, charge))
    }

    /// Reports a node that never reached its agent.
    fn fail_node(
        &self,
        node: &str,
        agent: &str,
        reason: &str,
        detail: String,
    ) -> Result<NodeOutcome, CoordinatorError> {
        self.control(
            "FAILED",
            vec![
                ("node", json!(node)),
                ("agent", json!(agent)),
                ("reason", json!(reason)),
                ("detail", json!(detail)),
            ],
            &["NODE", "FAILED"],
        )?;
        Ok(NodeOutcome::Failed(format!("{reason}: {detail}")))
    }

    fn execute_stream(&self) -> Result<StreamId, CoordinatorError> {
        let mut slot = self.entry.execute_stream.lock();
        if let Some(s) = slot.as_ref() {
            return Ok(s.id.clone());
        }
        let s = self
            .inner
            .substrate
            .create_stream(&self.session, COORDINATOR, tags([EXECUTE_TAG]))?;
        let id = s.id.clone();
        *slot = Some(s);
        Ok(id)
    }

    fn resolve(&self, binding: &Binding) -> Result<Value, String> {
        match binding {
            Binding::Node { node, param } => self
                .outputs
                .get(&(node.clone(), param.clone()))
                .map(|(v, _, _)| v.clone())
                .ok_or_else(|| format!("{node}.{param} produced no value")),
            Binding::UserText => Ok(Value::text(self.plan.utterance.clone())),
            Binding::Literal { value } => Ok(value.clone()),
            Binding::Source { path } => {
                let leaf = path.rsplit('/').next().unwrap_or_default();
                self.inner
                    .data
                    .store()
                    .table(leaf)
                    .map(Value::Table)
                    .ok_or_else(|| format!("source {path} is not loaded"))
            }
            Binding::Context { key } => self
                .plan
                .context
                .get(key)
                .map(plain_value)
                .ok_or_else(|| format!("context key {key:?} missing")),
        }
    }

    /// Runs a transform plan for one binding and records it on the session stream.
    fn transform(
        &self,
        node: &str,
        spec: &ParamSpec,
        value: &Value,
        explicit: bool,
    ) -> Result<(Value, Charge), String> {
        let data = &self.inner.data;
        let mut plan = data.plan_transform(value, spec, explicit).map_err(|e| e.to_string())?;
        if plan.is_identity() {
            return Ok((value.clone(), Charge::default()));
        }
        plan.binding = Some(format!("{node}.{}", spec.name));
        plan.estimate = data.estimate(&plan).ok();
        let _ = self.inner.substrate.append_from(
            &self.session.stream_id(),
            DATA_PLANNER,
            MessageKind::Data,
            Value::DataPlan(Box::new(plan.clone())),
            tags(["DATAPLAN"]),
        );
        data.execute(&plan, Some(value)).map_err(|e| e.to_string())
    }

    /// Sink outputs, re-emitted tagged RESULT when their stream lacks the tag.
    fn publish_results(&mut self) -> Result<Json, CoordinatorError> {
        let mut plan = self.plan.clone();
        plan.recompute_edges();
        let sinks: BTreeSet<String> = plan.sinks().into_iter().collect();
        let mut results = serde_json::Map::new();
        let entries: Vec<_> = self
            .outputs
            .iter()
            .filter(|((n, _), _)| sinks.contains(n))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for ((node, param), (value, stream, seq)) in entries {
            let tagged = self.inner.substrate.stream_ref(&stream)?.tags.contains("RESULT");
            let (stream, seq) = if tagged {
                (stream, seq)
            } else {
                let s = self
                    .inner
                    .substrate
                    .create_stream(&self.session, COORDINATOR, tags(["RESULT"]))?;
                let seq = self
                    .inner
                    .substrate
                    .append(&s.id, MessageKind::Data, value, tags(["RESULT"]))?;
                self.inner
                    .substrate
                    .append(&s.id, MessageKind::Eos, Value::Null, Default::default())?;
                (s.id, seq)
            };
            results.insert(
                format!("{node}.{param}"),
                json!({"stream": stream.as_str(), "seq": seq}),
            );
        }
        Ok(Json::Object(results))
    }
}

/// Maps plain JSON from a plan context onto a typed value.
pub fn plain_value(json: &Json) -> Value {
    match json {
        Json::Null => Value::Null,
        Json::Bool(b) => Value::Boolean(*b),
        Json::Number(n) => Value::Number(n.as_f64().unwrap_or_default()),
        Json::String(s) => Value::text(s.clone()),
        Json::Array(items) => Value::List(items.iter().map(plain_value).collect()),
        Json::Object(map) => {
            if map.contains_key("type") && map.contains_key("value") {
                if let Ok(v) = Value::from_json(json) {
                    return v;
                }
            }
            Value::Record(map.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
        }
    }
}
