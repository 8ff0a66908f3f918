//! Template task planner: turns an utterance and its intent into a DAG of
//! agent invocations over the agent registry, validates plans, and applies
//! user revisions.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataplan::can_transform;
use crate::registry::{read_seed_list, AgentRegistry, PersistError};
use crate::runtime::AgentDescriptor;
use crate::value::{SemanticType, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Intent {
    JobSearch,
    Summarize,
    OpenQuery,
    ListEdit,
    Smalltalk,
}

impl Intent {
    pub const ALL: [Intent; 5] = [
        Intent::JobSearch,
        Intent::Summarize,
        Intent::OpenQuery,
        Intent::ListEdit,
        Intent::Smalltalk,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Intent::JobSearch => "JOB_SEARCH",
            Intent::Summarize => "SUMMARIZE",
            Intent::OpenQuery => "OPEN_QUERY",
            Intent::ListEdit => "LIST_EDIT",
            Intent::Smalltalk => "SMALLTALK",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|i| i.as_str().eq_ignore_ascii_case(raw.trim()))
    }
}

impl std::fmt::Display for Intent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where a node input gets its value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Binding {
    /// Output parameter of an upstream node.
    Node {
        node: String,
        param: String,
    },
    /// The utterance the plan was made for.
    UserText,
    /// A registered data source, read whole.
    Source {
        path: String,
    },
    Literal {
        value: Value,
    },
    /// A key of the plan context, e.g. a selected job id.
    Context {
        key: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputBinding {
    #[serde(flatten)]
    pub binding: Binding,
    /// Route the value through the data planner before binding.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub needs_transform: bool,
}

impl InputBinding {
    pub fn new(binding: Binding) -> Self {
        Self {
            binding,
            needs_transform: false,
        }
    }

    pub fn transformed(binding: Binding) -> Self {
        Self {
            binding,
            needs_transform: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NodeStatus {
    Pending,
    Running,
    Done,
    Failed,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: String,
    pub agent: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, InputBinding>,
    pub status: NodeStatus,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub from_node: String,
    pub from_param: String,
    pub to_node: String,
    pub to_param: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub needs_transform: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PlanState {
    Proposed,
    Approved,
    Executing,
    Completed,
    Aborted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskPlan {
    pub id: String,
    #[serde(default)]
    pub revision: u32,
    pub intent: Intent,
    pub utterance: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub context: BTreeMap<String, Json>,
    pub nodes: Vec<PlanNode>,
    #[serde(default)]
    pub edges: Vec<Edge>,
    pub state: PlanState,
}

impl TaskPlan {
    pub fn node(&self, id: &str) -> Option<&PlanNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_mut(&mut self, id: &str) -> Option<&mut PlanNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    /// Id of the first revision of this plan.
    pub fn base_id(&self) -> &str {
        match self.id.rfind("-r") {
            Some(i) if self.id[i + 2..].chars().all(|c| c.is_ascii_digit()) && i + 2 < self.id.len() => &self.id[..i],
            _ => &self.id,
        }
    }

    /// Rebuilds `edges` from node bindings.
    pub fn recompute_edges(&mut self) {
        let mut edges: Vec<Edge> = self
            .nodes
            .iter()
            .flat_map(|n| {
                n.inputs.iter().filter_map(move |(param, b)| match &b.binding {
                    Binding::Node { node, param: from } => Some(Edge {
                        from_node: node.clone(),
                        from_param: from.clone(),
                        to_node: n.id.clone(),
                        to_param: param.clone(),
                        needs_transform: b.needs_transform,
                    }),
                    _ => None,
                })
            })
            .collect();
        edges.sort();
        self.edges = edges;
    }

    /// Upstream node ids of `id`.
    pub fn dependencies(&self, id: &str) -> BTreeSet<String> {
        self.node(id)
            .map(|n| {
                n.inputs
                    .values()
                    .filter_map(|b| match &b.binding {
                        Binding::Node { node, .. } => Some(node.clone()),
                        _ => None,
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Topological order, ties broken by node id. `None` on a cycle.
    pub fn topo_order(&self) -> Option<Vec<String>> {
        let mut placed: BTreeSet<String> = BTreeSet::new();
        let mut order = Vec::new();
        let ids: BTreeSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        while order.len() < self.nodes.len() {
            let next = self
                .nodes
                .iter()
                .filter(|n| !placed.contains(&n.id))
                .filter(|n| {
                    self.dependencies(&n.id)
                        .iter()
                        .all(|d| placed.contains(d) || !ids.contains(d.as_str()))
                })
                .map(|n| n.id.clone())
                .min()?;
            placed.insert(next.clone());
            order.push(next);
        }
        Some(order)
    }

    /// Nodes no other node consumes.
    pub fn sinks(&self) -> Vec<String> {
        let consumed: BTreeSet<String> = self.edges.iter().map(|e| e.from_node.clone()).collect();
        self.nodes
            .iter()
            .filter(|n| !consumed.contains(&n.id))
            .map(|n| n.id.clone())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    Cycle,
    DuplicateNode,
    UnknownAgent,
    UnknownParam,
    Unbound,
    TypeMismatch,
    Dangling,
    NeedsTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanIssue {
    pub code: ViolationCode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    pub detail: String,
}

/// Violations make a plan unexecutable; warnings do not.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<PlanIssue>,
    pub warnings: Vec<PlanIssue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, code: ViolationCode) -> bool {
        self.violations
            .iter()
            .chain(self.warnings.iter())
            .any(|v| v.code == code)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no plan template for intent {0}")]
    NoApplicableTemplate(Intent),
    #[error("no registered agent fills the slot {0:?}")]
    UnresolvedAgentSlot(String),
    #[error("invalid plan: {}", .0.iter().map(|v| v.detail.clone()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<PlanIssue>),
    #[error("unknown plan node {0}")]
    UnknownNode(String),
    #[error("unknown agent {0}")]
    UnknownAgent(String),
    #[error(transparent)]
    Templates(#[from] PersistError),
}

/// One agent slot of a template.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSlot {
    pub id: String,
    /// Phrase matched against agent descriptions by vector search.
    pub capability: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, InputBinding>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanTemplate {
    pub intent: Intent,
    pub slots: Vec<TemplateSlot>,
}

pub fn load_templates(path: &Path) -> Result<Vec<PlanTemplate>, PersistError> {
    read_seed_list(path)
}

/// Fills a template's slots from the registry. Stateless per call.
pub struct TaskPlanner {
    agents: Arc<AgentRegistry>,
    templates: Vec<PlanTemplate>,
}

impl TaskPlanner {
    pub fn new(agents: Arc<AgentRegistry>, templates: Vec<PlanTemplate>) -> Self {
        Self { agents, templates }
    }

    pub fn agents(&self) -> &Arc<AgentRegistry> {
        &self.agents
    }

    pub fn templates(&self) -> &[PlanTemplate] {
        &self.templates
    }

    /// Agent filling a capability slot: vector search rank 1 with a
    /// positive score.
    pub fn fill_slot(&self, capability: &str) -> Result<String, PlanError> {
        let hits = self
            .agents
            .search_vector(capability, 1)
            .map_err(|_| PlanError::UnresolvedAgentSlot(capability.to_string()))?;
        match hits.first() {
            Some((record, score)) if *score > 0.0 => Ok(record.name().to_string()),
            _ => Err(PlanError::UnresolvedAgentSlot(capability.to_string())),
        }
    }

    fn snapshot_digest(&self) -> String {
        let mut descriptors: Vec<String> = self
            .agents
            .list()
            .iter()
            .map(|r| serde_json::to_string(&r.descriptor).expect("descriptor serializes"))
            .collect();
        descriptors.sort();
        descriptors.join("\n")
    }

    /// A PROPOSED plan for the utterance. Same utterance, intent, context,
    /// and registry contents yield the same plan.
    pub fn plan(
        &self,
        utterance: &str,
        intent: Intent,
        context: BTreeMap<String, Json>,
    ) -> Result<TaskPlan, PlanError> {
        let template = self
            .templates
            .iter()
            .find(|t| t.intent == intent)
            .ok_or(PlanError::NoApplicableTemplate(intent))?;
        let mut nodes = Vec::new();
        for slot in &template.slots {
            nodes.push(PlanNode {
                id: slot.id.clone(),
                agent: self.fill_slot(&slot.capability)?,
                inputs: slot.inputs.clone(),
                status: NodeStatus::Pending,
            });
        }
        let mut h = Sha256::new();
        for part in [
            utterance,
            intent.as_str(),
            &self.snapshot_digest(),
            &serde_json::to_string(&context).expect("context serializes"),
        ] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        let hex: String = h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect();
        let mut plan = TaskPlan {
            id: format!("P-{hex}"),
            revision: 0,
            intent,
            utterance: utterance.to_string(),
            context,
            nodes,
            edges: Vec::new(),
            state: PlanState::Proposed,
        };
        plan.recompute_edges();
        let report = self.validate(&plan);
        if !report.is_ok() {
            return Err(PlanError::Invalid(report.violations));
        }
        Ok(plan)
    }

    /// Structural and type checks. Transform-flagged or transformable
    /// mismatches are warnings.
    pub fn validate(&self, plan: &TaskPlan) -> ValidationReport {
        let lookup = |name: &str| self.agents.descriptor(name);
        validate_plan(plan, &lookup)
    }

    /// A new PROPOSED revision with `node` run by `agent`. Bindings move to
    /// the new agent's inputs by name, then by type, then by a transformable
    /// type; downstream references to the old outputs are remapped the same
    /// way.
    pub fn revise(&self, plan: &TaskPlan, node: &str, agent: &str) -> Result<TaskPlan, PlanError> {
        let new = self
            .agents
            .descriptor(agent)
            .ok_or_else(|| PlanError::UnknownAgent(agent.to_string()))?;
        let old_node = plan
            .node(node)
            .ok_or_else(|| PlanError::UnknownNode(node.to_string()))?;
        let old = self.agents.descriptor(&old_node.agent);
        let mut revised = plan.clone();
        let mut bindings = BTreeMap::new();
        let mut taken = BTreeSet::new();
        for (param, binding) in &old_node.inputs {
            let from_type = binding_type(plan, &binding.binding, &|n| self.agents.descriptor(n))
                .or_else(|| old.as_ref().and_then(|d| d.input(param)).map(|p| p.semantic_type));
            if let Some((target, transform)) = remap_input(&new, param, from_type, &taken) {
                taken.insert(target.clone());
                let mut b = binding.clone();
                b.needs_transform |= transform;
                bindings.insert(target, b);
            }
        }
        let n = revised.node_mut(node).expect("node exists");
        n.agent = new.name.clone();
        n.inputs = bindings;
        for other in revised.nodes.iter_mut().filter(|n| n.id != node) {
            for b in other.inputs.values_mut() {
                if let Binding::Node { node: from, param } = &mut b.binding {
                    if from != node || new.output(param).is_some() {
                        continue;
                    }
                    let ty = old.as_ref().and_then(|d| d.output(param)).map(|p| p.semantic_type);
                    if let Some(out) = new.outputs.iter().find(|o| Some(o.semantic_type) == ty) {
                        *param = out.name.clone();
                    } else if let Some(out) = new.outputs.first() {
                        *param = out.name.clone();
                        b.needs_transform = true;
                    }
                }
            }
        }
        bump_revision(&mut revised);
        revised.recompute_edges();
        Ok(revised)
    }

    /// Replaces the whole DAG with a user-supplied one, keeping identity.
    pub fn revise_with(&self, plan: &TaskPlan, mut replacement: TaskPlan) -> TaskPlan {
        replacement.id = plan.id.clone();
        replacement.revision = plan.revision;
        replacement.intent = plan.intent;
        replacement.utterance = plan.utterance.clone();
        for n in &mut replacement.nodes {
            n.status = NodeStatus::Pending;
        }
        bump_revision(&mut replacement);
        replacement.recompute_edges();
        replacement
    }

    /// Plans the same request again as the next revision.
    pub fn replan(&self, plan: &TaskPlan) -> Result<TaskPlan, PlanError> {
        let mut fresh = self.plan(&plan.utterance, plan.intent, plan.context.clone())?;
        fresh.id = plan.id.clone();
        fresh.revision = plan.revision;
        bump_revision(&mut fresh);
        Ok(fresh)
    }
}

fn bump_revision(plan: &mut TaskPlan) {
    let base = plan.base_id().to_string();
    plan.revision += 1;
    plan.id = format!("{base}-r{}", plan.revision);
    plan.state = PlanState::Proposed;
}

fn remap_input(
    new: &AgentDescriptor,
    param: &str,
    from_type: Option<SemanticType>,
    taken: &BTreeSet<String>,
) -> Option<(String, bool)> {
    let free = |p: &&crate::runtime::ParamSpec| !taken.contains(&p.name);
    if let Some(p) = new
        .inputs
        .iter()
        .filter(free)
        .find(|p| p.name.eq_ignore_ascii_case(param))
    {
        let transform = from_type.is_some_and(|t| t != p.semantic_type);
        return Some((p.name.clone(), transform));
    }
    let ty = from_type?;
    if let Some(p) = new.inputs.iter().filter(free).find(|p| p.semantic_type == ty) {
        return Some((p.name.clone(), false));
    }
    new.inputs
        .iter()
        .filter(free)
        .find(|p| can_transform(ty, p.semantic_type))
        .map(|p| (p.name.clone(), true))
}

/// Semantic type a binding supplies, when known without running anything.
pub fn binding_type(
    plan: &TaskPlan,
    binding: &Binding,
    lookup: &dyn Fn(&str) -> Option<AgentDescriptor>,
) -> Option<SemanticType> {
    match binding {
        Binding::Node { node, param } => {
            let agent = &plan.node(node)?.agent;
            lookup(agent)?.output(param).map(|p| p.semantic_type)
        }
        Binding::UserText => Some(SemanticType::Text),
        Binding::Source { .. } => Some(SemanticType::Table),
        Binding::Literal { value } => value.semantic_type(),
        Binding::Context { key } => plan.context.get(key).and_then(|v| match v {
            Json::Number(_) => Some(SemanticType::Number),
            Json::String(_) => Some(SemanticType::Text),
            Json::Bool(_) => Some(SemanticType::Boolean),
            Json::Object(_) => Some(SemanticType::Record),
            _ => None,
        }),
    }
}

/// Validation against any descriptor lookup.
pub fn validate_plan(plan: &TaskPlan, lookup: &dyn Fn(&str) -> Option<AgentDescriptor>) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut violation = |code, node: &str, detail: String| {
        report.violations.push(PlanIssue {
            code,
            node: Some(node.to_string()),
            detail,
        })
    };
    let mut seen = BTreeSet::new();
    let mut warnings = Vec::new();
    for n in &plan.nodes {
        if !seen.insert(n.id.clone()) {
            violation(
                ViolationCode::DuplicateNode,
                &n.id,
                format!("node id {} appears twice", n.id),
            );
        }
    }
    for n in &plan.nodes {
        let Some(desc) = lookup(&n.agent) else {
            violation(
                ViolationCode::UnknownAgent,
                &n.id,
                format!("{}: agent {:?} is not registered", n.id, n.agent),
            );
            continue;
        };
        for (param, b) in &n.inputs {
            let Some(spec) = desc.input(param) else {
                violation(
                    ViolationCode::UnknownParam,
                    &n.id,
                    format!("{}: {} has no input {param:?}", n.id, desc.name),
                );
                continue;
            };
            if let Binding::Node { node, param: from } = &b.binding {
                match plan.node(node) {
                    None => {
                        violation(
                            ViolationCode::Dangling,
                            &n.id,
                            format!("{}.{param} refers to missing node {node}", n.id),
                        );
                        continue;
                    }
                    Some(up) => {
                        if let Some(up_desc) = lookup(&up.agent) {
                            if up_desc.output(from).is_none() {
                                violation(
                                    ViolationCode::UnknownParam,
                                    &n.id,
                                    format!("{}: {} has no output {from:?}", n.id, up_desc.name),
                                );
                                continue;
                            }
                        }
                    }
                }
            }
            if let Binding::Context { key } = &b.binding {
                if !plan.context.contains_key(key) {
                    violation(
                        ViolationCode::Unbound,
                        &n.id,
                        format!("{}.{param}: context key {key:?} missing", n.id),
                    );
                    continue;
                }
            }
            let supplied = binding_type(plan, &b.binding, lookup);
            match supplied {
                Some(t) if t == spec.semantic_type && !b.needs_transform => {}
                Some(t) if b.needs_transform || can_transform(t, spec.semantic_type) => warnings.push(PlanIssue {
                    code: ViolationCode::NeedsTransform,
                    node: Some(n.id.clone()),
                    detail: format!("{}.{param}: {t} needs transform to {}", n.id, spec.semantic_type),
                }),
                Some(t) => violation(
                    ViolationCode::TypeMismatch,
                    &n.id,
                    format!("{}.{param}: {t} cannot bind to {}", n.id, spec.semantic_type),
                ),
                None if b.needs_transform => warnings.push(PlanIssue {
                    code: ViolationCode::NeedsTransform,
                    node: Some(n.id.clone()),
                    detail: format!("{}.{param}: value needs transform to {}", n.id, spec.semantic_type),
                }),
                None => {}
            }
        }
        for spec in desc.inputs.iter().filter(|p| p.required && p.default.is_none()) {
            if !n.inputs.contains_key(&spec.name) {
                violation(
                    ViolationCode::Unbound,
                    &n.id,
                    format!("{}: required input {:?} is unbound", n.id, spec.name),
                );
            }
        }
    }
    if plan.topo_order().is_none() {
        report.violations.push(PlanIssue {
            code: ViolationCode::Cycle,
            node: None,
            detail: "plan edges form a cycle".into(),
        });
    }
    report.warnings = warnings;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::ParamSpec;
    use serde_json::json;

    fn agent(name: &str, description: &str, inputs: Vec<ParamSpec>, outputs: Vec<ParamSpec>) -> AgentDescriptor {
        let mut d = AgentDescriptor::new(name, description);
        d.inputs = inputs;
        d.outputs = outputs;
        d.deployment
            .insert("image".into(), json!(format!("builtin:{}", name.to_lowercase())));
        d
    }

    fn registry() -> Arc<AgentRegistry> {
        let r = AgentRegistry::new();
        r.register(agent(
            "Profiler",
            "collects the job seeker profile through a form",
            vec![ParamSpec::new("Criteria", SemanticType::Text)],
            vec![ParamSpec::new("Profile", SemanticType::Record)],
        ))
        .unwrap();
        r.register(agent(
            "Job Matcher",
            "scores how well jobs match a job seeker profile",
            vec![
                ParamSpec::new("Job Seeker Data", SemanticType::Record),
                ParamSpec::new("Jobs", SemanticType::Table),
            ],
            vec![ParamSpec::new("Matches", SemanticType::Table)],
        ))
        .unwrap();
        r.register(agent(
            "Presenter",
            "presents matched items to the user",
            vec![ParamSpec::new("Items", SemanticType::Table)],
            vec![ParamSpec::new("Text", SemanticType::Text)],
        ))
        .unwrap();
        r.register(agent(
            "Summarizer",
            "summarizes the applicants of a job",
            vec![ParamSpec::new("Job Id", SemanticType::Number)],
            vec![ParamSpec::new("Summary", SemanticType::Text)],
        ))
        .unwrap();
        Arc::new(r)
    }

    fn templates() -> Vec<PlanTemplate> {
        serde_json::from_value(json!([{
            "intent": "JOB_SEARCH",
            "slots": [
                {"id": "n1", "capability": "job seeker profile form",
                 "inputs": {"Criteria": {"kind": "USER_TEXT", "needs_transform": true}}},
                {"id": "n2", "capability": "match jobs to a job seeker profile",
                 "inputs": {"Job Seeker Data": {"kind": "NODE", "node": "n1", "param": "Profile"},
                            "Jobs": {"kind": "SOURCE", "path": "/hr/HR/Jobs"}}},
                {"id": "n3", "capability": "present matched items",
                 "inputs": {"Items": {"kind": "NODE", "node": "n2", "param": "Matches"}}}
            ]
        }]))
        .unwrap()
    }

    const UTTERANCE: &str = "I am looking for a data scientist position in SF bay area.";

    #[test]
    fn job_search_plan_shape() {
        let planner = TaskPlanner::new(registry(), templates());
        let plan = planner.plan(UTTERANCE, Intent::JobSearch, BTreeMap::new()).unwrap();
        let agents: Vec<&str> = plan.nodes.iter().map(|n| n.agent.as_str()).collect();
        assert_eq!(agents, vec!["Profiler", "Job Matcher", "Presenter"]);
        assert_eq!(plan.edges.len(), 2);
        let report = planner.validate(&plan);
        assert!(report.is_ok());
        assert_eq!(report.warnings.len(), 1);
        assert_eq!(report.warnings[0].code, ViolationCode::NeedsTransform);
        assert_eq!(plan.topo_order().unwrap(), vec!["n1", "n2", "n3"]);
    }

    #[test]
    fn deterministic_ids() {
        let planner = TaskPlanner::new(registry(), templates());
        let a = planner.plan(UTTERANCE, Intent::JobSearch, BTreeMap::new()).unwrap();
        let b = planner.plan(UTTERANCE, Intent::JobSearch, BTreeMap::new()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_template_and_empty_registry() {
        let planner = TaskPlanner::new(registry(), templates());
        assert_eq!(
            planner.plan("x", Intent::Smalltalk, BTreeMap::new()),
            Err(PlanError::NoApplicableTemplate(Intent::Smalltalk))
        );
        let empty = TaskPlanner::new(Arc::new(AgentRegistry::new()), templates());
        assert!(matches!(
            empty.plan(UTTERANCE, Intent::JobSearch, BTreeMap::new()),
            Err(PlanError::UnresolvedAgentSlot(_))
        ));
    }

    #[test]
    fn cycle_and_unbound_detected() {
        let planner = TaskPlanner::new(registry(), templates());
        let mut plan = planner.plan(UTTERANCE, Intent::JobSearch, BTreeMap::new()).unwrap();
        plan.node_mut("n1").unwrap().inputs.insert(
            "Criteria".into(),
            InputBinding::transformed(Binding::Node {
                node: "n3".into(),
                param: "Text".into(),
            }),
        );
        plan.recompute_edges();
        assert!(planner.validate(&plan).has(ViolationCode::Cycle));
        plan.node_mut("n1").unwrap().inputs.clear();
        let report = planner.validate(&plan);
        assert!(report.violations.iter().any(|v| v.code == ViolationCode::Unbound));
    }

    #[test]
    fn revise_presenter_to_summarizer() {
        let planner = TaskPlanner::new(registry(), templates());
        let plan = planner.plan(UTTERANCE, Intent::JobSearch, BTreeMap::new()).unwrap();
        let revised = planner.revise(&plan, "n3", "Summarizer").unwrap();
        assert_eq!(revised.id, format!("{}-r1", plan.id));
        assert_eq!(revised.node("n3").unwrap().agent, "Summarizer");
        let b = &revised.node("n3").unwrap().inputs["Job Id"];
        assert!(b.needs_transform);
        assert!(planner.validate(&revised).is_ok());
        let again = planner.revise(&revised, "n3", "Presenter").unwrap();
        assert_eq!(again.id, format!("{}-r2", plan.id));
    }

    #[test]
    fn binding_wire_shape() {
        let b = InputBinding::transformed(Binding::UserText);
        assert_eq!(
            serde_json::to_value(&b).unwrap(),
            json!({"kind": "USER_TEXT", "needs_transform": true})
        );
        let n: InputBinding = serde_json::from_value(json!({"kind": "NODE", "node": "n1", "param": "P"})).unwrap();
        assert!(!n.needs_transform);
    }
}
