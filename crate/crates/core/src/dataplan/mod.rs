//! Data plans: DAGs of data operators over registered sources, including
//! language models registered as sources. The planner decomposes requests
//! whose phrases fail to ground in a relational source; the executor
//! evaluates a plan in topological order.

mod frame;
pub mod sql;
mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use frame::{ground, parse_frame, q2nl, strip_intent_prefix, Grounding, Phrase};
pub use store::{parse_cell, read_csv, DataStore, Graph, StoreError};

use crate::model::ModelBackend;
use crate::optimizer::{self, Candidate, ConstraintSet, CostNode, OptimizerError, QosVector};
use crate::registry::{DataRegistry, DataSourceRecord, Modality, SourcePath};
use crate::runtime::{Charge, ParamSpec};
use crate::value::{json_text, SemanticType, Table, Value};

/// Marks a leaf fed by the value being transformed.
pub const PLAN_INPUT: &str = "$INPUT";

/// Taxonomy expansion depth.
pub const MAX_EXPANSION_HOPS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "DISCOVER")]
    Discover,
    #[serde(rename = "SELECT")]
    Select,
    #[serde(rename = "PROJECT")]
    Project,
    #[serde(rename = "JOIN")]
    Join,
    #[serde(rename = "EXTRACT")]
    Extract,
    #[serde(rename = "SUMMARIZE")]
    Summarize,
    #[serde(rename = "Q2NL")]
    Q2nl,
    #[serde(rename = "NL2Q")]
    Nl2q,
    #[serde(rename = "MODEL_CALL")]
    ModelCall,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: String,
    pub op: OpKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<SourcePath>,
    #[serde(default)]
    pub params: BTreeMap<String, Json>,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub output: SemanticType,
}

impl OperatorNode {
    fn new(id: &str, op: OpKind, output: SemanticType) -> Self {
        Self {
            id: id.to_string(),
            op,
            source: None,
            params: BTreeMap::new(),
            inputs: Vec::new(),
            output,
        }
    }

    fn source(mut self, path: &SourcePath) -> Self {
        self.source = Some(path.clone());
        self
    }

    fn param(mut self, key: &str, value: Json) -> Self {
        self.params.insert(key.to_string(), value);
        self
    }

    fn inputs(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }

    fn is_literal_fed(&self) -> bool {
        self.params.get("input").and_then(Json::as_str) == Some(PLAN_INPUT)
    }
}

/// A phrase that failed grounding and what replaced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub field: String,
    pub phrase: String,
    pub via: OpKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPlan {
    pub id: String,
    pub nodes: Vec<OperatorNode>,
    /// Node producing the result; `None` for the identity plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sink: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<QosVector>,
    /// Where the result goes, e.g. `n1.Criteria`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binding: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub substitutions: Vec<Substitution>,
}

impl DataPlan {
    pub fn identity(id: &str) -> Self {
        Self {
            id: id.to_string(),
            nodes: Vec::new(),
            sink: None,
            estimate: None,
            binding: None,
            substitutions: Vec::new(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&OperatorNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// True when no operator calls a model or expands a graph.
    pub fn is_relational_only(&self) -> bool {
        self.substitutions.is_empty() && !self.nodes.iter().any(|n| n.op == OpKind::ModelCall)
    }

    pub fn sink_type(&self) -> Option<SemanticType> {
        self.sink.as_ref().and_then(|s| self.node(s)).map(|n| n.output)
    }

    /// Node ids in a topological order, ties by position.
    pub fn topo_order(&self) -> Result<Vec<String>, String> {
        let ids: BTreeSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        let mut done: Vec<String> = Vec::new();
        let mut placed: BTreeSet<&str> = BTreeSet::new();
        while done.len() < self.nodes.len() {
            let next = self.nodes.iter().find(|n| {
                !placed.contains(n.id.as_str())
                    && n.inputs
                        .iter()
                        .all(|i| placed.contains(i.as_str()) || !ids.contains(i.as_str()))
            });
            match next {
                Some(n) => {
                    placed.insert(&n.id);
                    done.push(n.id.clone());
                }
                None => return Err("operator graph has a cycle".into()),
            }
        }
        Ok(done)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataPlanError {
    #[error("no feasible data plan: {0}")]
    NoFeasiblePlan(String),
    #[error("source unavailable: {0}")]
    SourceUnavailable(String),
    #[error("operator {node} failed: {reason}")]
    OperatorFailed { node: String, reason: String },
    #[error("invalid data plan: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
}

fn plan_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("DP-{hex}")
}

/// Whether some transform plan can turn `from` into `to`.
pub fn can_transform(from: SemanticType, to: SemanticType) -> bool {
    matches!(
        (from, to),
        (SemanticType::Text, SemanticType::Text)
            | (SemanticType::Text, SemanticType::Number)
            | (SemanticType::Table, SemanticType::Number)
            | (SemanticType::Table, SemanticType::Text)
            | (SemanticType::Record, SemanticType::Text)
    )
}

/// Splits a model answer into list items: one per line or comma, bullets
/// and numbering removed, duplicates dropped.
pub fn parse_list(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    text.split(['\n', ',', ';'])
        .map(|s| {
            s.trim()
                .trim_start_matches(['-', '*', '•'])
                .trim_start_matches(|c: char| c.is_ascii_digit() || c == '.' || c == ')')
                .trim()
                .trim_end_matches('.')
                .to_string()
        })
        .filter(|s| !s.is_empty())
        .filter(|s| seen.insert(s.to_lowercase()))
        .collect()
}

/// Plans and executes data operations against the catalog and store.
pub struct DataPlanner {
    registry: Arc<DataRegistry>,
    store: Arc<DataStore>,
    model: Arc<dyn ModelBackend>,
}

struct Target {
    record: DataSourceRecord,
    index: BTreeMap<String, BTreeSet<String>>,
}

impl DataPlanner {
    pub fn new(registry: Arc<DataRegistry>, store: Arc<DataStore>, model: Arc<dyn ModelBackend>) -> Self {
        Self { registry, store, model }
    }

    pub fn registry(&self) -> &Arc<DataRegistry> {
        &self.registry
    }

    pub fn store(&self) -> &Arc<DataStore> {
        &self.store
    }

    pub fn model(&self) -> &Arc<dyn ModelBackend> {
        &self.model
    }

    fn first_model(&self) -> Option<DataSourceRecord> {
        self.registry
            .by_modality(Modality::Model)
            .into_iter()
            .find(|r| r.path.segments().len() == 3)
    }

    /// Relational collection best suited to the request: most hinted fields
    /// present in its schema, then discovery score, then path.
    fn relational_target(&self, nl: &str, fields: &[&str]) -> Option<Target> {
        let ranked = self
            .registry
            .discover(nl, Some(Modality::Relational), usize::MAX)
            .ok()?;
        let mut best: Option<(usize, f64, DataSourceRecord)> = None;
        for (r, score) in ranked {
            if r.path.segments().len() != 3 || self.store.table(r.path.leaf()).is_none() {
                continue;
            }
            let covered = fields
                .iter()
                .filter(|f| r.schema.keys().any(|k| k.eq_ignore_ascii_case(f)))
                .count();
            let better = match &best {
                None => true,
                Some((c, s, _)) => covered > *c || (covered == *c && score > *s + 1e-12),
            };
            if better {
                best = Some((covered, score, r));
            }
        }
        best.map(|(_, _, record)| Target {
            index: self.store.value_index(record.path.leaf()),
            record,
        })
    }

    /// Plan turning `value` into something bindable to `target`. With
    /// `explicit` false and matching types the identity plan is returned.
    pub fn plan_transform(&self, value: &Value, target: &ParamSpec, explicit: bool) -> Result<DataPlan, DataPlanError> {
        let from = value
            .semantic_type()
            .ok_or_else(|| DataPlanError::NoFeasiblePlan("value has no semantic type".into()))?;
        let to = target.semantic_type;
        let id = plan_id(&[
            "transform",
            &from.to_string(),
            &to.to_string(),
            &target.name,
            &value.to_json().to_string(),
        ]);
        if from == to && !explicit {
            return Ok(DataPlan::identity(&id));
        }
        let single = |node: OperatorNode| DataPlan {
            id: id.clone(),
            sink: Some(node.id.clone()),
            nodes: vec![node],
            estimate: None,
            binding: None,
            substitutions: Vec::new(),
        };
        let input = || json!(PLAN_INPUT);
        match (from, to) {
            (SemanticType::Text, SemanticType::Text) => {
                let text = value.as_text().unwrap_or_default();
                if strip_intent_prefix(text).is_some() {
                    Ok(single(
                        OperatorNode::new("d1", OpKind::Extract, SemanticType::Text)
                            .param("input", input())
                            .param("rule", json!("strip_intent_prefix")),
                    ))
                } else if let Some(model) = self.first_model() {
                    Ok(single(
                        OperatorNode::new("d1", OpKind::ModelCall, SemanticType::Text)
                            .source(&model.path)
                            .param("input", input())
                            .param(
                                "prompt_template",
                                json!(format!("Extract the {} from: {{input}}", target.name.to_lowercase())),
                            ),
                    ))
                } else {
                    Ok(DataPlan::identity(&id))
                }
            }
            (SemanticType::Text, SemanticType::Number) => Ok(single(
                OperatorNode::new("d1", OpKind::Extract, SemanticType::Number)
                    .param("input", input())
                    .param("rule", json!("first_number")),
            )),
            (SemanticType::Table, SemanticType::Number) | (SemanticType::Table, SemanticType::Text) => {
                let table = value.as_table().expect("typed");
                let column = ["id", "job_id"]
                    .into_iter()
                    .find(|c| table.column_index(c).is_some())
                    .or_else(|| table.columns.first().map(String::as_str))
                    .ok_or_else(|| DataPlanError::NoFeasiblePlan("table has no columns".into()))?
                    .to_string();
                Ok(single(
                    OperatorNode::new("d1", OpKind::Project, to)
                        .param("input", input())
                        .param("column", json!(column))
                        .param("row", json!(0)),
                ))
            }
            (SemanticType::Record, SemanticType::Text) => Ok(single(
                OperatorNode::new("d1", OpKind::Summarize, SemanticType::Text).param("input", input()),
            )),
            (a, b) => Err(DataPlanError::NoFeasiblePlan(format!("no operator turns {a} into {b}"))),
        }
    }

    /// Candidate plans for a natural-language retrieval request over the
    /// relational catalog. A direct plan is produced when every phrase
    /// grounds; otherwise each failing phrase is substituted by a graph
    /// expansion (when a graph knows the phrase) or a model call, and every
    /// combination becomes a candidate.
    pub fn plan_query(&self, nl: &str) -> Result<Vec<DataPlan>, DataPlanError> {
        let phrases = parse_frame(nl);
        let fields: Vec<&str> = phrases.iter().map(|p| p.field.as_str()).collect();
        let target = self
            .relational_target(nl, &fields)
            .ok_or_else(|| DataPlanError::NoFeasiblePlan("no relational source in the catalog".into()))?;
        let mut grounded: Vec<(Phrase, Grounding)> = Vec::new();
        let mut failing: Vec<Phrase> = Vec::new();
        for p in &phrases {
            match ground(p, &target.index) {
                Some(g) => grounded.push((p.clone(), g)),
                None => failing.push(p.clone()),
            }
        }
        let table = target.record.path.leaf().to_string();
        let predicates: Vec<(String, String)> = grounded
            .iter()
            .filter_map(|(p, g)| match g {
                Grounding::Value(col) => Some((col.clone(), p.text.clone())),
                Grounding::Field(_) => None,
            })
            .collect();

        if failing.is_empty() {
            let mut sql = format!("SELECT * FROM {table}");
            for (i, (col, text)) in predicates.iter().enumerate() {
                sql.push_str(if i == 0 { " WHERE " } else { " AND " });
                sql.push_str(&format!("{col} LIKE {}", sql::quote(&format!("{text}%"))));
            }
            let nodes = vec![
                OperatorNode::new("d1", OpKind::Discover, SemanticType::Table).source(&target.record.path),
                OperatorNode::new("d2", OpKind::Nl2q, SemanticType::Text)
                    .inputs(&["d1"])
                    .param("question", json!(nl))
                    .param("sql", json!(sql)),
                OperatorNode::new("d3", OpKind::Select, SemanticType::Table)
                    .source(&target.record.path)
                    .inputs(&["d1", "d2"]),
            ];
            return Ok(vec![DataPlan {
                id: plan_id(&["query", nl, "direct"]),
                nodes,
                sink: Some("d3".into()),
                estimate: None,
                binding: None,
                substitutions: Vec::new(),
            }]);
        }

        let model = self.first_model();
        let mut options: Vec<Vec<(OpKind, Option<SourcePath>)>> = Vec::new();
        for p in &failing {
            let mut opts = Vec::new();
            if let Some((graph, _)) = self.store.graph_containing(&p.text) {
                opts.push((OpKind::Select, Some(graph)));
            }
            if let Some(m) = &model {
                opts.push((OpKind::ModelCall, Some(m.path.clone())));
            }
            if opts.is_empty() {
                return Err(DataPlanError::NoFeasiblePlan(format!(
                    "phrase {:?} does not ground and no graph or model source can supply it",
                    p.text
                )));
            }
            options.push(opts);
        }

        let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
        for opts in &options {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    (0..opts.len()).map(move |i| {
                        let mut c = c.clone();
                        c.push(i);
                        c
                    })
                })
                .collect();
        }

        let mut plans = Vec::new();
        for combo in combos {
            let mut nodes =
                vec![OperatorNode::new("d1", OpKind::Discover, SemanticType::Table).source(&target.record.path)];
            let mut next = 2;
            let mut fresh = || {
                let id = format!("d{next}");
                next += 1;
                id
            };
            let mut current = "d1".to_string();
            if !predicates.is_empty() {
                let id = fresh();
                let wheres: Vec<Json> = predicates
                    .iter()
                    .map(|(c, t)| json!({"column": c, "prefix": t}))
                    .collect();
                nodes.push(
                    OperatorNode::new(&id, OpKind::Select, SemanticType::Table)
                        .source(&target.record.path)
                        .inputs(&[&current])
                        .param("where", Json::Array(wheres)),
                );
                current = id;
            }
            let mut substitutions = Vec::new();
            let mut variant = Vec::new();
            // Graph expansions filter the scan first; model lists join afterwards.
            let mut order: Vec<usize> = (0..failing.len()).collect();
            order.sort_by_key(|&i| options[i][combo[i]].0 != OpKind::Select);
            for i in order {
                let phrase = &failing[i];
                let (kind, source) = &options[i][combo[i]];
                let source = source.as_ref().expect("option carries a source");
                let column = target
                    .index
                    .keys()
                    .find(|c| c.eq_ignore_ascii_case(&phrase.field))
                    .cloned()
                    .unwrap_or_else(|| phrase.field.clone());
                variant.push(format!(
                    "{}:{}",
                    phrase.field,
                    if *kind == OpKind::Select { "GRAPH" } else { "MODEL_CALL" }
                ));
                if *kind == OpKind::Select {
                    let expand = fresh();
                    nodes.push(
                        OperatorNode::new(&expand, OpKind::Select, SemanticType::Table)
                            .source(source)
                            .param("expand", json!(phrase.text))
                            .param("max_hops", json!(MAX_EXPANSION_HOPS))
                            .param("column", json!(column)),
                    );
                    let filter = fresh();
                    nodes.push(
                        OperatorNode::new(&filter, OpKind::Select, SemanticType::Table)
                            .source(&target.record.path)
                            .inputs(&[&current, &expand])
                            .param("member_of", json!({"column": column})),
                    );
                    current = filter;
                } else {
                    let question = fresh();
                    nodes.push(
                        OperatorNode::new(&question, OpKind::Q2nl, SemanticType::Text)
                            .inputs(&["d1"])
                            .param("field", json!(phrase.field))
                            .param("phrase", json!(phrase.text)),
                    );
                    let call = fresh();
                    nodes.push(
                        OperatorNode::new(&call, OpKind::ModelCall, SemanticType::Table)
                            .source(source)
                            .inputs(&[&question])
                            .param("prompt_template", json!("List the {input}, one per line."))
                            .param("column", json!(column)),
                    );
                    let join = fresh();
                    nodes.push(
                        OperatorNode::new(&join, OpKind::Join, SemanticType::Table)
                            .inputs(&[&current, &call])
                            .param("left_key", json!(column))
                            .param("right_key", json!(column)),
                    );
                    current = join;
                }
                substitutions.push(Substitution {
                    field: phrase.field.clone(),
                    phrase: phrase.text.clone(),
                    via: if *kind == OpKind::Select {
                        OpKind::Select
                    } else {
                        OpKind::ModelCall
                    },
                });
            }
            let variant = variant.join("+");
            plans.push(DataPlan {
                id: plan_id(&["query", nl, &variant]),
                nodes,
                sink: Some(current),
                estimate: None,
                binding: None,
                substitutions,
            });
        }
        Ok(plans)
    }

    /// Values of `field` matching `phrase`: a prefix scan of the relational
    /// source when the phrase grounds there, otherwise a model lookup.
    pub fn plan_lookup(&self, field: &str, phrase: &str) -> Result<DataPlan, DataPlanError> {
        let target = self
            .relational_target(phrase, &[field])
            .ok_or_else(|| DataPlanError::NoFeasiblePlan("no relational source in the catalog".into()))?;
        let column = target
            .index
            .keys()
            .find(|c| c.eq_ignore_ascii_case(field))
            .cloned()
            .ok_or_else(|| DataPlanError::NoFeasiblePlan(format!("no {field} column in {}", target.record.path)))?;
        let p = Phrase::new(field, phrase);
        let id = plan_id(&["lookup", field, phrase]);
        let discover = OperatorNode::new("d1", OpKind::Discover, SemanticType::Table).source(&target.record.path);
        if matches!(ground(&p, &target.index), Some(Grounding::Value(ref c)) if *c == column) {
            let select = OperatorNode::new("d2", OpKind::Select, SemanticType::Table)
                .source(&target.record.path)
                .inputs(&["d1"])
                .param("where", json!([{"column": column, "prefix": phrase}]))
                .param("distinct", json!(column));
            return Ok(DataPlan {
                id,
                nodes: vec![discover, select],
                sink: Some("d2".into()),
                estimate: None,
                binding: None,
                substitutions: Vec::new(),
            });
        }
        let model = self.first_model().ok_or_else(|| {
            DataPlanError::NoFeasiblePlan(format!("{phrase:?} does not ground and no model source exists"))
        })?;
        Ok(DataPlan {
            id,
            nodes: vec![
                discover,
                OperatorNode::new("d2", OpKind::Q2nl, SemanticType::Text)
                    .inputs(&["d1"])
                    .param("field", json!(field))
                    .param("phrase", json!(phrase)),
                OperatorNode::new("d3", OpKind::ModelCall, SemanticType::Table)
                    .source(&model.path)
                    .inputs(&["d2"])
                    .param("prompt_template", json!("List the {input}, one per line."))
                    .param("column", json!(column)),
            ],
            sink: Some("d3".into()),
            estimate: None,
            binding: None,
            substitutions: vec![Substitution {
                field: field.to_string(),
                phrase: phrase.to_string(),
                via: OpKind::ModelCall,
            }],
        })
    }

    /// Structural and type checks: acyclic, single sink, typed edges,
    /// leaves fed by a source or by the plan input.
    pub fn check(&self, plan: &DataPlan) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if plan.nodes.is_empty() {
            return Ok(());
        }
        let by_id: BTreeMap<&str, &OperatorNode> = plan.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
        if by_id.len() != plan.nodes.len() {
            problems.push("duplicate operator ids".to_string());
        }
        if let Err(e) = plan.topo_order() {
            problems.push(e);
        }
        let consumed: BTreeSet<&str> = plan
            .nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(String::as_str))
            .collect();
        let sinks: Vec<&str> = plan
            .nodes
            .iter()
            .map(|n| n.id.as_str())
            .filter(|id| !consumed.contains(id))
            .collect();
        if sinks.len() != 1 || plan.sink.as_deref() != Some(sinks[0]) {
            problems.push(format!("plan must have exactly one sink, found {sinks:?}"));
        }
        for n in &plan.nodes {
            let mut in_types = Vec::new();
            for i in &n.inputs {
                match by_id.get(i.as_str()) {
                    Some(up) => in_types.push(up.output),
                    None => problems.push(format!("{}: unknown input {i}", n.id)),
                }
            }
            let source_modality = n.source.as_ref().and_then(|p| self.registry.get(p)).map(|r| r.modality);
            if let (Some(source), None) = (&n.source, source_modality) {
                problems.push(format!("{}: source {source} is not registered", n.id));
            }
            let tables = in_types.iter().filter(|t| **t == SemanticType::Table).count();
            match n.op {
                OpKind::Select => {
                    let graph_leaf = source_modality == Some(Modality::Graph) && n.inputs.is_empty();
                    let texts = in_types.iter().filter(|t| **t == SemanticType::Text).count();
                    if !graph_leaf && (tables == 0 || tables + texts != in_types.len() || texts > 1) {
                        problems.push(format!("{}: SELECT needs tabular inputs", n.id));
                    }
                }
                OpKind::Project => {
                    if !(n.is_literal_fed() || (tables == in_types.len() && tables >= 1)) {
                        problems.push(format!("{}: PROJECT needs a tabular input", n.id));
                    }
                }
                OpKind::Join => {
                    if tables != 2 || in_types.len() != 2 {
                        problems.push(format!("{}: JOIN needs exactly two tabular inputs", n.id));
                    }
                }
                OpKind::ModelCall => {
                    if source_modality != Some(Modality::Model) {
                        problems.push(format!("{}: MODEL_CALL needs a MODEL source", n.id));
                    }
                }
                OpKind::Q2nl => {
                    let structured = in_types
                        .iter()
                        .filter(|t| matches!(t, SemanticType::Table | SemanticType::Record))
                        .count();
                    if in_types.len() != 1 || structured != 1 || n.output != SemanticType::Text {
                        problems.push(format!("{}: Q2NL takes one structured input and yields text", n.id));
                    }
                }
                OpKind::Discover => {
                    if n.source.is_none() {
                        problems.push(format!("{}: DISCOVER needs a source", n.id));
                    }
                }
                OpKind::Extract | OpKind::Summarize | OpKind::Nl2q => {}
            }
            if n.inputs.is_empty()
                && !(n.op == OpKind::Discover
                    || n.is_literal_fed()
                    || (n.op == OpKind::Select && source_modality == Some(Modality::Graph)))
            {
                problems.push(format!("{}: leaf is neither source-resolved nor input-fed", n.id));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }

    fn table_rows(&self, path: &SourcePath) -> f64 {
        self.store.table(path.leaf()).map(|t| t.len() as f64).unwrap_or(0.0)
    }

    /// Per-operator QoS from catalog hints. Relational operators scale
    /// linearly with the estimated rows they touch, counted in thousands.
    pub fn cost_nodes(&self, plan: &DataPlan) -> Vec<CostNode> {
        let mut rows: BTreeMap<String, f64> = BTreeMap::new();
        let order = plan.topo_order().unwrap_or_default();
        let mut out = Vec::new();
        for id in order {
            let n = plan.node(&id).expect("ordered ids exist");
            let hints = n
                .source
                .as_ref()
                .and_then(|p| self.registry.get(p))
                .map(|r| r.cost_hints);
            let upstream = n.inputs.first().and_then(|i| rows.get(i)).copied().unwrap_or(0.0);
            let (qos, est_rows) = match n.op {
                OpKind::Discover => {
                    let r = n.source.as_ref().map(|p| self.table_rows(p)).unwrap_or(0.0);
                    (Some(QosVector::new(0.0, 1.0, 1.0)), r)
                }
                OpKind::Select | OpKind::Join | OpKind::Project => {
                    let graph = n.inputs.is_empty();
                    let est = if graph {
                        10.0
                    } else {
                        let distinct = n
                            .params
                            .get("where")
                            .and_then(Json::as_array)
                            .map(|w| w.len())
                            .unwrap_or(0)
                            + usize::from(n.params.contains_key("member_of"))
                            + usize::from(n.op == OpKind::Join);
                        upstream / 10f64.powi(distinct as i32)
                    };
                    let qos = match hints {
                        Some(h) if graph => Some(h.qos()),
                        Some(h) => Some(QosVector::new(
                            h.per_call_cost * upstream.max(1.0) / 1000.0,
                            h.latency_ms,
                            h.quality,
                        )),
                        None => Some(QosVector::new(0.0, 1.0, 1.0)),
                    };
                    (qos, est)
                }
                OpKind::ModelCall => (hints.map(|h| h.qos()), 10.0),
                OpKind::Extract | OpKind::Summarize | OpKind::Q2nl | OpKind::Nl2q => {
                    (Some(QosVector::new(0.0, 1.0, 1.0)), upstream)
                }
            };
            rows.insert(id.clone(), est_rows);
            out.push(CostNode {
                id,
                qos,
                deps: n.inputs.clone(),
            });
        }
        out
    }

    pub fn estimate(&self, plan: &DataPlan) -> Result<QosVector, OptimizerError> {
        optimizer::estimate(&self.cost_nodes(plan))
    }

    /// Estimates every candidate and returns the chosen one with its estimate filled in.
    pub fn choose(&self, candidates: Vec<DataPlan>, constraints: &ConstraintSet) -> Result<DataPlan, DataPlanError> {
        let mut estimated = Vec::with_capacity(candidates.len());
        for mut p in candidates {
            p.estimate = Some(self.estimate(&p)?);
            estimated.push(p);
        }
        let cands: Vec<Candidate> = estimated
            .iter()
            .map(|p| Candidate::new(&p.id, p.estimate.expect("filled")))
            .collect();
        let choice = optimizer::choose(&cands, constraints)?;
        Ok(estimated.swap_remove(choice.index))
    }

    /// Evaluates the plan. `input` feeds leaves marked with the plan input.
    /// Returns the sink value and the accrued charge.
    pub fn execute(&self, plan: &DataPlan, input: Option<&Value>) -> Result<(Value, Charge), DataPlanError> {
        if plan.is_identity() {
            return input
                .cloned()
                .map(|v| (v, Charge::default()))
                .ok_or_else(|| DataPlanError::OperatorFailed {
                    node: "identity".into(),
                    reason: "identity plan needs an input value".into(),
                });
        }
        self.check(plan).map_err(DataPlanError::Invalid)?;
        let costs: BTreeMap<String, QosVector> = self
            .cost_nodes(plan)
            .into_iter()
            .filter_map(|c| c.qos.map(|q| (c.id, q)))
            .collect();
        let mut values: BTreeMap<String, Value> = BTreeMap::new();
        let mut charge = Charge::default();
        for id in plan.topo_order().map_err(|e| DataPlanError::Invalid(vec![e]))? {
            let node = plan.node(&id).expect("ordered ids exist");
            let started = Instant::now();
            let inputs: Vec<&Value> = node.inputs.iter().filter_map(|i| values.get(i)).collect();
            let (value, extra) = self.run_operator(node, &inputs, input)?;
            charge.cost += costs.get(&id).map(|q| q.cost).unwrap_or(0.0) + extra.cost;
            charge.latency_ms += started.elapsed().as_secs_f64() * 1000.0 + extra.latency_ms;
            values.insert(id, value);
        }
        let sink = plan.sink.as_ref().expect("checked plans have a sink");
        Ok((values.remove(sink).expect("sink evaluated"), charge))
    }

    fn run_operator(
        &self,
        node: &OperatorNode,
        inputs: &[&Value],
        plan_input: Option<&Value>,
    ) -> Result<(Value, Charge), DataPlanError> {
        let fail = |reason: String| DataPlanError::OperatorFailed {
            node: node.id.clone(),
            reason,
        };
        let fed = if node.is_literal_fed() {
            Some(plan_input.ok_or_else(|| fail("plan input missing".into()))?)
        } else {
            None
        };
        let first = fed.or_else(|| inputs.first().copied());
        let table_in = |i: usize| -> Result<&Table, DataPlanError> {
            let v = if fed.is_some() && i == 0 {
                fed
            } else {
                inputs.get(i).copied()
            };
            v.and_then(Value::as_table)
                .ok_or_else(|| fail(format!("input {i} is not a table")))
        };
        let param_str = |k: &str| node.params.get(k).and_then(Json::as_str);
        let none = Charge::default();
        match node.op {
            OpKind::Discover => {
                let path = node.source.as_ref().ok_or_else(|| fail("no source".into()))?;
                let record = self
                    .registry
                    .get(path)
                    .ok_or_else(|| DataPlanError::SourceUnavailable(path.to_string()))?;
                let table = match record.modality {
                    Modality::Graph => self
                        .store
                        .graph(path)
                        .map(|g| Table::column_of("label", g.labels().iter().cloned())),
                    Modality::Document => self.store.documents(path).map(|docs| documents_table(&docs)),
                    _ => self.store.table(path.leaf()),
                }
                .ok_or_else(|| DataPlanError::SourceUnavailable(path.to_string()))?;
                Ok((Value::Table(table), none))
            }
            OpKind::Select => {
                if let Some(seed) = param_str("expand") {
                    let path = node.source.as_ref().ok_or_else(|| fail("no graph source".into()))?;
                    let graph = self
                        .store
                        .graph(path)
                        .ok_or_else(|| DataPlanError::SourceUnavailable(path.to_string()))?;
                    let hops = node
                        .params
                        .get("max_hops")
                        .and_then(Json::as_u64)
                        .unwrap_or(MAX_EXPANSION_HOPS as u64);
                    let column = param_str("column").unwrap_or("label");
                    return Ok((
                        Value::Table(Table::column_of(column, graph.expand(seed, hops as usize))),
                        none,
                    ));
                }
                if let Some(sql_text) = inputs
                    .iter()
                    .find_map(|v| v.as_text())
                    .map(str::to_string)
                    .or_else(|| param_str("sql").map(str::to_string))
                {
                    let t = sql::run(&sql_text, &self.store).map_err(|e| fail(e.to_string()))?;
                    return Ok((Value::Table(t), none));
                }
                let mut table = table_in(0)?.clone();
                if let Some(Json::Array(wheres)) = node.params.get("where") {
                    for w in wheres {
                        let col = w.get("column").and_then(Json::as_str).unwrap_or_default();
                        let idx = table
                            .column_index(col)
                            .ok_or_else(|| fail(format!("unknown column {col}")))?;
                        let prefix = w
                            .get("prefix")
                            .and_then(Json::as_str)
                            .unwrap_or_default()
                            .to_lowercase();
                        table
                            .rows
                            .retain(|r| json_text(&r[idx]).to_lowercase().starts_with(&prefix));
                    }
                }
                if let Some(spec) = node.params.get("member_of") {
                    let col = spec.get("column").and_then(Json::as_str).unwrap_or_default();
                    let idx = table
                        .column_index(col)
                        .ok_or_else(|| fail(format!("unknown column {col}")))?;
                    let members: BTreeSet<String> = table_in(1)?
                        .rows
                        .iter()
                        .filter_map(|r| r.first())
                        .map(|v| json_text(v).trim().to_lowercase())
                        .collect();
                    table
                        .rows
                        .retain(|r| members.contains(&json_text(&r[idx]).trim().to_lowercase()));
                }
                if let Some(col) = param_str("distinct") {
                    let values = table
                        .column_text(col)
                        .ok_or_else(|| fail(format!("unknown column {col}")))?;
                    let mut seen = BTreeSet::new();
                    let uniq: Vec<String> = values.into_iter().filter(|v| seen.insert(v.clone())).collect();
                    table = Table::column_of(col, uniq);
                }
                Ok((Value::Table(table), none))
            }
            OpKind::Project => {
                let table = table_in(0)?;
                let col = param_str("column").ok_or_else(|| fail("no column".into()))?;
                if let Some(row) = node.params.get("row").and_then(Json::as_u64) {
                    let cell = table
                        .cell(row as usize, col)
                        .ok_or_else(|| fail(format!("no row {row} or column {col}")))?;
                    let v = match node.output {
                        SemanticType::Number => {
                            Value::Number(cell.as_f64().ok_or_else(|| fail(format!("{col} is not numeric")))?)
                        }
                        _ => Value::Text(json_text(cell)),
                    };
                    return Ok((v, none));
                }
                let values = table
                    .column_text(col)
                    .ok_or_else(|| fail(format!("unknown column {col}")))?;
                Ok((Value::Table(Table::column_of(col, values)), none))
            }
            OpKind::Join => {
                let (left, right) = (table_in(0)?, table_in(1)?);
                let lk = param_str("left_key").unwrap_or_default();
                let rk = param_str("right_key").unwrap_or(lk);
                Ok((Value::Table(hash_join(left, right, lk, rk).map_err(fail)?), none))
            }
            OpKind::Extract => {
                let text = first
                    .and_then(Value::as_text)
                    .ok_or_else(|| fail("EXTRACT needs text".into()))?;
                match param_str("rule") {
                    Some("strip_intent_prefix") => Ok((
                        Value::text(strip_intent_prefix(text).ok_or_else(|| fail("no leading intent phrase".into()))?),
                        none,
                    )),
                    Some("first_number") => {
                        let n = text
                            .split(|c: char| !(c.is_ascii_digit() || c == '.'))
                            .find_map(|t| t.parse::<f64>().ok())
                            .ok_or_else(|| fail("no number in text".into()))?;
                        Ok((Value::Number(n), none))
                    }
                    other => Err(fail(format!("unknown extraction rule {other:?}"))),
                }
            }
            OpKind::Summarize => {
                let v = first.ok_or_else(|| fail("nothing to summarize".into()))?;
                let text = match v {
                    Value::Table(t) if t.is_empty() => "No results.".to_string(),
                    Value::Table(t) => format!("{} rows with columns {}.", t.len(), t.columns.join(", ")),
                    Value::Record(r) => r
                        .iter()
                        .map(|(k, v)| format!("{k}: {}", json_text(v)))
                        .collect::<Vec<_>>()
                        .join("; "),
                    other => json_text(&other.to_json()),
                };
                Ok((Value::text(text), none))
            }
            OpKind::Q2nl => {
                let field = param_str("field").unwrap_or("value");
                let phrase = param_str("phrase").unwrap_or_default();
                Ok((Value::text(q2nl(&Phrase::new(field, phrase))), none))
            }
            OpKind::Nl2q => Ok((
                Value::text(param_str("sql").ok_or_else(|| fail("no query".into()))?),
                none,
            )),
            OpKind::ModelCall => {
                let prompt_input = first.map(|v| match v {
                    Value::Text(s) => s.clone(),
                    other => json_text(&other.to_json()),
                });
                let template = param_str("prompt_template").unwrap_or("{input}");
                let prompt = template.replace("{input}", prompt_input.as_deref().unwrap_or_default());
                let completion = self
                    .model
                    .complete(&prompt, node.params.get("model_config").unwrap_or(&Json::Null))
                    .map_err(|e| DataPlanError::SourceUnavailable(e.to_string()))?;
                let extra = Charge {
                    cost: completion.cost,
                    latency_ms: completion.latency_ms,
                };
                let value = match node.output {
                    SemanticType::Table => Value::Table(Table::column_of(
                        param_str("column").unwrap_or("value"),
                        parse_list(&completion.text),
                    )),
                    _ => Value::text(completion.text.trim()),
                };
                Ok((value, extra))
            }
        }
    }
}

fn documents_table(docs: &[Json]) -> Table {
    let mut columns: Vec<String> = Vec::new();
    for d in docs {
        if let Json::Object(m) = d {
            for k in m.keys() {
                if !columns.contains(k) {
                    columns.push(k.clone());
                }
            }
        }
    }
    let rows = docs
        .iter()
        .map(|d| {
            columns
                .iter()
                .map(|c| d.get(c).cloned().unwrap_or(Json::Null))
                .collect()
        })
        .collect();
    Table::with_rows(columns, rows)
}

/// Equality hash join with case-insensitive keys. Output keeps every left
/// column and the right columns not already present on the left.
pub fn hash_join(left: &Table, right: &Table, left_key: &str, right_key: &str) -> Result<Table, String> {
    let li = left
        .column_index(left_key)
        .ok_or_else(|| format!("left side has no column {left_key}"))?;
    let ri = right
        .column_index(right_key)
        .ok_or_else(|| format!("right side has no column {right_key}"))?;
    let extra: Vec<usize> = (0..right.columns.len())
        .filter(|&i| left.column_index(&right.columns[i]).is_none())
        .collect();
    let mut buckets: BTreeMap<String, Vec<&Vec<Json>>> = BTreeMap::new();
    for r in &right.rows {
        buckets
            .entry(json_text(&r[ri]).trim().to_lowercase())
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for l in &left.rows {
        if let Some(ms) = buckets.get(&json_text(&l[li]).trim().to_lowercase()) {
            for r in ms {
                let mut row = l.clone();
                row.extend(extra.iter().map(|&i| r[i].clone()));
                rows.push(row);
            }
        }
    }
    let mut columns = left.columns.clone();
    columns.extend(extra.iter().map(|&i| right.columns[i].clone()));
    Ok(Table::with_rows(columns, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Matcher, MockLlm, NoModel, ScriptEntry};
    use crate::registry::{Connection, CostHints};

    fn fixture(model: Arc<dyn ModelBackend>) -> DataPlanner {
        let reg = DataRegistry::new();
        reg.register_source(DataSourceRecord::new("/hr", Modality::Relational, "hr"))
            .unwrap();
        reg.register_source(DataSourceRecord::new("/hr/HR", Modality::Relational, "hr db"))
            .unwrap();
        let mut jobs = DataSourceRecord::new("/hr/HR/Jobs", Modality::Relational, "job postings");
        for c in ["id", "title", "company", "city"] {
            jobs.schema.insert(c.into(), "TEXT".into());
        }
        jobs.cost_hints = CostHints {
            per_call_cost: 0.01,
            latency_ms: 5.0,
            quality: 1.0,
        };
        reg.register_source(jobs).unwrap();
        reg.register_source(DataSourceRecord::new("/kg", Modality::Graph, "graphs"))
            .unwrap();
        reg.register_source(DataSourceRecord::new("/kg/Taxonomy", Modality::Graph, "taxonomies"))
            .unwrap();
        let mut tax = DataSourceRecord::new("/kg/Taxonomy/Titles", Modality::Graph, "title taxonomy");
        tax.cost_hints = CostHints {
            per_call_cost: 0.01,
            latency_ms: 20.0,
            quality: 0.95,
        };
        reg.register_source(tax).unwrap();
        reg.register_source(DataSourceRecord::new("/models", Modality::Model, "models").with_capability("text"))
            .unwrap();
        reg.register_source(DataSourceRecord::new("/models/LLM", Modality::Model, "llms").with_capability("text"))
            .unwrap();
        let mut gpt =
            DataSourceRecord::new("/models/LLM/GPT", Modality::Model, "language model").with_capability("lists");
        gpt.connection = Connection {
            driver: "mock".into(),
            locator: "mock".into(),
            ..Default::default()
        };
        gpt.cost_hints = CostHints {
            per_call_cost: 0.5,
            latency_ms: 800.0,
            quality: 0.8,
        };
        reg.register_source(gpt).unwrap();
        let store = DataStore::new();
        store.put_table(
            "Jobs",
            Table::with_rows(
                vec!["id".into(), "title".into(), "company".into(), "city".into()],
                vec![
                    vec![
                        json!(1),
                        json!("Senior Data Scientist"),
                        json!("Acme"),
                        json!("San Jose"),
                    ],
                    vec![json!(2), json!("Data Analyst"), json!("Acme"), json!("Fresno")],
                    vec![json!(3), json!("Nurse"), json!("Globex"), json!("Oakland")],
                    vec![
                        json!(4),
                        json!("Machine Learning Engineer"),
                        json!("Globex"),
                        json!("Oakland"),
                    ],
                ],
            ),
        );
        store.put_graph(
            &SourcePath::parse("/kg/Taxonomy/Titles").unwrap(),
            Graph::from_edges([
                ("data scientist", "Senior Data Scientist"),
                ("data scientist", "Machine Learning Engineer"),
                ("Machine Learning Engineer", "ML Platform Engineer"),
                ("ML Platform Engineer", "Nurse"),
            ]),
        );
        DataPlanner::new(Arc::new(reg), Arc::new(store), model)
    }

    fn mock() -> Arc<dyn ModelBackend> {
        Arc::new(
            MockLlm::new(vec![
                ScriptEntry {
                    matcher: Matcher::Contains("cities in the sf bay area".into()),
                    response: "San Jose\nOakland".into(),
                    cost: 0.02,
                    latency_ms: 400.0,
                },
                ScriptEntry {
                    matcher: Matcher::Fallback,
                    response: "".into(),
                    cost: 0.0,
                    latency_ms: 0.0,
                },
            ])
            .unwrap(),
        )
    }

    #[test]
    fn identity_and_extract_transforms() {
        let dp = fixture(mock());
        let spec = ParamSpec::new("Criteria", SemanticType::Text);
        let plain = dp.plan_transform(&Value::text("x"), &spec, false).unwrap();
        assert!(plain.is_identity());
        assert_eq!(dp.execute(&plain, Some(&Value::text("x"))).unwrap().0, Value::text("x"));
        let utterance = Value::text("I am looking for a data scientist position in SF bay area.");
        let p = dp.plan_transform(&utterance, &spec, true).unwrap();
        assert_eq!(p.nodes[0].op, OpKind::Extract);
        assert_eq!(
            dp.execute(&p, Some(&utterance)).unwrap().0,
            Value::text("data scientist position in SF bay area.")
        );
    }

    #[test]
    fn infeasible_transform() {
        let dp = fixture(mock());
        let spec = ParamSpec::new("Graph", SemanticType::Form);
        assert!(matches!(
            dp.plan_transform(&Value::Record(BTreeMap::new()), &spec, false),
            Err(DataPlanError::NoFeasiblePlan(_))
        ));
    }

    #[test]
    fn table_to_number_projects_first_id() {
        let dp = fixture(mock());
        let t = Value::Table(Table::with_rows(
            vec!["id".into()],
            vec![vec![json!(4)], vec![json!(1)]],
        ));
        let p = dp
            .plan_transform(&t, &ParamSpec::new("Job Id", SemanticType::Number), false)
            .unwrap();
        assert_eq!(dp.execute(&p, Some(&t)).unwrap().0, Value::Number(4.0));
    }

    #[test]
    fn direct_plan_when_all_phrases_ground() {
        let dp = fixture(mock());
        let plans = dp.plan_query("jobs at Globex").unwrap();
        assert_eq!(plans.len(), 1);
        assert!(plans[0].is_relational_only());
        assert!(dp.check(&plans[0]).is_ok());
        let (v, _) = dp.execute(&plans[0], None).unwrap();
        assert_eq!(v.as_table().unwrap().column_text("id").unwrap(), vec!["3", "4"]);
    }

    #[test]
    fn decomposed_plan_substitutes_failing_phrases() {
        let dp = fixture(mock());
        let plans = dp.plan_query("data scientist position in sf bay area").unwrap();
        assert_eq!(plans.len(), 2);
        for p in &plans {
            assert!(dp.check(p).is_ok(), "{:?}", dp.check(p));
            let phrases: Vec<&str> = p.substitutions.iter().map(|s| s.phrase.as_str()).collect();
            assert_eq!(phrases.len(), 2);
            assert!(phrases.contains(&"data scientist") && phrases.contains(&"sf bay area"));
        }
        let chosen = dp.choose(plans, &ConstraintSet::default()).unwrap();
        assert!(chosen.substitutions.iter().any(|s| s.via == OpKind::Select));
        let (v, charge) = dp.execute(&chosen, None).unwrap();
        let ids = v.as_table().unwrap().column_text("id").unwrap();
        // Within two hops of "data scientist" and in a scripted city.
        assert_eq!(ids, vec!["1", "4"]);
        assert!(charge.cost > 0.5);
    }

    #[test]
    fn model_down_is_source_unavailable() {
        let dp = fixture(Arc::new(NoModel));
        let p = dp.plan_lookup("city", "SF bay area").unwrap();
        assert!(matches!(dp.execute(&p, None), Err(DataPlanError::SourceUnavailable(_))));
    }

    #[test]
    fn lookup_grounded_phrase_scans() {
        let dp = fixture(mock());
        let p = dp.plan_lookup("city", "oak").unwrap();
        let (v, _) = dp.execute(&p, None).unwrap();
        assert_eq!(v.as_table().unwrap().column_text("city").unwrap(), vec!["Oakland"]);
    }

    #[test]
    fn empty_catalog_infeasible() {
        let dp = DataPlanner::new(Arc::new(DataRegistry::new()), Arc::new(DataStore::new()), mock());
        assert!(matches!(dp.plan_query("jobs"), Err(DataPlanError::NoFeasiblePlan(_))));
    }

    #[test]
    fn list_parsing() {
        assert_eq!(
            parse_list("1. San Jose\n- Oakland\nsan jose, Palo Alto."),
            vec!["San Jose", "Oakland", "Palo Alto"]
        );
    }
}
