use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::optimizer::QosVector;
use crate::stream::{is_valid_tag, TagFilter, TagPattern};
use crate::value::{SemanticType, Value};

fn default_true() -> bool {
    true
}

fn default_pool() -> usize {
    1
}

/// An input or output parameter of an agent.
///
/// For inputs, `tags` are patterns routing a matching message into this
/// parameter's place. For outputs, `tags` become the stream-wide tags of the
/// stream the value is emitted on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub semantic_type: SemanticType,
    #[serde(default)]
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
    #[serde(default = "default_true")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tags: Vec<String>,
}

impl ParamSpec {
    pub fn new(name: &str, semantic_type: SemanticType) -> Self {
        Self {
            name: name.to_string(),
            semantic_type,
            description: String::new(),
            default: None,
            required: true,
            tags: Vec::new(),
        }
    }

    pub fn described(mut self, description: &str) -> Self {
        self.description = description.to_string();
        self
    }

    pub fn optional(mut self, default: Option<Value>) -> Self {
        self.required = false;
        self.default = default;
        self
    }

    pub fn tagged<I, S>(mut self, tags: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags = tags.into_iter().map(Into::into).collect();
        self
    }
}

/// When a transition of the agent's PetriNet is enabled.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TriggerPolicy {
    /// Every required place holds at least one token.
    #[default]
    AllPlaces,
    /// Every required place holds a token with the same value of `key`.
    Paired { key: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub inputs: Vec<ParamSpec>,
    pub outputs: Vec<ParamSpec>,
    /// `None` means the agent only runs when a coordinator dispatches it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub listen_rules: Option<TagFilter>,
    #[serde(default)]
    pub trigger_policy: TriggerPolicy,
    #[serde(default = "default_pool")]
    pub worker_pool_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_hints: Option<QosVector>,
    /// Stored and validated; agents run in-process.
    #[serde(default)]
    pub deployment: BTreeMap<String, Json>,
}

impl AgentDescriptor {
    pub fn new(name: &str, description: &str) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            listen_rules: None,
            trigger_policy: TriggerPolicy::AllPlaces,
            worker_pool_size: 1,
            timeout_ms: None,
            cost_hints: None,
            deployment: BTreeMap::new(),
        }
    }

    pub fn input(&self, name: &str) -> Option<&ParamSpec> {
        self.inputs.iter().find(|p| p.name == name)
    }

    pub fn output(&self, name: &str) -> Option<&ParamSpec> {
        self.outputs.iter().find(|p| p.name == name)
    }

    /// `deployment.image`, e.g. `builtin:job_matcher`.
    pub fn image(&self) -> Option<&str> {
        self.deployment.get("image").and_then(Json::as_str)
    }

    /// Structural validation. Returns every problem found.
    pub fn validate(&self) -> Result<(), Vec<String>> {
        let mut problems = Vec::new();
        if self.name.trim().is_empty() {
            problems.push("name must be nonempty".to_string());
        }
        if self.outputs.is_empty() {
            problems.push("at least one output is required".to_string());
        }
        if self.worker_pool_size == 0 {
            problems.push("worker_pool_size must be at least 1".to_string());
        }
        if self.timeout_ms == Some(0) {
            problems.push("timeout_ms must be positive".to_string());
        }
        let mut seen = BTreeSet::new();
        for p in self.inputs.iter().chain(self.outputs.iter()) {
            if p.name.trim().is_empty() {
                problems.push("parameter names must be nonempty".to_string());
            }
            if !seen.insert(p.name.to_lowercase()) {
                problems.push(format!("duplicate parameter name {:?}", p.name));
            }
            if let Some(d) = &p.default {
                if !d.conforms_to(p.semantic_type) {
                    problems.push(format!(
                        "default of {:?} does not match type {}",
                        p.name, p.semantic_type
                    ));
                }
            }
        }
        for p in &self.inputs {
            for t in &p.tags {
                if TagPattern::parse(t).is_err() {
                    problems.push(format!("input {:?} has invalid tag pattern {t:?}", p.name));
                }
            }
        }
        for p in &self.outputs {
            for t in &p.tags {
                if !is_valid_tag(t) {
                    problems.push(format!("output {:?} has invalid tag {t:?}", p.name));
                }
            }
        }
        if let TriggerPolicy::Paired { key } = &self.trigger_policy {
            if key.trim().is_empty() {
                problems.push("paired trigger needs a pairing key".to_string());
            }
            if self.inputs.is_empty() {
                problems.push("paired trigger needs at least one input".to_string());
            }
        }
        if let Some(rules) = &self.listen_rules {
            if rules.session_scope.is_some() {
                problems.push("listen_rules must not pin a session".to_string());
            }
        }
        match self.deployment.get("image") {
            Some(Json::String(s)) if !s.trim().is_empty() => {}
            Some(_) => problems.push("deployment.image must be a nonempty string".to_string()),
            None => problems.push("deployment.image is required".to_string()),
        }
        if let Some(c) = &self.cost_hints {
            if let Err(e) = c.validate() {
                problems.push(format!("cost_hints: {e}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(problems)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn matcher() -> AgentDescriptor {
        let mut d = AgentDescriptor::new("Job Matcher", "match profiles to jobs");
        d.inputs = vec![
            ParamSpec::new("Job Seeker Data", SemanticType::Record),
            ParamSpec::new("Jobs", SemanticType::Table),
            ParamSpec::new("Criteria", SemanticType::Text).optional(None),
        ];
        d.outputs = vec![ParamSpec::new("Matches", SemanticType::Table)];
        d.deployment.insert("image".into(), json!("builtin:job_matcher"));
        d
    }

    #[test]
    fn valid_descriptor_passes() {
        assert!(matcher().validate().is_ok());
    }

    #[test]
    fn zero_pool_and_missing_output_rejected() {
        let mut d = matcher();
        d.worker_pool_size = 0;
        d.outputs.clear();
        let errs = d.validate().unwrap_err();
        assert_eq!(errs.len(), 2, "{errs:?}");
    }

    #[test]
    fn default_must_type_check() {
        let mut d = matcher();
        d.inputs[2].default = Some(Value::Number(1.0));
        assert!(d.validate().is_err());
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut d = matcher();
        d.outputs.push(ParamSpec::new("jobs", SemanticType::Table));
        assert!(d.validate().is_err());
    }

    #[test]
    fn serde_shape() {
        let d: AgentDescriptor = serde_json::from_value(json!({
            "name": "SQLExecutor",
            "outputs": [{"name": "Result", "type": "TABLE", "tags": ["QRESULT"]}],
            "inputs": [{"name": "Query", "type": "TEXT"}],
            "listen_rules": {"include": ["SQL"]},
            "trigger_policy": {"mode": "PAIRED", "key": "id"},
            "deployment": {"image": "builtin:query_execute"}
        }))
        .unwrap();
        assert_eq!(d.worker_pool_size, 1);
        assert!(d.inputs[0].required);
        assert_eq!(d.trigger_policy, TriggerPolicy::Paired { key: "id".into() });
        assert!(d.validate().is_ok());
    }
}
