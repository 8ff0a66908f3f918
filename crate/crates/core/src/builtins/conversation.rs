//! Conversation front end: intent classification, the employer router,
//! smalltalk replies and the shortlist editor.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, LazyLock};

use parking_lot::Mutex;
use regex::Regex;
use serde_json::{json, Value as Json};

use super::{text_input, BuiltinServices};
use crate::planner::Intent;
use crate::runtime::{InputTuple, Output, Processor, ProcessorContext, ProcessorError};
use crate::stream::SessionId;
use crate::value::Value;

static LIST_EDIT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\bshortlist\b|\b(add|remove|drop)\b.*\b(to|from|on|off)\b.*\blist\b").expect("valid regex")
});
static JOB_SEARCH: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\blooking for\b|\bposition\b|\bfind (me )?(a )?jobs?\b").expect("valid regex"));
static QUESTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^\s*(how|what|which|who|when|where|why|is|are|do|does|can)\b|\?\s*$").expect("valid regex")
});
static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\d+").expect("valid regex"));

/// Rule-based intent label; checked in a fixed order so that e.g.
/// "summarize applicants for job 3?" is SUMMARIZE, not OPEN_QUERY.
pub fn classify_intent(text: &str) -> Intent {
    let lower = text.to_lowercase();
    if lower.contains("summar") {
        Intent::Summarize
    } else if LIST_EDIT.is_match(text) {
        Intent::ListEdit
    } else if JOB_SEARCH.is_match(text) {
        Intent::JobSearch
    } else if QUESTION.is_match(text) {
        Intent::OpenQuery
    } else {
        Intent::Smalltalk
    }
}

fn first_number(text: &str) -> Option<u64> {
    NUMBER.find(text).and_then(|m| m.as_str().parse().ok())
}

pub(super) struct IntentClassifier;

impl Processor for IntentClassifier {
    fn process(&self, inputs: &InputTuple, _ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let text = text_input(inputs, "Text").ok_or_else(|| ProcessorError::new("Text input missing"))?;
        let intent = classify_intent(text);
        let record = BTreeMap::from([
            ("intent".to_string(), json!(intent.as_str())),
            ("text".to_string(), json!(text)),
        ]);
        Ok(vec![Output::new("Intent", Value::Record(record))])
    }
}

/// Routes intents: open questions go to the query chain as an NLQ-tagged
/// question, every other intent becomes a proposed task plan. A
/// `select_job` UI event requests an applicant summary for that job.
pub(super) struct AgenticEmployer {
    services: Arc<BuiltinServices>,
}

impl AgenticEmployer {
    pub(super) fn new(services: Arc<BuiltinServices>) -> Self {
        Self { services }
    }

    fn propose(
        &self,
        session: &SessionId,
        utterance: &str,
        intent: Intent,
        context: BTreeMap<String, Json>,
    ) -> Result<Vec<Output>, ProcessorError> {
        let plan = self
            .services
            .planner
            .plan(utterance, intent, context)
            .map_err(|e| ProcessorError::new(e.to_string()))?;
        self.services
            .coordinator
            .propose(session, plan)
            .map_err(|e| ProcessorError::new(e.to_string()))?;
        Ok(Vec::new())
    }
}

impl Processor for AgenticEmployer {
    fn process(&self, inputs: &InputTuple, ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        if let Some(Value::Event(event)) = inputs.get("Event") {
            if event.action != "select_job" {
                return Ok(Vec::new());
            }
            let job = event
                .data
                .get("job_id")
                .map(crate::value::json_text)
                .and_then(|t| first_number(&t))
                .ok_or_else(|| ProcessorError::new("select_job event without a job_id"))?;
            let utterance = format!("Summarize applicants for job {job}");
            let context = BTreeMap::from([("job_id".to_string(), json!(job))]);
            return self.propose(&ctx.session, &utterance, Intent::Summarize, context);
        }
        let Some(record) = inputs.get("Intent").and_then(Value::as_record) else {
            return Ok(Vec::new());
        };
        let text = record.get("text").and_then(Json::as_str).unwrap_or_default();
        let intent = record
            .get("intent")
            .and_then(Json::as_str)
            .and_then(Intent::parse)
            .unwrap_or_else(|| classify_intent(text));
        match intent {
            Intent::OpenQuery => Ok(vec![Output::new("Query", Value::text(text))]),
            Intent::Summarize => {
                let job = first_number(text).ok_or_else(|| ProcessorError::new("summary request names no job id"))?;
                let context = BTreeMap::from([("job_id".to_string(), json!(job))]);
                self.propose(&ctx.session, text, intent, context)
            }
            other => self.propose(&ctx.session, text, other, BTreeMap::new()),
        }
    }
}

pub(super) struct Responder;

impl Processor for Responder {
    fn process(&self, inputs: &InputTuple, _ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let text = text_input(inputs, "Message").unwrap_or_default().to_lowercase();
        let reply = if text.contains("thank") {
            "You're welcome."
        } else if text.contains("bye") {
            "Goodbye."
        } else {
            "Hello! Ask me to find jobs or to summarize applicants for a job."
        };
        Ok(vec![Output::new("Reply", Value::text(reply))])
    }
}

/// Per-session shortlist of applicant or job ids.
#[derive(Default)]
pub struct ListEditor {
    lists: Mutex<BTreeMap<SessionId, BTreeSet<String>>>,
}

impl ListEditor {
    pub fn list(&self, session: &SessionId) -> Vec<String> {
        self.lists
            .lock()
            .get(session)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default()
    }
}

impl Processor for ListEditor {
    fn process(&self, inputs: &InputTuple, ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let text = text_input(inputs, "Command").unwrap_or_default();
        let lower = text.to_lowercase();
        let remove = lower.contains("remove") || lower.contains("drop");
        let items: Vec<String> = NUMBER.find_iter(text).map(|m| m.as_str().to_string()).collect();
        if items.is_empty() {
            return Err(ProcessorError::new("list command names no id"));
        }
        let mut lists = self.lists.lock();
        let list = lists.entry(ctx.session.clone()).or_default();
        for item in &items {
            if remove {
                list.remove(item);
            } else {
                list.insert(item.clone());
            }
        }
        let record = BTreeMap::from([
            ("action".to_string(), json!(if remove { "remove" } else { "add" })),
            ("changed".to_string(), json!(items)),
            ("items".to_string(), json!(list.iter().collect::<Vec<_>>())),
        ]);
        Ok(vec![Output::new("List", Value::Record(record))])
    }
}
