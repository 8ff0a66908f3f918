//! Scripted sessions: a session config plus a list of user steps, each
//! followed by waiting for the kernel to go idle.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

use crate::kernel::{Kernel, KernelError, SUBMIT_ACTION};
use crate::planner::PlanState;
use crate::session::{SessionConfig, DEFAULT_DRAIN};
use crate::stream::{MessageKind, SessionId, TranscriptRecord};
use crate::value::{EventRecord, Value};

/// Longest wait for the kernel to go idle after a step.
pub const STEP_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    /// A chat message from the user.
    Utterance(String),
    /// A UI event such as `select_job`.
    Event(EventRecord),
    /// Submits the most recent form with these field values.
    Submit(BTreeMap<String, Json>),
    /// Approves the most recent proposed plan.
    Approve,
    /// Rejects the most recent proposed plan.
    Reject,
    /// Replaces the agent of a node of the most recent proposed plan.
    Revise { node: String, agent: String },
    /// Answers the pending budget confirmation.
    Confirm { approve: bool },
    /// Messages since the previous expectation carry these tags in this
    /// order, each tag on a later message than the one before.
    Expect(Vec<String>),
    /// No message since the previous expectation carries any of these tags.
    Absent(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub session: SessionConfig,
    /// Query Summarizer phrases answers with the model backend.
    #[serde(default)]
    pub summarize_with_model: bool,
    pub steps: Vec<Step>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {reason}")]
    Load { path: String, reason: String },
    #[error("step {step}: {reason}")]
    Step { step: usize, reason: String },
    /// An `expect` or `absent` step did not hold.
    #[error("step {step}: expectation failed: {reason}")]
    Mismatch { step: usize, reason: String },
    #[error("step {0}: kernel did not go idle within the step timeout")]
    Timeout(usize),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub struct ScenarioRun {
    pub session: SessionId,
    pub transcript: Vec<TranscriptRecord>,
    pub elapsed: Duration,
}

impl Scenario {
    /// Reads a YAML or JSON scenario file.
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let err = |reason: String| ScenarioError::Load {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let is_json = path.extension().and_then(|e| e.to_str()) == Some("json");
        let raw: Json = if is_json {
            serde_json::from_str(&text).map_err(|e| err(e.to_string()))?
        } else {
            serde_yaml::from_str(&text).map_err(|e| err(e.to_string()))?
        };
        serde_json::from_value(raw).map_err(|e| err(e.to_string()))
    }
}

fn latest_proposed(k: &Kernel, session: &SessionId) -> Option<String> {
    let t = k.substrate.transcript(session).ok()?;
    t.iter().rev().find_map(|r| match (&r.kind, &r.payload) {
        (MessageKind::Data, Value::Plan(p))
            if k.coordinator
                .plan(&p.id)
                .is_some_and(|rec| rec.plan.state == PlanState::Proposed) =>
        {
            Some(p.id.clone())
        }
        _ => None,
    })
}

fn latest_form(k: &Kernel, session: &SessionId) -> Option<String> {
    let t = k.substrate.transcript(session).ok()?;
    t.iter().rev().find_map(|r| match &r.payload {
        Value::Form(f) if r.kind == MessageKind::Data => Some(f.form_id.clone()),
        _ => None,
    })
}

fn is_content(r: &TranscriptRecord) -> bool {
    matches!(r.kind, MessageKind::Data | MessageKind::Control)
}

/// Index just past the ordered match of `wanted` in `records[from..]`,
/// or the first tag that could not be matched.
fn match_tags(records: &[TranscriptRecord], from: usize, wanted: &[String]) -> Result<usize, String> {
    let mut at = from;
    for tag in wanted {
        let found = records[at..]
            .iter()
            .position(|r| is_content(r) && r.tags.contains(tag))
            .ok_or_else(|| format!("no {tag} message after position {at}"))?;
        at += found + 1;
    }
    Ok(at)
}

fn awaiting_confirm(k: &Kernel, session: &SessionId) -> Option<String> {
    let mut plans = k.coordinator.plans(session);
    plans.retain(|r| r.awaiting_confirm);
    plans.pop().map(|r| r.plan.id)
}

/// Runs `scenario` in a new session of `k`, closes the session and
/// returns its transcript.
pub fn run(k: &Kernel, scenario: &Scenario) -> Result<ScenarioRun, ScenarioError> {
    let started = Instant::now();
    let session = k.create_session(scenario.session.clone())?;
    let mut cursor = 0;
    for (i, step) in scenario.steps.iter().enumerate() {
        let n = i + 1;
        let fail = |reason: String| ScenarioError::Step { step: n, reason };
        match step {
            Step::Utterance(text) => {
                k.post_utterance(&session, text)?;
            }
            Step::Event(e) => {
                k.post_event(&session, e.clone())?;
            }
            Step::Submit(data) => {
                let form = latest_form(k, &session).ok_or_else(|| fail("no form to submit".into()))?;
                k.post_event(
                    &session,
                    EventRecord {
                        action: SUBMIT_ACTION.into(),
                        form_id: Some(form),
                        data: data.clone(),
                    },
                )?;
            }
            Step::Approve | Step::Reject | Step::Revise { .. } => {
                let plan = latest_proposed(k, &session).ok_or_else(|| fail("no proposed plan".into()))?;
                let (instruction, extra) = match step {
                    Step::Approve => ("APPROVE", BTreeMap::new()),
                    Step::Reject => ("REJECT", BTreeMap::new()),
                    Step::Revise { node, agent } => (
                        "REVISE",
                        BTreeMap::from([("node".to_string(), json!(node)), ("agent".to_string(), json!(agent))]),
                    ),
                    _ => unreachable!("matched above"),
                };
                k.coordinator
                    .decide(&session, &plan, instruction, extra)
                    .map_err(|e| fail(e.to_string()))?;
            }
            Step::Confirm { approve } => {
                let plan =
                    awaiting_confirm(k, &session).ok_or_else(|| fail("no pending budget confirmation".into()))?;
                k.coordinator
                    .confirm(&session, &plan, *approve)
                    .map_err(|e| fail(e.to_string()))?;
            }
            Step::Expect(wanted) => {
                let t = k.substrate.transcript(&session).map_err(KernelError::from)?;
                cursor =
                    match_tags(&t, cursor, wanted).map_err(|reason| ScenarioError::Mismatch { step: n, reason })?;
                continue;
            }
            Step::Absent(banned) => {
                let t = k.substrate.transcript(&session).map_err(KernelError::from)?;
                if let Some(r) = t[cursor..]
                    .iter()
                    .find(|r| is_content(r) && banned.iter().any(|b| r.tags.contains(b)))
                {
                    return Err(ScenarioError::Mismatch {
                        step: n,
                        reason: format!("unexpected {:?} message on {} seq {}", r.tags, r.stream, r.seq),
                    });
                }
                continue;
            }
        }
        if !k.settle(STEP_TIMEOUT) {
            return Err(ScenarioError::Timeout(n));
        }
    }
    k.close_session(&session, DEFAULT_DRAIN)?;
    let transcript = k.substrate.transcript(&session).map_err(KernelError::from)?;
    Ok(ScenarioRun {
        session,
        transcript,
        elapsed: started.elapsed(),
    })
}
