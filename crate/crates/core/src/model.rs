//! Model backends. Every LLM touchpoint goes through [`ModelBackend`].

use std::path::Path;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model backend unavailable: {0}")]
    Unavailable(String),
    #[error("invalid model script: {0}")]
    InvalidScript(String),
    #[error("malformed model response: {0}")]
    Malformed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Currency units charged by the backend for this call.
    pub cost: f64,
    /// Latency the backend reports for this call.
    pub latency_ms: f64,
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, prompt: &str, config: &Json) -> Result<Completion, ModelError>;

    /// `MOCK` or `HTTP`, echoed by connection resolution.
    fn kind(&self) -> &'static str;
}

/// How a script entry selects prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// Case-insensitive substring.
    Contains(String),
    /// Regular expression, matched case-insensitively.
    Pattern(String),
    /// Matches every prompt.
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub response: String,
    #[serde(default)]
    pub cost: f64,
    #[serde(default)]
    pub latency_ms: f64,
}

/// Scripted stand-in for a language model. The first matching entry wins.
#[derive(Clone, Debug)]
pub struct MockLlm {
    entries: Vec<(ScriptEntry, Option<Regex>)>,
}

impl MockLlm {
    pub fn new(entries: Vec<ScriptEntry>) -> Result<Self, ModelError> {
        if !entries.iter().any(|e| e.matcher == Matcher::Fallback) {
            return Err(ModelError::InvalidScript("a fallback entry is required".into()));
        }
        let mut compiled = Vec::with_capacity(entries.len());
        for e in entries {
            let re = match &e.matcher {
                Matcher::Pattern(p) => {
                    Some(Regex::new(&format!("(?i){p}")).map_err(|err| ModelError::InvalidScript(err.to_string()))?)
                }
                _ => None,
            };
            compiled.push((e, re));
        }
        Ok(Self { entries: compiled })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| ModelError::InvalidScript(format!("{}: {e}", path.display())))?;
        let entries: Vec<ScriptEntry> =
            serde_json::from_str(&text).map_err(|e| ModelError::InvalidScript(format!("{}: {e}", path.display())))?;
        Self::new(entries)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ScriptEntry> {
        self.entries.iter().map(|(e, _)| e)
    }
}

impl ModelBackend for MockLlm {
    fn complete(&self, prompt: &str, _config: &Json) -> Result<Completion, ModelError> {
        let lower = prompt.to_lowercase();
        let (entry, _) = self
            .entries
            .iter()
            .find(|(e, re)| match &e.matcher {
                Matcher::Contains(s) => lower.contains(&s.to_lowercase()),
                Matcher::Pattern(_) => re.as_ref().is_some_and(|r| r.is_match(prompt)),
                Matcher::Fallback => true,
            })
            .expect("fallback entry present");
        Ok(Completion {
            text: entry.response.clone(),
            cost: entry.cost,
            latency_ms: entry.latency_ms,
        })
    }

    fn kind(&self) -> &'static str {
        "MOCK"
    }
}

/// Client for a completion service: `POST {url}` with body
/// `{"prompt": <text>, "config": <object>}`, answered by `{"text": <text>}`
/// plus optional numeric `cost` and `latency_ms`.
#[derive(Clone, Debug)]
pub struct HttpModel {
    url: String,
    client: reqwest::blocking::Client,
}

impl HttpModel {
    pub fn new(url: &str, timeout: Duration) -> Result<Self, ModelError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ModelError::Unavailable(e.to_string()))?;
        Ok(Self {
            url: url.to_string(),
            client,
        })
    }
}

impl ModelBackend for HttpModel {
    fn complete(&self, prompt: &str, config: &Json) -> Result<Completion, ModelError> {
        let started = std::time::Instant::now();
        let resp = self
            .client
            .post(&self.url)
            .json(&json!({"prompt": prompt, "config": config}))
            .send()
            .map_err(|e| ModelError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(ModelError::Unavailable(format!("status {}", resp.status())));
        }
        let body: Json = resp.json().map_err(|e| ModelError::Malformed(e.to_string()))?;
        let text = body
            .get("text")
            .and_then(Json::as_str)
            .ok_or_else(|| ModelError::Malformed("missing \"text\"".into()))?;
        Ok(Completion {
            text: text.to_string(),
            cost: body.get("cost").and_then(Json::as_f64).unwrap_or(0.0),
            latency_ms: body
                .get("latency_ms")
                .and_then(Json::as_f64)
                .unwrap_or_else(|| started.elapsed().as_secs_f64() * 1000.0),
        })
    }

    fn kind(&self) -> &'static str {
        "HTTP"
    }
}

/// Backend that always fails; stands in when no model is configured.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoModel;

impl ModelBackend for NoModel {
    fn complete(&self, _prompt: &str, _config: &Json) -> Result<Completion, ModelError> {
        Err(ModelError::Unavailable("no model backend configured".into()))
    }

    fn kind(&self) -> &'static str {
        "NONE"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script() -> MockLlm {
        MockLlm::new(vec![
            ScriptEntry {
                matcher: Matcher::Contains("cities in the SF bay area".into()),
                response: "San Jose\nOakland".into(),
                cost: 0.02,
                latency_ms: 400.0,
            },
            ScriptEntry {
                matcher: Matcher::Pattern(r"^summari[sz]e".into()),
                response: "summary".into(),
                cost: 0.0,
                latency_ms: 0.0,
            },
            ScriptEntry {
                matcher: Matcher::Fallback,
                response: "I don't know.".into(),
                cost: 0.01,
                latency_ms: 100.0,
            },
        ])
        .unwrap()
    }

    #[test]
    fn first_match_wins_case_insensitively() {
        let m = script();
        let c = m.complete("List the cities in the sf bay area", &Json::Null).unwrap();
        assert_eq!(c.text, "San Jose\nOakland");
        assert_eq!(c.cost, 0.02);
        assert_eq!(m.complete("Summarize this", &Json::Null).unwrap().text, "summary");
    }

    #[test]
    fn fallback_and_determinism() {
        let m = script();
        let a = m.complete("unrelated", &Json::Null).unwrap();
        let b = m.complete("unrelated", &Json::Null).unwrap();
        assert_eq!(a.text, "I don't know.");
        assert_eq!(a, b);
    }

    #[test]
    fn fallback_required() {
        assert!(MockLlm::new(vec![]).is_err());
    }

    #[test]
    fn unreachable_http_backend_is_unavailable() {
        let m = HttpModel::new("http://127.0.0.1:9/complete", Duration::from_millis(200)).unwrap();
        assert!(matches!(m.complete("x", &Json::Null), Err(ModelError::Unavailable(_))));
    }

    #[test]
    fn script_serde_shape() {
        let entries: Vec<ScriptEntry> = serde_json::from_value(json!([
            {"match": {"contains": "cities"}, "response": "A"},
            {"match": "fallback", "response": "B"}
        ]))
        .unwrap();
        assert_eq!(entries[1].matcher, Matcher::Fallback);
    }
}
