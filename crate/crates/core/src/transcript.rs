//! Transcript normalization and comparison. Normalizing drops timestamps
//! and wall-clock latencies and renames session, plan, data plan and form
//! ids by order of first appearance. Two transcripts verify equal when
//! they hold the same streams with the same normalized message sequences;
//! interleaving across streams is not compared, since appends by causally
//! unrelated producers may land in either order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;
use thiserror::Error;

use crate::stream::{MessageKind, TagSet, TranscriptRecord};

/// Payload keys whose values depend on wall-clock time.
const TIMING_KEYS: [&str; 2] = ["latency_ms", "ts"];

static IDS: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b(DP|FORM|P)-[0-9a-f]{6,}\b|\bSESSION:(S\d+)\b|^(S\d+)$").expect("valid regex"));

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedRecord {
    pub stream: String,
    pub seq: u64,
    pub kind: MessageKind,
    pub tags: TagSet,
    pub producer: String,
    pub payload: Json,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("{path} line {line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
}

#[derive(Default)]
struct Renamer {
    names: BTreeMap<String, String>,
    counters: BTreeMap<&'static str, usize>,
}

impl Renamer {
    fn name(&mut self, raw: &str, class: &'static str) -> String {
        if let Some(n) = self.names.get(raw) {
            return n.clone();
        }
        let c = self.counters.entry(class).or_default();
        *c += 1;
        let n = format!("{class}#{c}");
        self.names.insert(raw.to_string(), n.clone());
        n
    }

    fn text(&mut self, s: &str) -> String {
        IDS.replace_all(s, |c: &regex::Captures| {
            if let Some(session) = c.get(2) {
                format!("SESSION:{}", self.name(session.as_str(), "S"))
            } else if let Some(session) = c.get(3) {
                self.name(session.as_str(), "S")
            } else {
                let class = match &c[1] {
                    "DP" => "DP",
                    "FORM" => "FORM",
                    _ => "P",
                };
                self.name(&c[0], class)
            }
        })
        .into_owned()
    }

    fn json(&mut self, v: &Json) -> Json {
        match v {
            Json::String(s) => Json::String(self.text(s)),
            Json::Array(items) => Json::Array(items.iter().map(|i| self.json(i)).collect()),
            Json::Object(m) => Json::Object(
                m.iter()
                    .filter(|(k, _)| !TIMING_KEYS.contains(&k.as_str()))
                    .map(|(k, v)| (self.text(k), self.json(v)))
                    .collect(),
            ),
            other => other.clone(),
        }
    }
}

/// Normalized copy of a transcript, in the same order.
pub fn normalize(records: &[TranscriptRecord]) -> Vec<NormalizedRecord> {
    let mut r = Renamer::default();
    records
        .iter()
        .map(|rec| NormalizedRecord {
            stream: r.text(rec.stream.as_str()),
            seq: rec.seq,
            kind: rec.kind,
            tags: rec.tags.clone(),
            producer: rec.producer.clone(),
            payload: r.json(&rec.payload.to_json()),
        })
        .collect()
}

/// Records grouped per stream, each in seq order.
pub fn by_stream(records: &[NormalizedRecord]) -> BTreeMap<String, Vec<&NormalizedRecord>> {
    let mut out: BTreeMap<String, Vec<&NormalizedRecord>> = BTreeMap::new();
    for r in records {
        out.entry(r.stream.clone()).or_default().push(r);
    }
    for v in out.values_mut() {
        v.sort_by_key(|r| r.seq);
    }
    out
}

/// Differences between two normalized transcripts; empty when they verify equal.
pub fn diff(expected: &[NormalizedRecord], actual: &[NormalizedRecord]) -> Vec<String> {
    let (e, a) = (by_stream(expected), by_stream(actual));
    let mut out = Vec::new();
    for s in e.keys().filter(|s| !a.contains_key(*s)) {
        out.push(format!("missing stream {s}"));
    }
    for s in a.keys().filter(|s| !e.contains_key(*s)) {
        out.push(format!("unexpected stream {s}"));
    }
    for (s, want) in &e {
        let Some(got) = a.get(s) else { continue };
        for i in 0..want.len().max(got.len()) {
            match (want.get(i), got.get(i)) {
                (Some(w), Some(g)) if w == g => {}
                (Some(w), Some(g)) => out.push(format!(
                    "{s} seq {}: expected {} got {}",
                    w.seq,
                    serde_json::to_string(w).unwrap_or_default(),
                    serde_json::to_string(g).unwrap_or_default()
                )),
                (Some(w), None) => out.push(format!("{s} seq {}: missing", w.seq)),
                (None, Some(g)) => out.push(format!("{s} seq {}: unexpected", g.seq)),
                (None, None) => {}
            }
        }
    }
    out
}

/// Writes records as JSON lines.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), TranscriptError> {
    let io = |e: std::io::Error| TranscriptError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for r in records {
        let line = serde_json::to_string(r).expect("serializable");
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

/// Reads a JSON-lines transcript, raw or normalized. Raw records are
/// normalized on the way in.
pub fn read_normalized(path: &Path) -> Result<Vec<NormalizedRecord>, TranscriptError> {
    let p = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|e| TranscriptError::Io {
        path: p.clone(),
        reason: e.to_string(),
    })?;
    let mut raw = Vec::new();
    let mut normalized = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| TranscriptError::Io {
            path: p.clone(),
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Json = serde_json::from_str(&line).map_err(|e| TranscriptError::Parse {
            path: p.clone(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        let parse_err = |e: serde_json::Error| TranscriptError::Parse {
            path: p.clone(),
            line: i + 1,
            reason: e.to_string(),
        };
        if value.get("session").is_some() {
            raw.push(serde_json::from_value::<TranscriptRecord>(value).map_err(parse_err)?);
        } else {
            normalized.push(serde_json::from_value::<NormalizedRecord>(value).map_err(parse_err)?);
        }
    }
    if !raw.is_empty() && !normalized.is_empty() {
        return Err(TranscriptError::Parse {
            path: p,
            line: 0,
            reason: "mixes raw and normalized records".into(),
        });
    }
    Ok(if raw.is_empty() { normalized } else { normalize(&raw) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{tags, SessionId, StreamId};
    use crate::value::Value;

    fn rec(stream: &str, seq: u64, payload: Value, ts: u64) -> TranscriptRecord {
        TranscriptRecord {
            stream: StreamId::new(stream),
            seq,
            kind: MessageKind::Control,
            tags: tags(["PLAN"]),
            payload,
            producer: "TASK_COORDINATOR".into(),
            session: SessionId::new("S7"),
            ts,
        }
    }

    #[test]
    fn ids_and_timing_are_normalized() {
        let a = vec![
            rec(
                "SESSION:S7",
                1,
                Value::control(
                    "X",
                    [
                        ("plan", serde_json::json!("P-0123456789ab")),
                        ("latency_ms", serde_json::json!(3.2)),
                    ],
                ),
                10,
            ),
            rec(
                "SESSION:S7",
                2,
                Value::control("Y", [("plan", serde_json::json!("P-0123456789ab-r1"))]),
                11,
            ),
        ];
        let b = vec![
            rec(
                "SESSION:S7",
                1,
                Value::control(
                    "X",
                    [
                        ("plan", serde_json::json!("P-ffffffffffff")),
                        ("latency_ms", serde_json::json!(9.9)),
                    ],
                ),
                99,
            ),
            rec(
                "SESSION:S7",
                2,
                Value::control("Y", [("plan", serde_json::json!("P-ffffffffffff-r1"))]),
                100,
            ),
        ];
        let (na, nb) = (normalize(&a), normalize(&b));
        assert_eq!(na[0].stream, "SESSION:S#1");
        assert_eq!(na[1].payload["value"]["plan"], "P#1-r1");
        assert!(diff(&na, &nb).is_empty());
    }

    #[test]
    fn cross_stream_order_is_ignored_but_content_is_not() {
        let x = rec("SESSION:S7:AGENT:A:0", 1, Value::text("a"), 0);
        let y = rec("SESSION:S7:AGENT:B:0", 1, Value::text("b"), 0);
        let one = normalize(&[x.clone(), y.clone()]);
        let two = normalize(&[y.clone(), x.clone()]);
        assert!(diff(&one, &two).is_empty());
        let changed = normalize(&[x, rec("SESSION:S7:AGENT:B:0", 1, Value::text("c"), 0)]);
        assert_eq!(diff(&one, &changed).len(), 1);
    }
}
