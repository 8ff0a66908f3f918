use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::value::Value;

pub type TagSet = BTreeSet<String>;

/// Builds a tag set from string literals.
pub fn tags<I, S>(items: I) -> TagSet
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    items.into_iter().map(Into::into).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub String);

impl SessionId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Name of the session's root scope, `SESSION:<id>`.
    pub fn root_scope(&self) -> String {
        format!("SESSION:{}", self.0)
    }

    /// Id of the session stream.
    pub fn stream_id(&self) -> StreamId {
        StreamId(self.root_scope())
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Hierarchical stream name: `SESSION:<sid>[:<scope>...]:AGENT:<agent>:<ordinal>`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StreamId(pub String);

impl StreamId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Session segment of the id, if it is well formed.
    pub fn session(&self) -> Option<SessionId> {
        let mut parts = self.0.splitn(3, ':');
        match (parts.next(), parts.next()) {
            (Some("SESSION"), Some(sid)) if !sid.is_empty() => Some(SessionId(sid.to_string())),
            _ => None,
        }
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum MessageKind {
    Data,
    Control,
    Bos,
    Eos,
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MessageKind::Data => "DATA",
            MessageKind::Control => "CONTROL",
            MessageKind::Bos => "BOS",
            MessageKind::Eos => "EOS",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum StreamState {
    Open,
    Closed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub seq: u64,
    pub kind: MessageKind,
    pub payload: Value,
    pub tags: TagSet,
    pub producer: String,
    pub session: SessionId,
    pub ts: u64,
}

impl Message {
    pub fn instruction(&self) -> Option<&str> {
        if self.kind == MessageKind::Control {
            self.payload.instruction()
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamRef {
    pub id: StreamId,
    pub tags: TagSet,
    pub state: StreamState,
}

/// One line of a transcript dump. Field order is part of the file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub stream: StreamId,
    pub seq: u64,
    pub kind: MessageKind,
    pub tags: TagSet,
    pub payload: Value,
    pub producer: String,
    pub session: SessionId,
    pub ts: u64,
}

impl TranscriptRecord {
    pub fn from_message(stream: &StreamId, m: &Message) -> Self {
        Self {
            stream: stream.clone(),
            seq: m.seq,
            kind: m.kind,
            tags: m.tags.clone(),
            payload: m.payload.clone(),
            producer: m.producer.clone(),
            session: m.session.clone(),
            ts: m.ts,
        }
    }

    pub fn into_message(self) -> (StreamId, Message) {
        (
            self.stream,
            Message {
                seq: self.seq,
                kind: self.kind,
                payload: self.payload,
                tags: self.tags,
                producer: self.producer,
                session: self.session,
                ts: self.ts,
            },
        )
    }

    pub fn instruction(&self) -> Option<&str> {
        if self.kind == MessageKind::Control {
            self.payload.instruction()
        } else {
            None
        }
    }
}

/// Label used in stream ids for a producer name: uppercase, spaces to `_`.
pub fn id_segment(name: &str) -> String {
    name.trim()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect()
}

/// Tags are uppercase labels: `A-Z`, digits, `_`, `-`, `:`, `.`.
pub fn is_valid_tag(tag: &str) -> bool {
    !tag.is_empty()
        && tag
            .chars()
            .all(|c| c.is_ascii_uppercase() || c.is_ascii_digit() || matches!(c, '_' | '-' | ':' | '.'))
}
