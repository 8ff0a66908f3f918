//! Append-only, tagged, per-stream ordered message log with publish/subscribe
//! delivery. Every exchange of data and control between components goes
//! through here.
//!
//! Streams belong to a session. Each session owns one session stream
//! (`SESSION:<sid>`) that records orchestration events such as stream
//! creation. Appends within a session are serialized, so the session
//! transcript is a total order consistent with every stream's own order.

mod activity;
mod filter;
mod message;

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use parking_lot::{Mutex, RwLock};
use serde_json::json;
use thiserror::Error;

pub use activity::{Activity, ActivityGuard};
pub use filter::{TagFilter, TagPattern};
pub use message::{
    id_segment, is_valid_tag, tags, Message, MessageKind, SessionId, StreamId, StreamRef, StreamState, TagSet,
    TranscriptRecord,
};

use crate::value::Value;

pub const DEFAULT_MAX_PAYLOAD_BYTES: usize = 1 << 20;

/// Tag carried by every message on a session stream.
pub const SESSION_TAG: &str = "SESSION";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} is closed")]
    SessionClosed(SessionId),
    #[error("session {0} already exists")]
    DuplicateSession(SessionId),
    #[error("unknown stream {0}")]
    UnknownStream(StreamId),
    #[error("stream {0} is closed")]
    StreamClosed(StreamId),
    #[error("payload of {size} bytes exceeds cap of {cap} bytes")]
    PayloadTooLarge { size: usize, cap: usize },
    #[error("cannot append a {0} message")]
    InvalidKind(MessageKind),
    #[error("control payload must be a record with an \"instruction\" key")]
    InvalidControl,
    #[error("invalid tag {0:?}")]
    InvalidTag(String),
    #[error("invalid scope {0:?}")]
    InvalidScope(String),
    #[error("transcript io: {0}")]
    Io(String),
}

pub type Result<T, E = StreamError> = std::result::Result<T, E>;

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug)]
pub struct SubstrateConfig {
    pub max_payload_bytes: usize,
    /// Directory for per-session JSON-lines logs. `None` keeps streams in memory only.
    pub log_dir: Option<PathBuf>,
}

impl Default for SubstrateConfig {
    fn default() -> Self {
        Self {
            max_payload_bytes: DEFAULT_MAX_PAYLOAD_BYTES,
            log_dir: None,
        }
    }
}

/// A message handed to a subscriber together with its stream context.
#[derive(Debug)]
pub struct Delivery {
    pub stream: StreamId,
    pub stream_tags: TagSet,
    pub message: Message,
    guard: Option<ActivityGuard>,
}

impl Delivery {
    /// Tags visible to filters: message tags plus stream-wide tags.
    pub fn effective_tags(&self) -> TagSet {
        self.message.tags.union(&self.stream_tags).cloned().collect()
    }

    /// Moves the in-flight marker out so a consumer can keep the kernel
    /// busy past the lifetime of the delivery.
    pub fn take_guard(&mut self) -> Option<ActivityGuard> {
        self.guard.take()
    }
}

struct SubscriptionSlot {
    id: u64,
    filter: TagFilter,
    sender: Sender<Delivery>,
    tracked: bool,
}

/// Receiving end of a subscription. Dropping it unsubscribes.
pub struct Subscription {
    id: u64,
    receiver: Receiver<Delivery>,
    substrate: Weak<Inner>,
}

impl Subscription {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn recv(&self) -> Option<Delivery> {
        self.receiver.recv().ok()
    }

    pub fn recv_timeout(&self, timeout: Duration) -> Option<Delivery> {
        match self.receiver.recv_timeout(timeout) {
            Ok(d) => Some(d),
            Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => None,
        }
    }

    pub fn try_recv(&self) -> Option<Delivery> {
        self.receiver.try_recv().ok()
    }

    /// Everything currently queued.
    pub fn drain(&self) -> Vec<Delivery> {
        self.receiver.try_iter().collect()
    }

    pub fn receiver(&self) -> &Receiver<Delivery> {
        &self.receiver
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        if let Some(inner) = self.substrate.upgrade() {
            inner.subscriptions.write().retain(|s| s.id != self.id);
        }
    }
}

struct StreamLog {
    producer: String,
    tags: TagSet,
    state: StreamState,
    messages: Vec<Message>,
}

impl StreamLog {
    fn stream_ref(&self, id: &StreamId) -> StreamRef {
        StreamRef {
            id: id.clone(),
            tags: self.tags.clone(),
            state: self.state,
        }
    }
}

struct SessionLog {
    active: bool,
    streams: HashMap<StreamId, StreamLog>,
    creation_order: Vec<StreamId>,
    ordinals: HashMap<String, u64>,
    transcript: Vec<(StreamId, u64)>,
    writer: Option<BufWriter<File>>,
}

struct Inner {
    config: SubstrateConfig,
    clock: Arc<dyn Clock>,
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<SessionLog>>>>,
    subscriptions: RwLock<Vec<Arc<SubscriptionSlot>>>,
    next_subscription: AtomicU64,
    activity: Activity,
}

/// Shared handle to the stream log. Cheap to clone.
#[derive(Clone)]
pub struct Substrate {
    inner: Arc<Inner>,
}

impl Default for Substrate {
    fn default() -> Self {
        Self::new(SubstrateConfig::default())
    }
}

impl Substrate {
    pub fn new(config: SubstrateConfig) -> Self {
        Self::with_clock(config, Arc::new(SystemClock))
    }

    pub fn with_clock(config: SubstrateConfig, clock: Arc<dyn Clock>) -> Self {
        Self {
            inner: Arc::new(Inner {
                config,
                clock,
                sessions: RwLock::new(HashMap::new()),
                subscriptions: RwLock::new(Vec::new()),
                next_subscription: AtomicU64::new(1),
                activity: Activity::new(),
            }),
        }
    }

    pub fn config(&self) -> &SubstrateConfig {
        &self.inner.config
    }

    pub fn activity(&self) -> &Activity {
        &self.inner.activity
    }

    pub fn now_ms(&self) -> u64 {
        self.inner.clock.now_ms()
    }

    /// Registers a session and creates its session stream with BOS at seq 0.
    pub fn open_session(&self, session: &SessionId) -> Result<StreamRef> {
        let writer = match &self.inner.config.log_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| StreamError::Io(e.to_string()))?;
                let file = File::create(dir.join(format!("{}.jsonl", session.as_str())))
                    .map_err(|e| StreamError::Io(e.to_string()))?;
                Some(BufWriter::new(file))
            }
            None => None,
        };
        let log = Arc::new(Mutex::new(SessionLog {
            active: true,
            streams: HashMap::new(),
            creation_order: Vec::new(),
            ordinals: HashMap::new(),
            transcript: Vec::new(),
            writer,
        }));
        {
            let mut sessions = self.inner.sessions.write();
            if sessions.contains_key(session) {
                return Err(StreamError::DuplicateSession(session.clone()));
            }
            sessions.insert(session.clone(), log.clone());
        }
        let id = session.stream_id();
        let stream_tags = tags([SESSION_TAG]);
        let mut guard = log.lock();
        guard.streams.insert(
            id.clone(),
            StreamLog {
                producer: SESSION_TAG.to_string(),
                tags: stream_tags.clone(),
                state: StreamState::Open,
                messages: Vec::new(),
            },
        );
        guard.creation_order.push(id.clone());
        self.push(
            &mut guard,
            session,
            &id,
            None,
            MessageKind::Bos,
            Value::Null,
            TagSet::new(),
        )?;
        Ok(StreamRef {
            id,
            tags: stream_tags,
            state: StreamState::Open,
        })
    }

    pub fn has_session(&self, session: &SessionId) -> bool {
        self.inner.sessions.read().contains_key(session)
    }

    pub fn is_session_active(&self, session: &SessionId) -> bool {
        self.session_log(session).map(|l| l.lock().active).unwrap_or(false)
    }

    pub fn sessions(&self) -> Vec<SessionId> {
        let mut ids: Vec<_> = self.inner.sessions.read().keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Appends EOS to every open stream of the session (session stream last)
    /// and marks it closed. Idempotent.
    pub fn seal_session(&self, session: &SessionId) -> Result<()> {
        let log = self.session_log(session)?;
        let mut guard = log.lock();
        if !guard.active {
            return Ok(());
        }
        let session_stream = session.stream_id();
        let open: Vec<StreamId> = guard
            .creation_order
            .iter()
            .filter(|id| **id != session_stream)
            .filter(|id| guard.streams[*id].state == StreamState::Open)
            .cloned()
            .collect();
        for id in open.iter().chain(std::iter::once(&session_stream)) {
            if guard.streams[id].state == StreamState::Open {
                self.push(
                    &mut guard,
                    session,
                    id,
                    None,
                    MessageKind::Eos,
                    Value::Null,
                    TagSet::new(),
                )?;
            }
        }
        guard.active = false;
        if let Some(w) = guard.writer.as_mut() {
            let _ = w.flush();
        }
        Ok(())
    }

    /// Creates a stream in the session's root scope.
    pub fn create_stream(&self, session: &SessionId, producer: &str, tags: TagSet) -> Result<StreamRef> {
        self.create_scoped_stream(&session.root_scope(), producer, tags)
    }

    /// Creates a stream whose id is prefixed by `scope` (which starts with
    /// `SESSION:<sid>`). BOS is appended at seq 0 and the creation is
    /// announced on the session stream.
    pub fn create_scoped_stream(&self, scope: &str, producer: &str, tags: TagSet) -> Result<StreamRef> {
        let session = StreamId::new(scope)
            .session()
            .ok_or_else(|| StreamError::InvalidScope(scope.to_string()))?;
        validate_tags(&tags)?;
        let log = self.session_log(&session)?;
        let mut guard = log.lock();
        if !guard.active {
            return Err(StreamError::SessionClosed(session));
        }
        let prefix = format!("{scope}:AGENT:{}", id_segment(producer));
        let ordinal = {
            let next = guard.ordinals.entry(prefix.clone()).or_insert(0);
            let o = *next;
            *next += 1;
            o
        };
        let id = StreamId(format!("{prefix}:{ordinal}"));
        let announcement = Value::control(
            "CREATE_STREAM",
            [
                ("stream", json!(id.as_str())),
                ("producer", json!(producer)),
                ("tags", json!(tags)),
            ],
        );
        let session_stream = session.stream_id();
        self.push(
            &mut guard,
            &session,
            &session_stream,
            Some(producer),
            MessageKind::Control,
            announcement,
            crate::stream::tags(["STREAM"]),
        )?;
        guard.streams.insert(
            id.clone(),
            StreamLog {
                producer: producer.to_string(),
                tags: tags.clone(),
                state: StreamState::Open,
                messages: Vec::new(),
            },
        );
        guard.creation_order.push(id.clone());
        self.push(
            &mut guard,
            &session,
            &id,
            None,
            MessageKind::Bos,
            Value::Null,
            TagSet::new(),
        )?;
        Ok(StreamRef {
            id,
            tags,
            state: StreamState::Open,
        })
    }

    /// Appends with the stream's owner as producer.
    pub fn append(&self, stream: &StreamId, kind: MessageKind, payload: Value, tags: TagSet) -> Result<u64> {
        self.append_inner(stream, None, kind, payload, tags)
    }

    /// Appends on behalf of `producer` (used for shared streams such as the session stream).
    pub fn append_from(
        &self,
        stream: &StreamId,
        producer: &str,
        kind: MessageKind,
        payload: Value,
        tags: TagSet,
    ) -> Result<u64> {
        self.append_inner(stream, Some(producer), kind, payload, tags)
    }

    fn append_inner(
        &self,
        stream: &StreamId,
        producer: Option<&str>,
        kind: MessageKind,
        payload: Value,
        tags: TagSet,
    ) -> Result<u64> {
        if kind == MessageKind::Bos {
            return Err(StreamError::InvalidKind(kind));
        }
        if kind == MessageKind::Control && payload.instruction().is_none() {
            return Err(StreamError::InvalidControl);
        }
        validate_tags(&tags)?;
        let size = payload.encoded_len();
        if size > self.inner.config.max_payload_bytes {
            return Err(StreamError::PayloadTooLarge {
                size,
                cap: self.inner.config.max_payload_bytes,
            });
        }
        let session = stream
            .session()
            .ok_or_else(|| StreamError::UnknownStream(stream.clone()))?;
        let log = self
            .session_log(&session)
            .map_err(|_| StreamError::UnknownStream(stream.clone()))?;
        let mut guard = log.lock();
        match guard.streams.get(stream) {
            None => return Err(StreamError::UnknownStream(stream.clone())),
            Some(s) if s.state == StreamState::Closed => return Err(StreamError::StreamClosed(stream.clone())),
            Some(_) => {}
        }
        self.push(&mut guard, &session, stream, producer, kind, payload, tags)
    }

    /// Appends under the session lock, persists, and fans out to subscribers.
    #[allow(clippy::too_many_arguments)]
    fn push(
        &self,
        log: &mut SessionLog,
        session: &SessionId,
        stream: &StreamId,
        producer: Option<&str>,
        kind: MessageKind,
        payload: Value,
        tags: TagSet,
    ) -> Result<u64> {
        let ts = self.inner.clock.now_ms();
        let entry = log
            .streams
            .get_mut(stream)
            .ok_or_else(|| StreamError::UnknownStream(stream.clone()))?;
        let seq = entry.messages.len() as u64;
        let message = Message {
            seq,
            kind,
            payload,
            tags,
            producer: producer.unwrap_or(&entry.producer).to_string(),
            session: session.clone(),
            ts,
        };
        if kind == MessageKind::Eos {
            entry.state = StreamState::Closed;
        }
        entry.messages.push(message.clone());
        let stream_tags = entry.tags.clone();
        log.transcript.push((stream.clone(), seq));
        if let Some(w) = log.writer.as_mut() {
            let record = TranscriptRecord::from_message(stream, &message);
            let line = serde_json::to_string(&record).map_err(|e| StreamError::Io(e.to_string()))?;
            writeln!(w, "{line}")
                .and_then(|_| w.flush())
                .map_err(|e| StreamError::Io(e.to_string()))?;
        }
        for slot in self.inner.subscriptions.read().iter() {
            if slot.filter.matches(session, &message.tags, &stream_tags) {
                let guard = slot.tracked.then(|| self.inner.activity.enter());
                let _ = slot.sender.send(Delivery {
                    stream: stream.clone(),
                    stream_tags: stream_tags.clone(),
                    message: message.clone(),
                    guard,
                });
            }
        }
        Ok(seq)
    }

    /// Subscribes to messages appended from now on that match `filter`.
    pub fn subscribe(&self, filter: TagFilter) -> Subscription {
        self.subscribe_inner(filter, false)
    }

    /// Like [`subscribe`](Self::subscribe), but each queued delivery counts
    /// as in-flight work until the consumer drops it.
    pub fn subscribe_tracked(&self, filter: TagFilter) -> Subscription {
        self.subscribe_inner(filter, true)
    }

    fn subscribe_inner(&self, filter: TagFilter, tracked: bool) -> Subscription {
        let id = self.inner.next_subscription.fetch_add(1, Ordering::Relaxed);
        let (sender, receiver) = unbounded();
        self.inner.subscriptions.write().push(Arc::new(SubscriptionSlot {
            id,
            filter,
            sender,
            tracked,
        }));
        Subscription {
            id,
            receiver,
            substrate: Arc::downgrade(&self.inner),
        }
    }

    /// Messages with `seq >= from_seq` present at call time, in seq order.
    pub fn read(&self, stream: &StreamId, from_seq: u64) -> Result<Vec<Message>> {
        let log = self.log_for_stream(stream)?;
        let guard = log.lock();
        let entry = guard
            .streams
            .get(stream)
            .ok_or_else(|| StreamError::UnknownStream(stream.clone()))?;
        Ok(entry
            .messages
            .iter()
            .skip(from_seq.min(entry.messages.len() as u64) as usize)
            .cloned()
            .collect())
    }

    /// One message by position.
    pub fn message(&self, stream: &StreamId, seq: u64) -> Result<Message> {
        let log = self.log_for_stream(stream)?;
        let guard = log.lock();
        guard
            .streams
            .get(stream)
            .and_then(|s| s.messages.get(seq as usize).cloned())
            .ok_or_else(|| StreamError::UnknownStream(stream.clone()))
    }

    pub fn stream_ref(&self, stream: &StreamId) -> Result<StreamRef> {
        let log = self.log_for_stream(stream)?;
        let guard = log.lock();
        guard
            .streams
            .get(stream)
            .map(|s| s.stream_ref(stream))
            .ok_or_else(|| StreamError::UnknownStream(stream.clone()))
    }

    /// Streams of a session in creation order.
    pub fn streams(&self, session: &SessionId) -> Result<Vec<StreamRef>> {
        let log = self.session_log(session)?;
        let guard = log.lock();
        Ok(guard
            .creation_order
            .iter()
            .map(|id| guard.streams[id].stream_ref(id))
            .collect())
    }

    /// Every message of the session in append order.
    pub fn transcript(&self, session: &SessionId) -> Result<Vec<TranscriptRecord>> {
        let log = self.session_log(session)?;
        let guard = log.lock();
        Ok(guard
            .transcript
            .iter()
            .map(|(id, seq)| TranscriptRecord::from_message(id, &guard.streams[id].messages[*seq as usize]))
            .collect())
    }

    /// Transcript records at positions `from..`, for resumable feeds.
    pub fn transcript_from(&self, session: &SessionId, from: usize) -> Result<Vec<TranscriptRecord>> {
        let log = self.session_log(session)?;
        let guard = log.lock();
        Ok(guard
            .transcript
            .iter()
            .skip(from)
            .map(|(id, seq)| TranscriptRecord::from_message(id, &guard.streams[id].messages[*seq as usize]))
            .collect())
    }

    /// Transcript in the JSON-lines dump format.
    pub fn dump(&self, session: &SessionId) -> Result<String> {
        Ok(encode_transcript(&self.transcript(session)?))
    }

    fn session_log(&self, session: &SessionId) -> Result<Arc<Mutex<SessionLog>>> {
        self.inner
            .sessions
            .read()
            .get(session)
            .cloned()
            .ok_or_else(|| StreamError::UnknownSession(session.clone()))
    }

    fn log_for_stream(&self, stream: &StreamId) -> Result<Arc<Mutex<SessionLog>>> {
        stream
            .session()
            .and_then(|s| self.session_log(&s).ok())
            .ok_or_else(|| StreamError::UnknownStream(stream.clone()))
    }
}

fn validate_tags(tags: &TagSet) -> Result<()> {
    match tags.iter().find(|t| !is_valid_tag(t)) {
        Some(bad) => Err(StreamError::InvalidTag(bad.clone())),
        None => Ok(()),
    }
}

/// Serializes records as JSON lines.
pub fn encode_transcript(records: &[TranscriptRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses a JSON-lines transcript, skipping blank lines.
pub fn decode_transcript(text: &str) -> Result<Vec<TranscriptRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| StreamError::Io(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn read_transcript_file(path: &Path) -> Result<Vec<TranscriptRecord>> {
    let file = File::open(path).map_err(|e| StreamError::Io(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| StreamError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| StreamError::Io(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn substrate_with_session() -> (Substrate, SessionId) {
        let s = Substrate::default();
        let sid = SessionId::new("S1");
        s.open_session(&sid).unwrap();
        (s, sid)
    }

    #[test]
    fn first_stream_gets_ordinal_zero_and_bos() {
        let (s, sid) = substrate_with_session();
        let r = s.create_stream(&sid, "USER", TagSet::new()).unwrap();
        assert_eq!(r.id.as_str(), "SESSION:S1:AGENT:USER:0");
        let msgs = s.read(&r.id, 0).unwrap();
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].kind, MessageKind::Bos);
        assert_eq!(msgs[0].seq, 0);
        let second = s.create_stream(&sid, "USER", TagSet::new()).unwrap();
        assert_eq!(second.id.as_str(), "SESSION:S1:AGENT:USER:1");
    }

    #[test]
    fn creation_is_announced_on_session_stream() {
        let (s, sid) = substrate_with_session();
        let r = s.create_stream(&sid, "NL2Q", tags(["NLQ"])).unwrap();
        assert_eq!(r.tags, tags(["NLQ"]));
        let session_msgs = s.read(&sid.stream_id(), 0).unwrap();
        let ann = session_msgs.last().unwrap();
        assert_eq!(ann.instruction(), Some("CREATE_STREAM"));
        assert_eq!(ann.payload.field("stream"), Some(&json!(r.id.as_str())));
    }

    #[test]
    fn unknown_or_closed_session_rejected() {
        let (s, sid) = substrate_with_session();
        assert_eq!(
            s.create_stream(&SessionId::new("nope"), "USER", TagSet::new()),
            Err(StreamError::UnknownSession(SessionId::new("nope")))
        );
        s.seal_session(&sid).unwrap();
        assert_eq!(
            s.create_stream(&sid, "USER", TagSet::new()),
            Err(StreamError::SessionClosed(sid))
        );
    }

    #[test]
    fn append_assigns_next_seq_and_eos_seals() {
        let (s, sid) = substrate_with_session();
        let r = s.create_stream(&sid, "USER", TagSet::new()).unwrap();
        let seq = s
            .append(
                &r.id,
                MessageKind::Data,
                Value::text("I am looking for a data scientist position in SF bay area."),
                TagSet::new(),
            )
            .unwrap();
        assert_eq!(seq, 1);
        s.append(&r.id, MessageKind::Eos, Value::Null, TagSet::new()).unwrap();
        assert_eq!(s.stream_ref(&r.id).unwrap().state, StreamState::Closed);
        assert_eq!(
            s.append(&r.id, MessageKind::Data, Value::text("late"), TagSet::new()),
            Err(StreamError::StreamClosed(r.id.clone()))
        );
    }

    #[test]
    fn bos_and_malformed_control_rejected() {
        let (s, sid) = substrate_with_session();
        let r = s.create_stream(&sid, "USER", TagSet::new()).unwrap();
        assert_eq!(
            s.append(&r.id, MessageKind::Bos, Value::Null, TagSet::new()),
            Err(StreamError::InvalidKind(MessageKind::Bos))
        );
        assert_eq!(
            s.append(&r.id, MessageKind::Control, Value::text("go"), TagSet::new()),
            Err(StreamError::InvalidControl)
        );
        assert!(matches!(
            s.append(&r.id, MessageKind::Data, Value::Null, tags(["lower"])),
            Err(StreamError::InvalidTag(_))
        ));
    }

    #[test]
    fn payload_cap_enforced() {
        let s = Substrate::new(SubstrateConfig {
            max_payload_bytes: 64,
            log_dir: None,
        });
        let sid = SessionId::new("S1");
        s.open_session(&sid).unwrap();
        let r = s.create_stream(&sid, "USER", TagSet::new()).unwrap();
        let err = s
            .append(&r.id, MessageKind::Data, Value::text("x".repeat(100)), TagSet::new())
            .unwrap_err();
        assert!(matches!(err, StreamError::PayloadTooLarge { cap: 64, .. }));
    }

    #[test]
    fn read_suffix_property() {
        let (s, sid) = substrate_with_session();
        let r = s.create_stream(&sid, "USER", TagSet::new()).unwrap();
        for i in 0..5 {
            s.append(&r.id, MessageKind::Data, Value::Number(i as f64), TagSet::new())
                .unwrap();
        }
        s.append(&r.id, MessageKind::Eos, Value::Null, TagSet::new()).unwrap();
        let all = s.read(&r.id, 0).unwrap();
        assert_eq!(all.first().unwrap().kind, MessageKind::Bos);
        assert_eq!(all.last().unwrap().kind, MessageKind::Eos);
        for k in 0..=all.len() as u64 + 1 {
            let mut joined: Vec<_> = all.iter().take(k as usize).cloned().collect();
            joined.extend(s.read(&r.id, k).unwrap());
            assert_eq!(joined, all);
        }
        assert_eq!(
            s.read(&StreamId::new("SESSION:S1:AGENT:X:9"), 0),
            Err(StreamError::UnknownStream(StreamId::new("SESSION:S1:AGENT:X:9")))
        );
    }

    #[test]
    fn subscriber_sees_only_matching_post_subscription_messages() {
        let (s, sid) = substrate_with_session();
        let r = s.create_stream(&sid, "NL2Q", TagSet::new()).unwrap();
        s.append(&r.id, MessageKind::Data, Value::text("before"), tags(["SQL"]))
            .unwrap();
        let sub = s.subscribe(TagFilter::include(["SQL"]));
        s.append(&r.id, MessageKind::Data, Value::text("SELECT 1"), tags(["SQL"]))
            .unwrap();
        s.append(&r.id, MessageKind::Data, Value::text("other"), tags(["NLQ"]))
            .unwrap();
        let got = sub.drain();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].message.payload, Value::text("SELECT 1"));

        let none = s.subscribe(TagFilter::include(["NLQ"]).excluding(["NLQ"]));
        s.append(&r.id, MessageKind::Data, Value::text("q"), tags(["NLQ"]))
            .unwrap();
        assert!(none.drain().is_empty());
    }

    #[test]
    fn dropping_subscription_unsubscribes() {
        let (s, sid) = substrate_with_session();
        let r = s.create_stream(&sid, "USER", TagSet::new()).unwrap();
        let sub = s.subscribe(TagFilter::all());
        drop(sub);
        assert!(s.inner.subscriptions.read().is_empty());
        s.append(&r.id, MessageKind::Data, Value::Null, TagSet::new()).unwrap();
    }

    #[test]
    fn tracked_deliveries_count_as_activity() {
        let (s, sid) = substrate_with_session();
        let r = s.create_stream(&sid, "USER", TagSet::new()).unwrap();
        let sub = s.subscribe_tracked(TagFilter::all());
        s.append(&r.id, MessageKind::Data, Value::Null, TagSet::new()).unwrap();
        assert_eq!(s.activity().in_flight(), 1);
        drop(sub.drain());
        assert_eq!(s.activity().in_flight(), 0);
    }

    #[test]
    fn seal_closes_every_stream_session_last() {
        let (s, sid) = substrate_with_session();
        let a = s.create_stream(&sid, "A", TagSet::new()).unwrap();
        s.seal_session(&sid).unwrap();
        assert_eq!(s.stream_ref(&a.id).unwrap().state, StreamState::Closed);
        let t = s.transcript(&sid).unwrap();
        let last = t.last().unwrap();
        assert_eq!(last.kind, MessageKind::Eos);
        assert_eq!(last.stream, sid.stream_id());
        s.seal_session(&sid).unwrap();
    }

    #[test]
    fn persisted_log_matches_dump() {
        let dir = tempfile::tempdir().unwrap();
        let s = Substrate::new(SubstrateConfig {
            log_dir: Some(dir.path().to_path_buf()),
            ..SubstrateConfig::default()
        });
        let sid = SessionId::new("S7");
        s.open_session(&sid).unwrap();
        let r = s.create_stream(&sid, "USER", tags(["USER"])).unwrap();
        s.append(&r.id, MessageKind::Data, Value::text("hi"), TagSet::new())
            .unwrap();
        s.seal_session(&sid).unwrap();
        let from_file = read_transcript_file(&dir.path().join("S7.jsonl")).unwrap();
        assert_eq!(from_file, s.transcript(&sid).unwrap());
        assert_eq!(decode_transcript(&s.dump(&sid).unwrap()).unwrap(), from_file);
    }

    #[test]
    fn dump_field_order_is_stable() {
        let (s, sid) = substrate_with_session();
        let line = s.dump(&sid).unwrap();
        let first = line.lines().next().unwrap();
        let keys = [
            "\"stream\"",
            "\"seq\"",
            "\"kind\"",
            "\"tags\"",
            "\"payload\"",
            "\"producer\"",
            "\"session\"",
            "\"ts\"",
        ];
        let positions: Vec<usize> = keys.iter().map(|k| first.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{first}");
    }
}
