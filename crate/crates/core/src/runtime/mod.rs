//! Hosts agent instances. Each instance routes subscribed messages into the
//! places of its PetriNet, fires when enabled, and runs its processor on a
//! bounded worker pool. Outputs go to fresh per-invocation streams.
//!
//! Instances are activated two ways: autonomously through their listen
//! rules, or centrally by an `EXECUTE` control message naming the agent.

mod descriptor;
mod petri;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, RecvTimeoutError, Select, Sender};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use thiserror::Error;

pub use descriptor::{AgentDescriptor, ParamSpec, TriggerPolicy};
pub use petri::{InputTuple, Token, TriggerState, UnknownPlace};

use crate::stream::{
    id_segment, tags, ActivityGuard, Delivery, MessageKind, SessionId, StreamError, StreamId, StreamRef, Substrate,
    TagFilter, TagSet,
};
use crate::value::{SemanticType, Value};

pub const DEFAULT_PROCESSOR_TIMEOUT: Duration = Duration::from_secs(30);
pub const EXECUTE_TAG: &str = "EXECUTE";
/// Message tag on outputs of plan-directed runs. Listen rules never match
/// it, so a planned chain does not also fire autonomously.
pub const DIRECTED_TAG: &str = "DIRECTED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("invalid descriptor: {}", .0.join("; "))]
    InvalidDescriptor(Vec<String>),
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
    #[error("session {0} is closed")]
    SessionClosed(SessionId),
    #[error("agent {agent:?} has no parameter {param:?}")]
    UnknownParam { agent: String, param: String },
    #[error("parameter {param:?} expects {expected}, got {found}")]
    TypeMismatch {
        param: String,
        expected: SemanticType,
        found: String,
    },
    #[error("no processor bound for image {0:?}")]
    NoProcessor(String),
    #[error("instance {0} is retired")]
    Retired(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
}

/// Cost and latency accrued by one invocation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Charge {
    pub cost: f64,
    pub latency_ms: f64,
}

/// Emitted outputs by port and the charge, or (reason, detail, charge) on failure.
type Outcome = Result<(BTreeMap<String, (StreamId, u64)>, Charge), (String, String, Charge)>;

impl Charge {
    pub fn to_json(self) -> Json {
        json!({"cost": self.cost, "latency_ms": self.latency_ms})
    }
}

/// How an invocation was triggered.
#[derive(Clone, Debug, PartialEq)]
pub enum Invocation {
    Autonomous,
    Directed { plan: String, node: String },
}

/// What a processor sees besides its inputs.
#[derive(Debug)]
pub struct ProcessorContext {
    pub session: SessionId,
    pub agent: String,
    pub instance: String,
    pub invocation: Invocation,
    charge: Charge,
}

impl ProcessorContext {
    pub fn new(session: SessionId, agent: &str, invocation: Invocation) -> Self {
        Self {
            instance: format!("{}:AGENT:{}", session.root_scope(), id_segment(agent)),
            session,
            agent: agent.to_string(),
            invocation,
            charge: Charge::default(),
        }
    }

    /// Records spend against the budget of the invocation, e.g. model calls.
    pub fn charge(&mut self, cost: f64, latency_ms: f64) {
        self.charge.cost += cost;
        self.charge.latency_ms += latency_ms;
    }

    pub fn charges(&self) -> Charge {
        self.charge
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Output {
    pub param: String,
    pub value: Value,
    pub tags: TagSet,
}

impl Output {
    pub fn new(param: &str, value: Value) -> Self {
        Self {
            param: param.to_string(),
            value,
            tags: TagSet::new(),
        }
    }

    pub fn tagged<I, S>(mut self, t: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.tags.extend(t.into_iter().map(Into::into));
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{reason}")]
pub struct ProcessorError {
    pub reason: String,
}

impl ProcessorError {
    pub fn new(reason: impl Into<String>) -> Self {
        Self { reason: reason.into() }
    }
}

pub trait Processor: Send + Sync {
    fn process(&self, inputs: &InputTuple, ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError>;
}

impl<F> Processor for F
where
    F: Fn(&InputTuple, &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> + Send + Sync,
{
    fn process(&self, inputs: &InputTuple, ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        self(inputs, ctx)
    }
}

/// Receives per-agent invocation outcomes.
pub trait UsageRecorder: Send + Sync {
    fn record_invocation(&self, agent: &str, failed: bool);
}

#[derive(Clone, Debug)]
pub struct RuntimeConfig {
    pub default_timeout: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            default_timeout: DEFAULT_PROCESSOR_TIMEOUT,
        }
    }
}

struct Job {
    tuple: InputTuple,
    invocation: Invocation,
    _guard: ActivityGuard,
}

struct InstanceShared {
    id: String,
    session: SessionId,
    descriptor: AgentDescriptor,
    processor: Arc<dyn Processor>,
    substrate: Substrate,
    timeout: Duration,
    trigger: Mutex<TriggerState>,
    jobs: Mutex<Option<Sender<Job>>>,
    stop: Mutex<Option<Sender<()>>>,
    in_flight: AtomicUsize,
    max_in_flight: AtomicUsize,
    retired: AtomicBool,
    threads: Mutex<Vec<JoinHandle<()>>>,
    usage: Option<Arc<dyn UsageRecorder>>,
}

/// A running agent in one session.
#[derive(Clone)]
pub struct AgentInstance {
    shared: Arc<InstanceShared>,
}

impl std::fmt::Debug for AgentInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentInstance").field("id", &self.shared.id).finish()
    }
}

impl AgentInstance {
    pub fn id(&self) -> &str {
        &self.shared.id
    }

    pub fn name(&self) -> &str {
        &self.shared.descriptor.name
    }

    pub fn session(&self) -> &SessionId {
        &self.shared.session
    }

    pub fn descriptor(&self) -> &AgentDescriptor {
        &self.shared.descriptor
    }

    pub fn is_retired(&self) -> bool {
        self.shared.retired.load(Ordering::SeqCst)
    }

    /// Current token count per place.
    pub fn place_depths(&self) -> BTreeMap<String, usize> {
        self.shared.trigger.lock().depths()
    }

    /// Highest number of processor invocations observed in flight at once.
    pub fn max_in_flight(&self) -> usize {
        self.shared.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn in_flight(&self) -> usize {
        self.shared.in_flight.load(Ordering::SeqCst)
    }

    /// Enqueues a token in the place of `param`. Does not fire.
    pub fn deposit(&self, param: &str, token: Token) -> Result<(), RuntimeError> {
        let spec = self
            .shared
            .descriptor
            .input(param)
            .ok_or_else(|| RuntimeError::UnknownParam {
                agent: self.name().to_string(),
                param: param.to_string(),
            })?;
        check_type(spec, &token.value)?;
        self.shared
            .trigger
            .lock()
            .deposit(param, token)
            .map_err(|e| RuntimeError::UnknownParam {
                agent: self.name().to_string(),
                param: e.0,
            })
    }

    /// Fires while enabled, dispatching each tuple to the worker pool.
    pub fn fire(&self) -> Vec<InputTuple> {
        let tuples = self.shared.trigger.lock().fire();
        for t in &tuples {
            self.shared.submit(t.clone(), Invocation::Autonomous);
        }
        tuples
    }

    /// Emits one value on a new stream for `param` and closes it.
    pub fn emit(&self, param: &str, value: Value, tags: TagSet) -> Result<StreamRef, RuntimeError> {
        let refs = self.shared.emit_outputs(
            vec![Output {
                param: param.to_string(),
                value,
                tags,
            }],
            &Invocation::Autonomous,
        )?;
        let (stream, _) = refs.into_values().next().expect("one output emitted");
        Ok(self.shared.substrate.stream_ref(&stream)?)
    }
}

impl InstanceShared {
    fn submit(&self, tuple: InputTuple, invocation: Invocation) {
        let guard = self.substrate.activity().enter();
        if let Some(tx) = self.jobs.lock().as_ref() {
            let _ = tx.send(Job {
                tuple,
                invocation,
                _guard: guard,
            });
        }
    }

    /// Emits outputs, one new stream per parameter. Returns the stream and
    /// the seq of the first value for each parameter.
    fn emit_outputs(
        &self,
        outputs: Vec<Output>,
        invocation: &Invocation,
    ) -> Result<BTreeMap<String, (StreamId, u64)>, RuntimeError> {
        for o in &outputs {
            let spec = self
                .descriptor
                .output(&o.param)
                .ok_or_else(|| RuntimeError::UnknownParam {
                    agent: self.descriptor.name.clone(),
                    param: o.param.clone(),
                })?;
            check_type(spec, &o.value)?;
        }
        let mut streams: BTreeMap<String, StreamRef> = BTreeMap::new();
        let mut refs = BTreeMap::new();
        let mut order = Vec::new();
        for o in outputs {
            let spec = self.descriptor.output(&o.param).expect("checked above");
            if !streams.contains_key(&o.param) {
                let stream_tags: TagSet = spec.tags.iter().cloned().collect();
                let s = self
                    .substrate
                    .create_stream(&self.session, &self.descriptor.name, stream_tags)?;
                order.push(o.param.clone());
                streams.insert(o.param.clone(), s);
            }
            let s = &streams[&o.param];
            let mut message_tags = o.tags;
            message_tags.extend(s.tags.iter().cloned());
            if matches!(invocation, Invocation::Directed { .. }) {
                message_tags.insert(DIRECTED_TAG.to_string());
            }
            let seq = self.substrate.append(&s.id, MessageKind::Data, o.value, message_tags)?;
            refs.entry(o.param).or_insert((s.id.clone(), seq));
        }
        for p in order {
            self.substrate
                .append(&streams[&p].id, MessageKind::Eos, Value::Null, TagSet::new())?;
        }
        Ok(refs)
    }

    fn report_error(&self, reason: &str, detail: &str, charge: Charge) {
        let payload = Value::control(
            "ERROR",
            [
                ("agent", json!(self.descriptor.name)),
                ("reason", json!(reason)),
                ("detail", json!(detail)),
                ("charge", charge.to_json()),
            ],
        );
        let result = self
            .substrate
            .create_stream(&self.session, &self.descriptor.name, tags(["ERROR"]))
            .and_then(|s| {
                self.substrate
                    .append(&s.id, MessageKind::Control, payload, tags(["ERROR"]))?;
                self.substrate
                    .append(&s.id, MessageKind::Eos, Value::Null, TagSet::new())
            });
        if let Err(e) = result {
            tracing::warn!(agent = %self.descriptor.name, error = %e, "could not report processor error");
        }
    }

    fn run_job(self: &Arc<Self>, job: Job) {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight.fetch_max(now, Ordering::SeqCst);
        let started = Instant::now();
        let (tx, rx) = bounded(1);
        let processor = self.processor.clone();
        let tuple = job.tuple.clone();
        let mut ctx = ProcessorContext::new(self.session.clone(), &self.descriptor.name, job.invocation.clone());
        thread::spawn(move || {
            let result = catch_unwind(AssertUnwindSafe(|| processor.process(&tuple, &mut ctx)));
            let _ = tx.send((result, ctx.charges()));
        });
        let received = rx.recv_timeout(self.timeout);
        let elapsed_ms = started.elapsed().as_secs_f64() * 1000.0;
        let outcome: Outcome = match received {
            Ok((Ok(Ok(outputs)), mut charge)) => {
                charge.latency_ms += elapsed_ms;
                self.emit_outputs(outputs, &job.invocation)
                    .map(|refs| (refs, charge))
                    .map_err(|e| ("FAILED".to_string(), e.to_string(), charge))
            }
            Ok((Ok(Err(e)), mut charge)) => {
                charge.latency_ms += elapsed_ms;
                Err(("FAILED".to_string(), e.reason, charge))
            }
            Ok((Err(panic), mut charge)) => {
                charge.latency_ms += elapsed_ms;
                Err(("PANIC".to_string(), panic_text(panic), charge))
            }
            Err(RecvTimeoutError::Timeout) => Err((
                "TIMEOUT".to_string(),
                format!("processor exceeded {} ms", self.timeout.as_millis()),
                Charge {
                    cost: 0.0,
                    latency_ms: elapsed_ms,
                },
            )),
            Err(RecvTimeoutError::Disconnected) => Err((
                "PANIC".to_string(),
                "processor thread terminated".to_string(),
                Charge {
                    cost: 0.0,
                    latency_ms: elapsed_ms,
                },
            )),
        };
        if let Some(u) = &self.usage {
            u.record_invocation(&self.descriptor.name, outcome.is_err());
        }
        if let Err((reason, detail, charge)) = &outcome {
            self.report_error(reason, detail, *charge);
        }
        if let Invocation::Directed { plan, node } = &job.invocation {
            self.report_completion(plan, node, &outcome);
        }
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
    }

    fn report_completion(&self, plan: &str, node: &str, outcome: &Outcome) {
        let session_stream = self.session.stream_id();
        let (instruction, mut fields, charge) = match outcome {
            Ok((refs, charge)) => {
                let outputs: serde_json::Map<String, Json> = refs
                    .iter()
                    .map(|(p, (s, seq))| (p.clone(), json!({"stream": s.as_str(), "seq": seq})))
                    .collect();
                ("DONE", vec![("outputs", Json::Object(outputs))], *charge)
            }
            Err((reason, detail, charge)) => (
                "FAILED",
                vec![("reason", json!(reason)), ("detail", json!(detail))],
                *charge,
            ),
        };
        fields.push(("plan", json!(plan)));
        fields.push(("node", json!(node)));
        fields.push(("agent", json!(self.descriptor.name)));
        fields.push(("charge", charge.to_json()));
        let result = self.substrate.append_from(
            &session_stream,
            &self.descriptor.name,
            MessageKind::Control,
            Value::control(instruction, fields),
            tags(["NODE", instruction]),
        );
        if let Err(e) = result {
            tracing::warn!(agent = %self.descriptor.name, error = %e, "could not report completion");
        }
    }

    /// Picks the place a data message feeds: the first input whose tag
    /// patterns match and whose type fits, else the sole input.
    fn route(&self, delivery: &Delivery) -> Option<String> {
        let value = &delivery.message.payload;
        let effective = delivery.effective_tags();
        let fits = |p: &ParamSpec| value.conforms_to(p.semantic_type);
        let tagged = self.descriptor.inputs.iter().find(|p| {
            !p.tags.is_empty()
                && fits(p)
                && p.tags.iter().any(|pat| {
                    crate::stream::TagPattern::parse(pat)
                        .map(|pat| effective.iter().any(|t| pat.matches(t)))
                        .unwrap_or(false)
                })
        });
        if let Some(p) = tagged {
            return Some(p.name.clone());
        }
        match self.descriptor.inputs.as_slice() {
            [only] if only.tags.is_empty() && fits(only) => Some(only.name.clone()),
            _ => None,
        }
    }

    fn handle_listen(self: &Arc<Self>, delivery: Delivery) {
        if delivery.message.kind != MessageKind::Data {
            return;
        }
        let Some(param) = self.route(&delivery) else {
            tracing::debug!(agent = %self.descriptor.name, stream = %delivery.stream, "no place for message");
            return;
        };
        let token = Token::from_message(
            delivery.message.payload.clone(),
            delivery.stream.clone(),
            delivery.message.seq,
        );
        let tuples = {
            let mut trigger = self.trigger.lock();
            let _ = trigger.deposit(&param, token);
            trigger.fire()
        };
        for t in tuples {
            self.submit(t, Invocation::Autonomous);
        }
    }

    fn handle_execute(self: &Arc<Self>, mut delivery: Delivery) {
        let payload = &delivery.message.payload;
        if delivery.message.kind != MessageKind::Control
            || payload.field("agent").and_then(Json::as_str) != Some(self.descriptor.name.as_str())
        {
            return;
        }
        let plan = payload
            .field("plan")
            .and_then(Json::as_str)
            .unwrap_or_default()
            .to_string();
        let node = payload
            .field("node")
            .and_then(Json::as_str)
            .unwrap_or_default()
            .to_string();
        let invocation = Invocation::Directed { plan, node };
        match self.directed_tuple(payload) {
            Ok(tuple) => {
                let guard = delivery
                    .take_guard()
                    .unwrap_or_else(|| self.substrate.activity().enter());
                if let Some(tx) = self.jobs.lock().as_ref() {
                    let _ = tx.send(Job {
                        tuple,
                        invocation,
                        _guard: guard,
                    });
                }
            }
            Err(e) => {
                let outcome = Err(("FAILED".to_string(), e.to_string(), Charge::default()));
                self.report_error("FAILED", &e.to_string(), Charge::default());
                if let Invocation::Directed { plan, node } = &invocation {
                    self.report_completion(plan, node, &outcome);
                }
            }
        }
    }

    /// Input tuple carried by an EXECUTE message, with defaults filled in.
    fn directed_tuple(&self, payload: &Value) -> Result<InputTuple, RuntimeError> {
        let mut tuple = InputTuple::new();
        if let Some(Json::Object(inputs)) = payload.field("inputs") {
            for (name, raw) in inputs {
                let spec = self.descriptor.input(name).ok_or_else(|| RuntimeError::UnknownParam {
                    agent: self.descriptor.name.clone(),
                    param: name.clone(),
                })?;
                let value = Value::from_json(raw).map_err(|e| RuntimeError::TypeMismatch {
                    param: name.clone(),
                    expected: spec.semantic_type,
                    found: e.to_string(),
                })?;
                check_type(spec, &value)?;
                tuple.insert(name.clone(), value);
            }
        }
        for spec in &self.descriptor.inputs {
            if tuple.contains_key(&spec.name) {
                continue;
            }
            match (&spec.default, spec.required) {
                (Some(d), _) => {
                    tuple.insert(spec.name.clone(), d.clone());
                }
                (None, true) => {
                    return Err(RuntimeError::UnknownParam {
                        agent: self.descriptor.name.clone(),
                        param: format!("{} (missing required input)", spec.name),
                    })
                }
                (None, false) => {}
            }
        }
        Ok(tuple)
    }
}

fn check_type(spec: &ParamSpec, value: &Value) -> Result<(), RuntimeError> {
    if value.conforms_to(spec.semantic_type) {
        Ok(())
    } else {
        Err(RuntimeError::TypeMismatch {
            param: spec.name.clone(),
            expected: spec.semantic_type,
            found: value
                .semantic_type()
                .map(|t| t.to_string())
                .unwrap_or_else(|| "untyped value".to_string()),
        })
    }
}

fn panic_text(panic: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = panic.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = panic.downcast_ref::<String>() {
        s.clone()
    } else {
        "processor panicked".to_string()
    }
}

/// Simulated AgentFactory: binds deployment images to in-process processors
/// and spawns instances into sessions.
pub struct AgentRuntime {
    substrate: Substrate,
    config: RuntimeConfig,
    processors: RwLock<BTreeMap<String, Arc<dyn Processor>>>,
    instances: Mutex<BTreeMap<String, AgentInstance>>,
    usage: RwLock<Option<Arc<dyn UsageRecorder>>>,
}

impl AgentRuntime {
    pub fn new(substrate: Substrate, config: RuntimeConfig) -> Self {
        Self {
            substrate,
            config,
            processors: RwLock::new(BTreeMap::new()),
            instances: Mutex::new(BTreeMap::new()),
            usage: RwLock::new(None),
        }
    }

    pub fn substrate(&self) -> &Substrate {
        &self.substrate
    }

    pub fn set_usage_recorder(&self, recorder: Arc<dyn UsageRecorder>) {
        *self.usage.write() = Some(recorder);
    }

    pub fn register_processor(&self, image: &str, processor: Arc<dyn Processor>) {
        self.processors.write().insert(image.to_string(), processor);
    }

    pub fn has_processor(&self, image: &str) -> bool {
        self.processors.read().contains_key(image)
    }

    /// Returns the live instance of `agent` in `session`, if any.
    pub fn instance(&self, session: &SessionId, agent: &str) -> Option<AgentInstance> {
        self.instances
            .lock()
            .get(&instance_id(session, agent))
            .filter(|i| !i.is_retired())
            .cloned()
    }

    pub fn instances(&self, session: &SessionId) -> Vec<AgentInstance> {
        self.instances
            .lock()
            .values()
            .filter(|i| i.session() == session && !i.is_retired())
            .cloned()
            .collect()
    }

    /// Spawns an instance, announces its entry on the session stream, and
    /// subscribes it per its listen rules. Instantiating an agent that is
    /// already live in the session returns the existing instance.
    pub fn instantiate(
        &self,
        descriptor: &AgentDescriptor,
        session: &SessionId,
    ) -> Result<AgentInstance, RuntimeError> {
        descriptor.validate().map_err(RuntimeError::InvalidDescriptor)?;
        if !self.substrate.has_session(session) {
            return Err(RuntimeError::UnknownSession(session.clone()));
        }
        if !self.substrate.is_session_active(session) {
            return Err(RuntimeError::SessionClosed(session.clone()));
        }
        let image = descriptor.image().expect("validated").to_string();
        let processor = self
            .processors
            .read()
            .get(&image)
            .cloned()
            .ok_or_else(|| RuntimeError::NoProcessor(image.clone()))?;
        let id = instance_id(session, &descriptor.name);
        let mut instances = self.instances.lock();
        if let Some(existing) = instances.get(&id).filter(|i| !i.is_retired()) {
            return Ok(existing.clone());
        }

        self.substrate.append_from(
            &session.stream_id(),
            &descriptor.name,
            MessageKind::Control,
            Value::control("ENTER", [("agent", json!(descriptor.name)), ("instance", json!(id))]),
            tags(["ANNOUNCE"]),
        )?;

        let (job_tx, job_rx) = unbounded::<Job>();
        let (stop_tx, stop_rx) = unbounded::<()>();
        let shared = Arc::new(InstanceShared {
            id: id.clone(),
            session: session.clone(),
            descriptor: descriptor.clone(),
            processor,
            substrate: self.substrate.clone(),
            timeout: descriptor
                .timeout_ms
                .map(Duration::from_millis)
                .unwrap_or(self.config.default_timeout),
            trigger: Mutex::new(TriggerState::new(&descriptor.inputs, descriptor.trigger_policy.clone())),
            jobs: Mutex::new(Some(job_tx)),
            stop: Mutex::new(Some(stop_tx)),
            in_flight: AtomicUsize::new(0),
            max_in_flight: AtomicUsize::new(0),
            retired: AtomicBool::new(false),
            threads: Mutex::new(Vec::new()),
            usage: self.usage.read().clone(),
        });

        let listen = descriptor.listen_rules.clone().map(|f| {
            self.substrate
                .subscribe_tracked(f.excluding([DIRECTED_TAG]).in_session(session.clone()))
        });
        let execute = self
            .substrate
            .subscribe_tracked(TagFilter::include([EXECUTE_TAG]).in_session(session.clone()));

        let mut handles = Vec::new();
        for _ in 0..descriptor.worker_pool_size {
            let rx = job_rx.clone();
            let shared = shared.clone();
            handles.push(thread::spawn(move || {
                for job in rx.iter() {
                    shared.run_job(job);
                }
            }));
        }
        let dispatcher_shared = shared.clone();
        handles.push(thread::spawn(move || loop {
            let mut select = Select::new();
            let stop_idx = select.recv(&stop_rx);
            let exec_idx = select.recv(execute.receiver());
            let listen_idx = listen.as_ref().map(|l| select.recv(l.receiver()));
            let op = select.select();
            let idx = op.index();
            if idx == stop_idx {
                let _ = op.recv(&stop_rx);
                break;
            } else if idx == exec_idx {
                match op.recv(execute.receiver()) {
                    Ok(d) => dispatcher_shared.handle_execute(d),
                    Err(_) => break,
                }
            } else if Some(idx) == listen_idx {
                let l = listen.as_ref().expect("listen subscription present");
                match op.recv(l.receiver()) {
                    Ok(d) => dispatcher_shared.handle_listen(d),
                    Err(_) => break,
                }
            }
        }));
        *shared.threads.lock() = handles;

        let instance = AgentInstance { shared };
        instances.insert(id, instance.clone());
        Ok(instance)
    }

    /// Stops the instance, waits up to `drain` for in-flight work, and
    /// announces its exit. Idempotent.
    pub fn retire(&self, instance: &AgentInstance, drain: Duration) -> Result<(), RuntimeError> {
        let shared = &instance.shared;
        if shared.retired.swap(true, Ordering::SeqCst) {
            return Ok(());
        }
        shared.stop.lock().take();
        shared.jobs.lock().take();
        let deadline = Instant::now() + drain;
        let handles: Vec<_> = shared.threads.lock().drain(..).collect();
        for h in handles {
            while !h.is_finished() && Instant::now() < deadline {
                thread::sleep(Duration::from_millis(2));
            }
            if h.is_finished() {
                let _ = h.join();
            }
        }
        let session_stream = shared.session.stream_id();
        if self.substrate.is_session_active(&shared.session) {
            self.substrate.append_from(
                &session_stream,
                &shared.descriptor.name,
                MessageKind::Control,
                Value::control(
                    "EXIT",
                    [("agent", json!(shared.descriptor.name)), ("instance", json!(shared.id))],
                ),
                tags(["ANNOUNCE"]),
            )?;
        }
        Ok(())
    }

    /// Retires every instance of the session in entry order of their ids.
    pub fn retire_session(&self, session: &SessionId, drain: Duration) -> Result<(), RuntimeError> {
        for inst in self.instances(session) {
            self.retire(&inst, drain)?;
        }
        Ok(())
    }
}

pub fn instance_id(session: &SessionId, agent: &str) -> String {
    format!("{}:AGENT:{}", session.root_scope(), id_segment(agent))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::TagFilter;
    use serde_json::json;

    fn echo_descriptor(name: &str, listen: &[&str]) -> AgentDescriptor {
        let mut d = AgentDescriptor::new(name, "echo");
        d.inputs = vec![ParamSpec::new("In", SemanticType::Text)];
        d.outputs = vec![ParamSpec::new("Out", SemanticType::Text).tagged(["ECHOED"])];
        d.listen_rules = Some(TagFilter::include(listen));
        d.deployment.insert("image".into(), json!("test:echo"));
        d
    }

    fn runtime() -> (AgentRuntime, SessionId) {
        let substrate = Substrate::default();
        let sid = SessionId::new("S1");
        substrate.open_session(&sid).unwrap();
        let rt = AgentRuntime::new(substrate, RuntimeConfig::default());
        rt.register_processor(
            "test:echo",
            Arc::new(|inputs: &InputTuple, _: &mut ProcessorContext| {
                Ok(vec![Output::new("Out", inputs["In"].clone())])
            }),
        );
        (rt, sid)
    }

    fn idle(rt: &AgentRuntime) {
        assert!(rt.substrate().activity().wait_idle(Duration::from_secs(5)));
    }

    #[test]
    fn instantiate_announces_entry_and_echoes() {
        let (rt, sid) = runtime();
        let inst = rt.instantiate(&echo_descriptor("Echo", &["SQL"]), &sid).unwrap();
        let session_msgs = rt.substrate().read(&sid.stream_id(), 0).unwrap();
        assert_eq!(session_msgs.last().unwrap().instruction(), Some("ENTER"));

        let sub = rt.substrate().subscribe(TagFilter::include(["ECHOED"]));
        let s = rt.substrate().create_stream(&sid, "USER", TagSet::new()).unwrap();
        rt.substrate()
            .append(&s.id, MessageKind::Data, Value::text("x"), tags(["SQL"]))
            .unwrap();
        rt.substrate()
            .append(&s.id, MessageKind::Data, Value::text("ignored"), tags(["NLQ"]))
            .unwrap();
        idle(&rt);
        let data: Vec<_> = sub
            .drain()
            .into_iter()
            .filter(|d| d.message.kind == MessageKind::Data)
            .collect();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].message.payload, Value::text("x"));
        assert!(data[0].message.tags.contains("ECHOED"));
        assert_eq!(inst.max_in_flight(), 1);
    }

    #[test]
    fn zero_pool_rejected() {
        let (rt, sid) = runtime();
        let mut d = echo_descriptor("Echo", &["SQL"]);
        d.worker_pool_size = 0;
        assert!(matches!(
            rt.instantiate(&d, &sid),
            Err(RuntimeError::InvalidDescriptor(_))
        ));
    }

    #[test]
    fn unknown_session_rejected() {
        let (rt, _) = runtime();
        assert!(matches!(
            rt.instantiate(&echo_descriptor("Echo", &["SQL"]), &SessionId::new("S9")),
            Err(RuntimeError::UnknownSession(_))
        ));
    }

    #[test]
    fn deposit_unknown_param_and_type_mismatch() {
        let (rt, sid) = runtime();
        let inst = rt.instantiate(&echo_descriptor("Echo", &["SQL"]), &sid).unwrap();
        assert!(matches!(
            inst.deposit("nonexistent", Token::new(Value::text("x"))),
            Err(RuntimeError::UnknownParam { .. })
        ));
        assert!(matches!(
            inst.emit("Out", Value::Number(1.0), TagSet::new()),
            Err(RuntimeError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn emit_appends_data_with_stream_tags() {
        let (rt, sid) = runtime();
        let inst = rt.instantiate(&echo_descriptor("Echo", &["SQL"]), &sid).unwrap();
        let s = inst.emit("Out", Value::text("v"), tags(["EXTRA"])).unwrap();
        let msgs = rt.substrate().read(&s.id, 0).unwrap();
        assert_eq!(msgs.len(), 3);
        assert_eq!(msgs[1].tags, tags(["ECHOED", "EXTRA"]));
        assert_eq!(msgs[2].kind, MessageKind::Eos);
    }

    #[test]
    fn failing_processor_reports_error_and_stays_alive() {
        let (rt, sid) = runtime();
        rt.register_processor(
            "test:flaky",
            Arc::new(|inputs: &InputTuple, _: &mut ProcessorContext| {
                if inputs["In"] == Value::text("boom") {
                    panic!("boom");
                }
                if inputs["In"] == Value::text("err") {
                    return Err(ProcessorError::new("bad input"));
                }
                Ok(vec![Output::new("Out", inputs["In"].clone())])
            }),
        );
        let mut d = echo_descriptor("Flaky", &["IN"]);
        d.deployment.insert("image".into(), json!("test:flaky"));
        rt.instantiate(&d, &sid).unwrap();
        let errors = rt.substrate().subscribe(TagFilter::include(["ERROR"]));
        let ok = rt.substrate().subscribe(TagFilter::include(["ECHOED"]));
        let s = rt.substrate().create_stream(&sid, "USER", TagSet::new()).unwrap();
        for v in ["boom", "err", "fine"] {
            rt.substrate()
                .append(&s.id, MessageKind::Data, Value::text(v), tags(["IN"]))
                .unwrap();
        }
        idle(&rt);
        let reasons: Vec<_> = errors
            .drain()
            .into_iter()
            .filter_map(|d| d.message.payload.field("reason").cloned())
            .collect();
        assert_eq!(reasons, vec![json!("PANIC"), json!("FAILED")]);
        assert_eq!(
            ok.drain()
                .into_iter()
                .filter(|d| d.message.kind == MessageKind::Data)
                .count(),
            1
        );
    }

    #[test]
    fn timeout_reports_and_charges_elapsed() {
        let (rt, sid) = runtime();
        rt.register_processor(
            "test:slow",
            Arc::new(|_: &InputTuple, _: &mut ProcessorContext| {
                thread::sleep(Duration::from_millis(300));
                Ok(vec![])
            }),
        );
        let mut d = echo_descriptor("Slow", &["IN"]);
        d.deployment.insert("image".into(), json!("test:slow"));
        d.timeout_ms = Some(50);
        rt.instantiate(&d, &sid).unwrap();
        let errors = rt.substrate().subscribe(TagFilter::include(["ERROR"]));
        let s = rt.substrate().create_stream(&sid, "USER", TagSet::new()).unwrap();
        rt.substrate()
            .append(&s.id, MessageKind::Data, Value::text("x"), tags(["IN"]))
            .unwrap();
        idle(&rt);
        let err = errors
            .drain()
            .into_iter()
            .find(|d| d.message.kind == MessageKind::Control)
            .unwrap();
        assert_eq!(err.message.payload.field("reason"), Some(&json!("TIMEOUT")));
        let latency = err.message.payload.field("charge").unwrap()["latency_ms"]
            .as_f64()
            .unwrap();
        assert!(latency >= 50.0, "{latency}");
    }

    #[test]
    fn directed_execution_reports_done() {
        let (rt, sid) = runtime();
        let mut d = echo_descriptor("Echo", &["NOTHING"]);
        d.listen_rules = None;
        rt.instantiate(&d, &sid).unwrap();
        let done = rt.substrate().subscribe(TagFilter::include(["DONE"]));
        let c = rt
            .substrate()
            .create_stream(&sid, "COORDINATOR", tags(["EXECUTE"]))
            .unwrap();
        rt.substrate()
            .append(
                &c.id,
                MessageKind::Control,
                Value::control(
                    "EXECUTE Echo",
                    [
                        ("agent", json!("Echo")),
                        ("plan", json!("P1")),
                        ("node", json!("n1")),
                        ("inputs", json!({"In": Value::text("hello").to_json()})),
                    ],
                ),
                tags(["EXECUTE"]),
            )
            .unwrap();
        idle(&rt);
        let msg = done.drain().pop().unwrap().message;
        assert_eq!(msg.payload.field("node"), Some(&json!("n1")));
        let out = &msg.payload.field("outputs").unwrap()["Out"];
        let stream = StreamId::new(out["stream"].as_str().unwrap());
        let m = rt.substrate().message(&stream, out["seq"].as_u64().unwrap()).unwrap();
        assert_eq!(m.payload, Value::text("hello"));
    }

    #[test]
    fn retire_announces_exit_once() {
        let (rt, sid) = runtime();
        let inst = rt.instantiate(&echo_descriptor("Echo", &["SQL"]), &sid).unwrap();
        rt.retire(&inst, Duration::from_secs(1)).unwrap();
        rt.retire(&inst, Duration::from_secs(1)).unwrap();
        let exits = rt
            .substrate()
            .read(&sid.stream_id(), 0)
            .unwrap()
            .into_iter()
            .filter(|m| m.instruction() == Some("EXIT"))
            .count();
        assert_eq!(exits, 1);
        assert!(rt.instance(&sid, "Echo").is_none());
    }
}
