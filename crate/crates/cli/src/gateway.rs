//! HTTP gateway under `/v1`: sessions, utterances, UI events, plan
//! decisions, budget confirmations, transcripts, registries and a
//! server-sent event feed per session.
//!
//! Mutating routes require `Authorization: Bearer <token>` when a token is
//! configured, and replay the stored response when retried with the same
//! `Idempotency-Key` (or `X-Request-Id`) header.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::{to_bytes, Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream};
use orchestra_core::coordinator::CoordinatorError;
use orchestra_core::kernel::{Kernel, KernelError};
use orchestra_core::planner::PlanState;
use orchestra_core::registry::{Modality, SourcePath};
use orchestra_core::session::{SessionConfig, SessionError, SessionState, DEFAULT_DRAIN};
use orchestra_core::stream::{encode_transcript, SessionId, StreamError, StreamId, StreamState};
use orchestra_core::value::EventRecord;
use parking_lot::Mutex;
use serde::Deserialize;
use serde_json::{json, Value as JsonValue};

/// Largest accepted request body.
const MAX_BODY: usize = 1 << 20;
/// Event feed poll interval while no new messages arrive.
const FEED_POLL: Duration = Duration::from_millis(20);
/// Retained idempotency entries before the oldest are evicted.
const IDEMPOTENCY_CAPACITY: usize = 4096;

pub struct Gateway {
    kernel: Arc<Kernel>,
    token: Option<String>,
    replies: Mutex<ReplyCache>,
}

#[derive(Default)]
struct ReplyCache {
    entries: HashMap<String, (StatusCode, Option<String>, Bytes)>,
    order: VecDeque<String>,
}

impl ReplyCache {
    fn insert(&mut self, key: String, value: (StatusCode, Option<String>, Bytes)) {
        if self.entries.insert(key.clone(), value).is_none() {
            self.order.push_back(key);
        }
        while self.order.len() > IDEMPOTENCY_CAPACITY {
            if let Some(old) = self.order.pop_front() {
                self.entries.remove(&old);
            }
        }
    }
}

impl Gateway {
    pub fn new(kernel: Arc<Kernel>, token: Option<String>) -> Arc<Self> {
        Arc::new(Self {
            kernel,
            token,
            replies: Mutex::new(ReplyCache::default()),
        })
    }

    pub fn kernel(&self) -> &Arc<Kernel> {
        &self.kernel
    }
}

/// Error body: `{"error": message, "status": code}`.
#[derive(Debug)]
pub struct ApiError(pub StatusCode, pub String);

impl ApiError {
    fn bad_request(msg: impl ToString) -> Self {
        ApiError(StatusCode::BAD_REQUEST, msg.to_string())
    }

    fn not_found(msg: impl ToString) -> Self {
        ApiError(StatusCode::NOT_FOUND, msg.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({"error": self.1, "status": self.0.as_u16()}))).into_response()
    }
}

impl From<StreamError> for ApiError {
    fn from(e: StreamError) -> Self {
        let status = match &e {
            StreamError::UnknownSession(_) | StreamError::UnknownStream(_) => StatusCode::NOT_FOUND,
            StreamError::SessionClosed(_) | StreamError::StreamClosed(_) => StatusCode::CONFLICT,
            StreamError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

impl From<CoordinatorError> for ApiError {
    fn from(e: CoordinatorError) -> Self {
        let status = match &e {
            CoordinatorError::UnknownSession(_) | CoordinatorError::UnknownPlan(_) => StatusCode::NOT_FOUND,
            CoordinatorError::NotProposed { .. } | CoordinatorError::NotAwaitingConfirm(_) => StatusCode::CONFLICT,
            CoordinatorError::Stream(s) => return s.clone().into(),
            _ => StatusCode::BAD_REQUEST,
        };
        ApiError(status, e.to_string())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::UnknownSession(_) | SessionError::UnknownScope(_) => ApiError::not_found(e),
            SessionError::SessionClosed(_) => ApiError(StatusCode::CONFLICT, e.to_string()),
            SessionError::Stream(s) => s.into(),
            SessionError::Coordinator(c) => c.into(),
            other => ApiError::bad_request(other),
        }
    }
}

impl From<KernelError> for ApiError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::Session(s) => s.into(),
            KernelError::Stream(s) => s.into(),
            other => ApiError(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return serde_json::from_str("{}").map_err(|e| ApiError::bad_request(format!("malformed payload: {e}")));
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed payload: {e}")))
}

fn known_session(g: &Gateway, id: &str) -> ApiResult<SessionId> {
    let s = SessionId::new(id);
    if !g.kernel.sessions.exists(&s) {
        return Err(ApiError::not_found(format!("unknown session {id}")));
    }
    Ok(s)
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session).get(list_sessions))
        .route("/v1/sessions/{id}", get(session_view).delete(close_session))
        .route("/v1/sessions/{id}/utterances", post(post_utterance))
        .route("/v1/sessions/{id}/events", post(post_event))
        .route("/v1/sessions/{id}/plans", get(list_plans))
        .route("/v1/sessions/{id}/plans/{plan}/{action}", post(plan_action))
        .route("/v1/sessions/{id}/streams", get(list_streams))
        .route("/v1/sessions/{id}/streams/{stream}", get(read_stream))
        .route("/v1/sessions/{id}/transcript", get(transcript))
        .route("/v1/sessions/{id}/feed", get(feed))
        .route("/v1/registry/agents", get(search_agents))
        .route("/v1/registry/agents/{name}", get(get_agent))
        .route("/v1/registry/sources", get(search_sources))
        .route("/v1/registry/children", get(list_children))
        .layer(middleware::from_fn_with_state(gateway.clone(), guard))
        .with_state(gateway)
}

/// Bearer check and idempotent replay for mutating requests.
async fn guard(State(g): State<Arc<Gateway>>, req: Request, next: Next) -> Response {
    let mutating = matches!(
        *req.method(),
        Method::POST | Method::DELETE | Method::PUT | Method::PATCH
    );
    if !mutating {
        return next.run(req).await;
    }
    if let Some(token) = &g.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError(StatusCode::UNAUTHORIZED, "missing or wrong bearer token".into()).into_response();
        }
    }
    let request_id = ["idempotency-key", "x-request-id"]
        .iter()
        .find_map(|h| req.headers().get(*h))
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    let Some(request_id) = request_id else {
        return next.run(req).await;
    };
    let key = format!("{} {} {}", req.method(), req.uri().path(), request_id);
    if let Some((status, content_type, body)) = g.replies.lock().entries.get(&key).cloned() {
        return stored_response(status, content_type, body);
    }
    let response = next.run(req).await;
    let (parts, body) = response.into_parts();
    let Ok(bytes) = to_bytes(body, MAX_BODY * 16).await else {
        return ApiError(StatusCode::INTERNAL_SERVER_ERROR, "response body unreadable".into()).into_response();
    };
    let content_type = parts
        .headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string);
    // Server errors are not cached so that a retry can succeed.
    if !parts.status.is_server_error() {
        g.replies
            .lock()
            .insert(key, (parts.status, content_type, bytes.clone()));
    }
    Response::from_parts(parts, Body::from(bytes))
}

fn stored_response(status: StatusCode, content_type: Option<String>, body: Bytes) -> Response {
    let mut r = Response::new(Body::from(body));
    *r.status_mut() = status;
    if let Some(ct) = content_type.and_then(|c| c.parse().ok()) {
        r.headers_mut().insert(header::CONTENT_TYPE, ct);
    }
    r
}

async fn health() -> Json<JsonValue> {
    Json(json!({"status": "ok"}))
}

async fn create_session(State(g): State<Arc<Gateway>>, body: Bytes) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let config: SessionConfig = parse(&body)?;
    let id = g.kernel.create_session(config)?;
    Ok((StatusCode::CREATED, Json(api_view(&g, &id)?)))
}

async fn list_sessions(State(g): State<Arc<Gateway>>) -> Json<JsonValue> {
    Json(json!({"sessions": g.kernel.sessions.list()}))
}

/// Session snapshot: state, participants, open streams, plans awaiting
/// approval or confirmation, and the budget.
fn api_view(g: &Gateway, id: &SessionId) -> ApiResult<JsonValue> {
    let view = g.kernel.sessions.view(id)?;
    let streams = g.kernel.substrate.streams(id)?;
    let open: Vec<&StreamId> = streams
        .iter()
        .filter(|s| s.state == StreamState::Open)
        .map(|s| &s.id)
        .collect();
    let plans = g.kernel.coordinator.plans(id);
    let pending: Vec<&str> = plans
        .iter()
        .filter(|r| r.plan.state == PlanState::Proposed)
        .map(|r| r.plan.id.as_str())
        .collect();
    let confirming: Vec<&str> = plans
        .iter()
        .filter(|r| r.awaiting_confirm)
        .map(|r| r.plan.id.as_str())
        .collect();
    Ok(json!({
        "session": view.id,
        "state": view.state,
        "participants": view.participants,
        "approval": view.approval,
        "session_stream": view.session_stream.id,
        "open_streams": open,
        "pending_approvals": pending,
        "pending_confirmations": confirming,
        "budget": view.budget,
    }))
}

async fn session_view(State(g): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<Json<JsonValue>> {
    let s = known_session(&g, &id)?;
    Ok(Json(api_view(&g, &s)?))
}

async fn close_session(State(g): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<Json<JsonValue>> {
    let s = known_session(&g, &id)?;
    let view = g.kernel.sessions.view(&s)?;
    if view.state == SessionState::Active {
        let k = g.kernel.clone();
        let target = s.clone();
        tokio::task::spawn_blocking(move || k.close_session(&target, DEFAULT_DRAIN))
            .await
            .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    }
    Ok(Json(api_view(&g, &s)?))
}

#[derive(Deserialize)]
struct Utterance {
    text: String,
}

async fn post_utterance(
    State(g): State<Arc<Gateway>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let s = known_session(&g, &id)?;
    let u: Utterance = parse(&body)?;
    if u.text.trim().is_empty() {
        return Err(ApiError::bad_request("text must be nonempty"));
    }
    let (stream, seq) = g.kernel.post_utterance(&s, &u.text)?;
    Ok((StatusCode::ACCEPTED, Json(json!({"stream": stream, "seq": seq}))))
}

async fn post_event(
    State(g): State<Arc<Gateway>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<JsonValue>)> {
    let s = known_session(&g, &id)?;
    let e: EventRecord = parse(&body)?;
    if e.action.trim().is_empty() {
        return Err(ApiError::bad_request("action must be nonempty"));
    }
    let (stream, seq) = g.kernel.post_event(&s, e)?;
    Ok((StatusCode::ACCEPTED, Json(json!({"stream": stream, "seq": seq}))))
}

async fn list_plans(State(g): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<Json<JsonValue>> {
    let s = known_session(&g, &id)?;
    Ok(Json(json!({"plans": g.kernel.coordinator.plans(&s)})))
}

#[derive(Deserialize)]
struct Revision {
    node: String,
    agent: String,
}

#[derive(Deserialize)]
struct Confirmation {
    approve: bool,
}

async fn plan_action(
    State(g): State<Arc<Gateway>>,
    Path((id, plan, action)): Path<(String, String, String)>,
    body: Bytes,
) -> ApiResult<Json<JsonValue>> {
    let s = known_session(&g, &id)?;
    let c = &g.kernel.coordinator;
    let seq = match action.as_str() {
        "approve" => c.decide(&s, &plan, "APPROVE", BTreeMap::new())?,
        "reject" => c.decide(&s, &plan, "REJECT", BTreeMap::new())?,
        "revise" => {
            let r: Revision = parse(&body)?;
            let extra = BTreeMap::from([
                ("node".to_string(), json!(r.node)),
                ("agent".to_string(), json!(r.agent)),
            ]);
            c.decide(&s, &plan, "REVISE", extra)?
        }
        "confirm" => {
            let r: Confirmation = parse(&body)?;
            c.confirm(&s, &plan, r.approve)?
        }
        other => return Err(ApiError::not_found(format!("unknown plan action {other:?}"))),
    };
    Ok(Json(json!({"plan": plan, "seq": seq})))
}

async fn list_streams(State(g): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<Json<JsonValue>> {
    let s = known_session(&g, &id)?;
    Ok(Json(json!({"streams": g.kernel.substrate.streams(&s)?})))
}

#[derive(Deserialize)]
struct FromQuery {
    #[serde(default)]
    from: Option<u64>,
}

async fn read_stream(
    State(g): State<Arc<Gateway>>,
    Path((id, stream)): Path<(String, String)>,
    Query(q): Query<FromQuery>,
) -> ApiResult<Json<JsonValue>> {
    let s = known_session(&g, &id)?;
    let stream = StreamId::new(stream);
    if stream.session().as_ref() != Some(&s) {
        return Err(ApiError::not_found(format!("unknown stream {stream}")));
    }
    let messages = g.kernel.substrate.read(&stream, q.from.unwrap_or(0))?;
    Ok(Json(json!({"stream": stream, "messages": messages})))
}

async fn transcript(State(g): State<Arc<Gateway>>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = known_session(&g, &id)?;
    let text = encode_transcript(&g.kernel.substrate.transcript(&s)?);
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

/// Server-sent events, one `message` event per transcript record with the
/// record's transcript position as event id. Resumes after `Last-Event-ID`
/// or from `?from=`; ends once the session is closed and fully delivered.
async fn feed(
    State(g): State<Arc<Gateway>>,
    Path(id): Path<String>,
    Query(q): Query<FromQuery>,
    headers: HeaderMap,
) -> ApiResult<Sse<impl Stream<Item = Result<Event, Infallible>>>> {
    let s = known_session(&g, &id)?;
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .map(|last| last + 1);
    let start = resume.or(q.from).unwrap_or(0) as usize;
    let state = (g, s, start, VecDeque::<Event>::new());
    let events = stream::unfold(state, |(g, s, mut cursor, mut pending)| async move {
        loop {
            if let Some(e) = pending.pop_front() {
                return Some((Ok(e), (g, s, cursor, pending)));
            }
            let active = g.kernel.substrate.is_session_active(&s);
            let fresh = g.kernel.substrate.transcript_from(&s, cursor).ok()?;
            if fresh.is_empty() {
                if !active {
                    return None;
                }
                tokio::time::sleep(FEED_POLL).await;
                continue;
            }
            for r in fresh {
                let data = serde_json::to_string(&r).expect("record serializes");
                pending.push_back(Event::default().id(cursor.to_string()).event("message").data(data));
                cursor += 1;
            }
        }
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

#[derive(Deserialize)]
struct Search {
    #[serde(default)]
    q: Option<String>,
    #[serde(default)]
    mode: Option<String>,
    #[serde(default)]
    k: Option<usize>,
    #[serde(default)]
    modality: Option<Modality>,
}

async fn search_agents(State(g): State<Arc<Gateway>>, Query(q): Query<Search>) -> ApiResult<Json<JsonValue>> {
    let agents = &g.kernel.agents;
    let Some(text) = q.q.filter(|t| !t.trim().is_empty()) else {
        return Ok(Json(json!({"agents": agents.list()})));
    };
    let k = q.k.unwrap_or(10);
    let hits = match q.mode.as_deref().unwrap_or("keyword") {
        "keyword" => agents
            .search_keyword(&text, k)
            .map_err(ApiError::bad_request)?
            .into_iter()
            .map(|r| json!({"agent": r, "score": JsonValue::Null}))
            .collect::<Vec<_>>(),
        "vector" => agents
            .search_vector(&text, k)
            .map_err(ApiError::bad_request)?
            .into_iter()
            .map(|(r, score)| json!({"agent": r, "score": score}))
            .collect(),
        other => return Err(ApiError::bad_request(format!("unknown search mode {other:?}"))),
    };
    Ok(Json(json!({"hits": hits})))
}

async fn get_agent(State(g): State<Arc<Gateway>>, Path(name): Path<String>) -> ApiResult<Json<JsonValue>> {
    g.kernel
        .agents
        .get(&name)
        .map(|r| Json(json!(r)))
        .ok_or_else(|| ApiError::not_found(format!("unknown agent {name:?}")))
}

async fn search_sources(State(g): State<Arc<Gateway>>, Query(q): Query<Search>) -> ApiResult<Json<JsonValue>> {
    let data = &g.kernel.data;
    let Some(text) = q.q.filter(|t| !t.trim().is_empty()) else {
        let all = match q.modality {
            Some(m) => data.by_modality(m),
            None => data.list(),
        };
        return Ok(Json(json!({"sources": all})));
    };
    let hits: Vec<JsonValue> = data
        .discover(&text, q.modality, q.k.unwrap_or(10))
        .map_err(ApiError::bad_request)?
        .into_iter()
        .map(|(r, score)| json!({"source": r, "score": score}))
        .collect();
    Ok(Json(json!({"hits": hits})))
}

#[derive(Deserialize)]
struct Children {
    path: String,
}

async fn list_children(State(g): State<Arc<Gateway>>, Query(q): Query<Children>) -> ApiResult<Json<JsonValue>> {
    let path = SourcePath::parse(&q.path).map_err(ApiError::bad_request)?;
    let children = g.kernel.data.list_children(&path).map_err(ApiError::not_found)?;
    Ok(Json(json!({"path": path, "children": children})))
}
