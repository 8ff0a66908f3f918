mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use common::*;
use orchestra_core::session::DEFAULT_DRAIN;
use orchestra_core::stream::{encode_transcript, SessionId};
use serde_json::{json, Value as Json};

const JOB_SEARCH: &str = "I am looking for a data scientist position in SF bay area.";

fn pending(s: &Server, session: &str, key: &str) -> Option<String> {
    let (_, v) = s.get(&format!("/v1/sessions/{session}"));
    v[key].as_array()?.last()?.as_str().map(str::to_string)
}

#[test]
fn utterance_is_accepted_and_intent_reaches_the_feed_within_a_second() {
    let s = server();
    let id = s.session(json!({}));
    let feed = s.feed(&id, None);
    let posted = Instant::now();
    let (status, v) = s.post(&format!("/v1/sessions/{id}/utterances"), &json!({"text": JOB_SEARCH}));
    assert_eq!(status, 202, "{v}");
    assert!(v["stream"].as_str().unwrap().starts_with(&format!("SESSION:{id}:")));
    assert_eq!(v["seq"], 1);
    let intent_at = loop {
        let (_, r, at) = feed.recv_timeout(Duration::from_secs(5)).expect("INTENT on feed");
        if has_tag(&r, "INTENT") {
            break at;
        }
    };
    let lag = intent_at.duration_since(posted);
    assert!(lag < Duration::from_secs(1), "INTENT after {lag:?}");
}

#[test]
fn feed_delivers_exactly_what_read_returns() {
    let s = server();
    let id = s.session(json!({}));
    let feed = s.feed(&id, None);
    s.post(&format!("/v1/sessions/{id}/utterances"), &json!({"text": JOB_SEARCH}));
    assert!(s.kernel.settle(Duration::from_secs(20)));
    let (status, _) = s.delete(&format!("/v1/sessions/{id}"));
    assert_eq!(status, 200);

    // The feed ends once the closed session is fully delivered.
    let mut ids = Vec::new();
    let mut by_stream: BTreeMap<String, Vec<Json>> = BTreeMap::new();
    while let Ok((n, r, _)) = feed.recv_timeout(Duration::from_secs(10)) {
        ids.push(n);
        by_stream
            .entry(r["stream"].as_str().unwrap().to_string())
            .or_default()
            .push(r);
    }
    assert_eq!(ids, (0..ids.len() as u64).collect::<Vec<_>>());

    let (_, listing) = s.get(&format!("/v1/sessions/{id}/streams"));
    let streams: Vec<String> = listing["streams"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["id"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(streams.len(), by_stream.len());
    for stream in &streams {
        let (status, read) = s.get(&format!("/v1/sessions/{id}/streams/{stream}"));
        assert_eq!(status, 200);
        let read = read["messages"].as_array().unwrap();
        let fed = &by_stream[stream];
        assert_eq!(read.len(), fed.len(), "{stream}");
        for (m, r) in read.iter().zip(fed) {
            for key in ["seq", "kind", "tags", "payload", "producer", "session", "ts"] {
                assert_eq!(m[key], r[key], "{stream} {key}");
            }
        }
    }

    // Resuming from a position replays the tail only.
    let tail: Vec<u64> = s.feed(&id, Some(5)).iter().map(|(n, _, _)| n).collect();
    assert_eq!(tail, (5..ids.len() as u64).collect::<Vec<_>>());
}

#[test]
fn closed_session_transcript_matches_the_file_export() {
    let s = server();
    let id = s.session(json!({}));
    s.post(
        &format!("/v1/sessions/{id}/events"),
        &json!({"action": "select_job", "data": {"job_id": 12}}),
    );
    assert!(s.kernel.settle(Duration::from_secs(20)));
    s.delete(&format!("/v1/sessions/{id}"));

    let (status, text) = s.get_text(&format!("/v1/sessions/{id}/transcript"));
    assert_eq!(status, 200);
    let session = SessionId::new(&id);
    assert_eq!(
        text,
        encode_transcript(&s.kernel.substrate.transcript(&session).unwrap())
    );
    assert_eq!(text, s.kernel.substrate.dump(&session).unwrap());

    let lines: Vec<Json> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let root = format!("SESSION:{id}");
    assert_eq!(
        (lines[0]["stream"].as_str(), lines[0]["kind"].as_str()),
        (Some(root.as_str()), Some("BOS"))
    );
    let last = lines.last().unwrap();
    assert_eq!(
        (last["stream"].as_str(), last["kind"].as_str()),
        (Some(root.as_str()), Some("EOS"))
    );

    let dir = tempfile::TempDir::new().unwrap();
    let out = dir.path().join("dump.jsonl");
    orchestra_cli::commands::dump(&s.base, &id, Some(TOKEN), Some(&out), &mut std::io::sink()).unwrap();
    assert_eq!(std::fs::read_to_string(&out).unwrap(), text);
}

#[test]
fn plan_decisions_follow_the_plan_state() {
    let s = server();
    let id = s.session(json!({"approval": "INTERACTIVE"}));
    s.post(&format!("/v1/sessions/{id}/utterances"), &json!({"text": JOB_SEARCH}));
    let plan = wait_for(Duration::from_secs(10), || pending(&s, &id, "pending_approvals")).expect("proposed plan");

    let (status, v) = s.post(
        &format!("/v1/sessions/{id}/plans/{plan}/revise"),
        &json!({"node": "n3", "agent": "Query Summarizer"}),
    );
    assert_eq!(status, 200, "{v}");
    assert!(s.kernel.settle(Duration::from_secs(20)));
    let revised = pending(&s, &id, "pending_approvals").expect("revised plan");
    assert_ne!(revised, plan);

    // The superseded plan is no longer PROPOSED.
    let (status, v) = s.post(&format!("/v1/sessions/{id}/plans/{plan}/approve"), &json!({}));
    assert_eq!(status, 409, "{v}");

    let (status, v) = s.post(&format!("/v1/sessions/{id}/plans/{revised}/approve"), &json!({}));
    assert_eq!(status, 200, "{v}");
    assert!(s.kernel.settle(Duration::from_secs(20)));
    let (status, _) = s.post(&format!("/v1/sessions/{id}/plans/{revised}/approve"), &json!({}));
    assert_eq!(status, 409);
    let (status, _) = s.post(&format!("/v1/sessions/{id}/plans/{revised}/reject"), &json!({}));
    assert_eq!(status, 409);

    let (_, plans) = s.get(&format!("/v1/sessions/{id}/plans"));
    let states: Vec<&str> = plans["plans"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["plan"]["state"].as_str().unwrap())
        .collect();
    assert_eq!(states.len(), 2, "{plans}");
}

#[test]
fn approving_an_executing_plan_conflicts_and_confirm_resumes_it() {
    let s = server();
    let id = s.session(json!({"budget": {"allocated": {"cost": 2.5}, "policy": "CONFIRM"}}));
    s.post(&format!("/v1/sessions/{id}/utterances"), &json!({"text": JOB_SEARCH}));
    let plan = wait_for(Duration::from_secs(10), || pending(&s, &id, "pending_confirmations")).expect("confirmation");

    let (status, v) = s.post(&format!("/v1/sessions/{id}/plans/{plan}/approve"), &json!({}));
    assert_eq!(status, 409, "{v}");
    assert!(v["error"].as_str().unwrap().contains("Executing"), "{v}");

    let (status, v) = s.post(
        &format!("/v1/sessions/{id}/plans/{plan}/confirm"),
        &json!({"approve": true}),
    );
    assert_eq!(status, 200, "{v}");
    assert!(s.kernel.settle(Duration::from_secs(20)));
    let (status, _) = s.post(
        &format!("/v1/sessions/{id}/plans/{plan}/confirm"),
        &json!({"approve": true}),
    );
    assert_eq!(status, 409);
    let (_, plans) = s.get(&format!("/v1/sessions/{id}/plans"));
    assert_eq!(plans["plans"][0]["plan"]["state"], "COMPLETED", "{plans}");
}

#[test]
fn unknown_resources_are_404() {
    let s = server();
    let id = s.session(json!({}));
    assert_eq!(s.get("/v1/sessions/S999").0, 404);
    assert_eq!(s.get("/v1/sessions/S999/transcript").0, 404);
    assert_eq!(s.get("/v1/sessions/S999/feed").0, 404);
    assert_eq!(s.post("/v1/sessions/S999/utterances", &json!({"text": "hi"})).0, 404);
    assert_eq!(
        s.get(&format!("/v1/sessions/{id}/streams/SESSION:{id}:AGENT:NOBODY:0"))
            .0,
        404
    );
    assert_eq!(s.get(&format!("/v1/sessions/{id}/streams/SESSION:S999")).0, 404);
    assert_eq!(
        s.post(&format!("/v1/sessions/{id}/plans/P-000000/approve"), &json!({}))
            .0,
        404
    );
    assert_eq!(s.get("/v1/registry/agents/Nobody").0, 404);
}

#[test]
fn malformed_payloads_are_400() {
    let s = server();
    let id = s.session(json!({}));
    let path = format!("/v1/sessions/{id}/utterances");
    for raw in ["{", "[]", "{\"txt\": 1}", "{\"text\": 5}", "{\"text\": \"  \"}"] {
        let (status, v) = s.post_with(&path, raw.to_string(), Some(TOKEN), None);
        assert_eq!(status, 400, "{raw}: {v}");
    }
    let (status, _) = s.post_with(
        "/v1/sessions",
        "{\"approval\": \"SOMETIMES\"}".into(),
        Some(TOKEN),
        None,
    );
    assert_eq!(status, 400);
    let (status, _) = s.post(&format!("/v1/sessions/{id}/events"), &json!({"data": {}}));
    assert_eq!(status, 400);
}

#[test]
fn mutating_routes_require_the_bearer_token() {
    let s = server();
    let (status, _) = s.post_with("/v1/sessions", "{}".into(), None, None);
    assert_eq!(status, 401);
    let (status, _) = s.post_with("/v1/sessions", "{}".into(), Some("wrong"), None);
    assert_eq!(status, 401);
    let id = s.session(json!({}));
    let r = s.client.delete(s.url(&format!("/v1/sessions/{id}"))).send().unwrap();
    assert_eq!(r.status().as_u16(), 401);
    // Reads stay open.
    assert_eq!(s.get(&format!("/v1/sessions/{id}")).0, 200);
}

#[test]
fn retried_requests_with_the_same_id_are_applied_once() {
    let s = server();
    let a = s.post_with("/v1/sessions", "{}".into(), Some(TOKEN), Some("create-1"));
    let b = s.post_with("/v1/sessions", "{}".into(), Some(TOKEN), Some("create-1"));
    assert_eq!(a, b);
    assert_eq!(a.0, 201);
    let id = a.1["session"].as_str().unwrap().to_string();
    let (_, list) = s.get("/v1/sessions");
    assert_eq!(list["sessions"].as_array().unwrap().len(), 1);

    let path = format!("/v1/sessions/{id}/utterances");
    let body = json!({"text": "How many applicants have python skills?"}).to_string();
    let first = s.post_with(&path, body.clone(), Some(TOKEN), Some("utt-1"));
    let again = s.post_with(&path, body.clone(), Some(TOKEN), Some("utt-1"));
    assert_eq!(first, again);
    assert_eq!(first.0, 202);
    assert!(s.kernel.settle(Duration::from_secs(20)));
    let stream = first.1["stream"].as_str().unwrap();
    let (_, read) = s.get(&format!("/v1/sessions/{id}/streams/{stream}"));
    let users = read["messages"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|m| has_tag(m, "USER"))
        .count();
    assert_eq!(users, 1);

    // A new id is a new request.
    let other = s.post_with(&path, body, Some(TOKEN), Some("utt-2"));
    assert_eq!(other.1["seq"], 2);
}

#[test]
fn registries_are_browsable() {
    let s = server();
    let (_, all) = s.get("/v1/registry/agents");
    assert_eq!(all["agents"].as_array().unwrap().len(), 11);
    let (_, hits) = s.get("/v1/registry/agents?q=matcher");
    assert_eq!(hits["hits"][0]["agent"]["descriptor"]["name"], "Job Matcher");
    let (_, hits) = s.get("/v1/registry/agents?q=match%20job%20seeker%20profile&mode=vector&k=3");
    assert_eq!(hits["hits"].as_array().unwrap().len(), 3);
    assert_eq!(s.get("/v1/registry/agents?q=x&mode=fuzzy").0, 400);
    let (status, one) = s.get("/v1/registry/agents/Profiler");
    assert_eq!(status, 200);
    assert_eq!(one["descriptor"]["name"], "Profiler");

    let (_, graphs) = s.get("/v1/registry/sources?q=title%20taxonomy&modality=GRAPH");
    let paths: Vec<&str> = graphs["hits"]
        .as_array()
        .unwrap()
        .iter()
        .map(|h| h["source"]["path"].as_str().unwrap())
        .collect();
    assert_eq!(paths, ["/kg/Taxonomy/Titles"]);
    let (status, children) = s.get("/v1/registry/children?path=/hr/HR");
    assert_eq!(status, 200, "{children}");
    assert!(
        children["children"]
            .as_array()
            .unwrap()
            .iter()
            .any(|c| c == "/hr/HR/Jobs"),
        "{children}"
    );
}

#[test]
fn closed_sessions_refuse_input() {
    let s = server();
    let id = s.session(json!({}));
    s.kernel.close_session(&SessionId::new(&id), DEFAULT_DRAIN).unwrap();
    let (status, _) = s.post(&format!("/v1/sessions/{id}/utterances"), &json!({"text": "hello"}));
    assert_eq!(status, 409);
    let (_, v) = s.get(&format!("/v1/sessions/{id}"));
    assert_eq!(v["state"], "CLOSED");
}
