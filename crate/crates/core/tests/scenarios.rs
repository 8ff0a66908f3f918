mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use common::*;
use orchestra_core::scenario::{self, Scenario, ScenarioError, Step};
use orchestra_core::stream::{MessageKind, TranscriptRecord};
use orchestra_core::transcript;
use serde_json::Value as Json;

const SHIPPED: [&str; 8] = [
    "select_job",
    "open_query",
    "running_example",
    "budget_abort",
    "budget_confirm",
    "budget_replan",
    "interactive_revise",
    "smalltalk_and_list",
];

fn scenario(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.yaml"));
    Scenario::load(&path).unwrap()
}

fn run(name: &str) -> (Vec<TranscriptRecord>, Duration) {
    let (_d, k) = kernel();
    let r = scenario::run(&k, &scenario(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    (r.transcript, r.elapsed)
}

fn json(r: &TranscriptRecord) -> Json {
    r.payload.to_json()["value"].clone()
}

fn content(t: &[TranscriptRecord]) -> Vec<&TranscriptRecord> {
    t.iter()
        .filter(|r| matches!(r.kind, MessageKind::Data | MessageKind::Control))
        .collect()
}

fn rows(dir: &Path, file: &str) -> Vec<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(dir.join("data").join(file)).unwrap();
    rdr.deserialize().map(|r| r.unwrap()).collect()
}

fn seed_dir() -> tempfile::TempDir {
    let dir = tempfile::TempDir::new().unwrap();
    orchestra_core::seeds::generate(orchestra_core::seeds::DEFAULT_SEED)
        .write(dir.path())
        .unwrap();
    dir
}

#[test]
fn every_shipped_scenario_meets_its_expectations() {
    for name in SHIPPED {
        let (t, _) = run(name);
        assert!(!t.is_empty(), "{name}");
    }
}

#[test]
fn shipped_scenarios_are_deterministic() {
    for name in SHIPPED {
        let (a, _) = run(name);
        let (b, _) = run(name);
        let d = transcript::diff(&transcript::normalize(&a), &transcript::normalize(&b));
        assert!(d.is_empty(), "{name}: {d:#?}");
    }
}

#[test]
fn select_job_event_runs_the_summarizer() {
    let (t, elapsed) = run("select_job");
    assert!(elapsed < Duration::from_secs(5));
    let c = content(&t);
    let pos = |pred: &dyn Fn(&TranscriptRecord) -> bool| c.iter().position(|r| pred(r)).unwrap();
    let event = pos(&|r| r.tags.contains("EVENT"));
    let plan = pos(&|r| r.kind == MessageKind::Data && r.tags.contains("PLAN"));
    let execute = pos(&|r| r.instruction() == Some("EXECUTE"));
    let result = pos(&|r| r.tags.contains("RESULT"));
    assert!(event < plan && plan < execute && execute < result);

    let executes: Vec<_> = c.iter().filter(|r| r.instruction() == Some("EXECUTE")).collect();
    assert_eq!(executes.len(), 1);
    assert_eq!(json(executes[0])["agent"], "Summarizer");
    assert_eq!(c[result].producer, "Summarizer");

    // Oracle: the summary recomputed from the CSV files.
    let dir = seed_dir();
    let job = rows(dir.path(), "jobs.csv")
        .into_iter()
        .find(|r| r["id"] == "12")
        .unwrap();
    let applicants: Vec<_> = rows(dir.path(), "applicants.csv")
        .into_iter()
        .filter(|r| r["job_id"] == "12")
        .collect();
    assert!(!applicants.is_empty());
    let mean = applicants
        .iter()
        .map(|r| r["years"].parse::<f64>().unwrap())
        .sum::<f64>()
        / applicants.len() as f64;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in &applicants {
        for s in a["skills"].split(';') {
            *counts.entry(s.to_string()).or_default() += 1;
        }
    }
    let mut ranked: Vec<_> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let top: Vec<_> = ranked.iter().take(3).map(|(s, _)| s.as_str()).collect();
    let noun = if applicants.len() == 1 {
        "applicant"
    } else {
        "applicants"
    };
    let expected = format!(
        "Job 12 ({} at {}) has {} {noun} with {mean:.1} years of experience on average. Top skills: {}.",
        job["title"],
        job["company"],
        applicants.len(),
        top.join(", ")
    );
    assert_eq!(json(c[result]), Json::String(expected));
}

#[test]
fn open_query_chain_fires_by_tags_alone() {
    let (t, elapsed) = run("open_query");
    assert!(elapsed < Duration::from_secs(5));
    let c = content(&t);
    let order: Vec<&str> = ["INTENT", "NLQ", "SQL", "QRESULT", "RESULT"]
        .into_iter()
        .filter(|tag| c.iter().any(|r| r.tags.contains(*tag)))
        .collect();
    assert_eq!(order.len(), 5);
    let first = |tag: &str| c.iter().position(|r| r.tags.contains(tag)).unwrap();
    assert!(first("INTENT") < first("NLQ"));
    assert!(first("NLQ") < first("SQL"));
    assert!(first("SQL") < first("QRESULT"));
    assert!(first("QRESULT") < first("RESULT"));
    assert_eq!(controls(&t, "EXECUTE").len(), 0);
    assert!(c
        .iter()
        .all(|r| !(r.kind == MessageKind::Data && r.tags.contains("PLAN"))));

    let dir = seed_dir();
    let n = rows(dir.path(), "applicants.csv")
        .iter()
        .filter(|r| r["skills"].split(';').any(|s| s == "python"))
        .count();
    let result = c.iter().find(|r| r.tags.contains("RESULT")).unwrap();
    assert_eq!(
        json(result),
        Json::String(format!("There are {n} applicants with python skills."))
    );
}

fn accrued_is_monotone(t: &[TranscriptRecord]) {
    let mut last = (0.0f64, 0.0f64);
    for r in controls(t, "BUDGET") {
        let a = &json(r)["accrued"];
        let now = (a["cost"].as_f64().unwrap(), a["latency_ms"].as_f64().unwrap());
        assert!(now.0 >= last.0 && now.1 >= last.1, "{last:?} -> {now:?}");
        last = now;
    }
}

#[test]
fn accrued_cost_and_latency_never_decrease() {
    for name in SHIPPED {
        let (t, _) = run(name);
        accrued_is_monotone(&t);
    }
}

#[test]
fn abort_policy_stops_dispatch_at_the_violation() {
    let (t, _) = run("budget_abort");
    let aborted = controls(&t, "ABORTED");
    assert_eq!(aborted.len(), 1);
    let v = json(aborted[0]);
    assert_eq!(v["reason"], "BUDGET_EXCEEDED");
    assert_eq!(v["node"], "n2");
    let at = t.iter().position(|r| std::ptr::eq(r, aborted[0])).unwrap();
    let after = &t[at + 1..];
    assert!(after.iter().all(|r| r.instruction() != Some("EXECUTE")));
    assert!(after
        .iter()
        .all(|r| !(r.kind == MessageKind::Data && r.tags.contains("DIRECTED"))));
    assert_eq!(controls(&t, "EXECUTE").len(), 1);
    assert!(controls(&t, "COMPLETED").is_empty());
}

#[test]
fn confirm_policy_waits_then_resumes() {
    let (t, _) = run("budget_confirm");
    let request = t
        .iter()
        .position(|r| r.instruction() == Some("CONFIRM_REQUEST"))
        .unwrap();
    let answer = t.iter().position(|r| r.instruction() == Some("CONFIRM")).unwrap();
    assert!(request < answer);
    let v = json(&t[request]);
    assert_eq!(v["node"], "n2");
    assert_eq!(v["dimensions"], serde_json::json!(["COST"]));
    let executes: Vec<usize> = t
        .iter()
        .enumerate()
        .filter(|(_, r)| r.instruction() == Some("EXECUTE"))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(executes.len(), 3);
    assert!(executes[0] < request && executes[1] > answer);
    assert_eq!(json(&t[executes[1]])["node"], "n2");
    assert_eq!(controls(&t, "COMPLETED").len(), 1);
}

#[test]
fn replan_policy_proposes_a_new_plan() {
    let (t, _) = run("budget_replan");
    let replan = t.iter().position(|r| r.instruction() == Some("REPLAN")).unwrap();
    let plans: Vec<(usize, Json)> = t
        .iter()
        .enumerate()
        .filter(|(_, r)| r.kind == MessageKind::Data && r.tags.contains("PLAN"))
        .map(|(i, r)| (i, json(r)))
        .collect();
    assert_eq!(plans.len(), 2);
    let (at, new) = &plans[1];
    assert!(*at > replan);
    assert_eq!(new["state"], "PROPOSED");
    assert_ne!(new["id"], plans[0].1["id"]);
    assert!(new["revision"].as_u64().unwrap() > plans[0].1["revision"].as_u64().unwrap());
}

#[test]
fn interactive_mode_waits_for_approval_and_applies_revisions() {
    let (t, _) = run("interactive_revise");
    let approvals: Vec<usize> = t
        .iter()
        .enumerate()
        .filter(|(_, r)| r.instruction() == Some("APPROVE"))
        .map(|(i, _)| i)
        .collect();
    assert_eq!(approvals.len(), 2);
    let first_execute = t.iter().position(|r| r.instruction() == Some("EXECUTE")).unwrap();
    assert!(first_execute > approvals[0]);
    let revised = t
        .iter()
        .filter(|r| r.kind == MessageKind::Data && r.tags.contains("PLAN"))
        .map(json)
        .find(|p| p["revision"] == 1)
        .unwrap();
    let n3 = revised["nodes"]
        .as_array()
        .unwrap()
        .iter()
        .find(|n| n["id"] == "n3")
        .unwrap();
    assert_eq!(n3["agent"], "Query Summarizer");
    let last_execute = controls(&t, "EXECUTE").last().map(|r| json(r)).unwrap();
    assert_eq!(last_execute["agent"], "Query Summarizer");
    assert_eq!(controls(&t, "COMPLETED").len(), 2);

    let profile = t.iter().rfind(|r| r.tags.contains("PROFILE")).map(json).unwrap();
    assert_eq!(profile["years"], 6.0);
    assert_eq!(profile["skills"], serde_json::json!(["python", "sql"]));
}

#[test]
fn shortlist_edits_accumulate_within_a_session() {
    let (t, _) = run("smalltalk_and_list");
    let lists: Vec<Json> = t.iter().filter(|r| r.tags.contains("SHORTLIST")).map(json).collect();
    assert_eq!(lists.len(), 2);
    assert_eq!(lists[0]["items"], serde_json::json!(["7", "9"]));
    assert_eq!(lists[1]["items"], serde_json::json!(["9"]));
}

#[test]
fn failed_expectation_is_reported() {
    let mut s = scenario("open_query");
    s.steps.push(Step::Expect(vec!["NO_SUCH_TAG".into()]));
    let (_d, k) = kernel();
    match scenario::run(&k, &s) {
        Err(ScenarioError::Mismatch { step, .. }) => assert_eq!(step, s.steps.len()),
        other => panic!("expected a mismatch, got {:?}", other.map(|r| r.transcript.len())),
    }
    let mut s = scenario("select_job");
    s.steps.truncate(1);
    s.steps.push(Step::Absent(vec!["EXECUTE".into()]));
    let (_d, k) = kernel();
    assert!(matches!(scenario::run(&k, &s), Err(ScenarioError::Mismatch { .. })));
}
