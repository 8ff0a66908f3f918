//! HR agents: profile collection, job matching, result presentation and
//! applicant summaries.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use parking_lot::Mutex;
use serde_json::{json, Value as Json};
use sha2::{Digest, Sha256};

use super::text_input;
use crate::dataplan::{parse_frame, DataPlanner, Graph};
use crate::registry::tokenize;
use crate::runtime::{InputTuple, Output, Processor, ProcessorContext, ProcessorError};
use crate::value::{json_text, FormField, FormSpec, SemanticType, Table, Value};

/// Taxonomy distance beyond which titles are unrelated.
const MAX_TITLE_HOPS: usize = 2;
/// Least title similarity a match needs: two taxonomy hops.
pub const MIN_TITLE_SIMILARITY: f64 = 0.25;

const JOB_COLUMNS: [&str; 4] = ["id", "title", "company", "city"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchWeights {
    pub title: f64,
    pub location: f64,
    pub skills: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            title: 0.5,
            location: 0.3,
            skills: 0.2,
        }
    }
}

fn jaccard(a: &str, b: &str) -> f64 {
    let a: BTreeSet<String> = tokenize(a).into_iter().collect();
    let b: BTreeSet<String> = tokenize(b).into_iter().collect();
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    a.intersection(&b).count() as f64 / a.union(&b).count() as f64
}

/// Larger of token Jaccard and `0.5^hops` in the title taxonomy.
pub fn title_similarity(wanted: &str, title: &str, taxonomy: Option<&Graph>) -> f64 {
    let lexical = jaccard(wanted, title);
    let structural = taxonomy
        .and_then(|g| g.hops(wanted, title, MAX_TITLE_HOPS))
        .map(|h| 0.5f64.powi(h as i32))
        .unwrap_or(0.0);
    lexical.max(structural)
}

fn text_list(value: Option<&Json>) -> Vec<String> {
    match value {
        Some(Json::Array(items)) => items.iter().map(json_text).filter(|s| !s.is_empty()).collect(),
        Some(Json::String(s)) => split_list(s),
        _ => Vec::new(),
    }
}

fn split_list(s: &str) -> Vec<String> {
    s.split([',', ';'])
        .map(|p| p.trim().to_string())
        .filter(|p| !p.is_empty())
        .collect()
}

/// Keeps jobs whose title is related to the wanted one (similarity at
/// least [`MIN_TITLE_SIMILARITY`]) and whose city is among the profile
/// cities, if any are given. Rows are ranked by the weighted score, ties
/// broken by id.
pub fn match_jobs(
    profile: &BTreeMap<String, Json>,
    jobs: &Table,
    taxonomy: Option<&Graph>,
    weights: MatchWeights,
) -> Result<Table, String> {
    for c in JOB_COLUMNS {
        if jobs.column_index(c).is_none() {
            return Err(format!("jobs table has no {c} column"));
        }
    }
    let wanted = profile.get("title").map(json_text).unwrap_or_default();
    let mut cities: BTreeSet<String> = text_list(profile.get("cities"))
        .iter()
        .map(|c| c.to_lowercase())
        .collect();
    if let Some(loc) = profile.get("location").map(json_text).filter(|l| !l.is_empty()) {
        cities.insert(loc.to_lowercase());
    }
    let skills: BTreeSet<String> = text_list(profile.get("skills"))
        .iter()
        .map(|s| s.to_lowercase())
        .collect();
    let skill_col = jobs.column_index("skills");
    let mut scored: Vec<(f64, Json, Vec<Json>)> = Vec::new();
    for (i, row) in jobs.rows.iter().enumerate() {
        let cell = |c: &str| jobs.cell(i, c).cloned().unwrap_or(Json::Null);
        let title = json_text(&cell("title"));
        let city = json_text(&cell("city")).to_lowercase();
        let t = title_similarity(&wanted, &title, taxonomy);
        let located = cities.contains(&city);
        if t < MIN_TITLE_SIMILARITY || (!cities.is_empty() && !located) {
            continue;
        }
        let l = if located { 1.0 } else { 0.0 };
        let s = match skill_col {
            Some(k) if !skills.is_empty() => {
                let have: BTreeSet<String> = split_list(&json_text(&row[k]))
                    .iter()
                    .map(|x| x.to_lowercase())
                    .collect();
                skills.intersection(&have).count() as f64 / skills.len() as f64
            }
            _ => 0.0,
        };
        let score = weights.title * t + weights.location * l + weights.skills * s;
        let score = (score * 1000.0).round() / 1000.0;
        scored.push((
            score,
            cell("id"),
            vec![cell("id"), cell("title"), cell("company"), cell("city"), json!(score)],
        ));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| crate::dataplan::sql::compare_cells(&a.1, &b.1))
    });
    let mut columns: Vec<String> = JOB_COLUMNS.iter().map(|c| c.to_string()).collect();
    columns.push("score".into());
    Ok(Table::with_rows(
        columns,
        scored.into_iter().map(|(_, _, r)| r).collect(),
    ))
}

/// Collects the job seeker profile. A directed run parses the criteria,
/// resolves the location to concrete cities through the data planner,
/// emits the profile form and an initial profile. A form submission
/// updates the pending profile and emits it again.
pub struct Profiler {
    data: Arc<DataPlanner>,
    pending: Mutex<BTreeMap<String, BTreeMap<String, Json>>>,
}

impl Profiler {
    pub fn new(data: Arc<DataPlanner>) -> Self {
        Self {
            data,
            pending: Mutex::new(BTreeMap::new()),
        }
    }

    /// Cities the location phrase stands for; the phrase itself when no
    /// lookup plan runs.
    fn cities(&self, location: &str, ctx: &mut ProcessorContext) -> Vec<String> {
        if location.is_empty() {
            return Vec::new();
        }
        let found = self
            .data
            .plan_lookup("city", location)
            .and_then(|plan| self.data.execute(&plan, None));
        match found {
            Ok((Value::Table(t), charge)) => {
                ctx.charge(charge.cost, charge.latency_ms);
                let col = t.columns.first().cloned().unwrap_or_default();
                let cities = t.column_text(&col).unwrap_or_default();
                if cities.is_empty() {
                    vec![location.to_string()]
                } else {
                    cities
                }
            }
            Ok((_, charge)) => {
                ctx.charge(charge.cost, charge.latency_ms);
                vec![location.to_string()]
            }
            Err(e) => {
                tracing::warn!(location, error = %e, "city lookup failed");
                vec![location.to_string()]
            }
        }
    }

    fn form(form_id: &str, profile: &BTreeMap<String, Json>) -> FormSpec {
        let field = |name: &str, label: &str, kind: SemanticType| FormField {
            name: name.to_string(),
            label: label.to_string(),
            kind,
            value: match profile.get(name) {
                Some(Json::Array(items)) => json!(items.iter().map(json_text).collect::<Vec<_>>().join(", ")),
                Some(v) => v.clone(),
                None => Json::Null,
            },
        };
        FormSpec {
            form_id: form_id.to_string(),
            title: "Job seeker profile".to_string(),
            fields: vec![
                field("title", "Desired title", SemanticType::Text),
                field("location", "Location", SemanticType::Text),
                field("years", "Years of experience", SemanticType::Number),
                field("skills", "Skills", SemanticType::Text),
            ],
        }
    }
}

impl Processor for Profiler {
    fn process(&self, inputs: &InputTuple, ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        if let Some(Value::Event(event)) = inputs.get("Submission") {
            let form_id = event.form_id.clone().unwrap_or_default();
            let mut profile = self.pending.lock().get(&form_id).cloned().unwrap_or_default();
            let old_location = profile.get("location").map(json_text).unwrap_or_default();
            for (k, v) in &event.data {
                let v = match k.as_str() {
                    "skills" => json!(text_list(Some(v))),
                    "years" => json_text(v)
                        .trim()
                        .parse::<f64>()
                        .map(|n| json!(n))
                        .unwrap_or(Json::Null),
                    _ => v.clone(),
                };
                profile.insert(k.clone(), v);
            }
            let location = profile.get("location").map(json_text).unwrap_or_default();
            if location != old_location || !profile.contains_key("cities") {
                profile.insert("cities".into(), json!(self.cities(&location, ctx)));
            }
            profile.insert("form_id".into(), json!(form_id));
            self.pending.lock().insert(form_id, profile.clone());
            return Ok(vec![Output::new("Profile", Value::Record(profile))]);
        }
        let criteria = text_input(inputs, "Criteria").unwrap_or_default();
        let frame = parse_frame(criteria);
        let phrase = |field: &str| {
            frame
                .iter()
                .find(|p| p.field == field)
                .map(|p| p.text.clone())
                .unwrap_or_default()
        };
        let (title, location) = (phrase("title"), phrase("city"));
        let form_id = {
            let mut h = Sha256::new();
            h.update(ctx.session.as_str().as_bytes());
            h.update([0]);
            h.update(criteria.as_bytes());
            let digest = h.finalize();
            format!(
                "FORM-{}",
                digest[..4].iter().map(|b| format!("{b:02x}")).collect::<String>()
            )
        };
        let mut profile = BTreeMap::from([
            ("title".to_string(), json!(title)),
            ("location".to_string(), json!(location)),
            ("years".to_string(), Json::Null),
            ("skills".to_string(), json!([])),
        ]);
        let form = Self::form(&form_id, &profile);
        profile.insert("cities".into(), json!(self.cities(&location, ctx)));
        profile.insert("form_id".into(), json!(form_id));
        self.pending.lock().insert(form_id, profile.clone());
        Ok(vec![
            Output::new("Form", Value::Form(form)),
            Output::new("Profile", Value::Record(profile)),
        ])
    }
}

pub(super) struct JobMatcher {
    data: Arc<DataPlanner>,
}

impl JobMatcher {
    pub(super) fn new(data: Arc<DataPlanner>) -> Self {
        Self { data }
    }
}

impl Processor for JobMatcher {
    fn process(&self, inputs: &InputTuple, _ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let profile = inputs
            .get("Job Seeker Data")
            .and_then(Value::as_record)
            .ok_or_else(|| ProcessorError::new("Job Seeker Data input missing"))?;
        let jobs = inputs
            .get("Jobs")
            .and_then(Value::as_table)
            .ok_or_else(|| ProcessorError::new("Jobs input missing"))?;
        let title = profile.get("title").map(json_text).unwrap_or_default();
        let taxonomy = self.data.store().graph_containing(&title).map(|(_, g)| g);
        let matches = match_jobs(profile, jobs, taxonomy.as_ref(), MatchWeights::default())
            .map_err(|e| ProcessorError::new(format!("schema mismatch: {e}")))?;
        Ok(vec![Output::new("Matches", Value::Table(matches))])
    }
}

pub(super) struct Presenter;

impl Processor for Presenter {
    fn process(&self, inputs: &InputTuple, _ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let items = inputs
            .get("Items")
            .and_then(Value::as_table)
            .ok_or_else(|| ProcessorError::new("Items input missing"))?;
        let text = if items.is_empty() {
            "No matching jobs found.".to_string()
        } else {
            let mut lines = vec![format!("Found {} matching jobs:", items.len())];
            for (i, r) in items.records().iter().enumerate() {
                let get = |k: &str| r.get(k).map(json_text).unwrap_or_default();
                let mut line = format!("{}. {}", i + 1, get("title"));
                if !get("company").is_empty() {
                    line.push_str(&format!(" at {}", get("company")));
                }
                if !get("city").is_empty() {
                    line.push_str(&format!(" ({})", get("city")));
                }
                if !get("score").is_empty() {
                    line.push_str(&format!(" score {}", get("score")));
                }
                lines.push(line);
            }
            lines.join("\n")
        };
        let render = BTreeMap::from([
            ("kind".to_string(), json!("list")),
            ("columns".to_string(), json!(items.columns)),
            ("rows".to_string(), json!(items.rows)),
        ]);
        Ok(vec![
            Output::new("Text", Value::text(text)),
            Output::new("Render", Value::Record(render)),
        ])
    }
}

/// Applicant summary for job `id`: count, mean years of experience and
/// the three most common skills (ties by name).
pub fn summarize_job(jobs: &Table, applicants: &Table, id: i64) -> Result<String, String> {
    let job = jobs
        .records()
        .into_iter()
        .find(|r| r.get("id").and_then(Json::as_i64) == Some(id))
        .ok_or_else(|| format!("unknown job {id}"))?;
    let name = format!(
        "Job {id} ({} at {})",
        job.get("title").map(json_text).unwrap_or_default(),
        job.get("company").map(json_text).unwrap_or_default()
    );
    let mine: Vec<BTreeMap<String, Json>> = applicants
        .records()
        .into_iter()
        .filter(|r| r.get("job_id").and_then(Json::as_i64) == Some(id))
        .collect();
    if mine.is_empty() {
        return Ok(format!("{name} has no applicants."));
    }
    let years: f64 = mine.iter().filter_map(|r| r.get("years").and_then(Json::as_f64)).sum();
    let mean = years / mine.len() as f64;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in &mine {
        for s in text_list(r.get("skills")) {
            *counts.entry(s.to_lowercase()).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let top: Vec<String> = ranked.into_iter().take(3).map(|(s, _)| s).collect();
    let noun = if mine.len() == 1 { "applicant" } else { "applicants" };
    Ok(format!(
        "{name} has {} {noun} with {mean:.1} years of experience on average. Top skills: {}.",
        mine.len(),
        top.join(", ")
    ))
}

pub(super) struct Summarizer {
    data: Arc<DataPlanner>,
}

impl Summarizer {
    pub(super) fn new(data: Arc<DataPlanner>) -> Self {
        Self { data }
    }
}

impl Processor for Summarizer {
    fn process(&self, inputs: &InputTuple, _ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let id = inputs
            .get("Job Id")
            .and_then(Value::as_number)
            .ok_or_else(|| ProcessorError::new("Job Id input missing"))?;
        let store = self.data.store();
        let jobs = store
            .table("jobs")
            .ok_or_else(|| ProcessorError::new("jobs table not loaded"))?;
        let applicants = store
            .table("applicants")
            .ok_or_else(|| ProcessorError::new("applicants table not loaded"))?;
        let text = summarize_job(&jobs, &applicants, id as i64).map_err(ProcessorError::new)?;
        Ok(vec![Output::new("Summary", Value::text(text))])
    }
}
