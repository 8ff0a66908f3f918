//! Open-question chain: NL2Q translates a question into SQL, the Query
//! Executor runs it, the Query Summarizer phrases the answer. The three
//! agents are linked only by the NLQ, SQL and QRESULT tags.

use std::sync::{Arc, LazyLock};

use regex::{Captures, Regex};
use serde_json::{json, Value as Json};
use thiserror::Error;

use super::text_input;
use crate::dataplan::{sql, DataPlanner};
use crate::registry::{DataRegistry, Modality};
use crate::runtime::{InputTuple, Output, Processor, ProcessorContext, ProcessorError};
use crate::value::{json_text, Table, Value};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("no query template matches {0:?}")]
pub struct NoTemplateMatch(pub String);

struct Template {
    pattern: Regex,
    /// Table noun resolved through the data registry.
    table: &'static str,
    build: fn(&str, &Captures) -> String,
}

fn clean(s: &str) -> String {
    sql::quote(s.trim().to_lowercase().as_str())
}

static TEMPLATES: LazyLock<Vec<Template>> = LazyLock::new(|| {
    let re = |p: &str| Regex::new(p).expect("valid regex");
    vec![
        Template {
            pattern: re(r"(?i)^how many applicants (?:have|with|know) (.+?)(?: skills?)?\??$"),
            table: "applicants",
            build: |t, c| {
                format!(
                    "SELECT COUNT(*) FROM {t} WHERE skills LIKE {}",
                    clean(&format!("%{}%", &c[1]))
                )
            },
        },
        Template {
            pattern: re(r"(?i)^how many applicants (?:applied )?(?:to|for) job (\d+)\??$"),
            table: "applicants",
            build: |t, c| format!("SELECT COUNT(*) FROM {t} WHERE job_id = {}", &c[1]),
        },
        Template {
            pattern: re(r"(?i)^how many applicants (?:are )?(?:in|from) (.+?)\??$"),
            table: "applicants",
            build: |t, c| format!("SELECT COUNT(*) FROM {t} WHERE city LIKE {}", clean(&c[1])),
        },
        Template {
            pattern: re(r"(?i)^how many jobs (?:are )?(?:there )?in (.+?)\??$"),
            table: "jobs",
            build: |t, c| format!("SELECT COUNT(*) FROM {t} WHERE city LIKE {}", clean(&c[1])),
        },
        Template {
            pattern: re(r"(?i)^how many jobs (?:are )?(?:there )?at (.+?)\??$"),
            table: "jobs",
            build: |t, c| format!("SELECT COUNT(*) FROM {t} WHERE company LIKE {}", clean(&c[1])),
        },
        Template {
            pattern: re(r"(?i)^(?:which|what|list|show)(?: me)?(?: the)? jobs (?:are )?in (.+?)\??$"),
            table: "jobs",
            build: |t, c| {
                format!(
                    "SELECT id, title, company, city FROM {t} WHERE city LIKE {}",
                    clean(&c[1])
                )
            },
        },
        Template {
            pattern: re(r"(?i)^(?:which|what|list|show)(?: me)?(?: the)? jobs (?:are )?at (.+?)\??$"),
            table: "jobs",
            build: |t, c| {
                format!(
                    "SELECT id, title, company, city FROM {t} WHERE company LIKE {}",
                    clean(&c[1])
                )
            },
        },
    ]
});

/// Registered relational source whose leaf names `noun`, else `noun`.
fn resolve_table(registry: &DataRegistry, noun: &str) -> String {
    registry
        .discover(noun, Some(Modality::Relational), 5)
        .unwrap_or_default()
        .into_iter()
        .map(|(r, _)| r.path.leaf().to_string())
        .find(|leaf| leaf.eq_ignore_ascii_case(noun))
        .unwrap_or_else(|| noun.to_string())
}

/// SQL for a question, from the first matching template.
pub fn nl2q(question: &str, registry: &DataRegistry) -> Result<String, NoTemplateMatch> {
    let q = question.trim().trim_end_matches(['.', '!']).trim();
    for t in TEMPLATES.iter() {
        if let Some(c) = t.pattern.captures(q) {
            return Ok((t.build)(&resolve_table(registry, t.table), &c));
        }
    }
    Err(NoTemplateMatch(question.to_string()))
}

static COUNT_QUESTION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)^how many (\w+) (?:have|with|know) (.+?)(?: skills?)?\??$").expect("valid regex")
});

/// Plain-language answer to `question` given its result table.
pub fn summarize_result(question: Option<&str>, result: &Table) -> String {
    if result.is_empty() {
        return "No results.".to_string();
    }
    if result.columns.len() == 1 && result.len() == 1 && result.columns[0].eq_ignore_ascii_case("count") {
        let n = json_text(&result.rows[0][0]);
        let q = question.map(|q| q.trim().trim_end_matches(['.', '!']).trim());
        if let Some(c) = q.and_then(|q| COUNT_QUESTION.captures(q)) {
            let verb = if n == "1" { "is" } else { "are" };
            let noun = if n == "1" {
                c[1].trim_end_matches('s').to_string()
            } else {
                c[1].to_string()
            };
            return format!(
                "There {verb} {n} {} with {} skills.",
                noun.to_lowercase(),
                c[2].to_lowercase()
            );
        }
        return format!("The count is {n}.");
    }
    let mut lines = vec![format!("Found {} rows:", result.len())];
    for r in result.rows.iter().take(10) {
        lines.push(format!("- {}", r.iter().map(json_text).collect::<Vec<_>>().join(", ")));
    }
    if result.len() > 10 {
        lines.push(format!("and {} more.", result.len() - 10));
    }
    lines.join("\n")
}

pub(super) struct Nl2q {
    data: Arc<DataPlanner>,
}

impl Nl2q {
    pub(super) fn new(data: Arc<DataPlanner>) -> Self {
        Self { data }
    }
}

impl Processor for Nl2q {
    fn process(&self, inputs: &InputTuple, _ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let question = text_input(inputs, "Question").ok_or_else(|| ProcessorError::new("Question input missing"))?;
        let query = nl2q(question, self.data.registry()).map_err(|e| ProcessorError::new(e.to_string()))?;
        Ok(vec![Output::new("Query", Value::text(query))])
    }
}

pub(super) struct QueryExecutor {
    data: Arc<DataPlanner>,
}

impl QueryExecutor {
    pub(super) fn new(data: Arc<DataPlanner>) -> Self {
        Self { data }
    }
}

impl Processor for QueryExecutor {
    fn process(&self, inputs: &InputTuple, _ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let query = text_input(inputs, "Query").ok_or_else(|| ProcessorError::new("Query input missing"))?;
        let table = sql::run(query, self.data.store()).map_err(|e| ProcessorError::new(e.to_string()))?;
        Ok(vec![Output::new("Result", Value::Table(table))])
    }
}

pub(super) struct QuerySummarizer {
    data: Arc<DataPlanner>,
    with_model: bool,
}

impl QuerySummarizer {
    pub(super) fn new(data: Arc<DataPlanner>, with_model: bool) -> Self {
        Self { data, with_model }
    }
}

impl Processor for QuerySummarizer {
    fn process(&self, inputs: &InputTuple, ctx: &mut ProcessorContext) -> Result<Vec<Output>, ProcessorError> {
        let result = inputs
            .get("Result")
            .and_then(Value::as_table)
            .ok_or_else(|| ProcessorError::new("Result input missing"))?;
        let question = text_input(inputs, "Question");
        let text = if self.with_model {
            let prompt = format!(
                "Answer the question using the query result.\nQuestion: {}\nResult: {}",
                question.unwrap_or_default(),
                json!({"columns": result.columns, "rows": result.rows})
            );
            let done = self
                .data
                .model()
                .complete(&prompt, &Json::Null)
                .map_err(|e| ProcessorError::new(e.to_string()))?;
            ctx.charge(done.cost, done.latency_ms);
            done.text
        } else {
            summarize_result(question, result)
        };
        Ok(vec![Output::new("Summary", Value::text(text))])
    }
}
