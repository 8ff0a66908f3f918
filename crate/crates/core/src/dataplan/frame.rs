//! Splits a natural-language retrieval request into field phrases and
//! tests whether each phrase grounds in a source's schema or values.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use regex::Regex;

static LEADING_INTENT: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    [
        r"(?i)^\s*(?:i am|i'm|im|we are|we're)\s+(?:looking|searching)\s+for\s+",
        r"(?i)^\s*(?:looking|searching)\s+for\s+",
        r"(?i)^\s*(?:i|we)\s+(?:want|need)\s+",
        r"(?i)^\s*(?:find|show|list|get)(?:\s+me)?\s+",
    ]
    .iter()
    .map(|p| Regex::new(p).expect("valid regex"))
    .collect()
});

static ARTICLE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^\s*(?:a|an|the|all|any)\s+").expect("valid regex"));
static CONNECTOR: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\s+(in|near|at|from)\s+").expect("valid regex"));

const FILLER: [&str; 12] = [
    "position",
    "positions",
    "job",
    "jobs",
    "role",
    "roles",
    "opening",
    "openings",
    "posting",
    "postings",
    "opportunity",
    "opportunities",
];

/// Removes a leading request phrase such as "I am looking for a". Returns
/// `None` when no rule applies.
pub fn strip_intent_prefix(text: &str) -> Option<String> {
    let re = LEADING_INTENT.iter().find(|re| re.is_match(text))?;
    let rest = re.replace(text, "");
    Some(ARTICLE.replace(&rest, "").trim().to_string())
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Phrase {
    /// Field the phrase constrains: `title`, `city` or `company`.
    pub field: String,
    /// Phrase text with its original casing.
    pub text: String,
}

impl Phrase {
    pub fn new(field: &str, text: &str) -> Self {
        Self {
            field: field.to_string(),
            text: text.to_string(),
        }
    }
}

/// "data scientist position in SF bay area" gives
/// `[title: "data scientist", city: "SF bay area"]`.
pub fn parse_frame(nl: &str) -> Vec<Phrase> {
    let body = nl.trim().trim_end_matches(['.', '?', '!']).trim();
    let body = strip_intent_prefix(body).unwrap_or_else(|| ARTICLE.replace(body, "").to_string());
    let mut phrases = Vec::new();
    let mut cursor = 0;
    let mut field = "title";
    let mut push = |field: &str, raw: &str| {
        let kept: Vec<String> = ARTICLE
            .replace(raw.trim(), "")
            .split_whitespace()
            .filter(|w| !(field == "title" && FILLER.contains(&w.to_lowercase().as_str())))
            .map(str::to_string)
            .collect();
        if !kept.is_empty() {
            phrases.push(Phrase::new(field, &kept.join(" ")));
        }
    };
    for cap in CONNECTOR.captures_iter(&body) {
        let whole = cap.get(0).expect("match");
        push(field, &body[cursor..whole.start()]);
        field = match cap[1].to_lowercase().as_str() {
            "in" | "near" => "city",
            _ => "company",
        };
        cursor = whole.end();
    }
    push(field, &body[cursor..]);
    phrases
}

/// Where a phrase grounded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Grounding {
    /// The phrase names a field.
    Field(String),
    /// The phrase is a prefix of at least one value of the column.
    Value(String),
}

/// A phrase grounds iff it equals or prefixes a field name, or prefixes some
/// distinct value of a column (case-insensitive). Value matches in the
/// phrase's own field win over other columns.
pub fn ground(phrase: &Phrase, index: &BTreeMap<String, BTreeSet<String>>) -> Option<Grounding> {
    let p = phrase.text.trim().to_lowercase();
    if p.is_empty() {
        return None;
    }
    if let Some(col) = index.keys().find(|c| c.to_lowercase().starts_with(&p)) {
        return Some(Grounding::Field(col.clone()));
    }
    let hits = |col: &str| {
        index
            .get(col)
            .is_some_and(|vals| vals.iter().any(|v| v.starts_with(&p)))
    };
    if let Some(col) = index.keys().find(|c| c.eq_ignore_ascii_case(&phrase.field)) {
        if hits(col) {
            return Some(Grounding::Value(col.clone()));
        }
    }
    index.keys().find(|c| hits(c)).map(|c| Grounding::Value(c.clone()))
}

/// Natural-language question for a fragment that failed to ground.
pub fn q2nl(phrase: &Phrase) -> String {
    match phrase.field.as_str() {
        "city" => format!("cities in the {}", phrase.text),
        "title" => format!("job titles related to {}", phrase.text),
        "company" => format!("companies matching {}", phrase.text),
        other => format!("{other} values for {}", phrase.text),
    }
}
