//! Deterministic synthetic HR corpus: jobs, applicants, profile
//! documents, a title taxonomy rooted at "data scientist", the bay-area
//! city list, plus the agent, catalog, template and mock-model seed files
//! that reference them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value as Json};

use crate::builtins;
use crate::model::{Matcher, ScriptEntry};
use crate::planner::{Binding, InputBinding, Intent, PlanTemplate, TemplateSlot};
use crate::registry::{Connection, CostHints, DataSourceRecord, Modality};

pub const DEFAULT_SEED: u64 = 42;
pub const JOB_COUNT: usize = 200;
pub const APPLICANT_COUNT: usize = 1000;
/// Jobs above this id receive no applicants.
pub const LAST_APPLIED_JOB: i64 = 190;
pub const PROFILE_COUNT: usize = 50;
/// Root of the title taxonomy; no job carries this exact title.
pub const TAXONOMY_ROOT: &str = "data scientist";

pub const BAY_AREA_CITIES: [&str; 12] = [
    "San Francisco",
    "Oakland",
    "San Jose",
    "Berkeley",
    "Palo Alto",
    "Mountain View",
    "Sunnyvale",
    "Santa Clara",
    "Fremont",
    "Redwood City",
    "San Mateo",
    "Hayward",
];

const OTHER_CITIES: [&str; 10] = [
    "Los Angeles",
    "San Diego",
    "Sacramento",
    "Fresno",
    "Seattle",
    "Austin",
    "New York",
    "Boston",
    "Chicago",
    "Denver",
];

const COMPANIES: [&str; 16] = [
    "Acme Analytics",
    "Bayside Labs",
    "Cobalt Health",
    "Driftwood Systems",
    "Evergreen Bank",
    "Foxglove Media",
    "Granite Logistics",
    "Harbor Robotics",
    "Ironbark Energy",
    "Juniper Retail",
    "Kestrel Insurance",
    "Lumen Biotech",
    "Meridian Games",
    "Northwind Foods",
    "Orchard Education",
    "Pinnacle Travel",
];

/// Skills; none is a substring of another so LIKE '%skill%' is exact.
const SKILLS: [&str; 24] = [
    "python",
    "sql",
    "spark",
    "tableau",
    "excel",
    "statistics",
    "tensorflow",
    "pytorch",
    "kubernetes",
    "docker",
    "java",
    "golang",
    "scala",
    "aws",
    "communication",
    "leadership",
    "hadoop",
    "airflow",
    "pandas",
    "matlab",
    "nursing",
    "accounting",
    "marketing",
    "cooking",
];

/// Titles outside the taxonomy.
const OTHER_TITLES: [&str; 6] = [
    "Registered Nurse",
    "Teacher",
    "Sales Associate",
    "Chef",
    "Truck Driver",
    "Customer Service Representative",
];

const FIRST_NAMES: [&str; 20] = [
    "Ava", "Ben", "Chloe", "Dev", "Elena", "Farid", "Grace", "Hiro", "Isla", "Jamal", "Kira", "Liam", "Mei", "Noah",
    "Olu", "Priya", "Quinn", "Rosa", "Sam", "Tariq",
];

const LAST_NAMES: [&str; 16] = [
    "Adams", "Baker", "Chen", "Diaz", "Evans", "Fischer", "Garcia", "Huang", "Ibrahim", "Jones", "Kim", "Lopez",
    "Nguyen", "Okafor", "Patel", "Reyes",
];

/// Parent, child edges of the title taxonomy. Titles sharing a word with
/// the root sit within two hops of it.
pub const TAXONOMY: [(&str, &str); 49] = [
    ("data scientist", "machine learning engineer"),
    ("data scientist", "data analyst"),
    ("data scientist", "research scientist"),
    ("data scientist", "statistician"),
    ("data scientist", "data engineer"),
    ("data scientist", "ai engineer"),
    ("machine learning engineer", "deep learning engineer"),
    ("machine learning engineer", "computer vision engineer"),
    ("machine learning engineer", "nlp engineer"),
    ("machine learning engineer", "mlops engineer"),
    ("data analyst", "business analyst"),
    ("data analyst", "bi analyst"),
    ("data analyst", "marketing analyst"),
    ("data analyst", "financial analyst"),
    ("research scientist", "applied scientist"),
    ("research scientist", "research engineer"),
    ("research scientist", "quantitative researcher"),
    ("statistician", "biostatistician"),
    ("statistician", "econometrician"),
    ("statistician", "actuary"),
    ("data engineer", "analytics engineer"),
    ("data engineer", "etl developer"),
    ("data engineer", "database administrator"),
    ("ai engineer", "prompt engineer"),
    ("ai engineer", "robotics engineer"),
    ("business analyst", "product analyst"),
    ("business analyst", "operations analyst"),
    ("business analyst", "product manager"),
    ("bi analyst", "reporting specialist"),
    ("financial analyst", "accountant"),
    ("financial analyst", "controller"),
    ("research engineer", "software engineer"),
    ("software engineer", "backend engineer"),
    ("software engineer", "frontend engineer"),
    ("software engineer", "devops engineer"),
    ("software engineer", "site reliability engineer"),
    ("software engineer", "mobile developer"),
    ("software engineer", "qa engineer"),
    ("database administrator", "systems administrator"),
    ("database administrator", "network engineer"),
    ("robotics engineer", "mechanical engineer"),
    ("robotics engineer", "electrical engineer"),
    ("actuary", "underwriter"),
    ("biostatistician", "epidemiologist"),
    ("biostatistician", "clinical research coordinator"),
    ("mlops engineer", "platform engineer"),
    ("computer vision engineer", "image processing engineer"),
    ("quantitative researcher", "quant trader"),
    ("marketing analyst", "growth marketer"),
];

/// Generated files, keyed by path relative to the seed directory.
pub struct SeedSet {
    pub files: BTreeMap<String, String>,
}

impl SeedSet {
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        for (name, body) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, body)?;
        }
        Ok(())
    }
}

fn title_case(s: &str) -> String {
    s.split_whitespace()
        .map(|w| match w {
            "ai" | "bi" | "nlp" | "etl" | "qa" => w.to_uppercase(),
            "mlops" => "MLOps".to_string(),
            _ => {
                let mut c = w.chars();
                c.next()
                    .map(|f| f.to_uppercase().collect::<String>() + c.as_str())
                    .unwrap_or_default()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

fn pick_skills(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<String> {
    let n = rng.random_range(lo..=hi);
    let mut all: Vec<&str> = SKILLS.to_vec();
    all.shuffle(rng);
    let mut chosen: Vec<String> = all.into_iter().take(n).map(str::to_string).collect();
    chosen.sort();
    chosen
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn source(
    path: &str,
    modality: Modality,
    description: &str,
    schema: &[(&str, &str)],
    driver: &str,
    locator: &str,
    hints: (f64, f64, f64),
) -> DataSourceRecord {
    let mut r = DataSourceRecord::new(path, modality, description);
    r.schema = schema.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    if !driver.is_empty() {
        r.connection = Connection {
            driver: driver.to_string(),
            locator: locator.to_string(),
            ..Connection::default()
        };
    }
    r.cost_hints = CostHints {
        per_call_cost: hints.0,
        latency_ms: hints.1,
        quality: hints.2,
    };
    r
}

/// Data catalog over the generated files.
pub fn catalog() -> Vec<DataSourceRecord> {
    vec![
        source(
            "/hr",
            Modality::Relational,
            "human resources data lake",
            &[],
            "",
            "",
            (0.0, 0.0, 1.0),
        ),
        source(
            "/hr/HR",
            Modality::Relational,
            "recruiting database of vacancies and candidate applications",
            &[],
            "",
            "",
            (0.0, 0.0, 1.0),
        ),
        source(
            "/hr/HR/Jobs",
            Modality::Relational,
            "job postings with titles, hiring companies, cities and required skills",
            &[
                ("id", "NUMBER"),
                ("title", "TEXT"),
                ("company", "TEXT"),
                ("city", "TEXT"),
                ("skills", "TEXT"),
            ],
            "csv",
            "jobs.csv",
            (0.01, 5.0, 1.0),
        ),
        source(
            "/hr/HR/Applicants",
            Modality::Relational,
            "applicants who applied to a job with their years of experience and skills",
            &[
                ("id", "NUMBER"),
                ("name", "TEXT"),
                ("job_id", "NUMBER"),
                ("city", "TEXT"),
                ("years", "NUMBER"),
                ("skills", "TEXT"),
            ],
            "csv",
            "applicants.csv",
            (0.01, 5.0, 1.0),
        ),
        source(
            "/hr/Docs",
            Modality::Document,
            "document store of resumes",
            &[],
            "",
            "",
            (0.0, 0.0, 1.0),
        ),
        source(
            "/hr/Docs/Profiles",
            Modality::Document,
            "job seeker profile documents with desired title, location and resume summary",
            &[
                ("name", "TEXT"),
                ("title", "TEXT"),
                ("location", "TEXT"),
                ("years", "NUMBER"),
                ("summary", "TEXT"),
            ],
            "json",
            "profiles.json",
            (0.01, 10.0, 1.0),
        ),
        source("/kg", Modality::Graph, "knowledge graphs", &[], "", "", (0.0, 0.0, 1.0)),
        source(
            "/kg/Taxonomy",
            Modality::Graph,
            "occupational taxonomies",
            &[],
            "",
            "",
            (0.0, 0.0, 1.0),
        ),
        source(
            "/kg/Taxonomy/Titles",
            Modality::Graph,
            "title taxonomy graph relating occupations such as data scientist to neighbouring roles",
            &[("edges", "parent child"), ("labels", "job titles")],
            "graph_csv",
            "title_taxonomy.csv",
            (0.02, 10.0, 0.95),
        ),
        source(
            "/models",
            Modality::Model,
            "hosted model endpoints",
            &[],
            "",
            "",
            (0.0, 0.0, 1.0),
        )
        .with_capability("language models"),
        source(
            "/models/LLM",
            Modality::Model,
            "large language models",
            &[],
            "",
            "",
            (0.0, 0.0, 1.0),
        )
        .with_capability("general text generation"),
        source(
            "/models/LLM/GPT",
            Modality::Model,
            "general purpose language model answering world knowledge questions",
            &[],
            "mock",
            "mock_llm.json",
            (0.5, 800.0, 0.8),
        )
        .with_capability("lists of cities in a region, related job titles, general knowledge"),
    ]
}

/// Plan skeletons per intent. Capability phrases are matched against
/// agent descriptions.
pub fn templates() -> Vec<PlanTemplate> {
    let node = |n: &str, p: &str| {
        InputBinding::new(Binding::Node {
            node: n.into(),
            param: p.into(),
        })
    };
    let slot = |id: &str, capability: &str, inputs: Vec<(&str, InputBinding)>| TemplateSlot {
        id: id.into(),
        capability: capability.into(),
        inputs: inputs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
    };
    vec![
        PlanTemplate {
            intent: Intent::JobSearch,
            slots: vec![
                slot(
                    "n1",
                    "collect the job seeker profile through a form",
                    vec![("Criteria", InputBinding::transformed(Binding::UserText))],
                ),
                slot(
                    "n2",
                    "match job seeker profile with available job listings",
                    vec![
                        ("Job Seeker Data", node("n1", "Profile")),
                        (
                            "Jobs",
                            InputBinding::new(Binding::Source {
                                path: "/hr/HR/Jobs".into(),
                            }),
                        ),
                    ],
                ),
                slot(
                    "n3",
                    "present matched jobs as a ranked list",
                    vec![("Items", node("n2", "Matches"))],
                ),
            ],
        },
        PlanTemplate {
            intent: Intent::Summarize,
            slots: vec![slot(
                "n1",
                "summarize the applicants who applied to a job",
                vec![("Job Id", InputBinding::new(Binding::Context { key: "job_id".into() }))],
            )],
        },
        PlanTemplate {
            intent: Intent::OpenQuery,
            slots: vec![
                slot(
                    "n1",
                    "translate a natural language question into an SQL query",
                    vec![("Question", InputBinding::new(Binding::UserText))],
                ),
                slot(
                    "n2",
                    "execute SQL queries against the relational store",
                    vec![("Query", node("n1", "Query"))],
                ),
                slot(
                    "n3",
                    "explain query results in plain language",
                    vec![
                        ("Result", node("n2", "Result")),
                        ("Question", InputBinding::new(Binding::UserText)),
                    ],
                ),
            ],
        },
        PlanTemplate {
            intent: Intent::Smalltalk,
            slots: vec![slot(
                "n1",
                "reply to greetings and smalltalk",
                vec![("Message", InputBinding::new(Binding::UserText))],
            )],
        },
        PlanTemplate {
            intent: Intent::ListEdit,
            slots: vec![slot(
                "n1",
                "add or remove applicants on the shortlist",
                vec![("Command", InputBinding::new(Binding::UserText))],
            )],
        },
    ]
}

/// Taxonomy labels within `hops` of the root, nearest first.
fn within(hops: usize) -> Vec<String> {
    let mut frontier = vec![TAXONOMY_ROOT.to_string()];
    let mut seen: BTreeSet<String> = frontier.iter().cloned().collect();
    let mut out = Vec::new();
    for _ in 0..hops {
        let mut next = Vec::new();
        for f in &frontier {
            for (a, b) in TAXONOMY {
                let other = if a == f {
                    b
                } else if b == f {
                    a
                } else {
                    continue;
                };
                if seen.insert(other.to_string()) {
                    next.push(other.to_string());
                }
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Scripted model responses: the bay-area city list, titles related to
/// the taxonomy root, and a fallback.
pub fn mock_script() -> Vec<ScriptEntry> {
    vec![
        ScriptEntry {
            matcher: Matcher::Contains("cities in the sf bay area".into()),
            response: BAY_AREA_CITIES.join("\n"),
            cost: 0.02,
            latency_ms: 400.0,
        },
        ScriptEntry {
            matcher: Matcher::Contains("job titles related to data scientist".into()),
            response: within(2).iter().map(|t| title_case(t)).collect::<Vec<_>>().join("\n"),
            cost: 0.02,
            latency_ms: 400.0,
        },
        ScriptEntry {
            matcher: Matcher::Fallback,
            response: "I do not have a scripted answer for that.".into(),
            cost: 0.01,
            latency_ms: 200.0,
        },
    ]
}

/// Builds every seed file from `seed`.
pub fn generate(seed: u64) -> SeedSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut titles: Vec<String> = TAXONOMY
        .iter()
        .map(|(_, child)| title_case(child))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    titles.extend(OTHER_TITLES.iter().map(|t| t.to_string()));
    let cities: Vec<&str> = BAY_AREA_CITIES.iter().chain(OTHER_CITIES.iter()).copied().collect();

    let mut jobs = Vec::new();
    let mut job_titles = Vec::new();
    for id in 1..=JOB_COUNT {
        let title = titles.choose(&mut rng).expect("titles").clone();
        let company = *COMPANIES.choose(&mut rng).expect("companies");
        let city = *cities.choose(&mut rng).expect("cities");
        let skills = pick_skills(&mut rng, 2, 4);
        job_titles.push(title.clone());
        jobs.push(vec![
            id.to_string(),
            title,
            company.to_string(),
            city.to_string(),
            skills.join(";"),
        ]);
    }

    let mut applicants = Vec::new();
    for id in 1..=APPLICANT_COUNT {
        let name = format!(
            "{} {}",
            FIRST_NAMES.choose(&mut rng).expect("names"),
            LAST_NAMES.choose(&mut rng).expect("names")
        );
        let job = rng.random_range(1..=LAST_APPLIED_JOB);
        let city = *cities.choose(&mut rng).expect("cities");
        let years = rng.random_range(0..=20);
        let skills = pick_skills(&mut rng, 2, 5);
        applicants.push(vec![
            id.to_string(),
            name,
            job.to_string(),
            city.to_string(),
            years.to_string(),
            skills.join(";"),
        ]);
    }

    let mut profiles = Vec::new();
    for id in 1..=PROFILE_COUNT {
        let name = format!(
            "{} {}",
            FIRST_NAMES.choose(&mut rng).expect("names"),
            LAST_NAMES.choose(&mut rng).expect("names")
        );
        let title = titles.choose(&mut rng).expect("titles").clone();
        let location = *cities.choose(&mut rng).expect("cities");
        let years: u32 = rng.random_range(0..=20);
        let skills = pick_skills(&mut rng, 2, 5);
        profiles.push(json!({
            "id": id,
            "name": name,
            "title": title,
            "location": location,
            "years": years,
            "skills": skills,
            "summary": format!("{title} with {years} years of experience in {}.", skills.join(", ")),
        }));
    }

    let taxonomy_rows: Vec<Vec<String>> = TAXONOMY
        .iter()
        .map(|(a, b)| vec![title_case(a), title_case(b)])
        .collect();
    let city_rows: Vec<Vec<String>> = BAY_AREA_CITIES.iter().map(|c| vec![c.to_string()]).collect();

    let catalog: Vec<Json> = catalog()
        .into_iter()
        .map(|r| {
            let mut v = serde_json::to_value(r).expect("serializable");
            if let Json::Object(m) = &mut v {
                m.remove("vector");
            }
            v
        })
        .collect();

    let mut files = BTreeMap::new();
    files.insert(
        "data/jobs.csv".into(),
        csv_text(&["id", "title", "company", "city", "skills"], &jobs),
    );
    files.insert(
        "data/applicants.csv".into(),
        csv_text(&["id", "name", "job_id", "city", "years", "skills"], &applicants),
    );
    files.insert("data/profiles.json".into(), pretty(&profiles));
    files.insert(
        "data/title_taxonomy.csv".into(),
        csv_text(&["parent", "child"], &taxonomy_rows),
    );
    files.insert("data/bay_area_cities.csv".into(), csv_text(&["city"], &city_rows));
    files.insert("catalog.json".into(), pretty(&catalog));
    files.insert("agents.json".into(), pretty(&builtins::descriptors()));
    files.insert("templates.json".into(), pretty(&templates()));
    files.insert("data/mock_llm.json".into(), pretty(&mock_script()));
    SeedSet { files }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skills_are_substring_free() {
        for a in SKILLS {
            for b in SKILLS {
                assert!(a == b || !b.contains(a), "{a} inside {b}");
            }
        }
    }

    #[test]
    fn taxonomy_shape() {
        let labels: BTreeSet<&str> = TAXONOMY.iter().flat_map(|(a, b)| [*a, *b]).collect();
        assert_eq!(labels.len(), 50);
        let near: BTreeSet<String> = within(2).into_iter().collect();
        for l in &labels {
            let shares = l.split(' ').any(|w| w == "data" || w == "scientist");
            assert!(
                !shares || *l == TAXONOMY_ROOT || near.contains(*l),
                "{l} shares a root word beyond two hops"
            );
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(DEFAULT_SEED).files, generate(DEFAULT_SEED).files);
        assert_ne!(generate(1).files["data/jobs.csv"], generate(2).files["data/jobs.csv"]);
    }

    #[test]
    fn no_job_is_titled_like_the_root() {
        let set = generate(DEFAULT_SEED);
        let jobs = &set.files["data/jobs.csv"];
        assert!(!jobs.to_lowercase().contains(",data scientist"));
    }
}
