//! Deterministic reference agents for the HR scenario: conversation
//! routing, profile collection, job matching, presentation, applicant
//! summaries, and the tag-driven question-answering chain.

mod conversation;
mod hr;
mod query;

use std::sync::Arc;

use serde_json::json;

pub use conversation::{classify_intent, ListEditor};
pub use hr::{match_jobs, summarize_job, title_similarity, MatchWeights, Profiler, MIN_TITLE_SIMILARITY};
pub use query::{nl2q, summarize_result, NoTemplateMatch};

use crate::coordinator::Coordinator;
use crate::dataplan::DataPlanner;
use crate::optimizer::QosVector;
use crate::planner::TaskPlanner;
use crate::runtime::{AgentDescriptor, AgentRuntime, ParamSpec, Processor};
use crate::stream::TagFilter;
use crate::value::{SemanticType as T, Value};

pub const INTENT_CLASSIFIER: &str = "Intent Classifier";
pub const AGENTIC_EMPLOYER: &str = "Agentic Employer";
pub const PROFILER: &str = "Profiler";
pub const JOB_MATCHER: &str = "Job Matcher";
pub const PRESENTER: &str = "Presenter";
pub const SUMMARIZER: &str = "Summarizer";
pub const NL2Q: &str = "NL2Q";
pub const QUERY_EXECUTOR: &str = "Query Executor";
pub const QUERY_SUMMARIZER: &str = "Query Summarizer";
pub const RESPONDER: &str = "Responder";
pub const LIST_EDITOR: &str = "List Editor";

/// Services the built-in processors call into.
#[derive(Clone)]
pub struct BuiltinServices {
    pub data: Arc<DataPlanner>,
    pub planner: Arc<TaskPlanner>,
    pub coordinator: Coordinator,
    /// Query Summarizer asks the model backend instead of using templates.
    pub summarize_with_model: bool,
}

fn descriptor(
    name: &str,
    description: &str,
    image: &str,
    inputs: Vec<ParamSpec>,
    outputs: Vec<ParamSpec>,
    listen: Option<TagFilter>,
    hints: (f64, f64, f64),
) -> AgentDescriptor {
    let mut d = AgentDescriptor::new(name, description);
    d.inputs = inputs;
    d.outputs = outputs;
    d.listen_rules = listen;
    d.cost_hints = Some(QosVector::new(hints.0, hints.1, hints.2));
    d.deployment.insert("image".into(), json!(format!("builtin:{image}")));
    d
}

/// Descriptors of every built-in agent, in registration order.
pub fn descriptors() -> Vec<AgentDescriptor> {
    vec![
        descriptor(
            INTENT_CLASSIFIER,
            "Classifies the intent of a user utterance as job search, summarize, open query, list edit or smalltalk.",
            "intent_classifier",
            vec![ParamSpec::new("Text", T::Text).described("user utterance").tagged(["USER"])],
            vec![ParamSpec::new("Intent", T::Record).described("intent label with the utterance").tagged(["INTENT"])],
            Some(TagFilter::include(["USER"]).excluding(["EVENT"])),
            (0.01, 5.0, 0.95),
        ),
        descriptor(
            AGENTIC_EMPLOYER,
            "Employer assistant that routes classified intents and UI events: open questions go to the query chain, other requests to the task planner.",
            "agentic_employer",
            vec![
                ParamSpec::new("Intent", T::Record).described("classified intent").tagged(["INTENT"]).optional(None),
                ParamSpec::new("Event", T::Event).described("UI event object").tagged(["EVENT"]).optional(None),
            ],
            vec![ParamSpec::new("Query", T::Text).described("open natural language question").tagged(["NLQ"])],
            Some(TagFilter::include(["INTENT", "EVENT"]).excluding(["FORM_SUBMIT"])),
            (0.01, 5.0, 0.95),
        ),
        descriptor(
            PROFILER,
            "Collects the job seeker profile through a form with desired title, location, years of experience and skills.",
            "profiler",
            vec![
                ParamSpec::new("Criteria", T::Text).described("search criteria phrase").optional(None),
                ParamSpec::new("Submission", T::Event).described("submitted profile form").tagged(["FORM_SUBMIT"]).optional(None),
            ],
            vec![
                ParamSpec::new("Form", T::Form).described("profile form").tagged(["FORM"]),
                ParamSpec::new("Profile", T::Record).described("job seeker profile").tagged(["PROFILE"]),
            ],
            Some(TagFilter::include(["FORM_SUBMIT"])),
            (1.0, 200.0, 0.9),
        ),
        descriptor(
            JOB_MATCHER,
            "Scores job postings against a job seeker profile by title, location and skills.",
            "job_matcher",
            vec![
                ParamSpec::new("Job Seeker Data", T::Record).described("job seeker profile"),
                ParamSpec::new("Jobs", T::Table).described("job postings"),
                ParamSpec::new("Criteria", T::Text).described("search criteria phrase").optional(None),
            ],
            vec![ParamSpec::new("Matches", T::Table).described("scored matching jobs").tagged(["MATCHES"])],
            None,
            (2.0, 100.0, 0.85),
        ),
        descriptor(
            PRESENTER,
            "Presents matched jobs to the user as a ranked list.",
            "presenter",
            vec![ParamSpec::new("Items", T::Table).described("ranked items")],
            vec![
                ParamSpec::new("Text", T::Text).described("list as text").tagged(["RESULT"]),
                ParamSpec::new("Render", T::Record).described("list render payload").tagged(["RESULT", "RENDER"]),
            ],
            None,
            (0.5, 20.0, 1.0),
        ),
        descriptor(
            SUMMARIZER,
            "Summarizes the applicants who applied to a job.",
            "summarizer",
            vec![ParamSpec::new("Job Id", T::Number).described("job id")],
            vec![ParamSpec::new("Summary", T::Text).described("applicant summary").tagged(["RESULT"])],
            None,
            (0.5, 50.0, 0.9),
        ),
        descriptor(
            NL2Q,
            "Translates a natural language question into an SQL query over a registered database.",
            "nl2q",
            vec![ParamSpec::new("Question", T::Text).described("natural language question").tagged(["NLQ"])],
            vec![ParamSpec::new("Query", T::Text).described("SQL query").tagged(["SQL"])],
            Some(TagFilter::include(["NLQ"])),
            (0.2, 20.0, 0.9),
        ),
        descriptor(
            QUERY_EXECUTOR,
            "Executes SQL queries against the relational store and returns the result table.",
            "query_executor",
            vec![ParamSpec::new("Query", T::Text).described("SQL query").tagged(["SQL"])],
            vec![ParamSpec::new("Result", T::Table).described("query result").tagged(["QRESULT"])],
            Some(TagFilter::include(["SQL"])),
            (0.1, 20.0, 1.0),
        ),
        descriptor(
            QUERY_SUMMARIZER,
            "Explains query results in plain language.",
            "query_summarizer",
            vec![
                ParamSpec::new("Result", T::Table).described("query result").tagged(["QRESULT"]),
                ParamSpec::new("Question", T::Text).described("original question").tagged(["NLQ"]).optional(None),
            ],
            vec![ParamSpec::new("Summary", T::Text).described("answer").tagged(["RESULT"])],
            Some(TagFilter::include(["QRESULT", "NLQ"])),
            (0.2, 20.0, 0.9),
        ),
        descriptor(
            RESPONDER,
            "Replies to greetings and smalltalk.",
            "responder",
            vec![ParamSpec::new("Message", T::Text).described("user message")],
            vec![ParamSpec::new("Reply", T::Text).described("reply").tagged(["RESULT"])],
            None,
            (0.05, 5.0, 0.9),
        ),
        descriptor(
            LIST_EDITOR,
            "Adds or removes applicants on the shortlist.",
            "list_editor",
            vec![ParamSpec::new("Command", T::Text).described("list command")],
            vec![ParamSpec::new("List", T::Record).described("current shortlist").tagged(["RESULT", "SHORTLIST"])],
            None,
            (0.05, 5.0, 1.0),
        ),
    ]
}

/// Binds every built-in image to its processor.
pub fn register(runtime: &AgentRuntime, services: BuiltinServices) {
    let s = Arc::new(services);
    let bind = |image: &str, p: Arc<dyn Processor>| runtime.register_processor(&format!("builtin:{image}"), p);
    bind("intent_classifier", Arc::new(conversation::IntentClassifier));
    bind(
        "agentic_employer",
        Arc::new(conversation::AgenticEmployer::new(s.clone())),
    );
    bind("profiler", Arc::new(Profiler::new(s.data.clone())));
    bind("job_matcher", Arc::new(hr::JobMatcher::new(s.data.clone())));
    bind("presenter", Arc::new(hr::Presenter));
    bind("summarizer", Arc::new(hr::Summarizer::new(s.data.clone())));
    bind("nl2q", Arc::new(query::Nl2q::new(s.data.clone())));
    bind("query_executor", Arc::new(query::QueryExecutor::new(s.data.clone())));
    bind(
        "query_summarizer",
        Arc::new(query::QuerySummarizer::new(s.data.clone(), s.summarize_with_model)),
    );
    bind("responder", Arc::new(conversation::Responder));
    bind("list_editor", Arc::new(ListEditor::default()));
}

/// Text of a text-typed input, if present.
fn text_input<'a>(inputs: &'a crate::runtime::InputTuple, name: &str) -> Option<&'a str> {
    inputs.get(name).and_then(Value::as_text)
}
