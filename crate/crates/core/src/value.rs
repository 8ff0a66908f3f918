//! Payload values carried on streams and the semantic types agents declare.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::dataplan::DataPlan;
use crate::planner::TaskPlan;

/// Declared type of an agent parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SemanticType {
    Text,
    Number,
    Boolean,
    Record,
    Table,
    Form,
    Event,
    Plan,
}

impl fmt::Display for SemanticType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SemanticType::Text => "TEXT",
            SemanticType::Number => "NUMBER",
            SemanticType::Boolean => "BOOLEAN",
            SemanticType::Record => "RECORD",
            SemanticType::Table => "TABLE",
            SemanticType::Form => "FORM",
            SemanticType::Event => "EVENT",
            SemanticType::Plan => "PLAN",
        };
        f.write_str(s)
    }
}

/// Column-oriented header plus row-major cells.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Json>>,
}

impl Table {
    pub fn new(columns: Vec<String>) -> Self {
        Self {
            columns,
            rows: Vec::new(),
        }
    }

    pub fn with_rows(columns: Vec<String>, rows: Vec<Vec<Json>>) -> Self {
        Self { columns, rows }
    }

    /// Single-column table, one row per value.
    pub fn column_of<I, S>(name: &str, values: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            columns: vec![name.to_string()],
            rows: values.into_iter().map(|v| vec![Json::String(v.into())]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.eq_ignore_ascii_case(name))
    }

    pub fn cell(&self, row: usize, column: &str) -> Option<&Json> {
        let idx = self.column_index(column)?;
        self.rows.get(row).and_then(|r| r.get(idx))
    }

    /// Values of one column rendered as text.
    pub fn column_text(&self, column: &str) -> Option<Vec<String>> {
        let idx = self.column_index(column)?;
        Some(
            self.rows
                .iter()
                .map(|r| r.get(idx).map(json_text).unwrap_or_default())
                .collect(),
        )
    }

    pub fn records(&self) -> Vec<BTreeMap<String, Json>> {
        self.rows
            .iter()
            .map(|row| self.columns.iter().cloned().zip(row.iter().cloned()).collect())
            .collect()
    }
}

/// Renders a JSON scalar the way a CSV cell would read.
pub fn json_text(value: &Json) -> String {
    match value {
        Json::String(s) => s.clone(),
        Json::Null => String::new(),
        Json::Number(n) => {
            if let Some(i) = n.as_i64() {
                i.to_string()
            } else {
                n.to_string()
            }
        }
        other => other.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormField {
    pub name: String,
    pub label: String,
    pub kind: SemanticType,
    #[serde(default)]
    pub value: Json,
}

/// Declarative UI form emitted by an agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormSpec {
    pub form_id: String,
    pub title: String,
    pub fields: Vec<FormField>,
}

/// Event object emitted by a UI interaction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub form_id: Option<String>,
    #[serde(default)]
    pub data: BTreeMap<String, Json>,
}

/// Structured payload of a message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Value {
    Null,
    Text(String),
    Number(f64),
    Boolean(bool),
    Record(BTreeMap<String, Json>),
    List(Vec<Value>),
    Table(Table),
    Form(FormSpec),
    Event(EventRecord),
    Plan(Box<TaskPlan>),
    DataPlan(Box<DataPlan>),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    /// CONTROL payload: a record with an `instruction` key plus extra fields.
    pub fn control<I, K>(instruction: &str, fields: I) -> Self
    where
        I: IntoIterator<Item = (K, Json)>,
        K: Into<String>,
    {
        let mut map: BTreeMap<String, Json> = fields.into_iter().map(|(k, v)| (k.into(), v)).collect();
        map.insert("instruction".into(), Json::String(instruction.into()));
        Value::Record(map)
    }

    pub fn semantic_type(&self) -> Option<SemanticType> {
        match self {
            Value::Text(_) => Some(SemanticType::Text),
            Value::Number(_) => Some(SemanticType::Number),
            Value::Boolean(_) => Some(SemanticType::Boolean),
            Value::Record(_) => Some(SemanticType::Record),
            Value::Table(_) => Some(SemanticType::Table),
            Value::Form(_) => Some(SemanticType::Form),
            Value::Event(_) => Some(SemanticType::Event),
            Value::Plan(_) | Value::DataPlan(_) => Some(SemanticType::Plan),
            Value::Null | Value::List(_) => None,
        }
    }

    pub fn conforms_to(&self, ty: SemanticType) -> bool {
        self.semantic_type() == Some(ty)
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Value::Number(n) => Some(*n),
            _ => None,
        }
    }

    pub fn as_record(&self) -> Option<&BTreeMap<String, Json>> {
        match self {
            Value::Record(r) => Some(r),
            _ => None,
        }
    }

    pub fn as_table(&self) -> Option<&Table> {
        match self {
            Value::Table(t) => Some(t),
            _ => None,
        }
    }

    /// `instruction` field of a control record.
    pub fn instruction(&self) -> Option<&str> {
        self.as_record()
            .and_then(|r| r.get("instruction"))
            .and_then(Json::as_str)
    }

    pub fn field(&self, key: &str) -> Option<&Json> {
        self.as_record().and_then(|r| r.get(key))
    }

    pub fn to_json(&self) -> Json {
        serde_json::to_value(self).expect("value serializes")
    }

    pub fn from_json(json: &Json) -> Result<Self, serde_json::Error> {
        Value::deserialize(json)
    }

    /// Serialized size in bytes, used for the payload cap.
    pub fn encoded_len(&self) -> usize {
        serde_json::to_vec(self).map(|v| v.len()).unwrap_or(0)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<f64> for Value {
    fn from(n: f64) -> Self {
        Value::Number(n)
    }
}

impl From<Table> for Value {
    fn from(t: Table) -> Self {
        Value::Table(t)
    }
}
