//! A small SQL subset over the embedded store:
//!
//! ```text
//! SELECT * | COUNT(*) [AS name] | col, ...
//! FROM table [alias] [JOIN table [alias] ON a.x = b.y]
//! [WHERE cond AND cond ...] [ORDER BY col [ASC|DESC]] [LIMIT n]
//! cond := col op literal | col [NOT] LIKE 'pat' | col IN (literal, ...)
//! ```
//!
//! Text comparisons are case-insensitive; `%` and `_` are the LIKE wildcards.

use std::cmp::Ordering;
use std::collections::HashMap;

use serde_json::Value as Json;
use thiserror::Error;

use super::store::DataStore;
use crate::value::{json_text, Table};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SqlError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown table {0:?}")]
    UnknownTable(String),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Num(f64),
    Sym(String),
}

fn lex(sql: &str) -> Result<Vec<Tok>, SqlError> {
    let chars: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '\'' {
            let mut s = String::new();
            i += 1;
            loop {
                match chars.get(i) {
                    None => return Err(SqlError::Parse("unterminated string".into())),
                    Some('\'') if chars.get(i + 1) == Some(&'\'') => {
                        s.push('\'');
                        i += 2;
                    }
                    Some('\'') => {
                        i += 1;
                        break;
                    }
                    Some(ch) => {
                        s.push(*ch);
                        i += 1;
                    }
                }
            }
            out.push(Tok::Str(s));
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            i += 1;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            let text: String = chars[start..i].iter().collect();
            out.push(Tok::Num(
                text.parse()
                    .map_err(|_| SqlError::Parse(format!("bad number {text:?}")))?,
            ));
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            out.push(Tok::Ident(chars[start..i].iter().collect()));
        } else {
            let two: String = chars[i..(i + 2).min(chars.len())].iter().collect();
            if ["<=", ">=", "<>", "!="].contains(&two.as_str()) {
                out.push(Tok::Sym(two));
                i += 2;
            } else if "*(),.=<>;".contains(c) {
                out.push(Tok::Sym(c.to_string()));
                i += 1;
            } else {
                return Err(SqlError::Parse(format!("unexpected character {c:?}")));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ColumnRef {
    pub qualifier: Option<String>,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    All,
    Count(String),
    Columns(Vec<ColumnRef>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Compare(ColumnRef, Op, Json),
    Like {
        column: ColumnRef,
        pattern: String,
        negated: bool,
    },
    In(ColumnRef, Vec<Json>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRef {
    pub name: String,
    pub alias: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub projection: Projection,
    pub from: TableRef,
    pub join: Option<(TableRef, ColumnRef, ColumnRef)>,
    pub conditions: Vec<Condition>,
    pub order_by: Option<(ColumnRef, bool)>,
    pub limit: Option<usize>,
}

impl Query {
    pub fn tables(&self) -> Vec<&str> {
        let mut t = vec![self.from.name.as_str()];
        if let Some((j, _, _)) = &self.join {
            t.push(j.name.as_str());
        }
        t
    }
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), SqlError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            Err(SqlError::Parse(format!("expected {kw}")))
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Sym(s)) if s == sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<(), SqlError> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            Err(SqlError::Parse(format!("expected {sym:?}")))
        }
    }

    fn ident(&mut self) -> Result<String, SqlError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            other => Err(SqlError::Parse(format!("expected identifier, got {other:?}"))),
        }
    }

    fn column(&mut self) -> Result<ColumnRef, SqlError> {
        let first = self.ident()?;
        if self.eat_sym(".") {
            Ok(ColumnRef {
                qualifier: Some(first),
                name: self.ident()?,
            })
        } else {
            Ok(ColumnRef {
                qualifier: None,
                name: first,
            })
        }
    }

    fn literal(&mut self) -> Result<Json, SqlError> {
        match self.next() {
            Some(Tok::Str(s)) => Ok(Json::String(s)),
            Some(Tok::Num(n)) => Ok(if n.fract() == 0.0 && n.abs() < 9e15 {
                Json::from(n as i64)
            } else {
                Json::from(n)
            }),
            other => Err(SqlError::Parse(format!("expected literal, got {other:?}"))),
        }
    }

    const RESERVED: [&'static str; 8] = ["JOIN", "ON", "WHERE", "ORDER", "LIMIT", "AND", "AS", "INNER"];

    fn table_ref(&mut self) -> Result<TableRef, SqlError> {
        let name = self.ident()?;
        self.eat_kw("AS");
        let alias = match self.peek() {
            Some(Tok::Ident(s)) if !Self::RESERVED.iter().any(|r| s.eq_ignore_ascii_case(r)) => self.ident()?,
            _ => name.clone(),
        };
        Ok(TableRef { name, alias })
    }

    fn condition(&mut self) -> Result<Condition, SqlError> {
        let column = self.column()?;
        if self.eat_kw("NOT") {
            self.expect_kw("LIKE")?;
            return match self.next() {
                Some(Tok::Str(pattern)) => Ok(Condition::Like {
                    column,
                    pattern,
                    negated: true,
                }),
                _ => Err(SqlError::Parse("LIKE needs a string pattern".into())),
            };
        }
        if self.eat_kw("LIKE") {
            return match self.next() {
                Some(Tok::Str(pattern)) => Ok(Condition::Like {
                    column,
                    pattern,
                    negated: false,
                }),
                _ => Err(SqlError::Parse("LIKE needs a string pattern".into())),
            };
        }
        if self.eat_kw("IN") {
            self.expect_sym("(")?;
            let mut values = vec![self.literal()?];
            while self.eat_sym(",") {
                values.push(self.literal()?);
            }
            self.expect_sym(")")?;
            return Ok(Condition::In(column, values));
        }
        let op = match self.next() {
            Some(Tok::Sym(s)) => match s.as_str() {
                "=" => Op::Eq,
                "!=" | "<>" => Op::Ne,
                "<" => Op::Lt,
                "<=" => Op::Le,
                ">" => Op::Gt,
                ">=" => Op::Ge,
                _ => return Err(SqlError::Parse(format!("unknown operator {s:?}"))),
            },
            other => return Err(SqlError::Parse(format!("expected operator, got {other:?}"))),
        };
        Ok(Condition::Compare(column, op, self.literal()?))
    }
}

pub fn parse(sql: &str) -> Result<Query, SqlError> {
    let mut p = Parser {
        toks: lex(sql)?,
        pos: 0,
    };
    p.expect_kw("SELECT")?;
    let projection = if p.eat_sym("*") {
        Projection::All
    } else if p.is_kw("COUNT") {
        p.pos += 1;
        p.expect_sym("(")?;
        p.expect_sym("*")?;
        p.expect_sym(")")?;
        let name = if p.eat_kw("AS") {
            p.ident()?
        } else {
            "count".to_string()
        };
        Projection::Count(name)
    } else {
        let mut cols = vec![p.column()?];
        while p.eat_sym(",") {
            cols.push(p.column()?);
        }
        Projection::Columns(cols)
    };
    p.expect_kw("FROM")?;
    let from = p.table_ref()?;
    let join = if p.eat_kw("INNER") || p.is_kw("JOIN") {
        p.expect_kw("JOIN")?;
        let t = p.table_ref()?;
        p.expect_kw("ON")?;
        let a = p.column()?;
        p.expect_sym("=")?;
        let b = p.column()?;
        Some((t, a, b))
    } else {
        None
    };
    let mut conditions = Vec::new();
    if p.eat_kw("WHERE") {
        conditions.push(p.condition()?);
        while p.eat_kw("AND") {
            conditions.push(p.condition()?);
        }
    }
    let order_by = if p.eat_kw("ORDER") {
        p.expect_kw("BY")?;
        let c = p.column()?;
        let desc = if p.eat_kw("DESC") {
            true
        } else {
            p.eat_kw("ASC");
            false
        };
        Some((c, desc))
    } else {
        None
    };
    let limit = if p.eat_kw("LIMIT") {
        match p.next() {
            Some(Tok::Num(n)) if n >= 0.0 && n.fract() == 0.0 => Some(n as usize),
            _ => return Err(SqlError::Parse("LIMIT needs a nonnegative integer".into())),
        }
    } else {
        None
    };
    p.eat_sym(";");
    if p.pos < p.toks.len() {
        return Err(SqlError::Parse(format!("unexpected trailing input at token {}", p.pos)));
    }
    Ok(Query {
        projection,
        from,
        join,
        conditions,
        order_by,
        limit,
    })
}

/// Quotes a text literal.
pub fn quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

/// Case-insensitive LIKE with `%` and `_`.
pub fn like(value: &str, pattern: &str) -> bool {
    let v: Vec<char> = value.to_lowercase().chars().collect();
    let p: Vec<char> = pattern.to_lowercase().chars().collect();
    let (mut vi, mut pi) = (0, 0);
    let (mut star, mut mark) = (None, 0);
    while vi < v.len() {
        if pi < p.len() && (p[pi] == '_' || p[pi] == v[vi]) {
            vi += 1;
            pi += 1;
        } else if pi < p.len() && p[pi] == '%' {
            star = Some(pi);
            mark = vi;
            pi += 1;
        } else if let Some(s) = star {
            pi = s + 1;
            mark += 1;
            vi = mark;
        } else {
            return false;
        }
    }
    while pi < p.len() && p[pi] == '%' {
        pi += 1;
    }
    pi == p.len()
}

/// Orders two cells: numerically when both are numbers, else as
/// case-insensitive text.
pub fn compare_cells(a: &Json, b: &Json) -> Ordering {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => x.partial_cmp(&y).unwrap_or(Ordering::Equal),
        _ => json_text(a).to_lowercase().cmp(&json_text(b).to_lowercase()),
    }
}

struct Frame {
    /// (qualifier, column) per position.
    columns: Vec<(String, String)>,
    rows: Vec<Vec<Json>>,
}

impl Frame {
    fn resolve(&self, c: &ColumnRef) -> Result<usize, SqlError> {
        let hits: Vec<usize> = self
            .columns
            .iter()
            .enumerate()
            .filter(|(_, (q, n))| {
                n.eq_ignore_ascii_case(&c.name) && c.qualifier.as_ref().is_none_or(|cq| cq.eq_ignore_ascii_case(q))
            })
            .map(|(i, _)| i)
            .collect();
        let label = || match &c.qualifier {
            Some(q) => format!("{q}.{}", c.name),
            None => c.name.clone(),
        };
        match hits.as_slice() {
            [i] => Ok(*i),
            [] => Err(SqlError::UnknownColumn(label())),
            [first, ..] if c.qualifier.is_none() => Ok(*first),
            _ => Err(SqlError::UnknownColumn(label())),
        }
    }
}

fn load(store: &DataStore, t: &TableRef) -> Result<Frame, SqlError> {
    let table = store
        .table(&t.name)
        .ok_or_else(|| SqlError::UnknownTable(t.name.clone()))?;
    Ok(Frame {
        columns: table.columns.iter().map(|c| (t.alias.clone(), c.clone())).collect(),
        rows: table.rows,
    })
}

fn join_key(v: &Json) -> String {
    match v.as_f64() {
        Some(n) => format!("#{n}"),
        None => json_text(v).trim().to_lowercase(),
    }
}

fn holds(cond: &Condition, frame: &Frame, row: &[Json]) -> Result<bool, SqlError> {
    Ok(match cond {
        Condition::Compare(c, op, lit) => {
            let ord = compare_cells(&row[frame.resolve(c)?], lit);
            match op {
                Op::Eq => ord == Ordering::Equal,
                Op::Ne => ord != Ordering::Equal,
                Op::Lt => ord == Ordering::Less,
                Op::Le => ord != Ordering::Greater,
                Op::Gt => ord == Ordering::Greater,
                Op::Ge => ord != Ordering::Less,
            }
        }
        Condition::Like {
            column,
            pattern,
            negated,
        } => like(&json_text(&row[frame.resolve(column)?]), pattern) != *negated,
        Condition::In(c, values) => {
            let cell = &row[frame.resolve(c)?];
            values.iter().any(|v| compare_cells(cell, v) == Ordering::Equal)
        }
    })
}

pub fn execute(query: &Query, store: &DataStore) -> Result<Table, SqlError> {
    let mut frame = load(store, &query.from)?;
    if let Some((t, a, b)) = &query.join {
        let right = load(store, t)?;
        let (left_idx, right_idx) = match (frame.resolve(a), right.resolve(b)) {
            (Ok(l), Ok(r)) => (l, r),
            _ => (frame.resolve(b)?, right.resolve(a)?),
        };
        let mut buckets: HashMap<String, Vec<&Vec<Json>>> = HashMap::new();
        for row in &right.rows {
            buckets.entry(join_key(&row[right_idx])).or_default().push(row);
        }
        let mut rows = Vec::new();
        for l in &frame.rows {
            if let Some(matches) = buckets.get(&join_key(&l[left_idx])) {
                for r in matches {
                    let mut combined = l.clone();
                    combined.extend(r.iter().cloned());
                    rows.push(combined);
                }
            }
        }
        frame.columns.extend(right.columns);
        frame.rows = rows;
    }
    let mut kept = Vec::new();
    for row in frame.rows.iter() {
        let mut ok = true;
        for c in &query.conditions {
            if !holds(c, &frame, row)? {
                ok = false;
                break;
            }
        }
        if ok {
            kept.push(row.clone());
        }
    }
    if let Some((c, desc)) = &query.order_by {
        let idx = frame.resolve(c)?;
        kept.sort_by(|a, b| {
            let o = compare_cells(&a[idx], &b[idx]);
            if *desc {
                o.reverse()
            } else {
                o
            }
        });
    }
    if let Some(n) = query.limit {
        kept.truncate(n);
    }
    let single = query.join.is_none();
    let label = |(q, n): &(String, String)| if single { n.clone() } else { format!("{q}.{n}") };
    Ok(match &query.projection {
        Projection::Count(name) => Table::with_rows(vec![name.clone()], vec![vec![Json::from(kept.len() as u64)]]),
        Projection::All => Table::with_rows(frame.columns.iter().map(label).collect(), kept),
        Projection::Columns(cols) => {
            let idx: Vec<usize> = cols.iter().map(|c| frame.resolve(c)).collect::<Result<_, _>>()?;
            Table::with_rows(
                cols.iter().map(|c| c.name.clone()).collect(),
                kept.into_iter()
                    .map(|r| idx.iter().map(|&i| r[i].clone()).collect())
                    .collect(),
            )
        }
    })
}

/// Parses and executes in one step.
pub fn run(sql: &str, store: &DataStore) -> Result<Table, SqlError> {
    execute(&parse(sql)?, store)
}
