//! Embedded data behind the catalog: CSV tables, graph edge lists, and
//! JSON document collections, loaded through connection locators.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::{Path, PathBuf};

use parking_lot::RwLock;
use serde_json::Value as Json;
use thiserror::Error;

use crate::registry::{DataRegistry, Modality, SourcePath};
use crate::value::{json_text, Table};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoreError {
    #[error("missing data file {0}")]
    MissingFile(PathBuf),
    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("unsupported driver {driver:?} for {path}")]
    UnsupportedDriver { path: String, driver: String },
}

/// Parses a CSV cell: integers and floats become numbers, everything else text.
pub fn parse_cell(raw: &str) -> Json {
    if let Ok(i) = raw.parse::<i64>() {
        return Json::from(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        if f.is_finite() {
            return Json::from(f);
        }
    }
    Json::String(raw.to_string())
}

pub fn read_csv(path: &Path) -> Result<Table, StoreError> {
    if !path.is_file() {
        return Err(StoreError::MissingFile(path.to_path_buf()));
    }
    let parse_err = |reason: String| StoreError::Parse {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let columns: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        rows.push(rec.iter().map(parse_cell).collect());
    }
    Ok(Table::with_rows(columns, rows))
}

/// Undirected labelled graph; labels compare case-insensitively.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    labels: Vec<String>,
    index: HashMap<String, usize>,
    adjacency: Vec<BTreeSet<usize>>,
}

impl Graph {
    pub fn from_edges<I, A, B>(edges: I) -> Self
    where
        I: IntoIterator<Item = (A, B)>,
        A: Into<String>,
        B: Into<String>,
    {
        let mut g = Graph::default();
        for (a, b) in edges {
            let (a, b) = (g.node(a.into()), g.node(b.into()));
            if a != b {
                g.adjacency[a].insert(b);
                g.adjacency[b].insert(a);
            }
        }
        g
    }

    fn node(&mut self, label: String) -> usize {
        let key = label.trim().to_lowercase();
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.labels.push(label.trim().to_string());
        self.adjacency.push(BTreeSet::new());
        self.index.insert(key, self.labels.len() - 1);
        self.labels.len() - 1
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains(&self, label: &str) -> bool {
        self.index.contains_key(&label.trim().to_lowercase())
    }

    fn distances(&self, seed: &str, max_hops: usize) -> Vec<(usize, usize)> {
        let Some(&start) = self.index.get(&seed.trim().to_lowercase()) else {
            return Vec::new();
        };
        let mut dist = vec![usize::MAX; self.labels.len()];
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        let mut out = vec![(start, 0)];
        while let Some(n) = queue.pop_front() {
            if dist[n] == max_hops {
                continue;
            }
            for &m in &self.adjacency[n] {
                if dist[m] == usize::MAX {
                    dist[m] = dist[n] + 1;
                    out.push((m, dist[m]));
                    queue.push_back(m);
                }
            }
        }
        out
    }

    /// Hop distance between two labels, if within `max_hops`.
    pub fn hops(&self, a: &str, b: &str, max_hops: usize) -> Option<usize> {
        let target = *self.index.get(&b.trim().to_lowercase())?;
        self.distances(a, max_hops)
            .into_iter()
            .find(|(n, _)| *n == target)
            .map(|(_, d)| d)
    }

    /// The seed and every label within `max_hops`, ordered by distance then label.
    pub fn expand(&self, seed: &str, max_hops: usize) -> Vec<String> {
        let mut found: Vec<(usize, String)> = self
            .distances(seed, max_hops)
            .into_iter()
            .map(|(n, d)| (d, self.labels[n].clone()))
            .collect();
        found.sort();
        found.into_iter().map(|(_, l)| l).collect()
    }
}

#[derive(Default)]
pub struct DataStore {
    tables: RwLock<BTreeMap<String, Table>>,
    graphs: RwLock<BTreeMap<String, Graph>>,
    documents: RwLock<BTreeMap<String, Vec<Json>>>,
}

impl DataStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every collection of the catalog whose driver is `csv`,
    /// `graph_csv` or `json`, resolving locators against `data_dir`.
    pub fn load(registry: &DataRegistry, data_dir: &Path) -> Result<Self, StoreError> {
        let store = DataStore::new();
        for r in registry.list() {
            let driver = r.connection.driver.as_str();
            if driver.is_empty() || r.connection.locator.is_empty() {
                continue;
            }
            let file = data_dir.join(&r.connection.locator);
            match driver {
                "csv" => store.put_table(r.path.leaf(), read_csv(&file)?),
                "graph_csv" => {
                    let t = read_csv(&file)?;
                    let edges: Vec<(String, String)> = t
                        .rows
                        .iter()
                        .filter(|row| row.len() >= 2)
                        .map(|row| (json_text(&row[0]), json_text(&row[1])))
                        .collect();
                    store.put_graph(&r.path, Graph::from_edges(edges));
                }
                "json" => {
                    if !file.is_file() {
                        return Err(StoreError::MissingFile(file));
                    }
                    let text = std::fs::read_to_string(&file).map_err(|e| StoreError::Parse {
                        path: file.clone(),
                        reason: e.to_string(),
                    })?;
                    let docs: Vec<Json> = serde_json::from_str(&text).map_err(|e| StoreError::Parse {
                        path: file.clone(),
                        reason: e.to_string(),
                    })?;
                    store.documents.write().insert(r.path.to_string(), docs);
                }
                "mock" | "http" => {}
                other if r.modality == Modality::Model => {
                    tracing::debug!(driver = other, "model driver handled by backend");
                }
                other => {
                    return Err(StoreError::UnsupportedDriver {
                        path: r.path.to_string(),
                        driver: other.to_string(),
                    })
                }
            }
        }
        Ok(store)
    }

    pub fn put_table(&self, name: &str, table: Table) {
        self.tables.write().insert(name.to_lowercase(), table);
    }

    pub fn put_graph(&self, path: &SourcePath, graph: Graph) {
        self.graphs.write().insert(path.to_string(), graph);
    }

    /// Table by name, case-insensitive.
    pub fn table(&self, name: &str) -> Option<Table> {
        self.tables.read().get(&name.to_lowercase()).cloned()
    }

    pub fn table_names(&self) -> Vec<String> {
        self.tables.read().keys().cloned().collect()
    }

    pub fn graph(&self, path: &SourcePath) -> Option<Graph> {
        self.graphs.read().get(&path.to_string()).cloned()
    }

    /// First graph that has `label` as a node.
    pub fn graph_containing(&self, label: &str) -> Option<(SourcePath, Graph)> {
        self.graphs
            .read()
            .iter()
            .find(|(_, g)| g.contains(label))
            .map(|(p, g)| (SourcePath::parse(p).expect("stored paths are valid"), g.clone()))
    }

    pub fn documents(&self, path: &SourcePath) -> Option<Vec<Json>> {
        self.documents.read().get(&path.to_string()).cloned()
    }

    /// Distinct lowercase text values per column, the index grounding runs against.
    pub fn value_index(&self, table: &str) -> BTreeMap<String, BTreeSet<String>> {
        let mut index: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        if let Some(t) = self.table(table) {
            for (i, c) in t.columns.iter().enumerate() {
                let set = index.entry(c.clone()).or_default();
                for row in &t.rows {
                    if let Some(v) = row.get(i) {
                        set.insert(json_text(v).to_lowercase());
                    }
                }
            }
        }
        index
    }
}
