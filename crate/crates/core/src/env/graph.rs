//! Record graph: one node per row of the declared tables, one edge per
//! foreign-key match between two rows.

use std::collections::HashMap;
use std::path::Path;

use indexmap::IndexMap;
use rusqlite::types::ValueRef;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{table_columns, EnvError, SqlEnvironment};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordRef {
    pub table: String,
    pub record_id: String,
}

impl RecordRef {
    pub fn new(table: impl Into<String>, record_id: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            record_id: record_id.into(),
        }
    }
}

impl std::fmt::Display for RecordRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.table, self.record_id)
    }
}

/// A node plus the row's column values, kept for prompt construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub reference: RecordRef,
    pub fields: IndexMap<String, Value>,
}

impl Record {
    pub fn field(&self, name: &str) -> Option<&Value> {
        self.fields.get(name)
    }
}

/// Directed by the declaration: `from` holds `from_field`, which equals
/// `to`'s `to_field`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub from_field: String,
    pub to_field: String,
}

fn default_id_field() -> String {
    "Id".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSpec {
    pub name: String,
    #[serde(default = "default_id_field")]
    pub id_field: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FkLink {
    pub table: String,
    pub field: String,
    pub ref_table: String,
    #[serde(default = "default_id_field")]
    pub ref_field: String,
}

/// Declarative relation config, read from TOML:
///
/// ```toml
/// [[tables]]
/// name = "Opportunity"
///
/// [[links]]
/// table = "Quote"
/// field = "OpportunityId"
/// ref_table = "Opportunity"
/// ref_field = "Id"
/// ```
///
/// Tables mentioned only in links are included with id field `Id`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FkSpec {
    #[serde(default)]
    pub tables: Vec<TableSpec>,
    #[serde(default)]
    pub links: Vec<FkLink>,
}

impl FkSpec {
    pub fn from_toml_str(s: &str) -> Result<Self, EnvError> {
        toml::from_str(s).map_err(|e| EnvError::FkSpec(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| EnvError::FkSpec(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&text)
    }

    /// Every table in play with its id field, declaration order, no repeats.
    pub fn resolved_tables(&self) -> Vec<TableSpec> {
        let mut out: Vec<TableSpec> = Vec::new();
        let mut push = |name: &str| {
            if !out.iter().any(|t| t.name == name) {
                let id_field = self
                    .tables
                    .iter()
                    .find(|t| t.name == name)
                    .map_or_else(default_id_field, |t| t.id_field.clone());
                out.push(TableSpec {
                    name: name.to_string(),
                    id_field,
                });
            }
        };
        for t in &self.tables {
            push(&t.name);
        }
        for l in &self.links {
            push(&l.table);
            push(&l.ref_table);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDiagnostics {
    /// FK values with no matching referenced row, in total and per link
    /// (`Table.field -> RefTable.ref_field`).
    pub dangling: usize,
    pub dangling_by_link: IndexMap<String, usize>,
    pub null_references: usize,
    pub self_references: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordGraph {
    records: Vec<Record>,
    edges: Vec<Edge>,
    #[serde(skip)]
    index: HashMap<RecordRef, usize>,
    #[serde(skip)]
    adjacency: Vec<Vec<usize>>,
}

impl RecordGraph {
    /// Assemble a graph from parts, checking that edges reference valid
    /// nodes and ids are unique.
    pub fn from_parts(records: Vec<Record>, edges: Vec<Edge>) -> Result<Self, EnvError> {
        let mut g = RecordGraph {
            records,
            edges,
            index: HashMap::new(),
            adjacency: Vec::new(),
        };
        g.reindex()?;
        Ok(g)
    }

    fn reindex(&mut self) -> Result<(), EnvError> {
        self.index.clear();
        for (i, r) in self.records.iter().enumerate() {
            if r.reference.table.is_empty() || r.reference.record_id.is_empty() {
                return Err(EnvError::SchemaMismatch(format!("empty record reference at node {i}")));
            }
            if self.index.insert(r.reference.clone(), i).is_some() {
                return Err(EnvError::SchemaMismatch(format!(
                    "duplicate record id {}",
                    r.reference
                )));
            }
        }
        self.adjacency = vec![Vec::new(); self.records.len()];
        for (ei, e) in self.edges.iter().enumerate() {
            if e.from >= self.records.len() || e.to >= self.records.len() {
                return Err(EnvError::SchemaMismatch(format!("edge {ei} has a missing endpoint")));
            }
            self.adjacency[e.from].push(ei);
            if e.to != e.from {
                self.adjacency[e.to].push(ei);
            }
        }
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.records.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn record(&self, node: usize) -> &Record {
        &self.records[node]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_of(&self, r: &RecordRef) -> Option<usize> {
        self.index.get(r).copied()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Edges touching `node`, each as (neighbor, field on `node`, field on
    /// neighbor).
    pub fn neighbors(&self, node: usize) -> impl Iterator<Item = (usize, &str, &str)> + '_ {
        self.adjacency[node].iter().map(move |&ei| {
            let e = &self.edges[ei];
            if e.from == node {
                (e.to, e.from_field.as_str(), e.to_field.as_str())
            } else {
                (e.from, e.to_field.as_str(), e.from_field.as_str())
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EnvError> {
        let mut g: RecordGraph =
            serde_json::from_str(s).map_err(|e| EnvError::SchemaMismatch(e.to_string()))?;
        g.reindex()?;
        Ok(g)
    }
}

fn json_value(v: ValueRef<'_>) -> Value {
    match v {
        ValueRef::Null => Value::Null,
        ValueRef::Integer(i) => Value::from(i),
        ValueRef::Real(f) => serde_json::Number::from_f64(f).map_or(Value::Null, Value::Number),
        ValueRef::Text(t) => Value::String(String::from_utf8_lossy(t).into_owned()),
        ValueRef::Blob(b) => Value::String(hex::encode(b)),
    }
}

/// Typed join key; `None` for NULL and empty text, which never link.
fn join_key(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) if s.is_empty() => None,
        Value::String(s) => Some(format!("t:{s}")),
        other => Some(format!("n:{other}")),
    }
}

fn id_text(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) if s.is_empty() => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn load_table(c: &Connection, spec: &TableSpec) -> Result<Vec<Record>, EnvError> {
    let cols = table_columns(c, &spec.name)?;
    let id_pos = cols.iter().position(|col| *col == spec.id_field).ok_or_else(|| {
        EnvError::SchemaMismatch(format!("{} has no column {}", spec.name, spec.id_field))
    })?;
    let quoted = format!("\"{}\"", spec.name.replace('"', "\"\""));
    let mut stmt = c.prepare(&format!("SELECT * FROM {quoted}"))?;
    let mut rows = stmt.query([])?;
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        let mut fields = IndexMap::with_capacity(cols.len());
        for (i, col) in cols.iter().enumerate() {
            fields.insert(col.clone(), json_value(row.get_ref(i)?));
        }
        let id = id_text(&fields[id_pos]).ok_or_else(|| {
            EnvError::SchemaMismatch(format!("{} row with empty {}", spec.name, spec.id_field))
        })?;
        out.push(Record {
            reference: RecordRef::new(&spec.name, id),
            fields,
        });
    }
    Ok(out)
}

/// Extract the record graph for the tables and links in `spec`.
pub fn build_record_graph(
    env: &SqlEnvironment,
    spec: &FkSpec,
) -> Result<(RecordGraph, GraphDiagnostics), EnvError> {
    let existing = env.table_names()?;
    let tables = spec.resolved_tables();
    for t in &tables {
        if !existing.contains(&t.name) {
            return Err(EnvError::SchemaMismatch(format!("no such table: {}", t.name)));
        }
    }
    let (records, columns) = env.with_connection(|c| {
        let mut records = Vec::new();
        let mut columns = HashMap::new();
        for t in &tables {
            records.extend(load_table(c, t)?);
            columns.insert(t.name.clone(), table_columns(c, &t.name)?);
        }
        Ok((records, columns))
    })?;
    for l in &spec.links {
        for (table, field) in [(&l.table, &l.field), (&l.ref_table, &l.ref_field)] {
            if !columns[table].contains(field) {
                return Err(EnvError::SchemaMismatch(format!("{table} has no column {field}")));
            }
        }
    }

    let mut graph = RecordGraph::from_parts(records, Vec::new())?;
    let mut diagnostics = GraphDiagnostics::default();
    let mut edges = Vec::new();
    for l in &spec.links {
        let label = format!("{}.{} -> {}.{}", l.table, l.field, l.ref_table, l.ref_field);
        let mut targets: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, r) in graph.records.iter().enumerate() {
            if r.reference.table == l.ref_table {
                if let Some(k) = r.field(&l.ref_field).and_then(join_key) {
                    targets.entry(k).or_default().push(i);
                }
            }
        }
        let mut dangling = 0;
        for (i, r) in graph.records.iter().enumerate() {
            if r.reference.table != l.table {
                continue;
            }
            let Some(key) = r.field(&l.field).and_then(join_key) else {
                diagnostics.null_references += 1;
                continue;
            };
            match targets.get(&key) {
                None => dangling += 1,
                Some(hits) => {
                    for &j in hits {
                        if j == i {
                            diagnostics.self_references += 1;
                            continue;
                        }
                        edges.push(Edge {
                            from: i,
                            to: j,
                            from_field: l.field.clone(),
                            to_field: l.ref_field.clone(),
                        });
                    }
                }
            }
        }
        diagnostics.dangling += dangling;
        diagnostics.dangling_by_link.insert(label, dangling);
    }
    graph.edges = edges;
    graph.reindex()?;
    tracing::debug!(
        nodes = graph.node_count(),
        edges = graph.edge_count(),
        dangling = diagnostics.dangling,
        "record graph built"
    );
    Ok((graph, diagnostics))
}
