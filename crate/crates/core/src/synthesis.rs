//! Training-data synthesis: multi-hop questions grown along random walks
//! over the record graph, simple templated QA, and task-specific templates.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{Record, RecordGraph, RecordRef, SqlEnvironment};
use crate::llm::{self, ChatMessage, GenerationRequest, LlmError, LlmProvider};
use crate::prompts;

pub const WALK_RESTARTS: usize = 20;
pub const DEFAULT_GENERATION_ATTEMPTS: usize = 3;
pub const DEFAULT_K_RANGE: (usize, usize) = (2, 5);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("no walk of {records} records found after {attempts} attempts ({diagnostics})")]
    DeadEnd {
        records: usize,
        attempts: usize,
        diagnostics: String,
    },
    #[error("generator reply is not a {{\"Q\": ...}} object after {attempts} attempts: {last}")]
    MalformedGeneration { attempts: usize, last: String },
    #[error("generated question leaks {0:?}")]
    LeakageDetected(String),
    #[error("generated question repeats the previous one")]
    DegenerateGeneration,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sample invariant violated: {0}")]
    InvariantViolation(String),
    #[error("provider failed: {0}")]
    Provider(#[from] LlmError),
    #[error("environment: {0}")]
    Env(#[from] crate::env::EnvError),
    #[error("dataset io: {0}")]
    Io(String),
}

/// A path through the record graph; adjacent records share the values of
/// their connecting fields.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WalkPath {
    pub records: Vec<RecordRef>,
    /// `(field on records[i], field on records[i + 1])`.
    pub connect_keys: Vec<(String, String)>,
}

impl WalkPath {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Complex,
    Simple,
    TaskSpecific,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSample {
    pub question: String,
    pub answer: String,
    pub category: Category,
    pub provenance: Option<WalkPath>,
    #[serde(default)]
    pub generation_trace: Vec<String>,
}

impl SynthSample {
    pub fn check_invariants(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvariantViolation(m.to_string()));
        if self.question.trim().is_empty() {
            return bad("empty question");
        }
        if self.category == Category::Complex {
            let Some(walk) = &self.provenance else {
                return bad("complex sample without provenance");
            };
            if walk.records.first().map(|r| r.record_id.as_str()) != Some(self.answer.as_str()) {
                return bad("answer is not the walk head's id");
            }
            if self.question.contains(&self.answer) {
                return bad("question contains its answer");
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Walks

fn graph_summary(graph: &RecordGraph) -> String {
    let max_degree = (0..graph.node_count()).map(|n| graph.degree(n)).max().unwrap_or(0);
    format!(
        "{} nodes, {} edges, max degree {max_degree}",
        graph.node_count(),
        graph.edge_count()
    )
}

fn walk_nodes(
    graph: &RecordGraph,
    records: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, Option<(String, String)>)>, SynthError> {
    if graph.node_count() == 0 {
        return Err(SynthError::EmptyGraph);
    }
    if records == 0 {
        return Err(SynthError::InvalidArgument("walk length must be at least 1".into()));
    }
    if records == 1 {
        return Ok(vec![(rng.gen_range(0..graph.node_count()), None)]);
    }
    let mut starts: Vec<usize> = (0..graph.node_count()).filter(|&n| graph.degree(n) > 0).collect();
    starts.shuffle(rng);
    let mut attempts = 0;
    for &start in starts.iter().take(WALK_RESTARTS + 1) {
        attempts += 1;
        let mut path = vec![(start, None)];
        let mut visited = vec![start];
        while path.len() < records {
            let cur = path.last().expect("non-empty path").0;
            let options: Vec<(usize, &str, &str)> = graph
                .neighbors(cur)
                .filter(|(n, _, _)| !visited.contains(n))
                .collect();
            let Some(&(next, here, there)) = options.choose(rng) else {
                break;
            };
            visited.push(next);
            path.push((next, Some((here.to_string(), there.to_string()))));
        }
        if path.len() == records {
            return Ok(path);
        }
    }
    Err(SynthError::DeadEnd {
        records,
        attempts: attempts.max(1),
        diagnostics: graph_summary(graph),
    })
}

/// A simple path of exactly `k` records, uniform over available edges at
/// each step, restarting from a fresh start node on dead ends.
pub fn sample_walk(graph: &RecordGraph, k: usize, seed: u64) -> Result<WalkPath, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = walk_nodes(graph, k, &mut rng)?;
    Ok(to_walk_path(graph, &nodes))
}

fn to_walk_path(graph: &RecordGraph, nodes: &[(usize, Option<(String, String)>)]) -> WalkPath {
    WalkPath {
        records: nodes.iter().map(|(n, _)| graph.record(*n).reference.clone()).collect(),
        connect_keys: nodes.iter().filter_map(|(_, k)| k.clone()).collect(),
    }
}

// ---------------------------------------------------------------------------
// Generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Attempts per generation step for malformed replies.
    pub max_attempts: usize,
    pub temperature: f64,
    /// Tables whose name-like fields must never appear in a question.
    pub user_tables: Vec<String>,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            max_attempts: DEFAULT_GENERATION_ATTEMPTS,
            temperature: llm::DEFAULT_TEMPERATURE,
            user_tables: vec!["User".to_string()],
        }
    }
}

fn record_json(r: &Record) -> String {
    serde_json::to_string(&r.fields).expect("record fields serialize")
}

fn schema_line(r: &Record) -> String {
    let cols: Vec<&str> = r.fields.keys().map(String::as_str).collect();
    format!("{}({})", r.reference.table, cols.join(", "))
}

fn connect_text(a: &Record, b: &Record, key: (&str, &str)) -> String {
    format!(
        "{}.{} = {}.{}",
        a.reference.table, key.0, b.reference.table, key.1
    )
}

/// Pull `{"Q": "..."}` out of a reply, tolerating code fences or prose
/// around the object.
pub fn parse_q_reply(text: &str) -> Option<String> {
    let attempt = |s: &str| -> Option<String> {
        let v: Value = serde_json::from_str(s).ok()?;
        let q = v.get("Q")?.as_str()?.trim();
        (!q.is_empty()).then(|| q.to_string())
    };
    attempt(text.trim()).or_else(|| {
        let start = text.find('{')?;
        let end = text.rfind('}')?;
        (end > start).then(|| attempt(&text[start..=end])).flatten()
    })
}

fn contains_token(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    let h = haystack.to_lowercase();
    let n = needle.to_lowercase();
    let boundary = |c: Option<char>| c.map_or(true, |c| !c.is_alphanumeric());
    h.match_indices(&n).any(|(i, _)| {
        boundary(h[..i].chars().next_back()) && boundary(h[i + n.len()..].chars().next())
    })
}

fn name_values(r: &Record) -> Vec<String> {
    let mut out = Vec::new();
    for key in ["Name", "FirstName", "LastName", "Username", "Alias"] {
        if let Some(Value::String(s)) = r.field(key) {
            if s.trim().chars().count() >= 2 {
                out.push(s.trim().to_string());
            }
        }
    }
    out
}

fn check_leakage(question: &str, answer: &str, pair: (&Record, &Record), opts: &SynthOptions) -> Result<(), SynthError> {
    if question.contains(answer) || contains_token(question, answer) {
        return Err(SynthError::LeakageDetected(answer.to_string()));
    }
    for r in [pair.0, pair.1] {
        if contains_token(question, &r.reference.record_id) {
            return Err(SynthError::LeakageDetected(r.reference.record_id.clone()));
        }
        if opts.user_tables.contains(&r.reference.table) {
            for name in name_values(r) {
                if contains_token(question, &name) {
                    return Err(SynthError::LeakageDetected(name));
                }
            }
        }
    }
    Ok(())
}

fn generate(prompt: &str, provider: &dyn LlmProvider, opts: &SynthOptions) -> Result<String, SynthError> {
    let request = GenerationRequest::new(vec![ChatMessage::user(prompt)]).with_temperature(opts.temperature);
    let attempts = opts.max_attempts.max(1);
    let mut last = String::new();
    for _ in 0..attempts {
        let reply = llm::complete(provider, &request)?;
        if let Some(q) = parse_q_reply(&reply.text) {
            return Ok(q);
        }
        last = reply.text.chars().take(200).collect();
    }
    Err(SynthError::MalformedGeneration { attempts, last })
}

/// First question of a chain, built from the first two walk records.
pub fn generate_seed_query(
    pair: (&Record, &Record),
    connect_key: (&str, &str),
    answer: &str,
    provider: &dyn LlmProvider,
    opts: &SynthOptions,
) -> Result<String, SynthError> {
    if pair.0.reference.record_id != answer {
        return Err(SynthError::InvalidArgument("answer must be the source record's id".into()));
    }
    let prompt = prompts::fill(
        prompts::SEED_QUERY_V1,
        &[
            ("source_schema", &schema_line(pair.0)),
            ("source_record", &record_json(pair.0)),
            ("target_schema", &schema_line(pair.1)),
            ("target_record", &record_json(pair.1)),
            ("connect_key", &connect_text(pair.0, pair.1, connect_key)),
            ("answer", answer),
        ],
    )
    .expect("seed template variables are complete");
    let q = generate(&prompt, provider, opts)?;
    check_leakage(&q, answer, pair, opts)?;
    Ok(q)
}

/// Grow `previous_query` with the next hop of the walk.
pub fn complexify_query(
    previous_query: &str,
    pair: (&Record, &Record),
    connect_key: (&str, &str),
    answer: &str,
    provider: &dyn LlmProvider,
    opts: &SynthOptions,
) -> Result<String, SynthError> {
    if previous_query.trim().is_empty() {
        return Err(SynthError::InvalidArgument("previous query is empty".into()));
    }
    let prompt = prompts::fill(
        prompts::COMPLEXIFY_QUERY_V1,
        &[
            ("existing_question", previous_query),
            ("existing_answer", answer),
            ("target_schema", &schema_line(pair.1)),
            ("target_record", &record_json(pair.1)),
            ("connect_key", &connect_text(pair.0, pair.1, connect_key)),
            ("answer", answer),
        ],
    )
    .expect("complexify template variables are complete");
    let q = generate(&prompt, provider, opts)?;
    if crate::scoring::normalize_answer(&q) == crate::scoring::normalize_answer(previous_query) {
        return Err(SynthError::DegenerateGeneration);
    }
    check_leakage(&q, answer, pair, opts)?;
    Ok(q)
}

/// A `k`-hop complex sample: walk `k + 1` records, generate the seed
/// question from the first hop and complexify once per further hop, so the
/// trace holds `k` questions. The answer is the walk head's id.
pub fn synthesize_complex(
    graph: &RecordGraph,
    k: usize,
    provider: &dyn LlmProvider,
    seed: u64,
    opts: &SynthOptions,
) -> Result<SynthSample, SynthError> {
    if k == 0 {
        return Err(SynthError::InvalidArgument("k must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = walk_nodes(graph, k + 1, &mut rng)?;
    let rec = |i: usize| graph.record(nodes[i].0);
    let key = |i: usize| {
        let (a, b) = nodes[i].1.as_ref().expect("every hop carries its key");
        (a.as_str(), b.as_str())
    };
    let answer = rec(0).reference.record_id.clone();
    let mut trace = vec![generate_seed_query((rec(0), rec(1)), key(1), &answer, provider, opts)?];
    for hop in 2..=k {
        let prev = trace.last().expect("seeded trace");
        let q = complexify_query(prev, (rec(hop - 1), rec(hop)), key(hop), &answer, provider, opts)?;
        trace.push(q);
    }
    let sample = SynthSample {
        question: trace.last().expect("non-empty trace").clone(),
        answer,
        category: Category::Complex,
        provenance: Some(to_walk_path(graph, &nodes)),
        generation_trace: trace,
    };
    sample.check_invariants()?;
    Ok(sample)
}

/// `n` complex samples with per-sample seeds `base_seed + i` and hop counts
/// drawn uniformly from `k_range` (inclusive). Failures are returned in place.
pub fn synthesize_complex_batch(
    graph: &RecordGraph,
    n: usize,
    k_range: (usize, usize),
    provider: &dyn LlmProvider,
    base_seed: u64,
    opts: &SynthOptions,
) -> Vec<Result<SynthSample, SynthError>> {
    let (lo, hi) = (k_range.0.max(1), k_range.1.max(k_range.0.max(1)));
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed.wrapping_add(i as u64);
            let k = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15).gen_range(lo..=hi);
            synthesize_complex(graph, k, provider, seed, opts)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Simple and task-specific samples

/// Knowledge source for templated QA: a table of articles with a title and
/// a body column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeSource {
    pub table: String,
    pub title_field: String,
    pub body_field: String,
}

fn quote_ident(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

fn scalar_text(env: &SqlEnvironment, sql: &str) -> Result<Vec<Vec<Value>>, SynthError> {
    Ok(env.with_connection(|c| {
        let mut stmt = c.prepare(sql)?;
        let width = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut vals = Vec::with_capacity(width);
            for i in 0..width {
                vals.push(match row.get_ref(i)? {
                    rusqlite::types::ValueRef::Null => Value::Null,
                    rusqlite::types::ValueRef::Integer(n) => Value::from(n),
                    rusqlite::types::ValueRef::Real(f) => Value::from(f),
                    rusqlite::types::ValueRef::Text(t) => Value::from(String::from_utf8_lossy(t).into_owned()),
                    rusqlite::types::ValueRef::Blob(b) => Value::from(hex::encode(b)),
                });
            }
            out.push(vals);
        }
        Ok(out)
    })?)
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => "None".to_string(),
        other => other.to_string(),
    }
}

/// Templated single-table questions: row counts, counts per value of
/// low-cardinality text columns, and article lookups when a knowledge
/// source is given.
pub fn synthesize_simple(
    env: &SqlEnvironment,
    tables: &[String],
    knowledge: Option<&KnowledgeSource>,
    max_per_table: usize,
) -> Result<Vec<SynthSample>, SynthError> {
    let mut out = Vec::new();
    let simple = |question: String, answer: String| SynthSample {
        question,
        answer,
        category: Category::Simple,
        provenance: None,
        generation_trace: Vec::new(),
    };
    for table in tables {
        let t = quote_ident(table);
        let mut made = 0;
        let total = scalar_text(env, &format!("SELECT count(*) FROM {t}"))?;
        if let Some(n) = total.first().and_then(|r| r.first()) {
            out.push(simple(format!("How many {table} records are there?"), value_text(n)));
            made += 1;
        }
        for col in env.columns(table)? {
            if made >= max_per_table {
                break;
            }
            let c = quote_ident(&col);
            let distinct = scalar_text(
                env,
                &format!("SELECT count(DISTINCT {c}) FROM {t} WHERE typeof({c}) = 'text'"),
            )?;
            let d = distinct.first().and_then(|r| r.first()).and_then(Value::as_i64).unwrap_or(0);
            if !(2..=8).contains(&d) {
                continue;
            }
            let groups = scalar_text(
                env,
                &format!("SELECT {c}, count(*) FROM {t} WHERE typeof({c}) = 'text' GROUP BY {c} ORDER BY {c}"),
            )?;
            for row in groups {
                if made >= max_per_table {
                    break;
                }
                out.push(simple(
                    format!("How many {table} records have {col} equal to '{}'?", value_text(&row[0])),
                    value_text(&row[1]),
                ));
                made += 1;
            }
        }
    }
    if let Some(k) = knowledge {
        let rows = scalar_text(
            env,
            &format!(
                "SELECT {}, {} FROM {} ORDER BY 1",
                quote_ident(&k.title_field),
                quote_ident(&k.body_field),
                quote_ident(&k.table)
            ),
        )?;
        for row in rows.into_iter().take(max_per_table) {
            let (title, body) = (value_text(&row[0]), value_text(&row[1]));
            if title.trim().is_empty() || body.trim().is_empty() || body == "None" {
                continue;
            }
            out.push(simple(
                format!("According to the knowledge article \"{title}\", what is the guidance?"),
                body,
            ));
        }
    }
    Ok(out)
}

/// A parameterized analytical question with the SQL that answers it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub name: String,
    pub question: String,
    pub answer_query: String,
    #[serde(default)]
    pub params: Vec<indexmap::IndexMap<String, String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTemplateFile {
    #[serde(default)]
    pub templates: Vec<TaskTemplate>,
}

/// Instantiate each template once per parameter set. The answer is the
/// first column of the query result joined with ", ", or "None" when empty.
pub fn synthesize_task_specific(
    env: &SqlEnvironment,
    templates: &[TaskTemplate],
) -> Result<Vec<SynthSample>, SynthError> {
    let mut out = Vec::new();
    for t in templates {
        let sets = if t.params.is_empty() { vec![Default::default()] } else { t.params.clone() };
        for params in sets {
            let vars: Vec<(&str, &str)> = params.iter().map(|(k, v)| (k.as_str(), v.as_str())).collect();
            let err = |e: prompts::PromptError| SynthError::InvalidArgument(format!("template {}: {e}", t.name));
            let question = prompts::fill(&t.question, &vars).map_err(err)?;
            let query = prompts::fill(&t.answer_query, &vars).map_err(err)?;
            let rows = scalar_text(env, &query)?;
            let values: Vec<String> = rows.iter().filter_map(|r| r.first()).filter(|v| !v.is_null()).map(value_text).collect();
            let answer = if values.is_empty() { "None".to_string() } else { values.join(", ") };
            out.push(SynthSample {
                question,
                answer,
                category: Category::TaskSpecific,
                provenance: None,
                generation_trace: Vec::new(),
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Datasets

fn content_hash(s: &SynthSample) -> String {
    let mut h = Sha256::new();
    h.update(s.question.as_bytes());
    h.update([0]);
    h.update(s.answer.as_bytes());
    hex::encode(h.finalize())
}

/// Merge the three categories, ordered by category then content hash.
pub fn assemble_dataset(
    complex: Vec<SynthSample>,
    simple: Vec<SynthSample>,
    task_specific: Vec<SynthSample>,
) -> Result<Vec<SynthSample>, SynthError> {
    let mut all = Vec::with_capacity(complex.len() + simple.len() + task_specific.len());
    for (expected, batch) in [
        (Category::Complex, complex),
        (Category::Simple, simple),
        (Category::TaskSpecific, task_specific),
    ] {
        for s in batch {
            if s.category != expected {
                return Err(SynthError::InvariantViolation(format!(
                    "{:?} sample passed as {expected:?}",
                    s.category
                )));
            }
            s.check_invariants()?;
            all.push(s);
        }
    }
    all.sort_by_cached_key(|s| (s.category, content_hash(s)));
    Ok(all)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[SynthSample]) -> Result<(), SynthError> {
    let io = |e: std::io::Error| SynthError::Io(format!("{}: {e}", path.as_ref().display()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref()).map_err(io)?);
    for s in samples {
        writeln!(f, "{}", serde_json::to_string(s).expect("sample serializes")).map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<SynthSample>, SynthError> {
    let io = |e: std::io::Error| SynthError::Io(format!("{}: {e}", path.as_ref().display()));
    let f = std::fs::File::open(path.as_ref()).map_err(io)?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SynthSample = serde_json::from_str(&line)
            .map_err(|e| SynthError::Io(format!("line {}: {e}", n + 1)))?;
        s.check_invariants()?;
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Edge;
    use crate::llm::{FnProvider, ScriptedProvider};
    use indexmap::IndexMap;

    fn rec(table: &str, id: &str, extra: &[(&str, Value)]) -> Record {
        let mut fields = IndexMap::new();
        fields.insert("Id".to_string(), Value::from(id));
        for (k, v) in extra {
            fields.insert(k.to_string(), v.clone());
        }
        Record { reference: RecordRef::new(table, id), fields }
    }

    fn chain() -> RecordGraph {
        RecordGraph::from_parts(
            vec![
                rec("A", "A1", &[("BId", "B7".into())]),
                rec("B", "B7", &[]),
                rec("C", "C3", &[("BId", "B7".into())]),
            ],
            vec![
                Edge { from: 0, to: 1, from_field: "BId".into(), to_field: "Id".into() },
                Edge { from: 2, to: 1, from_field: "BId".into(), to_field: "Id".into() },
            ],
        )
        .unwrap()
    }

    #[test]
    fn chain_walks() {
        let g = chain();
        for seed in 0..50 {
            let w = sample_walk(&g, 3, seed).unwrap();
            let ids: Vec<&str> = w.records.iter().map(|r| r.record_id.as_str()).collect();
            assert!(ids == ["A1", "B7", "C3"] || ids == ["C3", "B7", "A1"], "{ids:?}");
            assert_eq!(w.connect_keys, vec![("BId".to_string(), "Id".to_string()), ("Id".to_string(), "BId".to_string())]);
        }
        let one = sample_walk(&g, 1, 3).unwrap();
        assert_eq!((one.records.len(), one.connect_keys.len()), (1, 0));
        assert_eq!(sample_walk(&g, 7, 1).unwrap_err().to_string().contains("3 nodes"), true);
    }

    #[test]
    fn walk_errors() {
        let isolated = RecordGraph::from_parts(vec![rec("A", "a", &[]), rec("A", "b", &[])], vec![]).unwrap();
        assert!(matches!(sample_walk(&isolated, 2, 0), Err(SynthError::DeadEnd { .. })));
        let empty = RecordGraph::default();
        assert!(matches!(sample_walk(&empty, 1, 0), Err(SynthError::EmptyGraph)));
    }

    #[test]
    fn walks_are_deterministic() {
        let g = chain();
        assert_eq!(sample_walk(&g, 2, 42).unwrap(), sample_walk(&g, 2, 42).unwrap());
    }

    #[test]
    fn seed_query_contract() {
        let (a, b) = (rec("Order", "801xx0001", &[]), rec("Account", "001xx0002", &[]));
        let key = ("AccountId", "Id");
        let opts = SynthOptions::default();
        let ok = ScriptedProvider::new([r#"{"Q": "Which order…?"}"#]).unwrap();
        assert_eq!(generate_seed_query((&a, &b), key, "801xx0001", &ok, &opts).unwrap(), "Which order…?");

        let prose = ScriptedProvider::new(["no", "still no", "nope"]).unwrap();
        assert!(matches!(
            generate_seed_query((&a, &b), key, "801xx0001", &prose, &opts),
            Err(SynthError::MalformedGeneration { attempts: 3, .. })
        ));

        let leak = ScriptedProvider::new([r#"{"Q": "Is it 801xx0001?"}"#]).unwrap();
        assert!(matches!(
            generate_seed_query((&a, &b), key, "801xx0001", &leak, &opts),
            Err(SynthError::LeakageDetected(_))
        ));

        let fenced = ScriptedProvider::new(["```json\n{\"Q\": \"Fenced?\"}\n```"]).unwrap();
        assert_eq!(generate_seed_query((&a, &b), key, "801xx0001", &fenced, &opts).unwrap(), "Fenced?");
    }

    #[test]
    fn complexify_contract() {
        let (a, u) = (
            rec("Case", "500xx01", &[]),
            rec("User", "005xx09", &[("Name", "Dana Whitfield".into())]),
        );
        let key = ("OwnerId", "Id");
        let opts = SynthOptions::default();
        let deeper = ScriptedProvider::new([r#"{"Q": "deeper question"}"#]).unwrap();
        assert_eq!(complexify_query("q1", (&a, &u), key, "500xx01", &deeper, &opts).unwrap(), "deeper question");

        let same = ScriptedProvider::new([r#"{"Q": "Q1 "}"#]).unwrap();
        assert!(matches!(
            complexify_query("q1", (&a, &u), key, "500xx01", &same, &opts),
            Err(SynthError::DegenerateGeneration)
        ));

        let named = ScriptedProvider::new([r#"{"Q": "Which case did dana whitfield own?"}"#]).unwrap();
        assert!(matches!(
            complexify_query("q1", (&a, &u), key, "500xx01", &named, &opts),
            Err(SynthError::LeakageDetected(_))
        ));
        let id = ScriptedProvider::new([r#"{"Q": "Which case did user 005xx09 own?"}"#]).unwrap();
        assert!(matches!(
            complexify_query("q1", (&a, &u), key, "500xx01", &id, &opts),
            Err(SynthError::LeakageDetected(_))
        ));
    }

    fn counter_provider() -> FnProvider {
        FnProvider::new(|req| {
            let prompt = &req.messages[0].content;
            Ok(format!("{{\"Q\": \"Which record matches clue {}? Return only its ID. If no such records exist, return 'None'.\"}}", prompt.len()))
        })
    }

    #[test]
    fn complex_samples() {
        let g = chain();
        let p = counter_provider();
        let s = synthesize_complex(&g, 2, &p, 5, &SynthOptions::default()).unwrap();
        assert_eq!(s.generation_trace.len(), 2);
        assert_eq!(s.answer, s.provenance.as_ref().unwrap().records[0].record_id);
        assert!(s.question.ends_with("return 'None'."));

        let scripted = ScriptedProvider::new([r#"{"Q": "only one"}"#]).unwrap();
        let one_hop = synthesize_complex(&g, 1, &scripted, 0, &SynthOptions::default()).unwrap();
        assert_eq!(one_hop.generation_trace, vec!["only one".to_string()]);

        assert!(matches!(synthesize_complex(&g, 3, &p, 0, &SynthOptions::default()), Err(SynthError::DeadEnd { .. })));
        assert_eq!(
            synthesize_complex(&g, 2, &p, 9, &SynthOptions::default()).unwrap(),
            synthesize_complex(&g, 2, &p, 9, &SynthOptions::default()).unwrap()
        );
    }

    fn sample(cat: Category, q: &str, a: &str) -> SynthSample {
        SynthSample { question: q.into(), answer: a.into(), category: cat, provenance: None, generation_trace: vec![] }
    }

    #[test]
    fn dataset_ordering_and_round_trip() {
        let g = chain();
        let complex = synthesize_complex(&g, 2, &counter_provider(), 1, &SynthOptions::default()).unwrap();
        let simple = sample(
            Category::Simple,
            "How long after purchase can Shoes & Clothings customers claim store credit for an overcharged order?",
            "30 days",
        );
        let task = sample(Category::TaskSpecific, "Which states had the quickest case closures in Q4 of 2021?", "CA, NY");
        let all = assemble_dataset(vec![complex], vec![simple.clone()], vec![task.clone()]).unwrap();
        let cats: Vec<Category> = all.iter().map(|s| s.category).collect();
        assert_eq!(cats, [Category::Complex, Category::Simple, Category::TaskSpecific]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_dataset(&path, &all).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 3);
        assert_eq!(read_dataset(&path).unwrap(), all);

        assert!(assemble_dataset(vec![simple], vec![], vec![]).is_err());
    }

    #[test]
    fn templated_categories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.db");
        rusqlite::Connection::open(&path)
            .unwrap()
            .execute_batch(
                "CREATE TABLE \"Case\" (Id TEXT, State TEXT, Status TEXT, Days INTEGER);
                 INSERT INTO \"Case\" VALUES ('c1','CA','Closed',2),('c2','NY','Closed',2),('c3','TX','Open',9);
                 CREATE TABLE Knowledge (Title TEXT, Body TEXT);
                 INSERT INTO Knowledge VALUES ('Store credit', 'Claims within 30 days.');",
            )
            .unwrap();
        let env = SqlEnvironment::open(&path).unwrap();
        let ks = KnowledgeSource { table: "Knowledge".into(), title_field: "Title".into(), body_field: "Body".into() };
        let simple = synthesize_simple(&env, &["Case".to_string()], Some(&ks), 10).unwrap();
        assert!(simple.contains(&sample(Category::Simple, "How many Case records are there?", "3")));
        assert!(simple.contains(&sample(Category::Simple, "How many Case records have Status equal to 'Closed'?", "2")));
        assert!(simple.iter().any(|s| s.answer == "Claims within 30 days."));

        let tpl: TaskTemplateFile = toml::from_str(
            r#"
            [[templates]]
            name = "quickest"
            question = "Which states had the quickest case closures with status {status}?"
            answer_query = "SELECT State FROM \"Case\" WHERE Status = '{status}' AND Days = (SELECT min(Days) FROM \"Case\" WHERE Status = '{status}') ORDER BY State"
            params = [{ status = "Closed" }, { status = "Escalated" }]
            "#,
        )
        .unwrap();
        let out = synthesize_task_specific(&env, &tpl.templates).unwrap();
        assert_eq!(out[0].answer, "CA, NY");
        assert_eq!(out[1].answer, "None");
    }
}
