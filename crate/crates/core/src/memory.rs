//! Long-term guideline memory: an indexed store of `(query -> guideline)`
//! units with top-1 cosine retrieval, a threshold gate, and offline updates
//! that only insert when two runs of a stronger model agree.

use std::collections::{HashSet, VecDeque};
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, AgentConfig, AgentError, GuidelineRef, RunResult, ToolRegistry};
use crate::llm::{self, ChatMessage, GenerationRequest, LlmError, LlmProvider};
use crate::prompts;
use crate::protocol::{self, Termination, Trajectory, TOOL_ANSWER};
use crate::scoring::{self, EquivalenceConfig, TaskKind};

pub const DEFAULT_THRESHOLD: f64 = 0.7;
pub const HASHED_DIMENSION: usize = 256;
pub const STORE_FORMAT: &str = "bizagent-memory";
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has dimension {got}, index expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("guideline rejected: {0}")]
    MalformedGuideline(String),
    #[error("trajectory has no steps to distill")]
    EmptyTrajectory,
    #[error("classifier reply is neither yes nor no: {0:?}")]
    MalformedClassification(String),
    #[error("invalid memory unit: {0}")]
    InvalidUnit(String),
    #[error("invalid memory configuration: {0}")]
    InvalidConfig(String),
    #[error("provider failed: {0}")]
    Provider(#[from] LlmError),
    #[error("agent failed: {0}")]
    Agent(#[from] AgentError),
    #[error("memory store {path}: {message}")]
    Store { path: String, message: String },
}

// ---------------------------------------------------------------------------
// Embedders

pub trait Embedder: Send + Sync {
    /// A unit-norm vector of `dimension()` entries.
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError>;
    fn dimension(&self) -> usize;
    /// Identifies the embedding space; stored vectors from a different
    /// fingerprint are recomputed on load.
    fn fingerprint(&self) -> String;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Unigram and bigram features with their raw counts, in first-seen order.
pub fn lexical_features(text: &str) -> Vec<(String, u32)> {
    let toks = tokenize(text);
    let mut feats: indexmap::IndexMap<String, u32> = indexmap::IndexMap::new();
    for t in &toks {
        *feats.entry(format!("u:{t}")).or_default() += 1;
    }
    for w in toks.windows(2) {
        *feats.entry(format!("b:{} {}", w[0], w[1])).or_default() += 1;
    }
    if feats.is_empty() {
        let raw = text.trim();
        if !raw.is_empty() {
            feats.insert(format!("r:{raw}"), 1);
        }
    }
    feats.into_iter().collect()
}

/// Deterministic offline embedder: hashed bag of unigrams and bigrams,
/// `1 + ln(tf)` weights, L2-normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEmbedder {
    dimension: usize,
}

impl Default for HashedEmbedder {
    fn default() -> Self {
        Self { dimension: HASHED_DIMENSION }
    }
}

impl HashedEmbedder {
    pub fn new(dimension: usize) -> Result<Self, MemoryError> {
        if dimension == 0 {
            return Err(MemoryError::InvalidConfig("embedding dimension must be positive".into()));
        }
        Ok(Self { dimension })
    }

    pub fn bucket(&self, feature: &str) -> usize {
        (fnv1a(feature.as_bytes()) % self.dimension as u64) as usize
    }
}

impl Embedder for HashedEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        let feats = lexical_features(text);
        if feats.is_empty() {
            return Err(MemoryError::EmptyText);
        }
        let mut v = vec![0.0; self.dimension];
        for (f, tf) in feats {
            v[self.bucket(&f)] += 1.0 + f64::from(tf).ln();
        }
        normalize(&mut v);
        Ok(v)
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn fingerprint(&self) -> String {
        format!("hashed-fnv1a-uni-bi-{}-v1", self.dimension)
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpEmbedderConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub dimension: usize,
    pub timeout_secs: u64,
}

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint.
pub struct HttpEmbedder {
    config: HttpEmbedderConfig,
    http: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct EmbeddingReply {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    embedding: Vec<f64>,
    #[serde(default)]
    index: usize,
}

impl HttpEmbedder {
    pub fn new(config: HttpEmbedderConfig) -> Result<Self, MemoryError> {
        if config.dimension == 0 || config.base_url.trim().is_empty() {
            return Err(MemoryError::InvalidConfig("embedder needs a base_url and a dimension".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs.max(1)))
            .build()
            .map_err(|e| MemoryError::InvalidConfig(e.to_string()))?;
        Ok(Self { config, http })
    }

    pub fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, MemoryError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(MemoryError::EmptyText);
        }
        let url = format!("{}/v1/embeddings", self.config.base_url.trim_end_matches('/'));
        let mut req = self
            .http
            .post(url)
            .json(&serde_json::json!({"model": self.config.model, "input": texts}));
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let unavailable = |m: String| MemoryError::EmbedderUnavailable(m);
        let resp = req.send().map_err(|e| unavailable(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| unavailable(e.to_string()))?;
        if !status.is_success() {
            return Err(unavailable(format!("HTTP {}: {}", status.as_u16(), body.chars().take(200).collect::<String>())));
        }
        let mut reply: EmbeddingReply =
            serde_json::from_str(&body).map_err(|e| unavailable(format!("bad reply: {e}")))?;
        if reply.data.len() != texts.len() {
            return Err(unavailable(format!("expected {} vectors, got {}", texts.len(), reply.data.len())));
        }
        reply.data.sort_by_key(|d| d.index);
        reply
            .data
            .into_iter()
            .map(|d| {
                if d.embedding.len() != self.config.dimension {
                    return Err(MemoryError::DimensionMismatch {
                        expected: self.config.dimension,
                        got: d.embedding.len(),
                    });
                }
                let mut v = d.embedding;
                normalize(&mut v);
                Ok(v)
            })
            .collect()
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, text: &str) -> Result<Vec<f64>, MemoryError> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }

    fn dimension(&self) -> usize {
        self.config.dimension
    }

    fn fingerprint(&self) -> String {
        format!("http-{}-{}", self.config.model, self.config.dimension)
    }
}

// ---------------------------------------------------------------------------
// Index

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryUnit {
    /// The raw query text, unnormalized.
    pub key_query: String,
    pub guideline: String,
    pub embedding: Vec<f64>,
    /// Reference to the episode the guideline came from.
    #[serde(default)]
    pub created_from: Option<String>,
    #[serde(default)]
    pub model_tag: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHit {
    pub unit: MemoryUnit,
    pub similarity: f64,
}

/// An immutable generation of the memory. Readers hold an `Arc` to one of
/// these while the writer publishes the next.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryIndex {
    pub units: Vec<MemoryUnit>,
    pub dimension: usize,
    pub threshold: f64,
}

impl MemoryIndex {
    pub fn new(dimension: usize, threshold: f64) -> Result<Self, MemoryError> {
        if dimension == 0 {
            return Err(MemoryError::InvalidConfig("dimension must be positive".into()));
        }
        if !(0.0..=1.0).contains(&threshold) {
            return Err(MemoryError::InvalidConfig(format!("threshold {threshold} outside [0, 1]")));
        }
        Ok(Self { units: Vec::new(), dimension, threshold })
    }

    /// Best unit by cosine; the earliest inserted wins ties.
    pub fn top1_by_vector(&self, query: &[f64]) -> Option<RetrievalHit> {
        let mut best: Option<(usize, f64)> = None;
        for (i, u) in self.units.iter().enumerate() {
            let s = cosine(query, &u.embedding);
            if best.map_or(true, |(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        best.map(|(i, similarity)| RetrievalHit { unit: self.units[i].clone(), similarity })
    }

    fn validate_unit(&self, unit: &MemoryUnit) -> Result<(), MemoryError> {
        if unit.guideline.trim().is_empty() {
            return Err(MemoryError::InvalidUnit("empty guideline".into()));
        }
        if unit.key_query.trim().is_empty() {
            return Err(MemoryError::InvalidUnit("empty key".into()));
        }
        if unit.embedding.len() != self.dimension {
            return Err(MemoryError::DimensionMismatch { expected: self.dimension, got: unit.embedding.len() });
        }
        Ok(())
    }
}

/// A query waiting for the offline updater.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingUpdate {
    pub query: String,
    pub created_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum UpdateOutcome {
    Inserted { key_query: String },
    /// Both runs answered but the answers differ.
    Disagreed { first: String, second: String },
    /// At least one run ended without an answer.
    Unanswered,
    /// An earlier update in the same drain already covers this query.
    AlreadyCovered { similarity: f64 },
    Failed { error: String },
}

/// The live memory: the current index generation plus the update queue.
pub struct MemoryStore {
    embedder: Arc<dyn Embedder>,
    current: RwLock<Arc<MemoryIndex>>,
    writer: Mutex<()>,
    pending: Mutex<VecDeque<PendingUpdate>>,
}

impl MemoryStore {
    pub fn new(embedder: Arc<dyn Embedder>, threshold: f64) -> Result<Self, MemoryError> {
        let index = MemoryIndex::new(embedder.dimension(), threshold)?;
        Ok(Self::from_index(embedder, index))
    }

    fn from_index(embedder: Arc<dyn Embedder>, index: MemoryIndex) -> Self {
        Self {
            embedder,
            current: RwLock::new(Arc::new(index)),
            writer: Mutex::new(()),
            pending: Mutex::new(VecDeque::new()),
        }
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn snapshot(&self) -> Arc<MemoryIndex> {
        Arc::clone(&self.current.read().expect("memory snapshot lock poisoned"))
    }

    pub fn len(&self) -> usize {
        self.snapshot().units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn threshold(&self) -> f64 {
        self.snapshot().threshold
    }

    pub fn top1(&self, query: &str) -> Result<Option<RetrievalHit>, MemoryError> {
        let snap = self.snapshot();
        if snap.units.is_empty() {
            return Ok(None);
        }
        let v = self.embedder.embed(query)?;
        Ok(snap.top1_by_vector(&v))
    }

    fn publish(&self, f: impl FnOnce(&mut MemoryIndex) -> Result<(), MemoryError>) -> Result<(), MemoryError> {
        let _w = self.writer.lock().expect("memory writer lock poisoned");
        let mut next = (*self.snapshot()).clone();
        f(&mut next)?;
        *self.current.write().expect("memory snapshot lock poisoned") = Arc::new(next);
        Ok(())
    }

    pub fn insert(&self, unit: MemoryUnit) -> Result<(), MemoryError> {
        self.publish(|idx| {
            idx.validate_unit(&unit)?;
            idx.units.push(unit);
            Ok(())
        })
    }

    /// Embed `key_query` and insert a unit for it.
    pub fn insert_guideline(
        &self,
        key_query: &str,
        guideline: &str,
        created_from: Option<String>,
        model_tag: &str,
    ) -> Result<(), MemoryError> {
        let embedding = self.embedder.embed(key_query)?;
        self.insert(MemoryUnit {
            key_query: key_query.to_string(),
            guideline: guideline.to_string(),
            embedding,
            created_from,
            model_tag: model_tag.to_string(),
        })
    }

    pub fn clear(&self) -> Result<(), MemoryError> {
        self.publish(|idx| {
            idx.units.clear();
            Ok(())
        })
    }

    pub fn enqueue(&self, update: PendingUpdate) {
        self.pending.lock().expect("update queue poisoned").push_back(update);
    }

    pub fn pending_len(&self) -> usize {
        self.pending.lock().expect("update queue poisoned").len()
    }

    fn take_pending(&self) -> Vec<PendingUpdate> {
        self.pending.lock().expect("update queue poisoned").drain(..).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MemoryError> {
        let snap = self.snapshot();
        let store_err = |m: String| MemoryError::Store { path: path.as_ref().display().to_string(), message: m };
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path.as_ref()).map_err(|e| store_err(e.to_string()))?,
        );
        let header = StoreHeader {
            format: STORE_FORMAT.to_string(),
            version: STORE_VERSION,
            dimension: snap.dimension,
            threshold: snap.threshold,
            embedder: self.embedder.fingerprint(),
        };
        let mut lines = vec![serde_json::to_string(&header).expect("header serializes")];
        for u in &snap.units {
            lines.push(serde_json::to_string(u).expect("unit serializes"));
        }
        for l in lines {
            writeln!(f, "{l}").map_err(|e| store_err(e.to_string()))?;
        }
        f.flush().map_err(|e| store_err(e.to_string()))
    }

    /// Load a store file. Embeddings are recomputed when the file was
    /// written under a different embedder fingerprint. A missing file
    /// yields an empty store with `threshold`.
    pub fn load(path: impl AsRef<Path>, embedder: Arc<dyn Embedder>, threshold: f64) -> Result<Self, MemoryError> {
        let p = path.as_ref();
        if !p.exists() {
            return Self::new(embedder, threshold);
        }
        let store_err = |m: String| MemoryError::Store { path: p.display().to_string(), message: m };
        let f = std::fs::File::open(p).map_err(|e| store_err(e.to_string()))?;
        let mut lines = std::io::BufReader::new(f).lines();
        let header_line = match lines.next() {
            Some(l) => l.map_err(|e| store_err(e.to_string()))?,
            None => return Self::new(embedder, threshold),
        };
        let header: StoreHeader =
            serde_json::from_str(&header_line).map_err(|e| store_err(format!("bad header: {e}")))?;
        if header.format != STORE_FORMAT || header.version != STORE_VERSION {
            return Err(store_err(format!("unsupported format {} v{}", header.format, header.version)));
        }
        let recompute = header.embedder != embedder.fingerprint();
        if recompute {
            tracing::info!(old = %header.embedder, new = %embedder.fingerprint(), "re-embedding memory keys");
        }
        let mut index = MemoryIndex::new(embedder.dimension(), threshold)?;
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| store_err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut unit: MemoryUnit =
                serde_json::from_str(&line).map_err(|e| store_err(format!("line {}: {e}", n + 2)))?;
            if recompute {
                unit.embedding = embedder.embed(&unit.key_query)?;
            }
            index.validate_unit(&unit)?;
            index.units.push(unit);
        }
        Ok(Self::from_index(embedder, index))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoreHeader {
    format: String,
    version: u32,
    dimension: usize,
    threshold: f64,
    embedder: String,
}

// ---------------------------------------------------------------------------
// Distillation and gating

/// Tokens that look like record identifiers: alphanumeric, at least six
/// characters, mixing letters and digits.
fn id_like_tokens(text: &str) -> HashSet<String> {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| {
            t.len() >= 6 && t.bytes().any(|b| b.is_ascii_digit()) && t.bytes().any(|b| b.is_ascii_alphabetic())
        })
        .map(str::to_string)
        .collect()
}

/// Check a guideline: consecutive `1.`, `2.`, ... lines, mentions a tool the
/// trajectory used, and repeats none of the trajectory's record ids.
pub fn check_guideline(text: &str, trajectory: &Trajectory) -> Result<(), String> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.is_empty() {
        return Err("empty guideline".into());
    }
    for (i, line) in lines.iter().enumerate() {
        let prefix = format!("{}.", i + 1);
        let ok = line.strip_prefix(&prefix).is_some_and(|rest| rest.starts_with(char::is_whitespace) && !rest.trim().is_empty());
        if !ok {
            return Err(format!("line {} is not item {}: {line:?}", i + 1, i + 1));
        }
    }
    let tools: HashSet<&str> = trajectory
        .steps
        .iter()
        .map(|s| s.action.tool_name())
        .filter(|t| *t != TOOL_ANSWER)
        .collect();
    if !tools.is_empty() && !tools.iter().any(|t| text.contains(t)) {
        return Err("no tool is named".into());
    }
    let mut ids = HashSet::new();
    for s in &trajectory.steps {
        if let Some(o) = &s.observation {
            ids.extend(id_like_tokens(o));
        }
    }
    if let Some(a) = &trajectory.final_answer {
        ids.extend(id_like_tokens(a));
    }
    let text_ids = id_like_tokens(text);
    if let Some(leak) = ids.intersection(&text_ids).next() {
        return Err(format!("mentions record id {leak}"));
    }
    Ok(())
}

/// Ask `provider` for a numbered guideline summarizing a successful
/// trajectory. One retry on a rejected reply.
pub fn distill_guideline(
    trajectory: &Trajectory,
    schema_information: &str,
    provider: &dyn LlmProvider,
) -> Result<String, MemoryError> {
    if trajectory.steps.is_empty() {
        return Err(MemoryError::EmptyTrajectory);
    }
    let log = protocol::serialize_trajectory(trajectory)
        .map_err(|e| MemoryError::MalformedGuideline(format!("unserializable trajectory: {e}")))?;
    let prompt = prompts::fill(
        prompts::GUIDELINE_V1,
        &[("schema_information", schema_information), ("successful_trajectories", &log)],
    )
    .expect("guideline template variables are complete");
    let request = GenerationRequest::new(vec![ChatMessage::user(prompt)]).with_temperature(llm::DEFAULT_TEMPERATURE);
    let mut reason = String::new();
    for _ in 0..2 {
        let reply = llm::complete(provider, &request)?;
        let text = reply.text.trim().to_string();
        match check_guideline(&text, trajectory) {
            Ok(()) => return Ok(text),
            Err(r) => reason = r,
        }
    }
    Err(MemoryError::MalformedGuideline(reason))
}

fn parse_yes_no(text: &str) -> Option<bool> {
    let word = text
        .split(|c: char| !c.is_alphabetic())
        .find(|w| !w.is_empty())?
        .to_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Few-shot classification: `true` when `query` is a knowledge question,
/// whose memory updates are suppressed.
pub fn qa_gate(query: &str, provider: &dyn LlmProvider) -> Result<bool, MemoryError> {
    let prompt = prompts::fill(prompts::QA_GATE_V1, &[("query", query)]).expect("gate template is complete");
    let request = GenerationRequest::new(vec![ChatMessage::user(prompt)])
        .with_temperature(0.0)
        .with_max_new_tokens(4);
    let mut last = String::new();
    for _ in 0..2 {
        let reply = llm::complete(provider, &request)?;
        if let Some(b) = parse_yes_no(&reply.text) {
            return Ok(b);
        }
        last = reply.text;
    }
    Err(MemoryError::MalformedClassification(last))
}

// ---------------------------------------------------------------------------
// Solving with memory

/// The pieces the memory loop needs beyond the agent itself.
pub struct MemoryContext<'a> {
    pub store: &'a MemoryStore,
    /// Stronger model run twice per update.
    pub advanced: &'a dyn LlmProvider,
    /// Writes guidelines; defaults to `advanced` when absent.
    pub distiller: Option<&'a dyn LlmProvider>,
    /// Knowledge-question classifier; no gating when absent.
    pub gate: Option<&'a dyn LlmProvider>,
    pub advanced_config: &'a AgentConfig,
    pub schema_information: &'a str,
    pub equivalence: EquivalenceConfig,
}

/// Retrieve, then solve. A hit at or above the threshold injects its
/// guideline. A miss queues an update (unless the gate marks the query as
/// knowledge QA) and the episode runs without a guideline; the queue is
/// drained by [`drain_updates`].
pub fn solve(
    query: &str,
    ctx: &MemoryContext<'_>,
    tools: &ToolRegistry,
    config: &AgentConfig,
    provider: &dyn LlmProvider,
) -> Result<RunResult, MemoryError> {
    let threshold = ctx.store.threshold();
    let hit = ctx.store.top1(query)?;
    match hit {
        Some(hit) if hit.similarity >= threshold => {
            let mut r = agent::run_episode(query, tools, provider, config, Some(&hit.unit.guideline))?;
            r.guideline_used = Some(GuidelineRef { key_query: hit.unit.key_query, similarity: hit.similarity });
            Ok(r)
        }
        _ => {
            let knowledge = match ctx.gate {
                Some(g) => qa_gate(query, g)?,
                None => false,
            };
            if !knowledge {
                ctx.store.enqueue(PendingUpdate { query: query.to_string(), created_from: None });
            }
            Ok(agent::run_episode(query, tools, provider, config, None)?)
        }
    }
}

fn answered(r: &RunResult) -> Option<&str> {
    (r.termination == Termination::Answered).then(|| r.final_answer()).flatten()
}

fn update_one(ctx: &MemoryContext<'_>, tools: &ToolRegistry, upd: &PendingUpdate) -> Result<UpdateOutcome, MemoryError> {
    if let Some(hit) = ctx.store.top1(&upd.query)? {
        if hit.similarity >= ctx.store.threshold() {
            return Ok(UpdateOutcome::AlreadyCovered { similarity: hit.similarity });
        }
    }
    let first = agent::run_episode(&upd.query, tools, ctx.advanced, ctx.advanced_config, None)?;
    let second = agent::run_episode(&upd.query, tools, ctx.advanced, ctx.advanced_config, None)?;
    let (Some(a), Some(b)) = (answered(&first), answered(&second)) else {
        return Ok(UpdateOutcome::Unanswered);
    };
    if !scoring::is_equivalent(a, b, TaskKind::Analysis, ctx.equivalence) {
        return Ok(UpdateOutcome::Disagreed { first: a.to_string(), second: b.to_string() });
    }
    let distiller = ctx.distiller.unwrap_or(ctx.advanced);
    let guideline = distill_guideline(&first.trajectory, ctx.schema_information, distiller)?;
    ctx.store
        .insert_guideline(&upd.query, &guideline, upd.created_from.clone(), &ctx.advanced.model_tag())?;
    Ok(UpdateOutcome::Inserted { key_query: upd.query.clone() })
}

/// Process every queued update in order. Failures are reported per update
/// and never abort the drain.
pub fn drain_updates(ctx: &MemoryContext<'_>, tools: &ToolRegistry) -> Vec<UpdateOutcome> {
    ctx.store
        .take_pending()
        .iter()
        .map(|u| {
            update_one(ctx, tools, u).unwrap_or_else(|e| {
                tracing::warn!(query = %u.query, error = %e, "memory update failed");
                UpdateOutcome::Failed { error: e.to_string() }
            })
        })
        .collect()
}

/// One sequential step of the memory loop: solve, then apply any update
/// the query triggered so that later queries can use it.
pub fn solve_with_memory(
    query: &str,
    ctx: &MemoryContext<'_>,
    tools: &ToolRegistry,
    config: &AgentConfig,
    provider: &dyn LlmProvider,
) -> Result<RunResult, MemoryError> {
    let r = solve(query, ctx, tools, config, provider)?;
    drain_updates(ctx, tools);
    Ok(r)
}

/// Action names mentioned in a guideline, for listing.
pub fn guideline_tools(guideline: &str) -> Vec<&'static str> {
    [protocol::TOOL_EXECUTE, protocol::TOOL_DATE_CALCULATION]
        .into_iter()
        .filter(|t| guideline.contains(t))
        .collect()
}
