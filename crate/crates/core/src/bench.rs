//! Batch evaluation over a labelled dataset, per-skill aggregation in the
//! usual Workflow / Policy / Text / Database layout, and episode replay.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{self, AgentConfig, EpisodeLog, RunResult, ToolRegistry};
use crate::llm::{LlmProvider, ScriptedProvider};
use crate::memory::{self, MemoryContext};
use crate::protocol::{self, Termination};
use crate::scoring::{self, TaskKind};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset {path}: {message}")]
    Dataset { path: String, message: String },
    #[error("report io: {0}")]
    Io(String),
    #[error("replay diverged at byte {position}: expected {expected:?}, got {actual:?}")]
    ReplayDivergence {
        position: usize,
        expected: String,
        actual: String,
    },
    #[error("replay failed: {0}")]
    Replay(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Skill {
    Workflow,
    Policy,
    Text,
    Database,
}

impl Skill {
    pub const ALL: [Skill; 4] = [Skill::Workflow, Skill::Policy, Skill::Text, Skill::Database];

    pub fn parse(s: &str) -> Option<Skill> {
        match s.trim().to_ascii_lowercase().as_str() {
            "workflow" => Some(Skill::Workflow),
            "policy" => Some(Skill::Policy),
            "text" => Some(Skill::Text),
            "database" => Some(Skill::Database),
            _ => None,
        }
    }
}

impl fmt::Display for Skill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Skill::Workflow => "Workflow",
            Skill::Policy => "Policy",
            Skill::Text => "Text",
            Skill::Database => "Database",
        })
    }
}

// serde by display name, accepting any case on input
impl Serialize for Skill {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Skill {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Skill::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("unknown skill {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    F1,
}

impl Metric {
    pub fn task_kind(self) -> TaskKind {
        match self {
            Metric::ExactMatch => TaskKind::Analysis,
            Metric::F1 => TaskKind::Qa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSample {
    pub id: String,
    pub task: String,
    pub skill: Skill,
    pub question: String,
    pub answer: String,
    pub metric: Metric,
}

pub fn read_bench_dataset(path: impl AsRef<Path>) -> Result<Vec<BenchSample>, BenchError> {
    let p = path.as_ref();
    let err = |m: String| BenchError::Dataset { path: p.display().to_string(), message: m };
    let f = std::fs::File::open(p).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(format!("line {}: {e}", n + 1)))?);
    }
    if out.is_empty() {
        return Err(err("dataset is empty".into()));
    }
    Ok(out)
}

/// Score line for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub task: String,
    pub skill: Skill,
    pub score: f64,
    pub reward: f64,
    pub prediction: Option<String>,
    pub termination: Option<Termination>,
    pub turns_used: u32,
    pub guideline_used: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMeta {
    pub model_tag: String,
    pub config_hash: String,
    pub started_at: String,
    pub finished_at: String,
    pub samples: usize,
    pub provider_errors: usize,
    pub memory_units: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Mean score per task id, in [0, 1].
    pub per_task: BTreeMap<String, f64>,
    /// Mean of member-task means, in [0, 100]; `None` when no task has that skill.
    pub per_skill: BTreeMap<Skill, Option<f64>>,
    /// Mean of the skill means that are present, in [0, 100].
    pub overall: f64,
    pub samples: Vec<SampleScore>,
    pub meta: BenchMeta,
}

pub const REPORT_COLUMNS: [&str; 5] = ["Workflow", "Policy", "Text", "Database", "Avg"];

/// Reduce sample scores into task, skill and overall means. Tasks weigh
/// equally within a skill and skills weigh equally overall.
pub fn aggregate(samples: &[SampleScore]) -> (BTreeMap<String, f64>, BTreeMap<Skill, Option<f64>>, f64) {
    let mut by_task: BTreeMap<&str, (Skill, f64, usize)> = BTreeMap::new();
    for s in samples {
        let e = by_task.entry(&s.task).or_insert((s.skill, 0.0, 0));
        e.1 += s.score;
        e.2 += 1;
    }
    let per_task: BTreeMap<String, f64> =
        by_task.iter().map(|(t, (_, sum, n))| (t.to_string(), sum / *n as f64)).collect();
    let mut per_skill = BTreeMap::new();
    for skill in Skill::ALL {
        let means: Vec<f64> = by_task
            .iter()
            .filter(|(_, (sk, _, _))| *sk == skill)
            .map(|(t, _)| per_task[*t])
            .collect();
        let mean = (!means.is_empty()).then(|| 100.0 * means.iter().sum::<f64>() / means.len() as f64);
        per_skill.insert(skill, mean);
    }
    let present: Vec<f64> = per_skill.values().flatten().copied().collect();
    let overall = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    (per_task, per_skill, overall)
}

impl BenchReport {
    /// Markdown table with one row: the four skill means and their average.
    pub fn render_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.1}"));
        let mut row: Vec<String> = Skill::ALL.iter().map(|s| cell(self.per_skill[s])).collect();
        row.push(cell(Some(self.overall)));
        format!(
            "| {} |\n|{}|\n| {} |\n",
            REPORT_COLUMNS.join(" | "),
            vec!["---"; REPORT_COLUMNS.len()].join("|"),
            row.join(" | ")
        )
    }

    /// Line-delimited records: samples, tasks, skills, then the overall
    /// line. Timing lives only in `meta`, so these bytes are reproducible.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        for s in &self.samples {
            let mut v = serde_json::to_value(s).expect("score serializes");
            v["kind"] = "sample".into();
            push(v);
        }
        for (task, mean) in &self.per_task {
            push(serde_json::json!({"kind": "task", "task": task, "mean": mean}));
        }
        for (skill, mean) in &self.per_skill {
            push(serde_json::json!({"kind": "skill", "skill": skill, "mean": mean}));
        }
        push(serde_json::json!({"kind": "overall", "mean": self.overall}));
        out
    }

    /// Write `report.jsonl`, `meta.json` and `table.md` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), BenchError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| BenchError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join("report.jsonl"), self.to_jsonl()).map_err(io)?;
        std::fs::write(
            dir.join("meta.json"),
            serde_json::to_string_pretty(&self.meta).expect("meta serializes"),
        )
        .map_err(io)?;
        std::fs::write(dir.join("table.md"), self.render_table()).map_err(io)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    /// Episodes run concurrently; memory updates drain between batches.
    pub width: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { width: 1 }
    }
}

pub struct BenchOutput {
    pub report: BenchReport,
    pub logs: Vec<EpisodeLog>,
}

fn config_hash(config: &AgentConfig, opts: &BenchOptions, model_tag: &str, threshold: Option<f64>) -> String {
    let v = serde_json::json!({
        "agent": config,
        "width": opts.width,
        "model": model_tag,
        "memory_threshold": threshold,
    });
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}

fn score_sample(
    sample: &BenchSample,
    outcome: Result<(RunResult, u64), String>,
    model_tag: &str,
    config: &AgentConfig,
) -> (SampleScore, Option<EpisodeLog>) {
    match outcome {
        Ok((run, elapsed)) => {
            let text = protocol::serialize_trajectory(&run.trajectory).expect("episode trajectory is valid");
            let prediction = run.final_answer().map(str::to_string);
            let kind = sample.metric.task_kind();
            let reward = match prediction.as_deref() {
                Some(p) => scoring::reward(&text, p, &sample.answer, kind).total,
                None => scoring::RewardBreakdown::new(u8::from(protocol::validate_format(&text).valid), 0.0).total,
            };
            let score = prediction.as_deref().map_or(0.0, |p| scoring::answer_score(p, &sample.answer, kind));
            let guideline = agent::guideline_in_prompt(&run.system_prompt);
            let mut log = EpisodeLog::from_run(&run, guideline, elapsed, model_tag).with_limits(config);
            log.sample_id = Some(sample.id.clone());
            let s = SampleScore {
                id: sample.id.clone(),
                task: sample.task.clone(),
                skill: sample.skill,
                score,
                reward,
                prediction,
                termination: Some(run.termination),
                turns_used: run.turns_used,
                guideline_used: run.guideline_used.is_some(),
                error: None,
            };
            (s, Some(log))
        }
        Err(error) => (
            SampleScore {
                id: sample.id.clone(),
                task: sample.task.clone(),
                skill: sample.skill,
                score: 0.0,
                reward: 0.0,
                prediction: None,
                termination: None,
                turns_used: 0,
                guideline_used: false,
                error: Some(error),
            },
            None,
        ),
    }
}

/// Run every sample through the agent, optionally with memory, and score
/// it. Episode errors zero that sample's score and are otherwise contained.
pub fn bench(
    samples: &[BenchSample],
    tools: &ToolRegistry,
    config: &AgentConfig,
    provider: &dyn LlmProvider,
    memory: Option<&MemoryContext<'_>>,
    opts: &BenchOptions,
) -> Result<BenchOutput, BenchError> {
    if opts.width == 0 {
        return Err(BenchError::Config("width must be at least 1".into()));
    }
    if samples.is_empty() {
        return Err(BenchError::Config("no samples to run".into()));
    }
    config.validate().map_err(|e| BenchError::Config(e.to_string()))?;
    let started_at = chrono::Utc::now().to_rfc3339();
    let model_tag = provider.model_tag();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.width)
        .build()
        .map_err(|e| BenchError::Config(e.to_string()))?;

    let mut scores = Vec::with_capacity(samples.len());
    let mut logs = Vec::new();
    for batch in samples.chunks(opts.width) {
        let outcomes: Vec<Result<(RunResult, u64), String>> = pool.install(|| {
            batch
                .par_iter()
                .map(|s| {
                    let start = Instant::now();
                    let run = match memory {
                        Some(ctx) => memory::solve(&s.question, ctx, tools, config, provider).map_err(|e| e.to_string()),
                        None => agent::run_episode(&s.question, tools, provider, config, None).map_err(|e| e.to_string()),
                    };
                    run.map(|r| (r, start.elapsed().as_millis() as u64))
                })
                .collect()
        });
        for (sample, outcome) in batch.iter().zip(outcomes) {
            if let Err(e) = &outcome {
                tracing::warn!(id = %sample.id, error = %e, "episode failed");
            }
            let (score, log) = score_sample(sample, outcome, &model_tag, config);
            scores.push(score);
            logs.extend(log);
        }
        if let Some(ctx) = memory {
            for o in memory::drain_updates(ctx, tools) {
                tracing::debug!(?o, "memory update");
            }
        }
    }

    let (per_task, per_skill, overall) = aggregate(&scores);
    let provider_errors = scores.iter().filter(|s| s.error.is_some()).count();
    let meta = BenchMeta {
        model_tag: model_tag.clone(),
        config_hash: config_hash(config, opts, &model_tag, memory.map(|m| m.store.threshold())),
        started_at,
        finished_at: chrono::Utc::now().to_rfc3339(),
        samples: scores.len(),
        provider_errors,
        memory_units: memory.map(|m| m.store.len()),
    };
    Ok(BenchOutput {
        report: BenchReport { per_task, per_skill, overall, samples: scores, meta },
        logs,
    })
}

// ---------------------------------------------------------------------------
// Replay

/// Re-run a logged episode from its recorded assistant turns and require
/// the reconstructed trajectory to serialize to the logged bytes.
pub fn replay(log: &EpisodeLog, tools: &ToolRegistry, base: &AgentConfig) -> Result<RunResult, BenchError> {
    if log.assistant_turns.is_empty() || log.query.trim().is_empty() {
        return Err(BenchError::Config("episode log has no query or no assistant turns".into()));
    }
    let provider = ScriptedProvider::new(log.assistant_turns.clone())
        .map_err(|e| BenchError::Config(e.to_string()))?
        .with_tag(log.model_tag.clone());
    let mut config = base.clone();
    if let Some(m) = log.max_turns {
        config.max_turns = m;
    }
    if let Some(m) = log.malformed_turn_retries {
        config.malformed_turn_retries = m;
    }
    let run = agent::run_episode(&log.query, tools, &provider, &config, log.guideline.as_deref())
        .map_err(|e| BenchError::Replay(e.to_string()))?;
    let text = protocol::serialize_trajectory(&run.trajectory).map_err(|e| BenchError::Replay(e.to_string()))?;
    if text != log.trajectory_text {
        let position = text
            .bytes()
            .zip(log.trajectory_text.bytes())
            .position(|(a, b)| a != b)
            .unwrap_or_else(|| text.len().min(log.trajectory_text.len()));
        let window = |s: &str| {
            let mut start = position.saturating_sub(20).min(s.len());
            while !s.is_char_boundary(start) {
                start -= 1;
            }
            s[start..].chars().take(60).collect::<String>()
        };
        return Err(BenchError::ReplayDivergence {
            position,
            expected: window(&log.trajectory_text),
            actual: window(&text),
        });
    }
    Ok(run)
}

pub fn write_logs(path: impl AsRef<Path>, logs: &[EpisodeLog]) -> Result<(), BenchError> {
    let mut f = std::fs::File::create(path.as_ref()).map_err(|e| BenchError::Io(e.to_string()))?;
    for l in logs {
        writeln!(f, "{}", serde_json::to_string(l).expect("log serializes")).map_err(|e| BenchError::Io(e.to_string()))?;
    }
    Ok(())
}
