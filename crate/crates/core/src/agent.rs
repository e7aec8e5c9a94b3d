//! The episode loop: generate a turn, parse it, dispatch the tool, feed the
//! observation back, until an answer or the turn cap.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{date_calculation, SqlEnvironment, ToolResult, DEFAULT_ROW_CAP};
use crate::llm::{self, ChatMessage, GenerationRequest, LlmError, LlmProvider, DEFAULT_TEMPERATURE};
use crate::prompts;
use crate::protocol::{
    self, Action, Step, Termination, Trajectory, TOOL_DATE_CALCULATION, TOOL_EXECUTE,
};

pub const DEFAULT_MAX_TURNS: u32 = 20;
pub const DEFAULT_MALFORMED_TURN_RETRIES: u32 = 2;
pub const GUIDELINE_HEADER: &str = "\n\n## Guideline from similar solved tasks\n";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("provider failed: {0}")]
    Provider(#[from] LlmError),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error("episode log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_turns: u32,
    pub temperature: f64,
    pub base_system_prompt: String,
    pub malformed_turn_retries: u32,
    pub max_new_tokens: u32,
    pub stop_markers: Vec<String>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            max_turns: DEFAULT_MAX_TURNS,
            temperature: DEFAULT_TEMPERATURE,
            base_system_prompt: default_system_prompt("(schema not provided)"),
            malformed_turn_retries: DEFAULT_MALFORMED_TURN_RETRIES,
            max_new_tokens: 2048,
            stop_markers: vec!["<tool_response>".to_string()],
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.max_turns == 0 {
            return Err(AgentError::InvalidConfig("max_turns must be at least 1".into()));
        }
        if self.base_system_prompt.trim().is_empty() {
            return Err(AgentError::InvalidConfig("base_system_prompt is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(AgentError::InvalidConfig("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// The shipped system prompt with the database schema filled in.
pub fn default_system_prompt(schema: &str) -> String {
    prompts::fill(prompts::AGENT_SYSTEM_V1, &[("schema", schema)])
        .expect("agent prompt has only a schema placeholder")
}

/// `base`, or `base` followed by a fixed header and the guideline.
pub fn build_system_prompt(base: &str, guideline: Option<&str>) -> String {
    match guideline.map(str::trim) {
        Some(g) if !g.is_empty() => format!("{base}{GUIDELINE_HEADER}{g}"),
        _ => base.to_string(),
    }
}

/// The guideline part of a prompt built by [`build_system_prompt`].
pub fn guideline_in_prompt(system_prompt: &str) -> Option<&str> {
    system_prompt.split_once(GUIDELINE_HEADER).map(|(_, g)| g)
}

// ---------------------------------------------------------------------------
// Tools

pub trait Tool: Send + Sync {
    fn name(&self) -> &str;
    fn call(&self, action: &Action) -> ToolResult;
}

pub struct ExecuteTool {
    env: Arc<SqlEnvironment>,
    row_cap: usize,
}

impl ExecuteTool {
    pub fn new(env: Arc<SqlEnvironment>, row_cap: usize) -> Self {
        Self { env, row_cap }
    }
}

impl Tool for ExecuteTool {
    fn name(&self) -> &str {
        TOOL_EXECUTE
    }

    fn call(&self, action: &Action) -> ToolResult {
        match action {
            Action::Execute { query, dialect } => self.env.execute(query, *dialect, self.row_cap),
            other => ToolResult::error(format!("execute cannot handle {}", other.tool_name())),
        }
    }
}

pub struct DateCalcTool;

impl Tool for DateCalcTool {
    fn name(&self) -> &str {
        TOOL_DATE_CALCULATION
    }

    fn call(&self, action: &Action) -> ToolResult {
        match action {
            Action::DateCalc {
                base_date,
                count,
                unit,
                sign,
            } => match date_calculation(*base_date, *count, *unit, *sign) {
                Ok(d) => ToolResult::text(d.format("%Y-%m-%d").to_string()),
                Err(e) => ToolResult::error(e.to_string()),
            },
            other => ToolResult::error(format!(
                "date_calculation cannot handle {}",
                other.tool_name()
            )),
        }
    }
}

/// Tools keyed by the name used in tool-call payloads.
#[derive(Default)]
pub struct ToolRegistry {
    tools: HashMap<String, Box<dyn Tool>>,
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `execute` over `env` plus `date_calculation`.
    pub fn for_environment(env: Arc<SqlEnvironment>, row_cap: usize) -> Self {
        let mut r = Self::new();
        r.register(ExecuteTool::new(env, row_cap));
        r.register(DateCalcTool);
        r
    }

    pub fn with_default_cap(env: Arc<SqlEnvironment>) -> Self {
        Self::for_environment(env, DEFAULT_ROW_CAP)
    }

    pub fn register(&mut self, tool: impl Tool + 'static) {
        self.tools.insert(tool.name().to_string(), Box::new(tool));
    }

    pub fn names(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.tools.keys().map(String::as_str).collect();
        v.sort_unstable();
        v
    }

    pub fn dispatch(&self, action: &Action) -> ToolResult {
        match self.tools.get(action.tool_name()) {
            Some(t) => t.call(action),
            None => ToolResult::error(format!("unknown tool: {}", action.tool_name())),
        }
    }
}

// ---------------------------------------------------------------------------
// Episodes

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidelineRef {
    pub key_query: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub trajectory: Trajectory,
    /// Assistant turns consumed, malformed ones included.
    pub turns_used: u32,
    pub termination: Termination,
    pub guideline_used: Option<GuidelineRef>,
    /// Raw assistant replies in order, for logging and replay.
    pub assistant_turns: Vec<String>,
    pub malformed_turns: u32,
    pub system_prompt: String,
}

impl RunResult {
    pub fn final_answer(&self) -> Option<&str> {
        self.trajectory.final_answer.as_deref()
    }
}

/// Anything a model may have continued with past its action is cut at the
/// first observation tag, which only the harness may produce.
fn trim_turn(text: &str) -> &str {
    match text.find(protocol::TagKind::ToolResponse.open()) {
        Some(i) => &text[..i],
        None => text,
    }
}

pub fn run_episode(
    query: &str,
    tools: &ToolRegistry,
    provider: &dyn LlmProvider,
    config: &AgentConfig,
    guideline: Option<&str>,
) -> Result<RunResult, AgentError> {
    config.validate()?;
    let system_prompt = build_system_prompt(&config.base_system_prompt, guideline);
    let mut messages = vec![ChatMessage::system(&system_prompt), ChatMessage::user(query)];
    let mut steps: Vec<Step> = Vec::new();
    let mut assistant_turns = Vec::new();
    let mut valid_turns = 0u32;
    let mut malformed = 0u32;
    let mut termination = Termination::MaxTurns;

    while valid_turns < config.max_turns {
        let request = GenerationRequest::new(messages.clone())
            .with_temperature(config.temperature)
            .with_max_new_tokens(config.max_new_tokens)
            .with_stop_markers(config.stop_markers.clone());
        let reply = llm::complete(provider, &request)?;
        let text = trim_turn(&reply.text).to_string();
        assistant_turns.push(reply.text.clone());
        match protocol::parse_assistant_turn(&text) {
            Ok(turn) => {
                valid_turns += 1;
                for w in &turn.warnings {
                    tracing::debug!(warning = %w, "tolerated turn irregularity");
                }
                messages.push(ChatMessage::assistant(&text));
                if let Action::Answer(answer) = &turn.action {
                    steps.push(Step {
                        thought: turn.thought,
                        action: Action::Answer(answer.clone()),
                        observation: None,
                    });
                    termination = Termination::Answered;
                    break;
                }
                let result = tools.dispatch(&turn.action);
                messages.push(ChatMessage::tool(protocol::render_observation(&result.observation)));
                steps.push(Step {
                    thought: turn.thought,
                    action: turn.action,
                    observation: Some(result.observation),
                });
            }
            Err(e) => {
                malformed += 1;
                tracing::debug!(error = %e, malformed, "malformed assistant turn");
                if malformed > config.malformed_turn_retries {
                    termination = Termination::ProtocolFailure;
                    break;
                }
                messages.push(ChatMessage::assistant(&text));
                messages.push(ChatMessage::tool(protocol::render_observation(&format!(
                    "Error: malformed action: {e}"
                ))));
            }
        }
    }

    let final_answer = match (&termination, steps.last()) {
        (Termination::Answered, Some(Step { action: Action::Answer(a), .. })) => Some(a.clone()),
        _ => None,
    };
    let trajectory = Trajectory {
        query: query.to_string(),
        steps,
        final_answer,
        termination,
    };
    debug_assert!(trajectory.check_invariants().is_ok());
    Ok(RunResult {
        trajectory,
        turns_used: valid_turns + malformed,
        termination,
        guideline_used: None,
        assistant_turns,
        malformed_turns: malformed,
        system_prompt,
    })
}

// ---------------------------------------------------------------------------
// Episode logs

/// One line of an episode log file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub query: String,
    pub guideline: Option<String>,
    pub guideline_used: Option<GuidelineRef>,
    pub assistant_turns: Vec<String>,
    pub trajectory_text: String,
    pub turns_used: u32,
    pub termination: Termination,
    pub elapsed_ms: u64,
    pub model_tag: String,
    #[serde(default)]
    pub sample_id: Option<String>,
    #[serde(default)]
    pub max_turns: Option<u32>,
    #[serde(default)]
    pub malformed_turn_retries: Option<u32>,
}

impl EpisodeLog {
    pub fn from_run(
        result: &RunResult,
        guideline: Option<&str>,
        elapsed_ms: u64,
        model_tag: impl Into<String>,
    ) -> Self {
        Self {
            query: result.trajectory.query.clone(),
            guideline: guideline.map(str::to_string),
            guideline_used: result.guideline_used.clone(),
            assistant_turns: result.assistant_turns.clone(),
            trajectory_text: protocol::serialize_trajectory(&result.trajectory)
                .expect("episode trajectories satisfy invariants"),
            turns_used: result.turns_used,
            termination: result.termination,
            elapsed_ms,
            model_tag: model_tag.into(),
            sample_id: None,
            max_turns: None,
            malformed_turn_retries: None,
        }
    }

    /// Record the limits the episode ran under, so replay can reproduce them.
    pub fn with_limits(mut self, config: &AgentConfig) -> Self {
        self.max_turns = Some(config.max_turns);
        self.malformed_turn_retries = Some(config.malformed_turn_retries);
        self
    }
}

/// Run an episode and produce its log line alongside the result.
pub fn run_logged(
    query: &str,
    tools: &ToolRegistry,
    provider: &dyn LlmProvider,
    config: &AgentConfig,
    guideline: Option<&str>,
) -> Result<(RunResult, EpisodeLog), AgentError> {
    let start = Instant::now();
    let result = run_episode(query, tools, provider, config, guideline)?;
    let elapsed = start.elapsed().as_millis() as u64;
    let log = EpisodeLog::from_run(&result, guideline, elapsed, provider.model_tag()).with_limits(config);
    Ok((result, log))
}

pub fn write_episode_logs(path: impl AsRef<Path>, logs: &[EpisodeLog]) -> Result<(), AgentError> {
    let io = |e: std::io::Error| AgentError::Log(format!("{}: {e}", path.as_ref().display()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path.as_ref()).map_err(io)?);
    for l in logs {
        let line = serde_json::to_string(l).map_err(|e| AgentError::Log(e.to_string()))?;
        writeln!(f, "{line}").map_err(io)?;
    }
    f.flush().map_err(io)
}

pub fn read_episode_logs(path: impl AsRef<Path>) -> Result<Vec<EpisodeLog>, AgentError> {
    let io = |e: std::io::Error| AgentError::Log(format!("{}: {e}", path.as_ref().display()));
    let f = std::fs::File::open(path.as_ref()).map_err(io)?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| AgentError::Log(format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
