//! The tag-delimited agent protocol.
//!
//! An assistant turn is one or more `<think>` spans followed by exactly one
//! action: a `<tool_call>` whose payload is `{"name": ..., "arguments": {...}}`,
//! or a terminal `<answer>`. Observations come back wrapped in
//! `<tool_response>`. Protocol tags never nest.
//!
//! Content is escaped on the way out so that tool output or model text that
//! happens to contain a protocol tag cannot forge a span: the `<` of any
//! literal protocol tag becomes `&lt;`, and a literal `&` that would
//! otherwise read as `&lt;` or `&amp;` becomes `&amp;`. The scheme is
//! injective, so unescaping restores the original text exactly.

use std::fmt;
use std::ops::Range;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("turn has no <think> span before its action")]
    MissingThink,
    #[error("turn has neither a <tool_call> nor an <answer> span")]
    MissingAction,
    #[error("malformed tool call: {0}")]
    MalformedToolCall(String),
    #[error("turn carries more than one action")]
    AmbiguousTurn,
    #[error("unbalanced tags at byte {position}: {message}")]
    UnbalancedTags { position: usize, message: String },
    #[error("unexpected span at byte {position}: {message}")]
    UnexpectedSpan { position: usize, message: String },
    #[error("trajectory invariant violated: {0}")]
    InvariantViolation(String),
    #[error("unparseable trajectory text: {0}")]
    MalformedTrajectory(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dialect {
    Sql,
    Sosl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeUnit {
    Day,
    Week,
    Month,
    Year,
}

impl TimeUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeUnit::Day => "day",
            TimeUnit::Week => "week",
            TimeUnit::Month => "month",
            TimeUnit::Year => "year",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "day" | "days" => Some(TimeUnit::Day),
            "week" | "weeks" => Some(TimeUnit::Week),
            "month" | "months" => Some(TimeUnit::Month),
            "year" | "years" => Some(TimeUnit::Year),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" | "+" | "after" => Some(Direction::Forward),
            "backward" | "-" | "before" => Some(Direction::Backward),
            _ => None,
        }
    }
}

pub const TOOL_EXECUTE: &str = "execute";
pub const TOOL_DATE_CALCULATION: &str = "date_calculation";
pub const TOOL_ANSWER: &str = "answer";

/// One of the three agent actions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    Execute {
        query: String,
        dialect: Dialect,
    },
    DateCalc {
        base_date: NaiveDate,
        count: u32,
        unit: TimeUnit,
        sign: Direction,
    },
    Answer(String),
}

impl Action {
    pub fn sql(query: impl Into<String>) -> Self {
        Action::Execute {
            query: query.into(),
            dialect: Dialect::Sql,
        }
    }

    pub fn tool_name(&self) -> &'static str {
        match self {
            Action::Execute { .. } => TOOL_EXECUTE,
            Action::DateCalc { .. } => TOOL_DATE_CALCULATION,
            Action::Answer(_) => TOOL_ANSWER,
        }
    }

    pub fn is_answer(&self) -> bool {
        matches!(self, Action::Answer(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub thought: String,
    pub action: Action,
    pub observation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    MaxTurns,
    ProtocolFailure,
}

impl Termination {
    fn marker(self) -> Option<&'static str> {
        match self {
            Termination::Answered => None,
            Termination::MaxTurns => Some("[terminated: max_turns]"),
            Termination::ProtocolFailure => Some("[terminated: protocol_failure]"),
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Answered => "answered",
            Termination::MaxTurns => "max_turns",
            Termination::ProtocolFailure => "protocol_failure",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: String,
    pub steps: Vec<Step>,
    pub final_answer: Option<String>,
    pub termination: Termination,
}

impl Trajectory {
    pub fn tool_calls(&self) -> usize {
        self.steps.iter().filter(|s| !s.action.is_answer()).count()
    }

    pub fn check_invariants(&self) -> Result<(), ProtocolError> {
        let violation = |m: String| Err(ProtocolError::InvariantViolation(m));
        let answers = self.steps.iter().filter(|s| s.action.is_answer()).count();
        if answers > 1 {
            return violation(format!("{answers} answer steps"));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.action.is_answer() && i + 1 != self.steps.len() {
                return violation(format!("answer step {i} is not last"));
            }
            if step.action.is_answer() == step.observation.is_some() {
                return violation(format!(
                    "step {i}: observation must be present iff the action is not an answer"
                ));
            }
            if let Action::Execute { query, .. } = &step.action {
                if query.is_empty() {
                    return violation(format!("step {i}: empty execute query"));
                }
            }
        }
        match (self.termination, &self.final_answer, self.steps.last()) {
            (Termination::Answered, Some(ans), Some(last)) => match &last.action {
                Action::Answer(text) if text == ans => Ok(()),
                _ => violation("final_answer does not match the terminal answer step".into()),
            },
            (Termination::Answered, _, _) => {
                violation("answered trajectory needs a final answer and answer step".into())
            }
            (_, Some(_), _) => violation("final_answer present on unanswered trajectory".into()),
            (_, None, _) if answers > 0 => {
                violation("answer step on unanswered trajectory".into())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub position: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatReport {
    pub valid: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl FormatReport {
    fn from_diagnostics(diagnostics: Vec<Diagnostic>) -> Self {
        Self {
            valid: diagnostics.is_empty(),
            diagnostics,
        }
    }
}

// ---------------------------------------------------------------------------
// Tags and spans

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TagKind {
    Think,
    ToolCall,
    ToolResponse,
    Answer,
}

impl TagKind {
    pub const ALL: [TagKind; 4] = [
        TagKind::Think,
        TagKind::ToolCall,
        TagKind::ToolResponse,
        TagKind::Answer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TagKind::Think => "think",
            TagKind::ToolCall => "tool_call",
            TagKind::ToolResponse => "tool_response",
            TagKind::Answer => "answer",
        }
    }

    pub fn open(self) -> &'static str {
        match self {
            TagKind::Think => "<think>",
            TagKind::ToolCall => "<tool_call>",
            TagKind::ToolResponse => "<tool_response>",
            TagKind::Answer => "<answer>",
        }
    }

    pub fn close(self) -> &'static str {
        match self {
            TagKind::Think => "</think>",
            TagKind::ToolCall => "</tool_call>",
            TagKind::ToolResponse => "</tool_response>",
            TagKind::Answer => "</answer>",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct TagToken {
    kind: TagKind,
    closing: bool,
    start: usize,
    end: usize,
}

/// A matched open/close pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Span {
    pub kind: TagKind,
    /// Byte range including both tags.
    pub outer: Range<usize>,
    /// Byte range of the escaped content between the tags.
    pub inner: Range<usize>,
}

impl Span {
    pub fn content(&self, text: &str) -> String {
        unescape_content(&text[self.inner.clone()])
    }
}

fn tag_at(rest: &str) -> Option<(TagKind, bool, usize)> {
    let bytes = rest.as_bytes();
    if bytes.first() != Some(&b'<') {
        return None;
    }
    for kind in TagKind::ALL {
        if rest.starts_with(kind.open()) {
            return Some((kind, false, kind.open().len()));
        }
        if rest.starts_with(kind.close()) {
            return Some((kind, true, kind.close().len()));
        }
    }
    None
}

fn lex(text: &str) -> Vec<TagToken> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some(off) = text[i..].find('<') {
        let at = i + off;
        if let Some((kind, closing, len)) = tag_at(&text[at..]) {
            out.push(TagToken {
                kind,
                closing,
                start: at,
                end: at + len,
            });
            i = at + len;
        } else {
            i = at + 1;
        }
    }
    out
}

/// Pair every protocol tag in `text` into flat spans.
pub fn spans(text: &str) -> Result<Vec<Span>, Vec<Diagnostic>> {
    let tokens = lex(text);
    let mut spans = Vec::new();
    let mut diagnostics = Vec::new();
    let mut open: Option<TagToken> = None;
    for tok in tokens {
        match (open, tok.closing) {
            (None, false) => open = Some(tok),
            (None, true) => diagnostics.push(Diagnostic {
                position: tok.start,
                message: format!("closing {} without an opening tag", tok.kind.close()),
            }),
            (Some(o), true) if o.kind == tok.kind => {
                spans.push(Span {
                    kind: o.kind,
                    outer: o.start..tok.end,
                    inner: o.end..tok.start,
                });
                open = None;
            }
            (Some(o), _) => {
                diagnostics.push(Diagnostic {
                    position: tok.start,
                    message: format!(
                        "{} inside unclosed {} opened at byte {}",
                        if tok.closing { tok.kind.close() } else { tok.kind.open() },
                        o.kind.open(),
                        o.start
                    ),
                });
                // resynchronise on the new token
                open = if tok.closing { None } else { Some(tok) };
            }
        }
    }
    if let Some(o) = open {
        diagnostics.push(Diagnostic {
            position: o.start,
            message: format!("unclosed {}", o.kind.open()),
        });
    }
    if diagnostics.is_empty() {
        Ok(spans)
    } else {
        Err(diagnostics)
    }
}

// ---------------------------------------------------------------------------
// Escaping

const ESC_LT: &str = "&lt;";
const ESC_AMP: &str = "&amp;";

pub fn escape_content(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        let rest = &s[i..];
        if tag_at(rest).is_some() {
            out.push_str(ESC_LT);
            i += 1;
        } else if rest.starts_with(ESC_LT) || rest.starts_with(ESC_AMP) {
            out.push_str(ESC_AMP);
            i += 1;
        } else {
            let ch = rest.chars().next().expect("non-empty rest");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out
}

pub fn unescape_content(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        let rest = &s[i..];
        if rest.starts_with(ESC_LT) {
            out.push('<');
            i += ESC_LT.len();
        } else if rest.starts_with(ESC_AMP) {
            out.push('&');
            i += ESC_AMP.len();
        } else {
            let ch = rest.chars().next().expect("non-empty rest");
            out.push(ch);
            i += ch.len_utf8();
        }
    }
    out
}

fn wrap(kind: TagKind, content: &str) -> String {
    let body = escape_content(content);
    let mut s = String::with_capacity(body.len() + 32);
    s.push_str(kind.open());
    s.push_str(&body);
    s.push_str(kind.close());
    s
}

// ---------------------------------------------------------------------------
// Tool-call payloads

/// JSON formatter with `", "` and `": "` separators, the layout used by
/// tool-call payloads in recorded trajectories.
struct SpacedFormatter;

impl serde_json::ser::Formatter for SpacedFormatter {
    fn begin_array_value<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        if first {
            Ok(())
        } else {
            writer.write_all(b", ")
        }
    }

    fn begin_object_key<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        if first {
            Ok(())
        } else {
            writer.write_all(b", ")
        }
    }

    fn begin_object_value<W: ?Sized + std::io::Write>(
        &mut self,
        writer: &mut W,
    ) -> std::io::Result<()> {
        writer.write_all(b": ")
    }
}

fn to_spaced_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SpacedFormatter);
    value
        .serialize(&mut ser)
        .expect("tool-call payload serializes");
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

#[derive(Serialize)]
struct CallPayload<A: Serialize> {
    name: &'static str,
    arguments: A,
}

#[derive(Serialize)]
struct ExecuteArgs<'a> {
    query: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    dialect: Option<&'static str>,
}

#[derive(Serialize)]
struct DateArgs {
    base_date: String,
    count: u32,
    unit: &'static str,
    sign: &'static str,
}

/// Render the JSON payload of a tool call. Answers have no payload.
pub fn render_tool_call(action: &Action) -> Option<String> {
    match action {
        Action::Execute { query, dialect } => Some(to_spaced_json(&CallPayload {
            name: TOOL_EXECUTE,
            arguments: ExecuteArgs {
                query,
                dialect: match dialect {
                    Dialect::Sql => None,
                    Dialect::Sosl => Some("sosl"),
                },
            },
        })),
        Action::DateCalc {
            base_date,
            count,
            unit,
            sign,
        } => Some(to_spaced_json(&CallPayload {
            name: TOOL_DATE_CALCULATION,
            arguments: DateArgs {
                base_date: base_date.format("%Y-%m-%d").to_string(),
                count: *count,
                unit: unit.as_str(),
                sign: sign.as_str(),
            },
        })),
        Action::Answer(_) => None,
    }
}

/// Decode a tool-call payload into an action.
pub fn decode_tool_call(payload: &str) -> Result<Action, ProtocolError> {
    let bad = |m: String| ProtocolError::MalformedToolCall(m);
    let value: Value =
        serde_json::from_str(payload.trim()).map_err(|e| bad(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| bad("payload is not a JSON object".into()))?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing string field \"name\"".into()))?;
    let args_value = obj
        .get("arguments")
        .ok_or_else(|| bad("missing field \"arguments\"".into()))?;
    // Some backends send arguments as a JSON-encoded string.
    let args_owned;
    let args = match args_value {
        Value::String(s) => {
            args_owned = serde_json::from_str::<Value>(s)
                .map_err(|e| bad(format!("arguments string is not JSON: {e}")))?;
            &args_owned
        }
        v => v,
    };
    let args = args
        .as_object()
        .ok_or_else(|| bad("\"arguments\" is not an object".into()))?;
    let str_arg = |key: &str| -> Result<&str, ProtocolError> {
        args.get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| bad(format!("{name}: missing string argument \"{key}\"")))
    };
    match name {
        TOOL_EXECUTE => {
            let query = str_arg("query")?;
            if query.trim().is_empty() {
                return Err(bad("execute: empty query".into()));
            }
            let dialect = match args.get("dialect").and_then(Value::as_str) {
                None => Dialect::Sql,
                Some(d) if d.eq_ignore_ascii_case("sql") => Dialect::Sql,
                Some(d) if d.eq_ignore_ascii_case("sosl") => Dialect::Sosl,
                Some(d) => return Err(bad(format!("execute: unknown dialect {d:?}"))),
            };
            Ok(Action::Execute {
                query: query.to_string(),
                dialect,
            })
        }
        TOOL_DATE_CALCULATION => {
            let raw_date = str_arg("base_date")?;
            let base_date = NaiveDate::parse_from_str(raw_date.trim(), "%Y-%m-%d")
                .map_err(|e| bad(format!("date_calculation: base_date {raw_date:?}: {e}")))?;
            let count = args
                .get("count")
                .and_then(Value::as_u64)
                .and_then(|c| u32::try_from(c).ok())
                .ok_or_else(|| {
                    bad("date_calculation: \"count\" must be a non-negative integer".into())
                })?;
            let unit = TimeUnit::parse(str_arg("unit")?)
                .ok_or_else(|| bad("date_calculation: unknown unit".into()))?;
            let sign = Direction::parse(str_arg("sign")?)
                .ok_or_else(|| bad("date_calculation: unknown sign".into()))?;
            Ok(Action::DateCalc {
                base_date,
                count,
                unit,
                sign,
            })
        }
        other => Err(bad(format!("unknown tool name {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Turns

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedTurn {
    pub thought: String,
    pub action: Action,
    /// Tolerated irregularities, such as extra think spans.
    pub warnings: Vec<String>,
}

fn parse_turn_spans(text: &str, spans: &[Span]) -> Result<ParsedTurn, ProtocolError> {
    let mut thought: Option<String> = None;
    let mut action: Option<Action> = None;
    let mut warnings = Vec::new();
    for span in spans {
        match span.kind {
            TagKind::ToolResponse => {
                return Err(ProtocolError::UnexpectedSpan {
                    position: span.outer.start,
                    message: "<tool_response> inside an assistant turn".into(),
                })
            }
            TagKind::Think => {
                if action.is_some() {
                    return Err(ProtocolError::UnexpectedSpan {
                        position: span.outer.start,
                        message: "<think> after the turn's action".into(),
                    });
                }
                if thought.is_none() {
                    thought = Some(span.content(text));
                } else {
                    warnings.push(format!(
                        "extra <think> span at byte {} ignored",
                        span.outer.start
                    ));
                }
            }
            TagKind::ToolCall | TagKind::Answer => {
                if thought.is_none() {
                    return Err(ProtocolError::MissingThink);
                }
                if action.is_some() {
                    return Err(ProtocolError::AmbiguousTurn);
                }
                action = Some(if span.kind == TagKind::Answer {
                    Action::Answer(span.content(text))
                } else {
                    decode_tool_call(&span.content(text))?
                });
            }
        }
    }
    let thought = thought.ok_or(ProtocolError::MissingThink)?;
    let action = action.ok_or(ProtocolError::MissingAction)?;
    Ok(ParsedTurn {
        thought,
        action,
        warnings,
    })
}

/// Parse one assistant turn into its thought and action.
pub fn parse_assistant_turn(text: &str) -> Result<ParsedTurn, ProtocolError> {
    let spans = spans(text).map_err(|d| {
        let first = &d[0];
        ProtocolError::UnbalancedTags {
            position: first.position,
            message: first.message.clone(),
        }
    })?;
    parse_turn_spans(text, &spans)
}

/// Format check for a single assistant turn; accepts exactly what
/// [`parse_assistant_turn`] accepts.
pub fn validate_turn(text: &str) -> FormatReport {
    match parse_assistant_turn(text) {
        Ok(_) => FormatReport::from_diagnostics(Vec::new()),
        Err(e) => FormatReport::from_diagnostics(vec![Diagnostic {
            position: error_position(&e),
            message: e.to_string(),
        }]),
    }
}

fn error_position(e: &ProtocolError) -> usize {
    match e {
        ProtocolError::UnbalancedTags { position, .. }
        | ProtocolError::UnexpectedSpan { position, .. } => *position,
        _ => 0,
    }
}

pub fn render_assistant_turn(thought: &str, action: &Action) -> String {
    let think = wrap(TagKind::Think, thought);
    match action {
        Action::Answer(text) => format!("{think}\n{}", wrap(TagKind::Answer, text)),
        other => {
            let payload = render_tool_call(other).expect("tool actions have payloads");
            format!("{think}\n{}", wrap(TagKind::ToolCall, &payload))
        }
    }
}

/// Wrap an observation in a `<tool_response>` span.
pub fn render_observation(observation: &str) -> String {
    wrap(TagKind::ToolResponse, observation)
}

/// Inverse of [`render_observation`].
pub fn parse_observation(text: &str) -> Result<String, ProtocolError> {
    let found = spans(text).map_err(|d| ProtocolError::UnbalancedTags {
        position: d[0].position,
        message: d[0].message.clone(),
    })?;
    match found.as_slice() {
        [span] if span.kind == TagKind::ToolResponse => Ok(span.content(text)),
        _ => Err(ProtocolError::MalformedTrajectory(
            "expected exactly one <tool_response> span".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Whole trajectories

/// Canonical text form: escaped query, newline, then one block per step.
/// Unanswered trajectories end with a termination marker line.
pub fn serialize_trajectory(t: &Trajectory) -> Result<String, ProtocolError> {
    t.check_invariants()?;
    let mut out = escape_content(&t.query);
    out.push('\n');
    for step in &t.steps {
        out.push_str(&render_assistant_turn(&step.thought, &step.action));
        if let Some(obs) = &step.observation {
            out.push('\n');
            out.push_str(&render_observation(obs));
            out.push('\n');
        }
    }
    if let Some(marker) = t.termination.marker() {
        out.push_str(marker);
    }
    Ok(out)
}

/// Inverse of [`serialize_trajectory`].
pub fn parse_trajectory(text: &str) -> Result<Trajectory, ProtocolError> {
    let malformed = |m: &str| ProtocolError::MalformedTrajectory(m.to_string());
    let (body, termination) = if text.ends_with(TagKind::Answer.close()) {
        (text, Termination::Answered)
    } else if let Some(b) = text.strip_suffix(Termination::MaxTurns.marker().unwrap()) {
        (b, Termination::MaxTurns)
    } else if let Some(b) = text.strip_suffix(Termination::ProtocolFailure.marker().unwrap()) {
        (b, Termination::ProtocolFailure)
    } else {
        return Err(malformed("text ends with neither an answer nor a termination marker"));
    };
    let found = spans(body).map_err(|d| ProtocolError::UnbalancedTags {
        position: d[0].position,
        message: d[0].message.clone(),
    })?;
    let prefix_end = found.first().map_or(body.len(), |s| s.outer.start);
    let query = body[..prefix_end]
        .strip_suffix('\n')
        .ok_or_else(|| malformed("query prefix must end with a newline"))?;
    let query = unescape_content(query);

    let mut steps = Vec::new();
    let mut i = 0;
    while i < found.len() {
        let start = i;
        while i < found.len() && found[i].kind == TagKind::Think {
            i += 1;
        }
        if i == found.len() {
            return Err(ProtocolError::MissingAction);
        }
        i += 1;
        let turn = parse_turn_spans(body, &found[start..i])?;
        let observation = if turn.action.is_answer() {
            None
        } else {
            match found.get(i) {
                Some(s) if s.kind == TagKind::ToolResponse => {
                    i += 1;
                    Some(s.content(body))
                }
                _ => return Err(malformed("tool call without a tool response")),
            }
        };
        steps.push(Step {
            thought: turn.thought,
            action: turn.action,
            observation,
        });
    }
    let final_answer = match (termination, steps.last()) {
        (Termination::Answered, Some(Step {
            action: Action::Answer(a),
            ..
        })) => Some(a.clone()),
        (Termination::Answered, _) => return Err(malformed("answered text lacks an answer step")),
        _ => None,
    };
    let t = Trajectory {
        query,
        steps,
        final_answer,
        termination,
    };
    t.check_invariants()?;
    Ok(t)
}

/// Structural check of a complete trajectory text: every span paired and
/// flat, each turn well-formed, each tool call answered by a tool response,
/// and the text ending with an answer span.
pub fn validate_format(text: &str) -> FormatReport {
    let found = match spans(text) {
        Ok(s) => s,
        Err(d) => return FormatReport::from_diagnostics(d),
    };
    let mut diagnostics = Vec::new();
    let mut i = 0;
    let mut answered_at: Option<usize> = None;
    while i < found.len() {
        let start = i;
        while i < found.len() && found[i].kind == TagKind::Think {
            i += 1;
        }
        if i == found.len() {
            diagnostics.push(Diagnostic {
                position: found[start].outer.start,
                message: "turn ends without an action".into(),
            });
            break;
        }
        i += 1;
        match parse_turn_spans(text, &found[start..i]) {
            Ok(turn) if turn.action.is_answer() => {
                answered_at = Some(found[i - 1].outer.end);
                if i != found.len() {
                    diagnostics.push(Diagnostic {
                        position: found[i].outer.start,
                        message: "span after the terminal answer".into(),
                    });
                }
                break;
            }
            Ok(_) => match found.get(i) {
                Some(s) if s.kind == TagKind::ToolResponse => i += 1,
                _ => {
                    diagnostics.push(Diagnostic {
                        position: found[i - 1].outer.end,
                        message: "tool call without a following tool response".into(),
                    });
                    break;
                }
            },
            Err(e) => {
                diagnostics.push(Diagnostic {
                    position: match error_position(&e) {
                        0 => found[start].outer.start,
                        p => p,
                    },
                    message: e.to_string(),
                });
                break;
            }
        }
    }
    if diagnostics.is_empty() {
        match answered_at {
            None => diagnostics.push(Diagnostic {
                position: text.len(),
                message: "text does not end with an <answer> span".into(),
            }),
            Some(end) if !text[end..].trim().is_empty() => diagnostics.push(Diagnostic {
                position: end,
                message: "trailing text after the terminal answer".into(),
            }),
            Some(_) => {}
        }
    }
    FormatReport::from_diagnostics(diagnostics)
}
