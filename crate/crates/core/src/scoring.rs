//! Evaluation and training arithmetic: answer metrics, the composite reward,
//! group-relative advantages, dynamic sampling, the decoupled clip, SFT loss
//! masking and rejection filters. Everything here is pure.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{self, TagKind, Trajectory};

pub const FORMAT_WEIGHT: f64 = 0.1;
pub const ANSWER_WEIGHT: f64 = 0.9;
pub const DEFAULT_NONE_MIN_TOOL_CALLS: usize = 3;
pub const DEFAULT_QA_EQUIVALENCE_THRESHOLD: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScoringError {
    #[error("rewards have zero variance")]
    ZeroVariance,
    #[error("group needs at least 2 members, got {0}")]
    GroupTooSmall(usize),
    #[error("non-finite input")]
    NonFinite,
    #[error("mask selects no positions")]
    EmptyMask,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid clip range: eps_low={eps_low}, eps_high={eps_high}")]
    InvalidClip { eps_low: f64, eps_high: f64 },
    #[error("invalid rollout group: {0}")]
    InvalidGroup(String),
    #[error("cannot segment sequence: {0}")]
    Segmentation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    /// Scored by exact match.
    Analysis,
    /// Free-text answers scored by token F1.
    Qa,
}

// ---------------------------------------------------------------------------
// Answer metrics

/// Trim, case-fold and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

fn list_items(s: &str) -> Vec<String> {
    let mut items: Vec<String> = s
        .split(',')
        .map(normalize_answer)
        .filter(|x| !x.is_empty())
        .collect();
    items.sort_unstable();
    items
}

/// 1.0 when the normalized forms agree, else 0.0. In list mode both sides
/// are split on commas and compared as multisets.
pub fn exact_match(prediction: &str, gold: &str, list_mode: bool) -> f64 {
    let equal = if list_mode {
        list_items(prediction) == list_items(gold)
    } else {
        normalize_answer(prediction) == normalize_answer(gold)
    };
    if equal {
        1.0
    } else {
        0.0
    }
}

fn f1_tokens(s: &str) -> Vec<String> {
    let stripped: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    normalize_answer(&stripped)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token-level F1 with multiset overlap. Both empty scores 1, one empty 0.
pub fn f1_score(prediction: &str, gold: &str) -> f64 {
    let p = f1_tokens(prediction);
    let g = f1_tokens(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut pool: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for t in &g {
        *pool.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in &p {
        if let Some(n) = pool.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / p.len() as f64;
    let recall = overlap as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Analysis answers whose gold contains a comma are compared as lists.
pub fn answer_score(prediction: &str, gold: &str, kind: TaskKind) -> f64 {
    match kind {
        TaskKind::Analysis => exact_match(prediction, gold, gold.contains(',')),
        TaskKind::Qa => f1_score(prediction, gold),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceConfig {
    pub qa_threshold: f64,
}

impl Default for EquivalenceConfig {
    fn default() -> Self {
        Self {
            qa_threshold: DEFAULT_QA_EQUIVALENCE_THRESHOLD,
        }
    }
}

/// Whether a prediction counts as correct: a full exact match for analysis
/// tasks, F1 at or above the threshold for QA.
pub fn is_equivalent(prediction: &str, gold: &str, kind: TaskKind, cfg: EquivalenceConfig) -> bool {
    let s = answer_score(prediction, gold, kind);
    match kind {
        TaskKind::Analysis => s == 1.0,
        TaskKind::Qa => s >= cfg.qa_threshold,
    }
}

// ---------------------------------------------------------------------------
// Reward

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_score: u8,
    pub answer_score: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(format_score: u8, answer_score: f64) -> Self {
        let format_score = format_score.min(1);
        Self {
            format_score,
            answer_score,
            total: FORMAT_WEIGHT * f64::from(format_score) + ANSWER_WEIGHT * answer_score,
        }
    }
}

pub fn reward(trajectory_text: &str, prediction: &str, gold: &str, kind: TaskKind) -> RewardBreakdown {
    let format = u8::from(protocol::validate_format(trajectory_text).valid);
    RewardBreakdown::new(format, answer_score(prediction, gold, kind))
}

// ---------------------------------------------------------------------------
// Group advantages and dynamic sampling

/// Standardize rewards with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, ScoringError> {
    if rewards.len() < 2 {
        return Err(ScoringError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(ScoringError::NonFinite);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        return Err(ScoringError::ZeroVariance);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub rewards: Vec<f64>,
    pub correctness: Vec<bool>,
}

impl RolloutGroup {
    pub fn new(rewards: Vec<f64>, correctness: Vec<bool>) -> Result<Self, ScoringError> {
        if rewards.len() != correctness.len() {
            return Err(ScoringError::LengthMismatch {
                left: rewards.len(),
                right: correctness.len(),
            });
        }
        if rewards.len() < 2 {
            return Err(ScoringError::GroupTooSmall(rewards.len()));
        }
        if rewards.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(ScoringError::InvalidGroup("rewards must lie in [0, 1]".into()));
        }
        Ok(Self {
            rewards,
            correctness,
        })
    }

    pub fn size(&self) -> usize {
        self.correctness.len()
    }

    pub fn correct_count(&self) -> usize {
        self.correctness.iter().filter(|&&c| c).count()
    }

    pub fn is_mixed(&self) -> bool {
        let c = self.correct_count();
        c > 0 && c < self.size()
    }
}

/// Keep only groups with at least one correct and one incorrect rollout.
pub fn dynamic_sample_filter(groups: Vec<RolloutGroup>) -> Vec<RolloutGroup> {
    groups.into_iter().filter(RolloutGroup::is_mixed).collect()
}

// ---------------------------------------------------------------------------
// Decoupled clip

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
        }
    }
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self, ScoringError> {
        let ok = eps_low > 0.0 && eps_high > 0.0 && 1.0 - eps_low > 0.0 && eps_high.is_finite();
        if ok {
            Ok(Self { eps_low, eps_high })
        } else {
            Err(ScoringError::InvalidClip { eps_low, eps_high })
        }
    }
}

/// `min(r·A, clip(r, 1-eps_low, 1+eps_high)·A)` for a given ratio `r`.
pub fn clipped_term_from_ratio(ratio: f64, advantage: f64, clip: ClipConfig) -> Result<f64, ScoringError> {
    if !ratio.is_finite() || !advantage.is_finite() {
        return Err(ScoringError::NonFinite);
    }
    let clipped = ratio.clamp(1.0 - clip.eps_low, 1.0 + clip.eps_high);
    Ok((ratio * advantage).min(clipped * advantage))
}

/// Per-token surrogate with `r = exp(logp_new - logp_old)`.
pub fn clipped_term(logp_new: f64, logp_old: f64, advantage: f64, clip: ClipConfig) -> Result<f64, ScoringError> {
    if !logp_new.is_finite() || !logp_old.is_finite() {
        return Err(ScoringError::NonFinite);
    }
    clipped_term_from_ratio((logp_new - logp_old).exp(), advantage, clip)
}

/// Token logprobs of one rollout under the current and behavior policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTokens {
    pub logp_new: Vec<f64>,
    pub logp_old: Vec<f64>,
    /// 1 for policy-generated tokens, 0 for observation/prompt tokens.
    pub mask: Vec<u8>,
    pub advantage: f64,
}

/// Token-level objective: the sum of clipped terms over every unmasked
/// token of every rollout, divided by the total count of those tokens.
pub fn token_level_objective(rollouts: &[RolloutTokens], clip: ClipConfig) -> Result<f64, ScoringError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for r in rollouts {
        for other in [r.logp_old.len(), r.mask.len()] {
            if other != r.logp_new.len() {
                return Err(ScoringError::LengthMismatch {
                    left: r.logp_new.len(),
                    right: other,
                });
            }
        }
        for i in 0..r.logp_new.len() {
            if r.mask[i] != 0 {
                sum += clipped_term(r.logp_new[i], r.logp_old[i], r.advantage, clip)?;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(ScoringError::EmptyMask);
    }
    Ok(sum / count as f64)
}

// ---------------------------------------------------------------------------
// SFT masking

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    System,
    User,
    Thought,
    ToolCall,
    Observation,
    Answer,
}

impl Segment {
    pub fn trained(self) -> bool {
        matches!(self, Segment::Thought | Segment::ToolCall | Segment::Answer)
    }

    fn of(kind: TagKind) -> Self {
        match kind {
            TagKind::Think => Segment::Thought,
            TagKind::ToolCall => Segment::ToolCall,
            TagKind::ToolResponse => Segment::Observation,
            TagKind::Answer => Segment::Answer,
        }
    }
}

/// A tokenized sequence with one segment label per token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedTokenSequence {
    pub tokens: Vec<(String, Segment)>,
}

/// Byte ranges of a serialized trajectory labelled by segment. The query
/// prefix is user text; separators after a think or tool-call span belong
/// to that span, separators after an observation belong to the next span,
/// and any trailing harness marker is system text.
pub fn segment_trajectory_text(text: &str) -> Result<Vec<(Range<usize>, Segment)>, ScoringError> {
    let spans = protocol::spans(text).map_err(|d| {
        ScoringError::Segmentation(format!("byte {}: {}", d[0].position, d[0].message))
    })?;
    let mut out: Vec<(Range<usize>, Segment)> = Vec::new();
    let mut push = |r: Range<usize>, s: Segment| {
        if r.is_empty() {
            return;
        }
        match out.last_mut() {
            Some((prev, seg)) if *seg == s && prev.end == r.start => prev.end = r.end,
            _ => out.push((r, s)),
        }
    };
    let first = spans.first().map_or(text.len(), |s| s.outer.start);
    push(0..first, Segment::User);
    for (i, span) in spans.iter().enumerate() {
        let seg = Segment::of(span.kind);
        push(span.outer.clone(), seg);
        let gap_end = spans.get(i + 1).map_or(text.len(), |n| n.outer.start);
        let gap_seg = match (span.kind, spans.get(i + 1)) {
            (TagKind::ToolResponse, Some(next)) => Segment::of(next.kind),
            (TagKind::ToolResponse, None) => Segment::System,
            (TagKind::Answer, None) if !text[span.outer.end..].trim().is_empty() => Segment::System,
            _ => seg,
        };
        push(span.outer.end..gap_end, gap_seg);
    }
    Ok(out)
}

impl TaggedTokenSequence {
    /// Character-level tokens over a serialized trajectory, optionally
    /// preceded by the system prompt.
    pub fn from_trajectory_text(system_prompt: Option<&str>, text: &str) -> Result<Self, ScoringError> {
        let mut tokens = Vec::with_capacity(text.len());
        if let Some(sys) = system_prompt {
            tokens.extend(sys.chars().map(|c| (c.to_string(), Segment::System)));
        }
        for (range, seg) in segment_trajectory_text(text)? {
            tokens.extend(text[range].chars().map(|c| (c.to_string(), seg)));
        }
        Ok(Self { tokens })
    }

    /// Segments must follow the protocol order: optional system text, user
    /// text, then turns of thoughts followed by a tool call and its
    /// observation or by an answer. Harness text may only close the sequence.
    pub fn check(&self) -> Result<(), ScoringError> {
        let mut runs: Vec<Segment> = Vec::new();
        for (_, seg) in &self.tokens {
            if runs.last() != Some(seg) {
                runs.push(*seg);
            }
        }
        let mut i = 0;
        if runs.first() == Some(&Segment::System) {
            i += 1;
        }
        if runs.get(i) == Some(&Segment::User) {
            i += 1;
        }
        let bad = |i: usize, m: &str| {
            Err(ScoringError::Segmentation(format!("segment run {i}: {m}")))
        };
        while i < runs.len() {
            match (runs[i], runs.get(i + 1), runs.get(i + 2)) {
                (Segment::System, None, _) => return Ok(()),
                (Segment::Thought, Some(Segment::Answer), next) => {
                    return match next {
                        None | Some(Segment::System) if i + 3 >= runs.len() => Ok(()),
                        _ => bad(i + 2, "content after the answer"),
                    };
                }
                (Segment::Thought, Some(Segment::ToolCall), Some(Segment::Observation)) => i += 3,
                (Segment::Thought, Some(Segment::ToolCall), None) => return Ok(()),
                (Segment::Thought, None, _) => return Ok(()),
                (seg, _, _) => return bad(i, &format!("unexpected {seg:?}")),
            }
        }
        Ok(())
    }
}

/// 1 on thought, tool-call and answer tokens; 0 elsewhere.
pub fn sft_loss_mask(seq: &TaggedTokenSequence) -> Vec<u8> {
    seq.tokens.iter().map(|(_, s)| u8::from(s.trained())).collect()
}

/// Mean negative log-likelihood over the masked positions.
pub fn masked_nll(logprobs: &[f64], mask: &[u8]) -> Result<f64, ScoringError> {
    if logprobs.len() != mask.len() {
        return Err(ScoringError::LengthMismatch {
            left: logprobs.len(),
            right: mask.len(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (&lp, &m) in logprobs.iter().zip(mask) {
        if m != 0 {
            if !lp.is_finite() {
                return Err(ScoringError::NonFinite);
            }
            sum += lp;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ScoringError::EmptyMask);
    }
    Ok(-sum / count as f64)
}

// ---------------------------------------------------------------------------
// Rejection sampling

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    WrongAnswer,
    TooShortForNone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

/// Drop trajectories whose answer is wrong (or missing), and trajectories
/// answering a gold "None" after fewer than `none_min_tool_calls` tool calls.
pub fn rejection_filter(
    trajectory: &Trajectory,
    gold: &str,
    kind: TaskKind,
    none_min_tool_calls: usize,
) -> FilterDecision {
    let correct = trajectory
        .final_answer
        .as_deref()
        .is_some_and(|a| is_equivalent(a, gold, kind, EquivalenceConfig::default()));
    if !correct {
        return FilterDecision::Drop(DropReason::WrongAnswer);
    }
    if normalize_answer(gold) == "none" && trajectory.tool_calls() < none_min_tool_calls {
        return FilterDecision::Drop(DropReason::TooShortForNone);
    }
    FilterDecision::Keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Action, Step, Termination};
    use proptest::prelude::*;

    #[test]
    fn exact_match_cases() {
        assert_eq!(exact_match("005Wt000003NIowIAG", "005Wt000003NIowIAG", false), 1.0);
        assert_eq!(exact_match(" none ", "None", false), 1.0);
        assert_eq!(exact_match("WI, TX", "TX, WI", true), 1.0);
        assert_eq!(exact_match("WI, TX", "TX, WI", false), 0.0);
        assert_eq!(exact_match("WI, WI", "WI", true), 0.0);
        assert_eq!(exact_match("a  b", "A b", false), 1.0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_score("store credit", "store credit"), 1.0);
        assert_eq!(f1_score("apple", "banana"), 0.0);
        // precision 2/3, recall 1
        assert!((f1_score("store credit refund", "store credit") - 0.8).abs() < 1e-12);
        assert_eq!(f1_score("", ""), 1.0);
        assert_eq!(f1_score("", "x"), 0.0);
        assert_eq!(f1_score("Credit!", "credit"), 1.0);
    }

    const VALID: &str = "q\n<think>t</think>\n<answer>A</answer>";

    #[test]
    fn reward_cases() {
        assert_eq!(reward(VALID, "A", "A", TaskKind::Analysis).total, 1.0);
        assert_eq!(reward(VALID, "B", "A", TaskKind::Analysis).total, 0.1);
        assert_eq!(reward("<think>t<answer>A</answer>", "A", "A", TaskKind::Analysis).total, 0.9);
        let qa = reward(VALID, "store credit refund", "store credit", TaskKind::Qa);
        assert!((qa.total - (0.1 + 0.9 * 0.8)).abs() < 1e-12);
    }

    #[test]
    fn advantages() {
        assert_eq!(group_advantages(&[1.0, 0.0, 0.0, 1.0]).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(group_advantages(&[1.0; 4]), Err(ScoringError::ZeroVariance));
        assert_eq!(group_advantages(&[1.0]), Err(ScoringError::GroupTooSmall(1)));
        let a = group_advantages(&[0.5, 0.5, 1.0]).unwrap();
        let mean = a.iter().sum::<f64>() / 3.0;
        let std = (a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!(mean.abs() < 1e-12 && (std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dynamic_sampling() {
        let g = |c: &[bool]| RolloutGroup::new(vec![0.0; c.len()], c.to_vec()).unwrap();
        let kept = dynamic_sample_filter(vec![
            g(&[true, false, false, true]),
            g(&[true; 4]),
            g(&[false; 4]),
        ]);
        assert_eq!(kept, vec![g(&[true, false, false, true])]);
        assert!(RolloutGroup::new(vec![0.0], vec![true, false]).is_err());
    }

    #[test]
    fn clip_cases() {
        let c = ClipConfig::default();
        assert!((clipped_term(2f64.ln(), 0.0, 1.0, c).unwrap() - 1.28).abs() < 1e-9);
        assert!((clipped_term(0.5f64.ln(), 0.0, -1.0, c).unwrap() + 0.8).abs() < 1e-9);
        assert_eq!(clipped_term(-1.3, -1.3, 0.7, c).unwrap(), 0.7);
        assert_eq!(clipped_term(f64::NAN, 0.0, 1.0, c), Err(ScoringError::NonFinite));
        assert!(ClipConfig::new(1.0, 0.2).is_err());
    }

    #[test]
    fn token_objective_averages_over_all_tokens() {
        let c = ClipConfig::default();
        let rollouts = vec![
            RolloutTokens { logp_new: vec![0.0, 0.0], logp_old: vec![0.0, 0.0], mask: vec![1, 1], advantage: 1.0 },
            RolloutTokens { logp_new: vec![0.0, 5.0], logp_old: vec![0.0, 0.0], mask: vec![1, 0], advantage: -1.0 },
        ];
        // three counted tokens: 1 + 1 - 1
        assert!((token_level_objective(&rollouts, c).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nll_cases() {
        assert_eq!(masked_nll(&[-1.0, -2.0], &[1, 0]).unwrap(), 1.0);
        assert_eq!(masked_nll(&[-0.5; 4], &[1; 4]).unwrap(), 0.5);
        assert_eq!(masked_nll(&[-1.0], &[0]), Err(ScoringError::EmptyMask));
    }

    #[test]
    fn mask_follows_spans() {
        let text = "q\n<think>a</think>\n<tool_call>{\"name\": \"execute\", \"arguments\": {\"query\": \"SELECT 1\"}}</tool_call>\n<tool_response>Observation: [(1,)]</tool_response>\n<think>b</think>\n<answer>1</answer>";
        let seq = TaggedTokenSequence::from_trajectory_text(Some("sys"), text).unwrap();
        seq.check().unwrap();
        let mask = sft_loss_mask(&seq);
        let start = 3 + text.find("<tool_response>").unwrap();
        let end = 3 + text.find("</tool_response>").unwrap() + "</tool_response>".len();
        for (i, m) in mask.iter().enumerate() {
            let expect = !(i < 3 + 2 || (start..end).contains(&i));
            assert_eq!(*m == 1, expect, "position {i}");
        }

        let direct = TaggedTokenSequence::from_trajectory_text(None, "q\n<think>x</think>\n<answer>y</answer>").unwrap();
        assert!(sft_loss_mask(&direct)[2..].iter().all(|&m| m == 1));
    }

    fn traj(answer: Option<&str>, tools: usize) -> Trajectory {
        let mut steps: Vec<Step> = (0..tools)
            .map(|_| Step { thought: "t".into(), action: Action::sql("SELECT 1"), observation: Some("o".into()) })
            .collect();
        if let Some(a) = answer {
            steps.push(Step { thought: "t".into(), action: Action::Answer(a.into()), observation: None });
        }
        Trajectory {
            query: "q".into(),
            steps,
            final_answer: answer.map(str::to_string),
            termination: if answer.is_some() { Termination::Answered } else { Termination::MaxTurns },
        }
    }

    #[test]
    fn rejection_cases() {
        let k = TaskKind::Analysis;
        assert_eq!(rejection_filter(&traj(Some("X"), 5), "X", k, 3), FilterDecision::Keep);
        assert_eq!(rejection_filter(&traj(Some("Y"), 5), "X", k, 3), FilterDecision::Drop(DropReason::WrongAnswer));
        assert_eq!(rejection_filter(&traj(None, 5), "X", k, 3), FilterDecision::Drop(DropReason::WrongAnswer));
        assert_eq!(rejection_filter(&traj(Some("None"), 1), "None", k, 3), FilterDecision::Drop(DropReason::TooShortForNone));
        assert_eq!(rejection_filter(&traj(Some("None"), 3), "None", k, 3), FilterDecision::Keep);
    }

    proptest! {
        #[test]
        fn reward_in_unit_interval(p in ".{0,20}", g in ".{0,20}", qa in any::<bool>()) {
            let kind = if qa { TaskKind::Qa } else { TaskKind::Analysis };
            let r = reward(VALID, &p, &g, kind);
            prop_assert!((0.0..=1.0).contains(&r.total));
            prop_assert_eq!(r.total, 0.1 * f64::from(r.format_score) + 0.9 * r.answer_score);
        }

        #[test]
        fn advantages_shift_and_scale(rs in prop::collection::vec(0.0f64..1.0, 2..16), shift in -5.0f64..5.0, scale in 0.1f64..10.0) {
            if let Ok(base) = group_advantages(&rs) {
                let shifted: Vec<f64> = rs.iter().map(|r| r + shift).collect();
                let scaled: Vec<f64> = rs.iter().map(|r| r * scale).collect();
                for (a, b) in base.iter().zip(group_advantages(&shifted).unwrap()) {
                    prop_assert!((a - b).abs() < 1e-6);
                }
                for (a, b) in base.iter().zip(group_advantages(&scaled).unwrap()) {
                    prop_assert!(a.signum() == b.signum() || a.abs() < 1e-9);
                }
            }
        }

        #[test]
        fn clipped_term_monotone_in_advantage(lr in -3.0f64..3.0, a in -5.0f64..5.0, d in 0.0f64..5.0) {
            let c = ClipConfig::default();
            prop_assert!(clipped_term(lr, 0.0, a, c).unwrap() <= clipped_term(lr, 0.0, a + d, c).unwrap() + 1e-12);
        }

        #[test]
        fn filter_only_drops(groups in prop::collection::vec(prop::collection::vec(any::<bool>(), 2..8), 0..10)) {
            let gs: Vec<RolloutGroup> = groups.iter().map(|c| RolloutGroup::new(vec![0.5; c.len()], c.clone()).unwrap()).collect();
            let kept = dynamic_sample_filter(gs.clone());
            let mut it = gs.iter();
            for k in &kept {
                prop_assert!(it.any(|g| g == k));
            }
        }
    }
}
