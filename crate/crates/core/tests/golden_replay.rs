mod common;

use bizagent_core::agent::{self, AgentConfig, EpisodeLog, ToolRegistry};
use bizagent_core::bench::{self, BenchError};
use bizagent_core::llm::ScriptedProvider;
use bizagent_core::protocol::{self, Action, Termination};
use bizagent_core::scoring::{reward, TaskKind};

fn run_golden() -> (tempfile::TempDir, ToolRegistry, agent::RunResult, EpisodeLog) {
    let golden = common::lead_routing();
    let (dir, env) = common::lead_routing_db();
    let schema = env.schema_summary().unwrap();
    let tools = ToolRegistry::with_default_cap(env);
    let provider = ScriptedProvider::new(golden.turns.clone()).unwrap();
    let config = AgentConfig { base_system_prompt: agent::default_system_prompt(&schema), ..AgentConfig::default() };
    let (run, log) = agent::run_logged(&golden.query, &tools, &provider, &config, None).unwrap();
    (dir, tools, run, log)
}

#[test]
fn lead_routing_episode_matches_the_recorded_trajectory() {
    let golden = common::lead_routing();
    let (_d, _tools, run, _log) = run_golden();
    let t = &run.trajectory;
    assert_eq!(run.termination, Termination::Answered);
    assert_eq!(run.turns_used, 5);
    assert_eq!(t.steps.len(), 5);
    assert_eq!(t.tool_calls(), 4);
    assert_eq!(t.final_answer.as_deref(), Some("005Wt000003NIowIAG"));
    let obs: Vec<&str> = t.steps.iter().filter_map(|s| s.observation.as_deref()).collect();
    assert_eq!(obs[0], "Observation: [('0MIWt0000007xzROAQ', 'US-Great Lakes')]");
    assert!(obs[1].starts_with("Observation: [('005Wt000003NHpdIAG',), "));
    assert_eq!(obs[2], "Observation: Error: no such column: OwnerId");
    assert_eq!(
        obs[3],
        "Observation: [('005Wt000003NIowIAG', 5), ('005Wt000003NJmcIAG', 4), ('005Wt000003NDXaIAO', 1)]"
    );
    assert!(matches!(t.steps[4].action, Action::Answer(_)));

    let text = protocol::serialize_trajectory(t).unwrap();
    assert!(protocol::validate_format(&text).valid);
    let r = reward(&text, t.final_answer.as_deref().unwrap(), &golden.gold, TaskKind::Analysis);
    assert_eq!(r.total, 1.0);
    assert_eq!(protocol::parse_trajectory(&text).unwrap(), *t);
}

#[test]
fn replay_reproduces_and_detects_divergence() {
    let (dir, tools, run, log) = run_golden();
    let path = dir.path().join("episodes.jsonl");
    agent::write_episode_logs(&path, &[log]).unwrap();
    let log = agent::read_episode_logs(&path).unwrap().remove(0);

    let replayed = bench::replay(&log, &tools, &AgentConfig::default()).unwrap();
    assert_eq!(replayed.trajectory, run.trajectory);

    let mut mutated = log.clone();
    mutated.trajectory_text = mutated.trajectory_text.replacen("US-Great Lakes", "US-Great Lakez", 1);
    match bench::replay(&mutated, &tools, &AgentConfig::default()) {
        Err(BenchError::ReplayDivergence { expected, actual, .. }) => {
            assert!(expected.contains("Lakez") || actual.contains("Lakes"));
        }
        other => panic!("expected divergence, got {other:?}"),
    }

    let mut empty = log.clone();
    empty.assistant_turns.clear();
    assert!(matches!(bench::replay(&empty, &tools, &AgentConfig::default()), Err(BenchError::Config(_))));
}

#[test]
fn replay_honours_recorded_turn_cap() {
    let (_d, env) = common::lead_routing_db();
    let tools = ToolRegistry::with_default_cap(env);
    let turn = r#"<think>again</think>
<tool_call>{"name": "execute", "arguments": {"query": "SELECT count(*) FROM Lead"}}</tool_call>"#;
    let provider = ScriptedProvider::new(vec![turn; 3]).unwrap();
    let config = AgentConfig { max_turns: 3, ..AgentConfig::default() };
    let (run, log) = agent::run_logged("How many leads?", &tools, &provider, &config, None).unwrap();
    assert_eq!(run.termination, Termination::MaxTurns);
    let again = bench::replay(&log, &tools, &AgentConfig::default()).unwrap();
    assert_eq!(again.turns_used, 3);
}
