mod common;

use bizagent_core::env::{build_record_graph, FkSpec, RecordGraph};
use bizagent_core::llm::FnProvider;
use bizagent_core::synthesis::{
    self, assemble_dataset, read_dataset, synthesize_complex_batch, write_dataset, SynthOptions, SynthSample,
};

fn graph() -> (tempfile::TempDir, std::sync::Arc<bizagent_core::env::SqlEnvironment>, RecordGraph) {
    let (dir, env) = common::database(&common::four_table_sql());
    let spec = FkSpec::from_toml_str(common::FOUR_TABLE_FK).unwrap();
    let (g, diag) = build_record_graph(&env, &spec).unwrap();
    assert_eq!(diag.dangling, 0);
    (dir, env, g)
}

fn complexifier() -> FnProvider {
    FnProvider::new(|req| {
        let prompt = &req.messages[0].content;
        Ok(format!(
            "{{\"Q\": \"Find the record reached through clue {}. Return only its ID. If no such records exist, return 'None'.\"}}",
            prompt.len()
        ))
    })
}

/// Oracle: look the connecting values up with SQL rather than the graph.
fn field_value(env: &bizagent_core::env::SqlEnvironment, table: &str, id: &str, field: &str) -> String {
    let obs = env.execute_sql(&format!("SELECT \"{field}\" FROM \"{table}\" WHERE Id = '{id}'"), 5).observation;
    assert!(obs.starts_with("Observation: [("), "{obs}");
    obs
}

#[test]
fn walks_follow_foreign_keys() {
    let (_d, env, g) = graph();
    assert_eq!(g.node_count(), 6 + 12 + 15 + 10);
    let out = synthesize_complex_batch(&g, 60, (2, 4), &complexifier(), 11, &SynthOptions::default());
    let samples: Vec<SynthSample> = out.into_iter().map(Result::unwrap).collect();
    for s in &samples {
        let walk = s.provenance.as_ref().unwrap();
        assert_eq!(walk.records.len(), s.generation_trace.len() + 1);
        for (i, (here, there)) in walk.connect_keys.iter().enumerate() {
            let (a, b) = (&walk.records[i], &walk.records[i + 1]);
            assert_eq!(
                field_value(&env, &a.table, &a.record_id, here),
                field_value(&env, &b.table, &b.record_id, there)
            );
        }
        assert_eq!(s.answer, walk.records[0].record_id);
        assert!(!s.question.contains(&s.answer));
    }
}

#[test]
fn batches_are_reproducible_and_round_trip() {
    let (dir, env, g) = graph();
    let run = || -> Vec<SynthSample> {
        synthesize_complex_batch(&g, 20, (2, 5), &complexifier(), 3, &SynthOptions::default())
            .into_iter()
            .map(Result::unwrap)
            .collect()
    };
    let a = run();
    assert_eq!(a, run());
    let simple = synthesis::synthesize_simple(&env, &["Account".into(), "Opportunity".into()], None, 5).unwrap();
    let data = assemble_dataset(a, simple, vec![]).unwrap();
    let path = dir.path().join("data.jsonl");
    write_dataset(&path, &data).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), data);
}
