use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const QUERY: &str = "Which account has the most contacts?";

fn make_db(dir: &Path) -> PathBuf {
    let path = dir.join("org.sqlite");
    let c = rusqlite::Connection::open(&path).unwrap();
    c.execute_batch(
        "CREATE TABLE Account (Id TEXT PRIMARY KEY, Name TEXT);
         CREATE TABLE Contact (Id TEXT PRIMARY KEY, AccountId TEXT, LastName TEXT);
         INSERT INTO Account VALUES ('001A', 'Acme'), ('001B', 'Globex');
         INSERT INTO Contact VALUES ('003A', '001A', 'Ng'), ('003B', '001A', 'Roe'), ('003C', '001B', 'Li');",
    )
    .unwrap();
    std::fs::write(
        dir.join("fk.toml"),
        "[[links]]\ntable = \"Contact\"\nfield = \"AccountId\"\nref_table = \"Account\"\n",
    )
    .unwrap();
    path
}

fn script(dir: &Path) -> PathBuf {
    let turns = [
        "<think>count contacts per account</think>\n<tool_call>{\"name\": \"execute\", \"arguments\": {\"query\": \"SELECT AccountId, count(*) FROM Contact GROUP BY AccountId ORDER BY 2 DESC LIMIT 1\"}}</tool_call>",
        "<think>001A has two</think>\n<answer>001A</answer>",
    ];
    let path = dir.join("script.json");
    std::fs::write(&path, serde_json::json!({ QUERY: turns }).to_string()).unwrap();
    path
}

struct Sandbox {
    dir: TempDir,
    db: PathBuf,
    provider: String,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let db = make_db(dir.path());
        let provider = format!("scripted:{}", script(dir.path()).display());
        Self { dir, db, provider }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self) -> Command {
        let mut c = Command::new(env!("CARGO_BIN_EXE_bizagent"));
        for (k, _) in std::env::vars() {
            if k.starts_with("BIZAGENT_") {
                c.env_remove(k);
            }
        }
        c.arg("--db").arg(&self.db).arg("--provider").arg(&self.provider);
        c
    }
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn graph_build_reports_counts() {
    let sb = Sandbox::new();
    let out = sb.path("graph.json");
    let o = run(sb.cmd().args(["--fk-spec"]).arg(sb.path("fk.toml")).arg("graph-build").arg("--out").arg(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(summary["nodes"], 5);
    assert_eq!(summary["edges"], 3);
    assert!(std::fs::read_to_string(out).unwrap().contains("003C"));
}

#[test]
fn run_log_and_replay() {
    let sb = Sandbox::new();
    let log = sb.path("episodes.jsonl");
    let o = run(sb.cmd().arg("run").arg(QUERY).arg("--log").arg(&log));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("<tool_response>Observation: [('001A', 2)]</tool_response>"), "{text}");
    assert!(text.trim_end().ends_with("<answer>001A</answer>"));

    let o = run(sb.cmd().arg("replay").arg("--log").arg(&log));
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "#1: identical");

    let tampered = std::fs::read_to_string(&log).unwrap().replace("('001A', 2)", "('001A', 3)");
    std::fs::write(&log, tampered).unwrap();
    let o = run(sb.cmd().arg("replay").arg("--log").arg(&log));
    assert!(!o.status.success());
    assert!(stdout(&o).contains("diverge"), "{}", stdout(&o));
}

#[test]
fn bench_writes_reports() {
    let sb = Sandbox::new();
    let dataset = sb.path("bench.jsonl");
    let line = serde_json::json!({
        "id": "s1", "task": "top_account", "skill": "Database",
        "question": QUERY, "answer": "001A", "metric": "exact_match",
    });
    std::fs::write(&dataset, format!("{line}\n")).unwrap();
    let out = sb.path("report");
    let o = run(sb.cmd().arg("bench").arg("--dataset").arg(&dataset).arg("--out").arg(&out));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("table.md")).unwrap();
    assert!(table.starts_with("| Workflow | Policy | Text | Database | Avg |"), "{table}");
    for f in ["report.jsonl", "meta.json", "episodes.jsonl"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let report = std::fs::read_to_string(out.join("report.jsonl")).unwrap();
    assert!(report.contains("\"score\":1.0"), "{report}");
}

#[test]
fn flag_beats_env_beats_file() {
    let sb = Sandbox::new();
    let cfg = sb.path("bizagent.toml");
    std::fs::write(&cfg, "max_turns = 1\n").unwrap();
    let termination = |c: &mut Command| {
        let o = run(c);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stderr).into_owned()
    };
    let file_only = termination(sb.cmd().arg("--config").arg(&cfg).arg("run").arg(QUERY));
    assert!(file_only.contains("MaxTurns"), "{file_only}");
    let env_wins = termination(sb.cmd().arg("--config").arg(&cfg).env("BIZAGENT_MAX_TURNS", "5").arg("run").arg(QUERY));
    assert!(env_wins.contains("Answered"), "{env_wins}");
    let flag_wins = termination(
        sb.cmd()
            .arg("--config")
            .arg(&cfg)
            .env("BIZAGENT_MAX_TURNS", "5")
            .args(["--max-turns", "1", "run", QUERY]),
    );
    assert!(flag_wins.contains("MaxTurns"), "{flag_wins}");
}

#[test]
fn invalid_settings_are_rejected() {
    let sb = Sandbox::new();
    let o = run(sb.cmd().args(["--width", "0", "run", QUERY]));
    assert!(!o.status.success());
    let o = run(sb.cmd().args(["--provider", "grpc", "run", QUERY]));
    assert!(!o.status.success());
    let o = run(sb.cmd().args(["--db", "/nonexistent.sqlite", "run", QUERY]));
    assert!(!o.status.success());
}

#[test]
fn memory_subcommands_on_empty_store() {
    let sb = Sandbox::new();
    let mem = sb.path("memory.jsonl");
    let o = run(sb.cmd().arg("--memory").arg(&mem).args(["memory", "list"]));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "");
    let o = run(sb.cmd().arg("--memory").arg(&mem).args(["memory", "export"]));
    assert_eq!(stdout(&o).trim(), "[]");
    let o = run(sb.cmd().arg("--memory").arg(&mem).args(["memory", "clear"]));
    assert_eq!(stdout(&o).trim(), "removed 0 units");
    assert!(mem.exists());
    let o = run(sb.cmd().args(["memory", "list"]));
    assert!(!o.status.success());
}
