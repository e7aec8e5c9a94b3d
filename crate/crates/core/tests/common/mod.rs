#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use bizagent_core::env::SqlEnvironment;
use serde::Deserialize;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Debug, Clone, Deserialize)]
pub struct GoldenEpisode {
    pub query: String,
    pub gold: String,
    pub turns: Vec<String>,
}

pub fn lead_routing() -> GoldenEpisode {
    serde_json::from_str(&std::fs::read_to_string(fixture("lead_routing.json")).unwrap()).unwrap()
}

/// A fresh SQLite file built from `sql`, opened read-only.
pub fn database(sql: &str) -> (tempfile::TempDir, Arc<SqlEnvironment>) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("snapshot.db");
    rusqlite::Connection::open(&path).unwrap().execute_batch(sql).unwrap();
    let env = Arc::new(SqlEnvironment::open(&path).unwrap());
    (dir, env)
}

pub fn lead_routing_db() -> (tempfile::TempDir, Arc<SqlEnvironment>) {
    database(&std::fs::read_to_string(fixture("lead_routing.sql")).unwrap())
}

/// Four linked tables: Contact -> Account, Opportunity -> Account and
/// Contact, Case -> Contact. Ids embed the table so collisions are visible.
pub fn four_table_sql() -> String {
    let mut sql = String::from(
        "CREATE TABLE Account (Id TEXT PRIMARY KEY, Name TEXT, Industry TEXT);
         CREATE TABLE Contact (Id TEXT PRIMARY KEY, LastName TEXT, AccountId TEXT);
         CREATE TABLE Opportunity (Id TEXT PRIMARY KEY, StageName TEXT, AccountId TEXT, ContactId TEXT);
         CREATE TABLE \"Case\" (Id TEXT PRIMARY KEY, Subject TEXT, ContactId TEXT);\n",
    );
    for a in 0..6 {
        sql.push_str(&format!("INSERT INTO Account VALUES ('001A{a:04}', 'Account {a}', 'Retail');\n"));
    }
    for c in 0..12 {
        sql.push_str(&format!(
            "INSERT INTO Contact VALUES ('003C{c:04}', 'Surname{c}', '001A{:04}');\n",
            c % 6
        ));
    }
    for o in 0..15 {
        sql.push_str(&format!(
            "INSERT INTO Opportunity VALUES ('006O{o:04}', 'Prospecting', '001A{:04}', '003C{:04}');\n",
            o % 6,
            (o * 5) % 12
        ));
    }
    for k in 0..10 {
        sql.push_str(&format!(
            "INSERT INTO \"Case\" VALUES ('500K{k:04}', 'Issue {k}', '003C{:04}');\n",
            (k * 7) % 12
        ));
    }
    sql
}

pub const FOUR_TABLE_FK: &str = r#"
tables = [{ name = "Account" }, { name = "Contact" }, { name = "Opportunity" }, { name = "Case" }]

[[links]]
table = "Contact"
field = "AccountId"
ref_table = "Account"

[[links]]
table = "Opportunity"
field = "AccountId"
ref_table = "Account"

[[links]]
table = "Opportunity"
field = "ContactId"
ref_table = "Contact"

[[links]]
table = "Case"
field = "ContactId"
ref_table = "Contact"
"#;

/// One canned HTTP reply.
#[derive(Clone)]
pub struct Canned {
    pub status: u16,
    pub body: String,
    pub headers: Vec<(String, String)>,
}

impl Canned {
    pub fn ok(body: impl Into<String>) -> Self {
        Self { status: 200, body: body.into(), headers: vec![] }
    }

    pub fn status(status: u16, body: impl Into<String>) -> Self {
        Self { status, body: body.into(), headers: vec![] }
    }
}

pub fn chat_reply(text: &str) -> String {
    serde_json::json!({
        "id": "cmpl-1",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]
    })
    .to_string()
}

/// A single-threaded HTTP/1.1 server answering each connection with the
/// next canned reply. Request bodies are recorded.
pub struct MockServer {
    pub base_url: String,
    pub bodies: Arc<Mutex<Vec<String>>>,
    pub paths: Arc<Mutex<Vec<String>>>,
}

pub fn mock_server(replies: Vec<Canned>) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let bodies = Arc::new(Mutex::new(Vec::new()));
    let paths = Arc::new(Mutex::new(Vec::new()));
    let (b, p) = (Arc::clone(&bodies), Arc::clone(&paths));
    std::thread::spawn(move || {
        for (reply, stream) in replies.into_iter().zip(listener.incoming()) {
            let mut stream = stream.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            p.lock().unwrap().push(request_line.split_whitespace().nth(1).unwrap_or("").to_string());
            let mut len = 0usize;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" || line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    if k.eq_ignore_ascii_case("content-length") {
                        len = v.trim().parse().unwrap();
                    }
                }
            }
            let mut body = vec![0u8; len];
            reader.read_exact(&mut body).unwrap();
            b.lock().unwrap().push(String::from_utf8_lossy(&body).into_owned());
            let mut head = format!(
                "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                reply.status,
                reply.body.len()
            );
            for (k, v) in &reply.headers {
                head.push_str(&format!("{k}: {v}\r\n"));
            }
            head.push_str("\r\n");
            stream.write_all(head.as_bytes()).unwrap();
            stream.write_all(reply.body.as_bytes()).unwrap();
            stream.flush().unwrap();
        }
    });
    MockServer { base_url: format!("http://{addr}"), bodies, paths }
}
