//! The tool environment: read-only SQL over a local SQLite snapshot, calendar
//! arithmetic, and record-graph extraction.

mod dates;
mod graph;
mod render;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dates::{date_calculation, date_calculation_str};
pub use graph::{
    build_record_graph, Edge, FkLink, FkSpec, GraphDiagnostics, Record, RecordGraph, RecordRef,
    TableSpec,
};
pub use render::{py_float, py_str};

use crate::protocol::Dialect;

pub const DEFAULT_ROW_CAP: usize = 200;
pub const OBSERVATION_PREFIX: &str = "Observation: ";
pub const SOSL_UNSUPPORTED: &str = "Error: SOSL unsupported in local environment";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("cannot open database {path}: {message}")]
    Open { path: PathBuf, message: String },
    #[error("invalid date {0:?}, expected YYYY-MM-DD")]
    InvalidDate(String),
    #[error("date result outside years 1-9999")]
    OutOfRange,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("invalid FK spec: {0}")]
    FkSpec(String),
    #[error("sqlite: {0}")]
    Sql(String),
}

fn sqlite_message(e: &rusqlite::Error) -> String {
    match e {
        rusqlite::Error::SqliteFailure(_, Some(msg)) => msg.clone(),
        rusqlite::Error::SqlInputError { msg, .. } => msg.clone(),
        other => other.to_string(),
    }
}

impl From<rusqlite::Error> for EnvError {
    fn from(e: rusqlite::Error) -> Self {
        EnvError::Sql(sqlite_message(&e))
    }
}

/// What the agent sees after a tool call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub observation: String,
    /// Rows the query produced before capping; 0 on error.
    pub row_count: usize,
    pub truncated: bool,
}

impl ToolResult {
    pub fn error(message: impl AsRef<str>) -> Self {
        Self {
            observation: format!("{OBSERVATION_PREFIX}Error: {}", message.as_ref()),
            row_count: 0,
            truncated: false,
        }
    }

    pub fn text(body: impl AsRef<str>) -> Self {
        Self {
            observation: format!("{OBSERVATION_PREFIX}{}", body.as_ref()),
            row_count: 0,
            truncated: false,
        }
    }
}

/// Read-only handle over a SQLite file. Connections are pooled so that
/// concurrent episodes each get their own reader.
pub struct SqlEnvironment {
    path: PathBuf,
    pool: Mutex<Vec<Connection>>,
}

impl SqlEnvironment {
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EnvError> {
        let path = path.as_ref().to_path_buf();
        let env = Self {
            path,
            pool: Mutex::new(Vec::new()),
        };
        // fail fast on a missing or unreadable file
        let conn = env.connect()?;
        conn.query_row("SELECT count(*) FROM sqlite_master", [], |_| Ok(()))
            .map_err(|e| EnvError::Open {
                path: env.path.clone(),
                message: sqlite_message(&e),
            })?;
        env.checkin(conn);
        Ok(env)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn connect(&self) -> Result<Connection, EnvError> {
        let conn = Connection::open_with_flags(
            &self.path,
            OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )
        .map_err(|e| EnvError::Open {
            path: self.path.clone(),
            message: sqlite_message(&e),
        })?;
        conn.pragma_update(None, "query_only", true)?;
        Ok(conn)
    }

    fn checkout(&self) -> Result<Connection, EnvError> {
        let pooled = self.pool.lock().expect("connection pool poisoned").pop();
        match pooled {
            Some(c) => Ok(c),
            None => self.connect(),
        }
    }

    fn checkin(&self, conn: Connection) {
        self.pool.lock().expect("connection pool poisoned").push(conn);
    }

    pub(crate) fn with_connection<T>(
        &self,
        f: impl FnOnce(&Connection) -> Result<T, EnvError>,
    ) -> Result<T, EnvError> {
        let conn = self.checkout()?;
        let out = f(&conn);
        self.checkin(conn);
        out
    }

    /// Run a query and render at most `cap` rows. Failures become error
    /// observations; nothing propagates.
    pub fn execute_sql(&self, query: &str, cap: usize) -> ToolResult {
        match self.with_connection(|c| Ok(run_query(c, query, cap))) {
            Ok(r) => r,
            Err(e) => ToolResult::error(e.to_string()),
        }
    }

    pub fn execute(&self, query: &str, dialect: Dialect, cap: usize) -> ToolResult {
        match dialect {
            Dialect::Sql => self.execute_sql(query, cap),
            Dialect::Sosl => ToolResult::text(SOSL_UNSUPPORTED),
        }
    }

    pub fn table_names(&self) -> Result<Vec<String>, EnvError> {
        self.with_connection(|c| {
            let mut stmt = c.prepare(
                "SELECT name FROM sqlite_master WHERE type = 'table' \
                 AND name NOT LIKE 'sqlite_%' ORDER BY name",
            )?;
            let names = stmt
                .query_map([], |r| r.get::<_, String>(0))?
                .collect::<Result<Vec<_>, _>>()?;
            Ok(names)
        })
    }

    pub fn columns(&self, table: &str) -> Result<Vec<String>, EnvError> {
        self.with_connection(|c| table_columns(c, table))
    }

    /// One line per table: `Name(col1, col2, ...)`.
    pub fn schema_summary(&self) -> Result<String, EnvError> {
        let mut lines = Vec::new();
        for t in self.table_names()? {
            let cols = self.columns(&t)?;
            lines.push(format!("{t}({})", cols.join(", ")));
        }
        Ok(lines.join("\n"))
    }
}

pub(crate) fn table_columns(c: &Connection, table: &str) -> Result<Vec<String>, EnvError> {
    let mut stmt = c.prepare("SELECT name FROM pragma_table_info(?1) ORDER BY cid")?;
    let cols = stmt
        .query_map([table], |r| r.get::<_, String>(0))?
        .collect::<Result<Vec<_>, _>>()?;
    Ok(cols)
}

fn run_query(c: &Connection, query: &str, cap: usize) -> ToolResult {
    let mut stmt = match c.prepare(query) {
        Ok(s) => s,
        Err(e) => return ToolResult::error(sqlite_message(&e)),
    };
    let width = stmt.column_count();
    let mut rows = match stmt.query([]) {
        Ok(r) => r,
        Err(e) => return ToolResult::error(sqlite_message(&e)),
    };
    let mut rendered = Vec::new();
    let mut count = 0usize;
    loop {
        match rows.next() {
            Ok(Some(row)) => {
                if count < cap {
                    let mut values = Vec::with_capacity(width);
                    for i in 0..width {
                        match row.get_ref(i) {
                            Ok(v) => values.push(render::render_value(v)),
                            Err(e) => return ToolResult::error(sqlite_message(&e)),
                        }
                    }
                    rendered.push(render::render_row(&values));
                }
                count += 1;
            }
            Ok(None) => break,
            Err(e) => return ToolResult::error(sqlite_message(&e)),
        }
    }
    let truncated = count > cap;
    let mut observation = format!("{OBSERVATION_PREFIX}{}", render::render_rows(&rendered));
    if truncated {
        observation.push_str(&format!(
            "\n[truncated: showing {cap} of {count} rows; refine the query]"
        ));
    }
    ToolResult {
        observation,
        row_count: count,
        truncated,
    }
}
