//! The relational environment: schemas, prompt context, read-only execution
//! and result comparison.

mod exec;
mod schema;
mod task;

use std::path::{Path, PathBuf};

use rusqlite::{Connection, OpenFlags};
use thiserror::Error;

pub use exec::{
    compare_results, execute_sql, execution_reward, Cell, ExecReward, ExecStatus, ExecutionJudge, ExecutionOutcome,
    RewardMode, Row, SqlEnv, DEFAULT_TIMEOUT_MS,
};
pub use schema::{
    introspect_schema, serialize_context, ColumnDef, ColumnType, DatabaseSchema, ForeignKey, TableDef,
    DEFAULT_SAMPLES_PER_COLUMN,
};
pub use task::{load_tasks, parse_tasks, DatabaseCatalog, QueryTask};

#[derive(Debug, Error)]
pub enum DbError {
    #[error("database file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("{path} is not a SQLite database: {message}")]
    NotADatabase { path: PathBuf, message: String },
    #[error("sqlite error on {path}: {source}")]
    Sqlite {
        path: PathBuf,
        #[source]
        source: rusqlite::Error,
    },
    #[error("cannot compare results when either execution failed")]
    ComparisonOnError,
    #[error("oracle reward mode requires gold SQL")]
    MissingGold,
    #[error("no database file for db_id {0:?}")]
    UnknownDatabase(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("cannot read task file {path}: {message}")]
    TaskFile { path: PathBuf, message: String },
}

impl DbError {
    pub(crate) fn from_sqlite(path: &Path, e: rusqlite::Error) -> Self {
        if let rusqlite::Error::SqliteFailure(f, ref msg) = e {
            if f.code == rusqlite::ErrorCode::NotADatabase {
                return DbError::NotADatabase {
                    path: path.to_path_buf(),
                    message: msg.clone().unwrap_or_else(|| "file is not a database".into()),
                };
            }
        }
        DbError::Sqlite {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

pub(crate) fn open_read_only(path: &Path) -> Result<Connection, DbError> {
    if !path.is_file() {
        return Err(DbError::FileNotFound(path.to_path_buf()));
    }
    let flags = OpenFlags::SQLITE_OPEN_READ_ONLY | OpenFlags::SQLITE_OPEN_NO_MUTEX;
    let conn = Connection::open_with_flags(path, flags).map_err(|e| DbError::from_sqlite(path, e))?;
    conn.pragma_update(None, "query_only", true)
        .map_err(|e| DbError::from_sqlite(path, e))?;
    Ok(conn)
}

pub(crate) fn quote_ident(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}
