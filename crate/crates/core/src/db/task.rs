use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::DbError;

/// One benchmark instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QueryTask {
    pub id: String,
    pub question: String,
    pub db_id: String,
    #[serde(rename = "query", skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
}

/// Accepts Spider (`query`, no id) and Bird (`SQL`, `question_id`) shapes.
#[derive(Deserialize)]
struct RawTask {
    id: Option<Value>,
    question_id: Option<Value>,
    question: String,
    db_id: String,
    #[serde(alias = "SQL", alias = "sql", alias = "gold_sql")]
    query: Option<String>,
    evidence: Option<String>,
}

fn id_string(v: Value) -> String {
    match v {
        Value::String(s) => s,
        other => other.to_string(),
    }
}

/// Parses a JSON list of task records. Records without an id get their
/// zero-based position as id.
pub fn parse_tasks(json: &str) -> Result<Vec<QueryTask>, serde_json::Error> {
    let raw: Vec<RawTask> = serde_json::from_str(json)?;
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, r)| QueryTask {
            id: r.id.or(r.question_id).map(id_string).unwrap_or_else(|| i.to_string()),
            question: r.question,
            db_id: r.db_id,
            gold_sql: r.query.filter(|q| !q.trim().is_empty()),
            evidence: r.evidence.filter(|e| !e.trim().is_empty()),
        })
        .collect())
}

pub fn load_tasks(path: &Path) -> Result<Vec<QueryTask>, DbError> {
    let err = |message: String| DbError::TaskFile {
        path: path.to_path_buf(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    parse_tasks(&text).map_err(|e| err(e.to_string()))
}

/// Maps `db_id` to a SQLite file. Looks under `root` for the Spider layout
/// `<db_id>/<db_id>.sqlite` and the flat layout `<db_id>.sqlite`; explicit
/// entries win over both.
#[derive(Debug, Clone, Default)]
pub struct DatabaseCatalog {
    root: Option<PathBuf>,
    explicit: BTreeMap<String, PathBuf>,
}

impl DatabaseCatalog {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            explicit: BTreeMap::new(),
        }
    }

    pub fn with_database(mut self, db_id: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        self.explicit.insert(db_id.into(), path.into());
        self
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn resolve(&self, db_id: &str) -> Result<PathBuf, DbError> {
        if let Some(p) = self.explicit.get(db_id) {
            return if p.is_file() {
                Ok(p.clone())
            } else {
                Err(DbError::FileNotFound(p.clone()))
            };
        }
        let root = self.root.as_ref().ok_or_else(|| DbError::UnknownDatabase(db_id.to_string()))?;
        ["sqlite", "db"]
            .iter()
            .flat_map(|ext| {
                [
                    root.join(db_id).join(format!("{db_id}.{ext}")),
                    root.join(format!("{db_id}.{ext}")),
                ]
            })
            .find(|p| p.is_file())
            .ok_or_else(|| DbError::UnknownDatabase(db_id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spider_and_bird_shapes() {
        let json = r#"[
            {"question": "q0", "db_id": "a", "query": "SELECT 1"},
            {"question_id": 7, "question": "q1", "db_id": "b", "SQL": "SELECT 2", "evidence": "hint"},
            {"id": "x", "question": "q2", "db_id": "c", "evidence": ""}
        ]"#;
        let tasks = parse_tasks(json).unwrap();
        assert_eq!(tasks[0].id, "0");
        assert_eq!(tasks[0].gold_sql.as_deref(), Some("SELECT 1"));
        assert_eq!(tasks[1].id, "7");
        assert_eq!(tasks[1].gold_sql.as_deref(), Some("SELECT 2"));
        assert_eq!(tasks[1].evidence.as_deref(), Some("hint"));
        assert_eq!(tasks[2].id, "x");
        assert_eq!(tasks[2].gold_sql, None);
        assert_eq!(tasks[2].evidence, None);
    }

    #[test]
    fn catalog_layouts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("nested")).unwrap();
        std::fs::write(dir.path().join("nested/nested.sqlite"), b"").unwrap();
        std::fs::write(dir.path().join("flat.sqlite"), b"").unwrap();
        let cat = DatabaseCatalog::new(dir.path());
        assert!(cat.resolve("nested").unwrap().ends_with("nested/nested.sqlite"));
        assert!(cat.resolve("flat").unwrap().ends_with("flat.sqlite"));
        assert!(matches!(cat.resolve("nope"), Err(DbError::UnknownDatabase(_))));
        let cat = DatabaseCatalog::default().with_database("x", dir.path().join("flat.sqlite"));
        assert!(cat.resolve("x").is_ok());
        assert!(cat.resolve("flat").is_err());
    }
}
