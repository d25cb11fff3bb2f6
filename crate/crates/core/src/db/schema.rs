use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use rusqlite::types::Value;
use rusqlite::Connection;
use serde::{Deserialize, Serialize};

use super::{open_read_only, quote_ident, DbError};

pub const DEFAULT_SAMPLES_PER_COLUMN: usize = 3;

/// Coarse column type exposed to the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ColumnType {
    Text,
    Number,
    Date,
    Boolean,
    Other,
}

impl ColumnType {
    /// Maps a declared SQLite column type onto the five-way enum.
    ///
    /// Date and boolean names are recognised first; everything else follows
    /// the SQLite affinity rules in order (INT, then CHAR/CLOB/TEXT, then
    /// BLOB or empty, then REAL/FLOA/DOUB). Of the catch-all NUMERIC
    /// affinity only explicitly numeric names count as numbers.
    pub fn from_declared(declared: &str) -> Self {
        let d = declared.to_ascii_uppercase();
        if d.contains("BOOL") {
            ColumnType::Boolean
        } else if d.contains("DATE") || d.contains("TIME") {
            ColumnType::Date
        } else if d.contains("INT") {
            ColumnType::Number
        } else if d.contains("CHAR") || d.contains("CLOB") || d.contains("TEXT") {
            ColumnType::Text
        } else if d.trim().is_empty() || d.contains("BLOB") {
            ColumnType::Other
        } else if ["REAL", "FLOA", "DOUB", "NUM", "DEC"].iter().any(|k| d.contains(k)) {
            ColumnType::Number
        } else {
            ColumnType::Other
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Text => "TEXT",
            ColumnType::Number => "NUMBER",
            ColumnType::Date => "DATE",
            ColumnType::Boolean => "BOOLEAN",
            ColumnType::Other => "OTHER",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: ColumnType,
    /// SQL literals, e.g. `'Anfield'` or `54000`.
    pub sample_values: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub column: String,
    pub ref_table: String,
    pub ref_column: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
    pub primary_key: Vec<String>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns.iter().find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<TableDef>,
}

impl DatabaseSchema {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Checks name uniqueness, key references and the sample cap.
    pub fn validate(&self, max_samples: usize) -> Result<(), DbError> {
        let bad = |msg: String| Err(DbError::InvalidSchema(msg));
        let mut tables = HashSet::new();
        for t in &self.tables {
            if !tables.insert(t.name.to_ascii_lowercase()) {
                return bad(format!("duplicate table {}", t.name));
            }
            let mut cols = HashSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.to_ascii_lowercase()) {
                    return bad(format!("duplicate column {}.{}", t.name, c.name));
                }
                if c.sample_values.len() > max_samples {
                    return bad(format!("{}.{} has {} samples", t.name, c.name, c.sample_values.len()));
                }
            }
            for pk in &t.primary_key {
                if t.column(pk).is_none() {
                    return bad(format!("primary key column {}.{pk} does not exist", t.name));
                }
            }
        }
        for t in &self.tables {
            for fk in &t.foreign_keys {
                if t.column(&fk.column).is_none() {
                    return bad(format!("foreign key column {}.{} does not exist", t.name, fk.column));
                }
                let target = self.table(&fk.ref_table).and_then(|rt| rt.column(&fk.ref_column));
                if target.is_none() {
                    return bad(format!(
                        "foreign key {}.{} references missing {}.{}",
                        t.name, fk.column, fk.ref_table, fk.ref_column
                    ));
                }
            }
        }
        Ok(())
    }
}

fn literal(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::Integer(i) => Some(i.to_string()),
        Value::Real(r) => Some(r.to_string()),
        Value::Text(s) => Some(format!("'{}'", s.replace('\'', "''"))),
        Value::Blob(b) => Some(format!("X'{}'", b.iter().map(|x| format!("{x:02X}")).collect::<String>())),
    }
}

fn table_names(conn: &Connection) -> Result<Vec<String>, rusqlite::Error> {
    let mut stmt = conn.prepare(
        "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite\\_%' ESCAPE '\\' ORDER BY rowid",
    )?;
    let names = stmt.query_map([], |r| r.get::<_, String>(0))?.collect();
    names
}

fn has_rowid(conn: &Connection, table: &str) -> bool {
    conn.prepare(&format!("SELECT rowid FROM {} LIMIT 0", quote_ident(table))).is_ok()
}

fn sample_column(
    conn: &Connection,
    table: &str,
    column: &str,
    order: &str,
    limit: usize,
) -> Result<Vec<String>, rusqlite::Error> {
    if limit == 0 {
        return Ok(Vec::new());
    }
    let col = quote_ident(column);
    let sql = format!("SELECT {col} FROM {} WHERE {col} IS NOT NULL{order}", quote_ident(table));
    let mut stmt = conn.prepare(&sql)?;
    let mut rows = stmt.query([])?;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    while let Some(row) = rows.next()? {
        let v: Value = row.get(0)?;
        if let Some(lit) = literal(&v) {
            if seen.insert(lit.clone()) {
                out.push(lit);
                if out.len() == limit {
                    break;
                }
            }
        }
    }
    Ok(out)
}

fn read_table(conn: &Connection, name: &str, samples: usize) -> Result<TableDef, rusqlite::Error> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(name)))?;
    let raw: Vec<(String, String, i64)> = stmt
        .query_map([], |r| Ok((r.get(1)?, r.get::<_, Option<String>>(2)?.unwrap_or_default(), r.get(5)?)))?
        .collect::<Result<_, _>>()?;

    let mut pk: Vec<(i64, String)> = raw.iter().filter(|c| c.2 > 0).map(|c| (c.2, c.0.clone())).collect();
    pk.sort();
    let primary_key: Vec<String> = pk.into_iter().map(|(_, n)| n).collect();

    let order = if !primary_key.is_empty() {
        let cols: Vec<String> = primary_key.iter().map(|c| quote_ident(c)).collect();
        format!(" ORDER BY {}", cols.join(", "))
    } else if has_rowid(conn, name) {
        " ORDER BY rowid".to_string()
    } else {
        String::new()
    };

    let mut columns = Vec::with_capacity(raw.len());
    for (col, declared, _) in &raw {
        columns.push(ColumnDef {
            name: col.clone(),
            declared_type: ColumnType::from_declared(declared),
            sample_values: sample_column(conn, name, col, &order, samples)?,
        });
    }

    let mut stmt = conn.prepare(&format!("PRAGMA foreign_key_list({})", quote_ident(name)))?;
    let fks: Vec<(String, String, Option<String>)> = stmt
        .query_map([], |r| Ok((r.get(3)?, r.get(2)?, r.get(4)?)))?
        .collect::<Result<_, _>>()?;
    let mut foreign_keys = Vec::with_capacity(fks.len());
    for (column, ref_table, ref_column) in fks {
        let ref_column = match ref_column {
            Some(c) => c,
            // REFERENCES t without a column list points at t's primary key
            None => read_primary_key(conn, &ref_table)?.into_iter().next().unwrap_or_default(),
        };
        foreign_keys.push(ForeignKey {
            column,
            ref_table,
            ref_column,
        });
    }

    Ok(TableDef {
        name: name.to_string(),
        columns,
        primary_key,
        foreign_keys,
    })
}

fn read_primary_key(conn: &Connection, table: &str) -> Result<Vec<String>, rusqlite::Error> {
    let mut stmt = conn.prepare(&format!("PRAGMA table_info({})", quote_ident(table)))?;
    let mut pk: Vec<(i64, String)> = stmt
        .query_map([], |r| Ok((r.get(5)?, r.get(1)?)))?
        .filter_map(|r| r.ok())
        .filter(|(k, _)| *k > 0)
        .collect();
    pk.sort();
    Ok(pk.into_iter().map(|(_, n)| n).collect())
}

/// Reads every user table of a SQLite file, with up to `samples_per_column`
/// distinct non-null values per column taken in primary-key order.
pub fn introspect_schema(db_path: &Path, samples_per_column: usize) -> Result<DatabaseSchema, DbError> {
    let conn = open_read_only(db_path)?;
    let db_id = db_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let wrap = |e: rusqlite::Error| DbError::from_sqlite(db_path, e);
    let mut tables = Vec::new();
    for name in table_names(&conn).map_err(wrap)? {
        tables.push(read_table(&conn, &name, samples_per_column).map_err(wrap)?);
    }
    Ok(DatabaseSchema { db_id, tables })
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the prompt context the policy decodes from. The output ends with
/// an `-- SQL:` line so generated SQL can be appended directly.
pub fn serialize_context(schema: &DatabaseSchema, question: &str, evidence: Option<&str>) -> String {
    let mut out = String::new();
    for table in &schema.tables {
        let _ = writeln!(out, "CREATE TABLE {} (", table.name);
        let mut lines: Vec<String> = Vec::new();
        let single_pk = table.primary_key.len() == 1;
        for col in &table.columns {
            let mut line = format!("  {} {}", col.name, col.declared_type.as_str());
            if single_pk && table.primary_key[0] == col.name {
                line.push_str(" PRIMARY KEY");
            }
            lines.push(line);
        }
        if table.primary_key.len() > 1 {
            lines.push(format!("  PRIMARY KEY ({})", table.primary_key.join(", ")));
        }
        for fk in &table.foreign_keys {
            lines.push(format!(
                "  FOREIGN KEY ({}) REFERENCES {}({})",
                fk.column, fk.ref_table, fk.ref_column
            ));
        }
        out.push_str(&lines.join(",\n"));
        out.push_str("\n);\n");
        for col in table.columns.iter().filter(|c| !c.sample_values.is_empty()) {
            let _ = writeln!(out, "-- {}.{}: {}", table.name, col.name, col.sample_values.join(", "));
        }
        out.push('\n');
    }
    if let Some(ev) = evidence.map(one_line).filter(|e| !e.is_empty()) {
        let _ = writeln!(out, "-- Evidence: {ev}");
    }
    let _ = writeln!(out, "-- Question: {}", one_line(question));
    out.push_str("-- SQL:\n");
    out
}
