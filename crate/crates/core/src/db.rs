//! Connector to the reference embedded database: schema introspection,
//! timed execution with order-independent result digests, and views.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::state::{ColumnMeta, DataKind, ForeignKey, TableId, TableMeta, ViewDef};

pub const SQLITE: &str = "sqlite";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionProfile {
    #[serde(default = "default_kind")]
    pub source_kind: String,
    pub location: String,
    /// Views go to the connection's temporary namespace instead of the
    /// database file.
    #[serde(default = "default_read_only")]
    pub read_only: bool,
    #[serde(default = "default_timeout")]
    pub statement_timeout_ms: u64,
}

fn default_kind() -> String {
    SQLITE.into()
}

fn default_read_only() -> bool {
    true
}

fn default_timeout() -> u64 {
    5000
}

impl ConnectionProfile {
    pub fn sqlite(location: impl AsRef<Path>) -> Self {
        Self {
            source_kind: SQLITE.into(),
            location: location.as_ref().to_string_lossy().into_owned(),
            read_only: true,
            statement_timeout_ms: default_timeout(),
        }
    }

    pub fn with_timeout(mut self, ms: u64) -> Self {
        self.statement_timeout_ms = ms;
        self
    }

    pub fn writable(mut self) -> Self {
        self.read_only = false;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "snake_case")]
pub enum Cell {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    Blob(Vec<u8>),
}

impl Cell {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Integer(v) => Some(*v as f64),
            Cell::Real(v) => Some(*v),
            _ => None,
        }
    }

    fn from_ref(v: ValueRef<'_>) -> Self {
        match v {
            ValueRef::Null => Cell::Null,
            ValueRef::Integer(i) => Cell::Integer(i),
            ValueRef::Real(r) => Cell::Real(r),
            ValueRef::Text(t) => Cell::Text(String::from_utf8_lossy(t).into_owned()),
            ValueRef::Blob(b) => Cell::Blob(b.to_vec()),
        }
    }

    fn encode(&self, out: &mut String) {
        use std::fmt::Write;
        match self {
            Cell::Null => out.push('n'),
            Cell::Integer(i) => write!(out, "i{i}").unwrap(),
            Cell::Real(r) => write!(out, "r{:?}", r).unwrap(),
            Cell::Text(t) => write!(out, "t{}:{t}", t.len()).unwrap(),
            Cell::Blob(b) => write!(out, "b{}", hex::encode(b)).unwrap(),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Null => f.write_str("NULL"),
            Cell::Integer(i) => write!(f, "{i}"),
            Cell::Real(r) => write!(f, "{r}"),
            Cell::Text(t) => f.write_str(t),
            Cell::Blob(b) => write!(f, "x'{}'", hex::encode(b)),
        }
    }
}

pub type Row = Vec<Cell>;

/// Order-independent digest of a result multiset.
pub fn rows_digest(rows: &[Row]) -> String {
    let mut encoded: Vec<String> = rows
        .iter()
        .map(|row| {
            let mut s = String::new();
            for (i, cell) in row.iter().enumerate() {
                if i > 0 {
                    s.push('|');
                }
                cell.encode(&mut s);
            }
            s
        })
        .collect();
    encoded.sort_unstable();
    let mut hasher = Sha256::new();
    for e in &encoded {
        hasher.update((e.len() as u64).to_le_bytes());
        hasher.update(e.as_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionOutcome {
    pub digest: Option<String>,
    pub row_count: u64,
    pub elapsed_ms: f64,
    pub timed_out: bool,
    pub error: Option<String>,
    #[serde(skip)]
    pub rows: Vec<Row>,
}

impl ExecutionOutcome {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && !self.timed_out
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DbError {
    #[error("unsupported source kind `{0}`")]
    UnsupportedSource(String),
    #[error("invalid connection profile: {0}")]
    InvalidProfile(String),
    #[error("cannot connect to `{location}`: {message}")]
    Connection { location: String, message: String },
    #[error("the database has no tables")]
    EmptySchema,
    #[error("name `{0}` is already taken")]
    NameCollision(String),
    #[error("database error: {0}")]
    Engine(String),
}

impl DbError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            DbError::UnsupportedSource(_) => "unsupported_source",
            DbError::InvalidProfile(_) => "invalid_profile",
            DbError::Connection { .. } => "connection_error",
            DbError::EmptySchema => "empty_schema",
            DbError::NameCollision(_) => "name_collision",
            DbError::Engine(_) => "engine_error",
        }
    }
}

fn engine(e: rusqlite::Error) -> DbError {
    DbError::Engine(e.to_string())
}

/// An open connection plus the views created through it.
pub struct Connector {
    profile: ConnectionProfile,
    conn: Connection,
    epoch: Instant,
    /// Interrupt deadline in microseconds since `epoch`; zero when idle.
    deadline_us: Arc<AtomicU64>,
    views: Mutex<Vec<ViewDef>>,
}

impl fmt::Debug for Connector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connector").field("profile", &self.profile).finish_non_exhaustive()
    }
}

impl Connector {
    pub fn open(profile: &ConnectionProfile) -> Result<Self, DbError> {
        if profile.source_kind != SQLITE {
            return Err(DbError::UnsupportedSource(profile.source_kind.clone()));
        }
        if profile.statement_timeout_ms == 0 {
            return Err(DbError::InvalidProfile("statement_timeout_ms must be positive".into()));
        }
        let mut flags = OpenFlags::SQLITE_OPEN_NO_MUTEX | OpenFlags::SQLITE_OPEN_URI;
        flags |= if profile.read_only { OpenFlags::SQLITE_OPEN_READ_ONLY } else { OpenFlags::SQLITE_OPEN_READ_WRITE };
        let conn = Connection::open_with_flags(&profile.location, flags)
            .map_err(|e| DbError::Connection { location: profile.location.clone(), message: e.to_string() })?;
        conn.query_row("SELECT count(*) FROM sqlite_schema", [], |r| r.get::<_, i64>(0))
            .map_err(|e| DbError::Connection { location: profile.location.clone(), message: e.to_string() })?;

        let epoch = Instant::now();
        let deadline_us = Arc::new(AtomicU64::new(0));
        let deadline = Arc::clone(&deadline_us);
        conn.progress_handler(
            1000,
            Some(move || {
                let d = deadline.load(Ordering::Relaxed);
                d != 0 && epoch.elapsed().as_micros() as u64 >= d
            }),
        )
        .map_err(engine)?;
        Ok(Self { profile: profile.clone(), conn, epoch, deadline_us, views: Mutex::new(Vec::new()) })
    }

    pub fn profile(&self) -> &ConnectionProfile {
        &self.profile
    }

    /// A fresh connection to the same source that also sees this
    /// connector's views.
    pub fn reader(&self) -> Result<Connector, DbError> {
        let other = Connector::open(&self.profile)?;
        if self.profile.read_only {
            for v in self.lock_views().iter() {
                other.create_view(v)?;
            }
        } else {
            *other.lock_views() = self.lock_views().clone();
        }
        Ok(other)
    }

    /// User tables ordered by name, with column kinds and foreign keys.
    pub fn introspect(&self) -> Result<Vec<TableMeta>, DbError> {
        let mut stmt = self
            .conn
            .prepare("SELECT name FROM main.sqlite_schema WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY name")
            .map_err(engine)?;
        let names: Vec<String> =
            stmt.query_map([], |r| r.get(0)).map_err(engine)?.collect::<Result<_, _>>().map_err(engine)?;
        if names.is_empty() {
            return Err(DbError::EmptySchema);
        }
        let mut pk_of: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut tables = Vec::with_capacity(names.len());
        for name in &names {
            let mut info = self.conn.prepare(&format!("PRAGMA main.table_info({})", quote(name))).map_err(engine)?;
            let cols: Vec<(String, String, bool, i64)> = info
                .query_map([], |r| Ok((r.get(1)?, r.get::<_, Option<String>>(2)?.unwrap_or_default(), r.get(3)?, r.get(5)?)))
                .map_err(engine)?
                .collect::<Result<_, _>>()
                .map_err(engine)?;
            let mut pks: Vec<(i64, String)> = cols.iter().filter(|c| c.3 > 0).map(|c| (c.3, c.0.clone())).collect();
            pks.sort();
            pk_of.insert(name.to_ascii_lowercase(), pks.into_iter().map(|p| p.1).collect());
            let columns = cols
                .iter()
                .map(|(col, decl, notnull, pk)| ColumnMeta {
                    name: col.clone(),
                    data_kind: kind_of(decl),
                    nullable: !notnull && *pk == 0,
                })
                .collect();
            let rows: i64 = self
                .conn
                .query_row(&format!("SELECT count(*) FROM main.{}", quote(name)), [], |r| r.get(0))
                .map_err(engine)?;
            tables.push(TableMeta {
                table_id: TableId::from_name(name),
                name: name.clone(),
                columns,
                row_count_estimate: rows.max(0) as u64,
                foreign_keys: Vec::new(),
            });
        }
        for table in &mut tables {
            let mut fk = self.conn.prepare(&format!("PRAGMA main.foreign_key_list({})", quote(&table.name))).map_err(engine)?;
            let rows: Vec<(String, String, Option<String>)> = fk
                .query_map([], |r| Ok((r.get(2)?, r.get(3)?, r.get(4)?)))
                .map_err(engine)?
                .collect::<Result<_, _>>()
                .map_err(engine)?;
            for (remote, local, to) in rows {
                let remote_id = TableId::from_name(&remote);
                let Some(to) = to.or_else(|| pk_of.get(remote_id.as_str()).and_then(|p| p.first().cloned())) else {
                    continue;
                };
                table.foreign_keys.push(ForeignKey { column: local, references_table: remote_id, references_column: to });
            }
        }
        Ok(tables)
    }

    /// Runs `sql`, fetching every row, under the profile's timeout. SQL
    /// errors are reported in the outcome; only a lost connection is an
    /// `Err`.
    pub fn execute_timed(&self, sql: &str) -> Result<ExecutionOutcome, DbError> {
        let timeout = self.profile.statement_timeout_ms;
        let start = Instant::now();
        let deadline = self.epoch.elapsed().as_micros() as u64 + timeout * 1000;
        self.deadline_us.store(deadline.max(1), Ordering::Relaxed);
        let result = self.fetch(sql);
        self.deadline_us.store(0, Ordering::Relaxed);
        let measured = start.elapsed().as_secs_f64() * 1000.0;
        let limit = timeout as f64;
        match result {
            Ok(rows) => Ok(ExecutionOutcome {
                digest: Some(rows_digest(&rows)),
                row_count: rows.len() as u64,
                elapsed_ms: measured,
                timed_out: false,
                error: None,
                rows,
            }),
            Err(rusqlite::Error::SqliteFailure(e, msg)) if e.code == rusqlite::ErrorCode::OperationInterrupted => {
                let _ = msg;
                Ok(ExecutionOutcome {
                    digest: None,
                    row_count: 0,
                    elapsed_ms: measured.max(limit),
                    timed_out: true,
                    error: None,
                    rows: Vec::new(),
                })
            }
            Err(rusqlite::Error::SqliteFailure(e, msg))
                if matches!(e.code, rusqlite::ErrorCode::CannotOpen | rusqlite::ErrorCode::NotADatabase) =>
            {
                Err(DbError::Connection {
                    location: self.profile.location.clone(),
                    message: msg.unwrap_or_else(|| e.to_string()),
                })
            }
            Err(e) => Ok(ExecutionOutcome {
                digest: None,
                row_count: 0,
                elapsed_ms: measured,
                timed_out: false,
                error: Some(e.to_string()),
                rows: Vec::new(),
            }),
        }
    }

    fn fetch(&self, sql: &str) -> Result<Vec<Row>, rusqlite::Error> {
        let mut stmt = self.conn.prepare(sql)?;
        let width = stmt.column_count();
        let mut rows = stmt.query([])?;
        let mut out = Vec::new();
        while let Some(row) = rows.next()? {
            let mut cells = Vec::with_capacity(width);
            for i in 0..width {
                cells.push(Cell::from_ref(row.get_ref(i)?));
            }
            out.push(cells);
        }
        Ok(out)
    }

    fn name_taken(&self, name: &str) -> Result<bool, DbError> {
        let n: i64 = self
            .conn
            .query_row(
                "SELECT (SELECT count(*) FROM main.sqlite_schema WHERE lower(name) = lower(?1)) + \
                 (SELECT count(*) FROM temp.sqlite_schema WHERE lower(name) = lower(?1))",
                [name],
                |r| r.get(0),
            )
            .map_err(engine)?;
        Ok(n > 0)
    }

    pub fn create_view(&self, view: &ViewDef) -> Result<(), DbError> {
        if self.name_taken(&view.name)? {
            return Err(DbError::NameCollision(view.name.clone()));
        }
        let scope = if self.profile.read_only { "TEMP " } else { "" };
        self.conn
            .execute_batch(&format!("CREATE {scope}VIEW {} AS {}", quote(&view.name), view.sql_text))
            .map_err(engine)?;
        self.lock_views().push(view.clone());
        Ok(())
    }

    pub fn drop_view(&self, name: &str) -> Result<(), DbError> {
        self.conn.execute_batch(&format!("DROP VIEW IF EXISTS {}", quote(name))).map_err(engine)?;
        self.lock_views().retain(|v| !v.name.eq_ignore_ascii_case(name));
        Ok(())
    }

    fn lock_views(&self) -> MutexGuard<'_, Vec<ViewDef>> {
        self.views.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn views(&self) -> Vec<ViewDef> {
        self.lock_views().clone()
    }
}

fn quote(name: &str) -> String {
    format!("\"{}\"", name.replace('"', "\"\""))
}

/// Maps a declared column type to a data kind, following the engine's
/// type-affinity rules with date/time and boolean names recognized first.
pub fn kind_of(declared: &str) -> DataKind {
    let t = declared.to_ascii_uppercase();
    if t.contains("DATE") || t.contains("TIME") {
        DataKind::Temporal
    } else if t.contains("BOOL") {
        DataKind::Boolean
    } else if t.contains("CHAR") || t.contains("CLOB") || t.contains("TEXT") {
        DataKind::Text
    } else if ["INT", "REAL", "FLOA", "DOUB", "NUM", "DEC"].iter().any(|k| t.contains(k)) {
        DataKind::Numeric
    } else {
        DataKind::Other
    }
}

/// Orders tables so every foreign-key target precedes the tables that
/// reference it, breaking ties by name. Tables caught in a reference cycle
/// keep their relative name order at the end.
pub fn fk_order(tables: Vec<TableMeta>) -> Vec<TableMeta> {
    let mut remaining: BTreeMap<TableId, TableMeta> = tables.into_iter().map(|t| (t.table_id.clone(), t)).collect();
    let mut placed: BTreeSet<TableId> = BTreeSet::new();
    let mut out = Vec::with_capacity(remaining.len());
    loop {
        let ready = remaining.values().find(|t| {
            t.foreign_keys.iter().all(|fk| {
                fk.references_table == t.table_id
                    || placed.contains(&fk.references_table)
                    || !remaining.contains_key(&fk.references_table)
            })
        });
        let Some(id) = ready.map(|t| t.table_id.clone()) else { break };
        let table = remaining.remove(&id).expect("present");
        placed.insert(id);
        out.push(table);
    }
    out.extend(remaining.into_values());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_follow_declared_types() {
        assert_eq!(kind_of("INTEGER"), DataKind::Numeric);
        assert_eq!(kind_of("DECIMAL(10,2)"), DataKind::Numeric);
        assert_eq!(kind_of("VARCHAR(20)"), DataKind::Text);
        assert_eq!(kind_of("DATETIME"), DataKind::Temporal);
        assert_eq!(kind_of("BOOLEAN"), DataKind::Boolean);
        assert_eq!(kind_of(""), DataKind::Other);
    }

    #[test]
    fn digest_ignores_row_order() {
        let a = vec![vec![Cell::Integer(1), Cell::Text("x".into())], vec![Cell::Integer(2), Cell::Null]];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(rows_digest(&a), rows_digest(&b));
        let c = vec![vec![Cell::Integer(1), Cell::Text("x".into())]];
        assert_ne!(rows_digest(&a), rows_digest(&c));
        let dup = vec![a[0].clone(), a[0].clone()];
        assert_ne!(rows_digest(&c), rows_digest(&dup));
        assert_ne!(rows_digest(&[vec![Cell::Text("1".into())]]), rows_digest(&[vec![Cell::Integer(1)]]));
    }
}
