//! Replica storage: in-memory tables driven by an append-only log of
//! committed statements, persisted per table and recovered by replay.
//!
//! Layout under an instance's data root:
//!
//! ```text
//! tables/<name>/schema.json   {"columns":[{"name":..,"type":"INT"|"TEXT"}],"name":..}
//! tables/<name>/log.jsonl     one {"seq":..,"stmt":..,"txn":..} object per line
//! ```
//!
//! An inserted row's id is the commit sequence number of its INSERT, which
//! the table manager assigns, so every replica names rows identically.

mod disk;

pub use disk::{Disk, DiskError, MemDisk};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::sql::{self, Atom, CmpOp, ColumnDef, ColumnType, Predicate, Statement, Value};
use crate::wire::canonical_json;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableSchema {
    pub fn new(name: &str, columns: Vec<ColumnDef>) -> Result<Self, StorageError> {
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].iter().any(|d| d.name == c.name) {
                return Err(StorageError::Bind(format!("duplicate column {}", c.name)));
            }
        }
        if columns.is_empty() {
            return Err(StorageError::Bind("a table needs at least one column".into()));
        }
        Ok(TableSchema { name: name.into(), columns })
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    fn column(&self, name: &str) -> Result<(usize, ColumnType), StorageError> {
        self.column_index(name)
            .map(|i| (i, self.columns[i].ty))
            .ok_or_else(|| StorageError::Bind(format!("unknown column {}.{name}", self.name)))
    }
}

/// One committed statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub stmt: String,
    pub txn: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub id: u64,
    pub values: Vec<Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StorageError {
    #[error("sequence gap: expected {expected}, got {got}")]
    SequenceGap { expected: u64, got: u64 },
    #[error("bind error: {0}")]
    Bind(String),
    #[error("recovery error: {0}")]
    Recovery(String),
    #[error(transparent)]
    Disk(#[from] DiskError),
}

/// A predicate bound to column positions of one table.
#[derive(Debug, Clone)]
pub struct Filter {
    conds: Vec<(usize, CmpOp, Value)>,
}

impl Filter {
    /// Binds the atoms of `pred` that belong to `schema`. Atoms naming a
    /// different table are an error; join atoms are rejected.
    pub fn bind(schema: &TableSchema, pred: Option<&Predicate>) -> Result<Self, StorageError> {
        let mut conds = Vec::new();
        for atom in pred.map(|p| p.atoms.as_slice()).unwrap_or_default() {
            match atom {
                Atom::Compare { column, op, value } => {
                    if column.table.as_deref().is_some_and(|t| t != schema.name) {
                        return Err(StorageError::Bind(format!("column {column} is not in table {}", schema.name)));
                    }
                    let (idx, ty) = schema.column(&column.column)?;
                    check_type(ty, value, &column.column)?;
                    conds.push((idx, *op, value.clone()));
                }
                Atom::Join { .. } => return Err(StorageError::Bind("join predicate on a single table".into())),
            }
        }
        Ok(Filter { conds })
    }

    pub fn matches(&self, values: &[Value]) -> bool {
        self.conds.iter().all(|(i, op, v)| op.holds(values[*i].cmp(v)))
    }
}

fn check_type(ty: ColumnType, value: &Value, column: &str) -> Result<(), StorageError> {
    if value.column_type() == ty {
        Ok(())
    } else {
        Err(StorageError::Bind(format!("type mismatch for column {column}: expected {ty}")))
    }
}

fn schema_path(table: &str) -> String {
    format!("tables/{table}/schema.json")
}

fn log_path(table: &str) -> String {
    format!("tables/{table}/log.jsonl")
}

pub fn table_dir(table: &str) -> String {
    format!("tables/{table}")
}

/// Local copy of one table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaStore {
    pub schema: TableSchema,
    pub rows: BTreeMap<u64, Vec<Value>>,
    pub applied_seq: u64,
    pub log: Vec<LogEntry>,
}

impl ReplicaStore {
    pub fn empty(schema: TableSchema) -> Self {
        ReplicaStore { schema, rows: BTreeMap::new(), applied_seq: 0, log: Vec::new() }
    }

    /// Creates the table's files with an empty log, replacing any old copy.
    pub fn create(disk: &mut dyn Disk, schema: TableSchema) -> Result<Self, StorageError> {
        Self::install(disk, schema, &[])
    }

    /// Rebuilds a replica from a schema and a full log (used by repair).
    pub fn install(disk: &mut dyn Disk, schema: TableSchema, entries: &[LogEntry]) -> Result<Self, StorageError> {
        let mut store = ReplicaStore::empty(schema);
        for e in entries {
            store.apply_in_memory(e)?;
        }
        let name = store.schema.name.clone();
        disk.remove_dir(&table_dir(&name))?;
        let schema_json = serde_json::to_value(&store.schema).map_err(|e| StorageError::Bind(e.to_string()))?;
        disk.write_atomic(&schema_path(&name), canonical_json(&schema_json).as_bytes())?;
        let mut text = String::new();
        for e in &store.log {
            text.push_str(&log_line(e));
        }
        disk.write_atomic(&log_path(&name), text.as_bytes())?;
        Ok(store)
    }

    pub fn destroy(disk: &mut dyn Disk, table: &str) -> Result<(), StorageError> {
        disk.remove_dir(&table_dir(table))?;
        Ok(())
    }

    /// Applies the next committed entry and appends it to the log on disk.
    /// Entries at or below `applied_seq` are ignored.
    pub fn apply_committed(&mut self, disk: &mut dyn Disk, entry: &LogEntry) -> Result<usize, StorageError> {
        if entry.seq <= self.applied_seq {
            return Ok(0);
        }
        // apply_in_memory leaves the store untouched on error.
        let affected = self.apply_in_memory(entry)?;
        disk.append(&log_path(&self.schema.name), log_line(entry).as_bytes())?;
        Ok(affected)
    }

    /// Validates and applies an entry without touching disk. Returns the
    /// number of rows affected.
    pub fn apply_in_memory(&mut self, entry: &LogEntry) -> Result<usize, StorageError> {
        let expected = self.applied_seq + 1;
        if entry.seq != expected {
            if entry.seq <= self.applied_seq {
                return Ok(0);
            }
            return Err(StorageError::SequenceGap { expected, got: entry.seq });
        }
        let stmt = sql::parse(&entry.stmt).map_err(|e| StorageError::Bind(e.to_string()))?;
        let affected = self.apply_statement(&stmt, entry.seq)?;
        self.applied_seq = entry.seq;
        self.log.push(entry.clone());
        Ok(affected)
    }

    fn apply_statement(&mut self, stmt: &Statement, seq: u64) -> Result<usize, StorageError> {
        let name = &self.schema.name;
        match stmt {
            Statement::Insert { table, values } if table == name => {
                if values.len() != self.schema.columns.len() {
                    return Err(StorageError::Bind(format!(
                        "table {name} has {} columns, got {} values",
                        self.schema.columns.len(),
                        values.len()
                    )));
                }
                for (c, v) in self.schema.columns.iter().zip(values) {
                    check_type(c.ty, v, &c.name)?;
                }
                self.rows.insert(seq, values.clone());
                Ok(1)
            }
            Statement::Update { table, assignments, predicate } if table == name => {
                let filter = Filter::bind(&self.schema, predicate.as_ref())?;
                let mut sets = Vec::new();
                for (col, v) in assignments {
                    let (idx, ty) = self.schema.column(col)?;
                    check_type(ty, v, col)?;
                    sets.push((idx, v.clone()));
                }
                let mut n = 0;
                for values in self.rows.values_mut().filter(|v| filter.matches(v)) {
                    for (idx, v) in &sets {
                        values[*idx] = v.clone();
                    }
                    n += 1;
                }
                Ok(n)
            }
            Statement::Delete { table, predicate } if table == name => {
                let filter = Filter::bind(&self.schema, predicate.as_ref())?;
                let before = self.rows.len();
                self.rows.retain(|_, v| !filter.matches(v));
                Ok(before - self.rows.len())
            }
            other => Err(StorageError::Bind(format!("statement does not write table {name}: {other}"))),
        }
    }

    /// Rows satisfying the predicate, ordered by row id.
    pub fn scan(&self, pred: Option<&Predicate>) -> Result<Vec<Row>, StorageError> {
        let filter = Filter::bind(&self.schema, pred)?;
        Ok(self
            .rows
            .iter()
            .filter(|(_, v)| filter.matches(v))
            .map(|(id, v)| Row { id: *id, values: v.clone() })
            .collect())
    }

    /// Loads a replica by replaying its log. A torn final line is dropped
    /// and the file rewritten without it.
    pub fn recover(disk: &mut dyn Disk, table: &str) -> Result<Self, StorageError> {
        let raw = disk
            .read(&schema_path(table))?
            .ok_or_else(|| StorageError::Recovery(format!("missing schema for {table}")))?;
        let schema: TableSchema = serde_json::from_slice(&raw)
            .map_err(|e| StorageError::Recovery(format!("corrupt schema for {table}: {e}")))?;
        if schema.name != table {
            return Err(StorageError::Recovery(format!("schema names {} but lives under {table}", schema.name)));
        }
        let log = disk.read(&log_path(table))?.unwrap_or_default();
        let mut store = ReplicaStore::empty(schema);
        let mut valid_len = 0usize;
        let mut torn = false;
        let chunks: Vec<&[u8]> = log.split_inclusive(|b| *b == b'\n').collect();
        for (i, chunk) in chunks.iter().enumerate() {
            let last = i + 1 == chunks.len();
            let complete = chunk.ends_with(b"\n");
            let parsed = serde_json::from_slice::<LogEntry>(chunk).ok().filter(|_| complete);
            match parsed {
                Some(entry) => {
                    if entry.seq != store.applied_seq + 1 {
                        return Err(StorageError::Recovery(format!(
                            "log for {table} jumps from seq {} to {}",
                            store.applied_seq, entry.seq
                        )));
                    }
                    store
                        .apply_in_memory(&entry)
                        .map_err(|e| StorageError::Recovery(format!("replaying {table} seq {}: {e}", entry.seq)))?;
                    valid_len += chunk.len();
                }
                None if last => torn = true,
                None => return Err(StorageError::Recovery(format!("corrupt log line {} in {table}", i + 1))),
            }
        }
        if torn {
            disk.write_atomic(&log_path(table), &log[..valid_len])?;
        }
        Ok(store)
    }

    /// Canonical text of the replica's logical state, for equality checks.
    pub fn fingerprint(&self) -> String {
        let rows: Vec<Row> = self.rows.iter().map(|(id, v)| Row { id: *id, values: v.clone() }).collect();
        let value = serde_json::json!({
            "applied_seq": self.applied_seq,
            "rows": rows,
            "schema": self.schema,
        });
        canonical_json(&value)
    }

    pub fn log_bytes(&self) -> Vec<u8> {
        self.log.iter().flat_map(|e| log_line(e).into_bytes()).collect()
    }
}

/// Tables that have a directory on disk.
pub fn stored_tables(disk: &dyn Disk) -> Result<Vec<String>, StorageError> {
    Ok(disk.list_dir("tables")?)
}

fn log_line(e: &LogEntry) -> String {
    let mut s = canonical_json(&serde_json::to_value(e).unwrap_or_default());
    s.push('\n');
    s
}
