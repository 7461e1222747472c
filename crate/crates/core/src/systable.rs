//! The System Table catalog: table name to Table Manager location.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{DbError, ErrorKind};
use crate::overlay::{node_id, NodeId};
use crate::wire::Address;

pub const SYSTEM_TABLE_KEY: &str = "SYSTEM_TABLE";
pub const SNAPSHOT_PATH: &str = "systable.json";
pub const POINTER_PATH: &str = "pointer.json";

pub fn system_table_key(bits: u32) -> NodeId {
    node_id(SYSTEM_TABLE_KEY, bits)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub table_name: String,
    pub tm_address: Address,
    pub tm_meta_replicas: Vec<Address>,
    pub version: u64,
}

/// The persisted catalog, `{entries, version, epoch}`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemTableState {
    pub entries: BTreeMap<String, CatalogEntry>,
    pub version: u64,
    pub epoch: u64,
}

impl SystemTableState {
    pub fn lookup(&self, name: &str) -> Result<&CatalogEntry, DbError> {
        self.entries
            .get(name)
            .ok_or_else(|| DbError::new(ErrorKind::NoSuchTable, alloc::format!("no such table {name}")))
    }

    pub fn register(&mut self, name: &str, tm: Address, tm_meta_replicas: Vec<Address>) -> Result<u64, DbError> {
        if self.entries.contains_key(name) {
            return Err(DbError::new(ErrorKind::TableExists, alloc::format!("table {name} exists")));
        }
        self.version += 1;
        self.entries.insert(
            name.into(),
            CatalogEntry { table_name: name.into(), tm_address: tm, tm_meta_replicas, version: 1 },
        );
        Ok(1)
    }

    /// Points an existing entry at a new manager location.
    pub fn update(&mut self, name: &str, tm: Address, tm_meta_replicas: Vec<Address>) -> Result<u64, DbError> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DbError::new(ErrorKind::NoSuchTable, alloc::format!("no such table {name}")))?;
        if entry.tm_address == tm && entry.tm_meta_replicas == tm_meta_replicas {
            return Ok(entry.version);
        }
        entry.tm_address = tm;
        entry.tm_meta_replicas = tm_meta_replicas;
        entry.version += 1;
        self.version += 1;
        Ok(entry.version)
    }

    pub fn unregister(&mut self, name: &str) -> Result<(), DbError> {
        self.entries
            .remove(name)
            .ok_or_else(|| DbError::new(ErrorKind::NoSuchTable, alloc::format!("no such table {name}")))?;
        self.version += 1;
        Ok(())
    }

    /// Tables whose manager runs on `addr`.
    pub fn managed_by<'a>(&'a self, addr: &'a Address) -> impl Iterator<Item = &'a CatalogEntry> + 'a {
        self.entries.values().filter(move |e| &e.tm_address == addr)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointerRecord {
    pub current_keeper: Address,
    pub epoch: u64,
}

impl PointerRecord {
    /// Prefers the higher epoch; equal epochs keep `self`.
    pub fn newer(self, other: PointerRecord) -> PointerRecord {
        if other.epoch > self.epoch { other } else { self }
    }
}
