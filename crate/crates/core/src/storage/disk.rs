use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("disk error: {0}")]
pub struct DiskError(pub String);

/// Minimal persistence surface used by an instance. Paths are `/`-separated
/// and relative to the instance's data root.
pub trait Disk {
    fn read(&self, path: &str) -> Result<Option<Vec<u8>>, DiskError>;
    /// Replaces the file so readers see either the old or the new content.
    fn write_atomic(&mut self, path: &str, data: &[u8]) -> Result<(), DiskError>;
    /// Appends and flushes.
    fn append(&mut self, path: &str, data: &[u8]) -> Result<(), DiskError>;
    fn remove_file(&mut self, path: &str) -> Result<(), DiskError>;
    /// Removes a directory and everything below it. Missing is not an error.
    fn remove_dir(&mut self, dir: &str) -> Result<(), DiskError>;
    /// Names of the immediate children of `dir`, sorted.
    fn list_dir(&self, dir: &str) -> Result<Vec<String>, DiskError>;
}

/// In-memory disk for the simulator. Clones share the same contents, so a
/// crashed node's files survive for a later restart.
#[derive(Debug, Clone, Default)]
pub struct MemDisk {
    files: Rc<RefCell<BTreeMap<String, Vec<u8>>>>,
}

impl MemDisk {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cuts a file to `len` bytes, simulating a torn write.
    pub fn truncate(&self, path: &str, len: usize) {
        if let Some(f) = self.files.borrow_mut().get_mut(path) {
            f.truncate(len);
        }
    }

    pub fn paths(&self) -> Vec<String> {
        self.files.borrow().keys().cloned().collect()
    }
}

impl Disk for MemDisk {
    fn read(&self, path: &str) -> Result<Option<Vec<u8>>, DiskError> {
        Ok(self.files.borrow().get(path).cloned())
    }

    fn write_atomic(&mut self, path: &str, data: &[u8]) -> Result<(), DiskError> {
        self.files.borrow_mut().insert(path.into(), data.to_vec());
        Ok(())
    }

    fn append(&mut self, path: &str, data: &[u8]) -> Result<(), DiskError> {
        self.files.borrow_mut().entry(path.into()).or_default().extend_from_slice(data);
        Ok(())
    }

    fn remove_file(&mut self, path: &str) -> Result<(), DiskError> {
        self.files.borrow_mut().remove(path);
        Ok(())
    }

    fn remove_dir(&mut self, dir: &str) -> Result<(), DiskError> {
        let prefix = alloc::format!("{}/", dir.trim_end_matches('/'));
        self.files.borrow_mut().retain(|k, _| !k.starts_with(&prefix));
        Ok(())
    }

    fn list_dir(&self, dir: &str) -> Result<Vec<String>, DiskError> {
        let prefix = alloc::format!("{}/", dir.trim_end_matches('/'));
        let names: BTreeSet<String> = self
            .files
            .borrow()
            .keys()
            .filter_map(|k| k.strip_prefix(&prefix))
            .filter_map(|rest| rest.split('/').next())
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        Ok(names.into_iter().collect())
    }
}
