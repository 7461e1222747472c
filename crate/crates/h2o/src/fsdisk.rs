//! Directory-backed implementation of the instance disk.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use h2o_core::storage::{Disk, DiskError};

#[derive(Debug, Clone)]
pub struct FsDisk {
    root: PathBuf,
}

fn err(path: &Path, e: std::io::Error) -> DiskError {
    DiskError(format!("{}: {e}", path.display()))
}

impl FsDisk {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DiskError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| err(&root, e))?;
        Ok(FsDisk { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn resolve(&self, path: &str) -> Result<PathBuf, DiskError> {
        let mut out = self.root.clone();
        for part in path.split('/').filter(|p| !p.is_empty()) {
            if part == "." || part == ".." {
                return Err(DiskError(format!("illegal path {path}")));
            }
            out.push(part);
        }
        Ok(out)
    }

    fn ensure_parent(p: &Path) -> Result<(), DiskError> {
        match p.parent() {
            Some(dir) => fs::create_dir_all(dir).map_err(|e| err(dir, e)),
            None => Ok(()),
        }
    }
}

impl Disk for FsDisk {
    fn read(&self, path: &str) -> Result<Option<Vec<u8>>, DiskError> {
        let p = self.resolve(path)?;
        match fs::read(&p) {
            Ok(b) => Ok(Some(b)),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(err(&p, e)),
        }
    }

    fn write_atomic(&mut self, path: &str, data: &[u8]) -> Result<(), DiskError> {
        let p = self.resolve(path)?;
        Self::ensure_parent(&p)?;
        let mut tmp = p.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| err(&tmp, e))?;
        f.write_all(data).map_err(|e| err(&tmp, e))?;
        f.sync_all().map_err(|e| err(&tmp, e))?;
        fs::rename(&tmp, &p).map_err(|e| err(&p, e))
    }

    fn append(&mut self, path: &str, data: &[u8]) -> Result<(), DiskError> {
        let p = self.resolve(path)?;
        Self::ensure_parent(&p)?;
        let mut f = OpenOptions::new().create(true).append(true).open(&p).map_err(|e| err(&p, e))?;
        f.write_all(data).map_err(|e| err(&p, e))?;
        f.flush().map_err(|e| err(&p, e))
    }

    fn remove_file(&mut self, path: &str) -> Result<(), DiskError> {
        let p = self.resolve(path)?;
        match fs::remove_file(&p) {
            Err(e) if e.kind() != ErrorKind::NotFound => Err(err(&p, e)),
            _ => Ok(()),
        }
    }

    fn remove_dir(&mut self, dir: &str) -> Result<(), DiskError> {
        let p = self.resolve(dir)?;
        match fs::remove_dir_all(&p) {
            Err(e) if e.kind() != ErrorKind::NotFound => Err(err(&p, e)),
            _ => Ok(()),
        }
    }

    fn list_dir(&self, dir: &str) -> Result<Vec<String>, DiskError> {
        let p = self.resolve(dir)?;
        let entries = match fs::read_dir(&p) {
            Ok(it) => it,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(err(&p, e)),
        };
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| err(&p, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if !name.ends_with(".tmp") {
                names.push(name);
            }
        }
        names.sort();
        Ok(names)
    }
}
