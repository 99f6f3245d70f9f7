//! Output-root layout, stamps and the writer lock.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const LOCK_FILE: &str = ".forge.lock";

/// Paths of every artifact under one output root.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn data_stamp(&self) -> PathBuf {
        self.data().join("stamp.json")
    }
    pub fn source(&self) -> PathBuf {
        self.data().join("source")
    }
    pub fn target(&self, id: &str) -> PathBuf {
        self.data().join("targets").join(id)
    }
    pub fn sweep(&self) -> PathBuf {
        self.root.join("sweep")
    }
    pub fn margins(&self) -> PathBuf {
        self.root.join("margins")
    }
    pub fn margin_report(&self, variant: &str) -> PathBuf {
        self.margins().join(variant).join("margins.json")
    }
    pub fn margin_error(&self, variant: &str) -> PathBuf {
        self.margins().join(variant).join("error.json")
    }
    pub fn margin_stamp(&self, variant: &str) -> PathBuf {
        self.margins().join(variant).join("stamp.json")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluation")
    }
    pub fn gaps(&self) -> PathBuf {
        self.evaluation().join("gaps.csv")
    }
    pub fn gaps_stamp(&self) -> PathBuf {
        self.evaluation().join("gaps.stamp.json")
    }
    pub fn pairs(&self) -> PathBuf {
        self.evaluation().join("pairs.csv")
    }
    pub fn curves(&self) -> PathBuf {
        self.evaluation().join("curves.json")
    }
    pub fn exclusions(&self) -> PathBuf {
        self.evaluation().join("exclusions.json")
    }
    pub fn ranking(&self) -> PathBuf {
        self.root.join("ranking.json")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }

    /// Takes the writer lock, creating the root if needed.
    pub fn lock(&self) -> CliResult<OutputLock> {
        fs::create_dir_all(&self.root)?;
        let path = self.root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock(path))
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct OutputLock(PathBuf);

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub hash: String,
}

pub fn read_stamp(path: &Path) -> Option<String> {
    let bytes = fs::read(path).ok()?;
    serde_json::from_slice::<Stamp>(&bytes).ok().map(|s| s.hash)
}

pub fn write_stamp(path: &Path, hash: &str) -> CliResult<()> {
    let stamp = Stamp {
        hash: hash.to_string(),
    };
    write_atomic(path, serde_json::to_string_pretty(&stamp)?.as_bytes())
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn second_lock_is_refused_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let first = ws.lock().unwrap();
        assert!(matches!(ws.lock(), Err(CliError::Locked(_))));
        drop(first);
        ws.lock().unwrap();
    }

    #[test]
    fn stamps_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/stamp.json");
        assert_eq!(read_stamp(&p), None);
        write_stamp(&p, "abc").unwrap();
        assert_eq!(read_stamp(&p).as_deref(), Some("abc"));
    }
}
