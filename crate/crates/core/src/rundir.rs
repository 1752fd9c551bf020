//! Run-directory layout and single-owner locking.
//!
//! ```text
//! <out>/<experiment>/
//!   config.toml          config snapshot (re-executable provenance)
//!   .lock                pid of the owning process, removed on drop
//!   checkpoints/*.ckpt
//!   logs/<stage>.jsonl   one structured row per epoch
//!   markers/<stage>.done completed-stage markers for idempotent reruns
//!   report.csv           final metrics rows
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::train::EpochLog;

pub struct RunDir {
    pub root: PathBuf,
    lock_path: PathBuf,
}

impl RunDir {
    /// Create (or reopen) a run directory and take its lock.
    pub fn open(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("checkpoints")).map_err(|e| Error::io(root, e))?;
        std::fs::create_dir_all(root.join("logs")).map_err(|e| Error::io(root, e))?;
        std::fs::create_dir_all(root.join("markers")).map_err(|e| Error::io(root, e))?;
        let lock_path = root.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock_path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Other(format!(
                    "run directory {} is locked by another process (remove {} if stale)",
                    root.display(),
                    lock_path.display()
                )));
            }
            Err(e) => return Err(Error::io(&lock_path, e)),
        }
        Ok(RunDir {
            root: root.to_path_buf(),
            lock_path,
        })
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn marker_path(&self, stage: &str) -> PathBuf {
        self.root.join("markers").join(format!("{stage}.done"))
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.marker_path(stage).exists()
    }

    pub fn mark_done(&self, stage: &str, detail: &str) -> Result<()> {
        let p = self.marker_path(stage);
        std::fs::write(&p, detail).map_err(|e| Error::io(&p, e))
    }

    pub fn clear_markers(&self) -> Result<()> {
        let dir = self.root.join("markers");
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            std::fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
        Ok(())
    }

    pub fn write_config_snapshot(&self, toml_text: &str) -> Result<()> {
        let p = self.root.join("config.toml");
        std::fs::write(&p, toml_text).map_err(|e| Error::io(&p, e))
    }

    /// Append-free write of a stage's epoch log as JSON lines.
    pub fn write_log(&self, stage: &str, log: &[EpochLog]) -> Result<()> {
        let p = self.root.join("logs").join(format!("{stage}.jsonl"));
        let mut text = String::new();
        for row in log {
            text.push_str(
                &serde_json::to_string(row).map_err(|e| Error::Other(format!("log encode: {e}")))?,
            );
            text.push('\n');
        }
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.csv")
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock_path);
    }
}
