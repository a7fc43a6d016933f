use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use crate::CliError;

pub const LOCK_NAME: &str = ".pdd.lock";

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir).map_err(|e| CliError::Domain(format!("cannot create {}: {e}", out_dir.display())))?;
        let path = out_dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(CliError::Domain(format!(
                "{} is in use by another run (lock file {}; delete it if no run is active)",
                out_dir.display(),
                path.display()
            ))),
            Err(e) => Err(CliError::Domain(format!("cannot create lock {}: {e}", path.display()))),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
