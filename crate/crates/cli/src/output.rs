//! All-or-nothing output files.
//!
//! Every output is first written to a temporary file in its destination
//! directory. Nothing appears under the final name until [`Staged::commit`],
//! and dropping an uncommitted set removes the temporaries.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

#[derive(Default)]
pub struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = NamedTempFile::new_in(dir).with_context(|| format!("cannot create output in {}", dir.display()))?;
        tmp.write_all(bytes).with_context(|| format!("writing {}", path.display()))?;
        tmp.flush()?;
        // Temporary files are private; outputs get ordinary permissions.
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644))?;
        }
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Moves every staged file to its final name.
    pub fn commit(self) -> Result<()> {
        for (tmp, path) in self.files {
            tmp.persist(&path).with_context(|| format!("writing {}", path.display()))?;
        }
        Ok(())
    }
}

/// Stages and commits a single file.
pub fn write_one(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut s = Staged::new();
    s.add(path, bytes)?;
    s.commit()
}
