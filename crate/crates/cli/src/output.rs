//! Output directories that appear complete or not at all.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

/// File every output directory carries; marks a directory as replaceable.
pub const CONFIG_ECHO: &str = "config.txt";

/// Files are written into a hidden sibling directory and renamed into
/// place by [`OutputDir::commit`]. Dropping without committing removes
/// the staging directory.
pub struct OutputDir {
    target: PathBuf,
    staging: PathBuf,
    committed: bool,
}

impl OutputDir {
    pub fn create(target: &Path) -> Result<OutputDir> {
        let name = target
            .file_name()
            .with_context(|| format!("output path `{}` has no final component", target.display()))?
            .to_string_lossy()
            .into_owned();
        let parent = match target.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        if target.exists() && !target.join(CONFIG_ECHO).is_file() {
            bail!(
                "refusing to replace `{}`: it exists and is not an earlier output directory",
                target.display()
            );
        }
        let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir(&staging).with_context(|| format!("creating {}", staging.display()))?;
        Ok(OutputDir {
            target: target.to_path_buf(),
            staging,
            committed: false,
        })
    }

    pub fn write(&self, file: &str, contents: &str) -> Result<()> {
        let path = self.staging.join(file);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }

    pub fn staging_path(&self, file: &str) -> PathBuf {
        self.staging.join(file)
    }

    pub fn commit(mut self) -> Result<PathBuf> {
        if self.target.exists() {
            fs::remove_dir_all(&self.target).with_context(|| format!("replacing {}", self.target.display()))?;
        }
        fs::rename(&self.staging, &self.target)
            .with_context(|| format!("moving output into {}", self.target.display()))?;
        self.committed = true;
        Ok(self.target.clone())
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}
