use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

/// A fresh output directory is assembled under a hidden sibling and renamed
/// into place when the command finishes; an existing one is written in place.
pub struct Staged {
    target: PathBuf,
    work: PathBuf,
}

impl Staged {
    pub fn new(target: &Path) -> Result<Self> {
        if target.is_dir() {
            return Ok(Staged {
                target: target.to_path_buf(),
                work: target.to_path_buf(),
            });
        }
        let name = target
            .file_name()
            .with_context(|| format!("output path {} has no name", target.display()))?
            .to_string_lossy()
            .into_owned();
        let parent = target.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        let work = parent.join(format!(".{name}.partial-{}", std::process::id()));
        if work.exists() {
            fs::remove_dir_all(&work)?;
        }
        fs::create_dir_all(&work).with_context(|| format!("creating {}", work.display()))?;
        Ok(Staged {
            target: target.to_path_buf(),
            work,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.work
    }

    pub fn sub(&self, name: &str) -> Result<PathBuf> {
        let p = self.work.join(name);
        fs::create_dir_all(&p).with_context(|| format!("creating {}", p.display()))?;
        Ok(p)
    }

    pub fn finish(self) -> Result<PathBuf> {
        if self.work != self.target {
            fs::rename(&self.work, &self.target)
                .with_context(|| format!("moving output into {}", self.target.display()))?;
        }
        Ok(self.target)
    }
}
