//! Output files are staged next to their targets and only renamed into place
//! once every output of a command has been written.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use tempfile::NamedTempFile;

#[derive(Default)]
pub struct Outputs {
    staged: Vec<(NamedTempFile, PathBuf)>,
}

fn stage_for(target: &Path) -> Result<NamedTempFile> {
    let dir = match target.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let suffix = target
        .extension()
        .map(|e| format!(".{}", e.to_string_lossy()))
        .unwrap_or_default();
    tempfile::Builder::new()
        .prefix(".geofit3d-")
        .suffix(&suffix)
        .tempfile_in(dir)
        .with_context(|| format!("creating a temporary file for {}", target.display()))
}

impl Outputs {
    /// Stage `target`, filling it through a buffered writer.
    pub fn write<F>(&mut self, target: &Path, fill: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<&File>) -> Result<()>,
    {
        let tmp = stage_for(target)?;
        {
            let mut w = BufWriter::new(tmp.as_file());
            fill(&mut w).with_context(|| format!("writing {}", target.display()))?;
            w.flush()?;
        }
        self.staged.push((tmp, target.to_path_buf()));
        Ok(())
    }

    /// Stage `target` for writers that need a path (the temporary file keeps
    /// the target's extension).
    pub fn write_path<F>(&mut self, target: &Path, fill: F) -> Result<()>
    where
        F: FnOnce(&Path) -> Result<()>,
    {
        let tmp = stage_for(target)?;
        fill(tmp.path()).with_context(|| format!("writing {}", target.display()))?;
        self.staged.push((tmp, target.to_path_buf()));
        Ok(())
    }

    /// Move every staged file into place.
    pub fn commit(self) -> Result<()> {
        for (tmp, target) in self.staged {
            tmp.as_file().sync_all().ok();
            tmp.persist(&target)
                .with_context(|| format!("moving output into {}", target.display()))?;
        }
        Ok(())
    }
}
