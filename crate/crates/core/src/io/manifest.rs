use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchMethod;
use crate::metrics::DEFAULT_GRID_POINTS;

fn default_grid() -> usize {
    DEFAULT_GRID_POINTS
}

/// A batch of checkpoints to compare. Relative paths are resolved against
/// the directory holding the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub experiment_id: String,
    pub checkpoints: Vec<PathBuf>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    pub method: MatchMethod,
    pub output_dir: PathBuf,
}

impl RunManifest {
    /// Checks for an even number (at least 2) of existing checkpoints and a
    /// grid of at least two points.
    pub fn validate(&self) -> Result<()> {
        if self.checkpoints.len() < 2 {
            return Err(Error::Manifest(format!(
                "`{}` lists {} checkpoints; at least 2 are needed",
                self.experiment_id,
                self.checkpoints.len()
            )));
        }
        if !self.checkpoints.len().is_multiple_of(2) {
            return Err(Error::Manifest(format!(
                "`{}` lists an odd number of checkpoints ({}); they are compared in consecutive pairs",
                self.experiment_id,
                self.checkpoints.len()
            )));
        }
        if self.grid < 2 {
            return Err(Error::Manifest(format!("grid of {} points", self.grid)));
        }
        if let Some(missing) = self.checkpoints.iter().find(|p| !p.is_file()) {
            return Err(Error::Manifest(format!("checkpoint {} does not exist", missing.display())));
        }
        Ok(())
    }

    /// Consecutive checkpoint pairs `(0,1), (2,3), …`.
    pub fn pairs(&self) -> Vec<(&Path, &Path)> {
        self.checkpoints
            .chunks_exact(2)
            .map(|c| (c[0].as_path(), c[1].as_path()))
            .collect()
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut manifest: RunManifest =
        serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    for p in manifest.checkpoints.iter_mut().chain(std::iter::once(&mut manifest.output_dir)) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    manifest.validate()?;
    Ok(manifest)
}
