//! Feature extractors loaded from a JSON weights file for `eval fid`.

use std::path::{Path, PathBuf};

use scmis::dataio::RgbImage;
use scmis::metrics::{FeatureExtractor, GridStats};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Environment variable naming the directory searched for extractor weights.
pub const CACHE_ENV: &str = "SCMIS_CACHE";

/// File looked up in the cache directory when `--weights` is omitted.
pub const CACHED_WEIGHTS: &str = "fid_extractor.json";

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum WeightsFile {
    /// Per-cell channel mean and standard deviation.
    GridStats { grid: usize },
    /// Grid statistics followed by a fixed linear projection.
    ProjectedGridStats { grid: usize, projection: Vec<Vec<f64>> },
}

pub struct Projected {
    base: GridStats,
    rows: Vec<Vec<f64>>,
}

impl FeatureExtractor for Projected {
    fn dim(&self) -> usize {
        self.rows.len()
    }

    fn extract(&self, image: &RgbImage) -> scmis::Result<Vec<f64>> {
        let x = self.base.extract(image)?;
        Ok(self.rows.iter().map(|r| r.iter().zip(&x).map(|(a, b)| a * b).sum()).collect())
    }
}

pub struct LoadedExtractor {
    pub extractor: Box<dyn FeatureExtractor>,
    pub path: PathBuf,
    pub sha256: String,
}

/// Picks the weights file: the explicit path, else the cached copy.
pub fn resolve(explicit: Option<&Path>) -> CliResult<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    let Some(dir) = std::env::var_os(CACHE_ENV) else {
        return Err(CliError::Config(format!("no --weights given and {CACHE_ENV} is not set")));
    };
    let path = PathBuf::from(dir).join(CACHED_WEIGHTS);
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "no --weights given and {} does not exist",
            path.display()
        )));
    }
    Ok(path)
}

pub fn load(path: &Path) -> CliResult<LoadedExtractor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let spec: WeightsFile = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let extractor: Box<dyn FeatureExtractor> = match spec {
        WeightsFile::GridStats { grid } => Box::new(GridStats { grid }),
        WeightsFile::ProjectedGridStats { grid, projection } => {
            let base = GridStats { grid };
            if projection.is_empty() || projection.iter().any(|r| r.len() != base.dim()) {
                return Err(CliError::Config(format!(
                    "{}: projection rows must each have {} entries",
                    path.display(),
                    base.dim()
                )));
            }
            Box::new(Projected { base, rows: projection })
        }
    };
    Ok(LoadedExtractor {
        extractor,
        path: path.to_path_buf(),
        sha256,
    })
}
