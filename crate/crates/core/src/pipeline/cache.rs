//! On-disk selector score cache keyed by checkpoint hash and image id.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DprError, Result};
use crate::selector::ScorePyramid;

pub const CACHE_ENV: &str = "DPR_CACHE_DIR";

#[derive(Serialize, Deserialize)]
struct CachedLevel {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CachedScores {
    checkpoint: String,
    image_id: String,
    levels: Vec<CachedLevel>,
}

#[derive(Clone, Debug)]
pub struct ScoreCache {
    dir: PathBuf,
    checkpoint_hash: String,
}

impl ScoreCache {
    /// Uses `$DPR_CACHE_DIR` when set, otherwise `default_dir`.
    pub fn new(default_dir: &Path, checkpoint_hash: &str) -> Self {
        let root = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| default_dir.to_path_buf());
        Self::at(&root, checkpoint_hash)
    }

    pub fn at(root: &Path, checkpoint_hash: &str) -> Self {
        Self {
            dir: root.join(checkpoint_hash),
            checkpoint_hash: checkpoint_hash.to_string(),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, image_id: &str) -> PathBuf {
        self.dir.join(format!("{image_id}.json"))
    }

    /// `None` on a miss; unreadable entries are treated as misses.
    pub fn get(&self, image_id: &str) -> Option<ScorePyramid> {
        let text = std::fs::read_to_string(self.path(image_id)).ok()?;
        let cached: CachedScores = serde_json::from_str(&text).ok()?;
        if cached.checkpoint != self.checkpoint_hash || cached.image_id != image_id {
            return None;
        }
        let levels = cached
            .levels
            .into_iter()
            .map(|l| Array2::from_shape_vec((l.rows, l.cols), l.values).ok())
            .collect::<Option<Vec<_>>>()?;
        Some(ScorePyramid { levels })
    }

    pub fn put(&self, image_id: &str, scores: &ScorePyramid) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| DprError::io(&self.dir, e))?;
        let cached = CachedScores {
            checkpoint: self.checkpoint_hash.clone(),
            image_id: image_id.to_string(),
            levels: scores
                .levels
                .iter()
                .map(|l| CachedLevel {
                    rows: l.nrows(),
                    cols: l.ncols(),
                    values: l.iter().copied().collect(),
                })
                .collect(),
        };
        let path = self.path(image_id);
        std::fs::write(&path, serde_json::to_vec(&cached)?).map_err(|e| DprError::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_and_keyed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ScoreCache::at(dir.path(), "abc");
        let sp = ScorePyramid {
            levels: vec![
                Array2::from_shape_fn((4, 4), |(r, c)| (r as f64 * 0.1 + c as f64 / 3.0).sin().abs()),
                Array2::from_elem((2, 2), 1.0 / 7.0),
            ],
        };
        assert!(cache.get("x").is_none());
        cache.put("x", &sp).unwrap();
        assert_eq!(cache.get("x").unwrap(), sp);
        assert!(ScoreCache::at(dir.path(), "other").get("x").is_none());
    }
}
