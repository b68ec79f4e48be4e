use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::output::{DONE_MARKER, ERROR_LOG};
use super::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlideStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardManifest {
    pub shard_id: usize,
    pub slides: Vec<PathBuf>,
}

impl ShardManifest {
    /// Status of each slide as recorded under `out_dir`.
    pub fn status(&self, out_dir: &Path) -> Vec<(PathBuf, SlideStatus)> {
        self.slides
            .iter()
            .map(|s| {
                let dir = out_dir.join(super::slide_id_of(s));
                let status = if dir.join(DONE_MARKER).exists() {
                    SlideStatus::Done
                } else if dir.join(ERROR_LOG).exists() {
                    SlideStatus::Failed
                } else {
                    SlideStatus::Pending
                };
                (s.clone(), status)
            })
            .collect()
    }
}

/// Round-robin over the sorted slide list. Shard sizes differ by at most one.
pub fn shard_slides(slides: &[PathBuf], n_shards: usize) -> Vec<ShardManifest> {
    let mut sorted = slides.to_vec();
    sorted.sort();
    let mut shards: Vec<ShardManifest> = (0..n_shards)
        .map(|shard_id| ShardManifest {
            shard_id,
            slides: Vec::new(),
        })
        .collect();
    for (i, s) in sorted.into_iter().enumerate() {
        shards[i % n_shards].slides.push(s);
    }
    shards
}

/// One slide path per line; blank lines and `#` comments are skipped.
/// Relative paths resolve against the list's directory.
pub fn read_slide_list(path: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            let p = PathBuf::from(l);
            if p.is_relative() { base.join(p) } else { p }
        })
        .collect())
}
