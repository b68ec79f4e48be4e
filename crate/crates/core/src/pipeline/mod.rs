//! Per-slide orchestration: tile, QC, normalize, score, reassemble, export.
//!
//! Every slide writes into its own directory through atomic renames and
//! finishes with a `.done` marker, so any scheduler can drive shards of a
//! slide list concurrently and rerun them safely.

mod config;
mod output;
mod run;
mod shard;

pub use config::{NormalizationMode, PipelineConfig, CONFIG_ENV};
pub use output::{
    read_scores_csv, write_atomic, write_atomic_bytes, write_scores_csv, ScoreRecord, DONE_MARKER, ERROR_LOG,
    GEOJSON, HEATMAP_PNG, MASK_PNG, PROFILE_JSON, QC_CSV, SCORES_CSV,
};
pub use run::{
    localize, run_all, run_slide, run_slides, score_slide, slide_id_of, slide_out_dir, FailedSlide,
    Localization, RunContext, RunSummary, SlideOutcome, SlideScores,
};
pub use shard::{read_slide_list, shard_slides, ShardManifest, SlideStatus};

use crate::classifier::ClassifierError;
use crate::heatmap::HeatmapError;
use crate::slide::SlideError;
use crate::stain::StainError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error("stain normalization: {0}")]
    Stain(#[from] StainError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error("writing outputs: {0}")]
    Output(String),
}
