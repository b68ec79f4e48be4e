use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::ImageFormat;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{NormalizationMode, PipelineConfig};
use super::output::*;
use super::shard::{read_slide_list, shard_slides};
use super::PipelineError;
use crate::classifier::{load_classifier, score_batch, TileClassifier, TileScore};
use crate::heatmap::{
    assemble_grid, extract_contours, gaussian_smooth, render_heatmap, render_mask, rescale_to_level0,
    threshold_mask, to_geojson, BinaryMask, Colormap, ProbabilityGrid, TumorAnnotation,
};
use crate::qc::{qc_filter, write_qc_csv, QcRecord};
use crate::slide::{extract_tile, grid_dims, open_slide, tile_grid, TileCoord, TileRecord};
use crate::stain::{estimate_stain_profile_pooled, normalize_tile, StainProfile};

/// Tiles held in memory at once while scoring, in multiples of the batch size.
const BATCHES_PER_CHUNK: usize = 4;

/// Directory a slide's outputs land in.
pub fn slide_out_dir(cfg: &PipelineConfig, slide_id: &str) -> PathBuf {
    cfg.out_dir.join(slide_id)
}

pub fn slide_id_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SlideOutcome {
    /// A `.done` marker was already present.
    Skipped,
    Done {
        tiles: usize,
        passed: usize,
        annotations: usize,
    },
}

/// Shared, read-only inputs of a run.
pub struct RunContext<'a> {
    pub cfg: &'a PipelineConfig,
    pub classifier: &'a dyn TileClassifier,
    pub reference: &'a StainProfile,
}

impl<'a> RunContext<'a> {
    pub fn new(
        cfg: &'a PipelineConfig,
        classifier: &'a dyn TileClassifier,
        reference: &'a StainProfile,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if let Some(size) = classifier.input_size() {
            if size != cfg.tile_size {
                return Err(PipelineError::Config(format!(
                    "classifier expects {size}px tiles, tile_size is {}",
                    cfg.tile_size
                )));
            }
        }
        Ok(Self {
            cfg,
            classifier,
            reference,
        })
    }
}

/// QC records for every tile and scores for the QC-passed ones, in grid order.
#[derive(Debug, Clone)]
pub struct SlideScores {
    pub slide_id: String,
    pub cols: u32,
    pub rows: u32,
    pub tile_size: u32,
    pub downsample: f64,
    pub qc: Vec<QcRecord>,
    pub scores: Vec<TileScore>,
    /// Stain profile the tiles were normalized from, if any.
    pub source_profile: Option<StainProfile>,
}

/// Tile, QC, normalize and score one slide.
pub fn score_slide(path: &Path, ctx: &RunContext) -> Result<SlideScores, PipelineError> {
    let cfg = ctx.cfg;
    let slide = open_slide(path)?;
    let slide_id = slide.slide_id().to_string();
    let info = slide.level(cfg.level)?;
    let coords = tile_grid(&slide, cfg.level, cfg.tile_size)?;
    let (cols, rows) = grid_dims(&info, cfg.tile_size);

    let qc: Vec<QcRecord> = coords
        .par_iter()
        .map(|&c| {
            let tile = extract_tile(&slide, c)?;
            Ok(QcRecord::new(&slide_id, c.col, c.row, &qc_filter(&tile, &cfg.qc)))
        })
        .collect::<Result<_, PipelineError>>()?;
    let passed: Vec<TileCoord> = coords
        .iter()
        .zip(&qc)
        .filter(|(_, q)| q.pass)
        .map(|(c, _)| *c)
        .collect();

    let source_profile = match cfg.normalization {
        NormalizationMode::Slide if !passed.is_empty() => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut sample: Vec<TileCoord> = passed
                .choose_multiple(&mut rng, cfg.profile_tiles)
                .copied()
                .collect();
            sample.sort_by_key(|c| (c.row, c.col));
            let tiles = sample
                .par_iter()
                .map(|&c| extract_tile(&slide, c))
                .collect::<Result<Vec<_>, _>>()?;
            Some(estimate_stain_profile_pooled(&tiles, &cfg.macenko)?)
        }
        _ => None,
    };

    let chunk = cfg.batch.batch_size.saturating_mul(BATCHES_PER_CHUNK).max(1);
    let mut scores: Vec<TileScore> = Vec::with_capacity(passed.len());
    for coords in passed.chunks(chunk) {
        let tiles: Vec<TileRecord> = coords
            .par_iter()
            .map(|&c| {
                let tile = extract_tile(&slide, c)?;
                Ok(match &source_profile {
                    Some(src) => normalize_tile(&tile, src, ctx.reference, &cfg.macenko)?,
                    None => tile,
                })
            })
            .collect::<Result<_, PipelineError>>()?;
        scores.extend(score_batch(&tiles, ctx.classifier, &cfg.batch)?);
    }
    Ok(SlideScores {
        slide_id,
        cols,
        rows,
        tile_size: cfg.tile_size,
        downsample: info.downsample,
        qc,
        scores,
        source_profile,
    })
}

/// Heatmap, mask and level-0 contours of a scored slide.
#[derive(Debug, Clone)]
pub struct Localization {
    pub grid: ProbabilityGrid,
    pub smoothed: ProbabilityGrid,
    pub mask: BinaryMask,
    pub annotations: Vec<TumorAnnotation>,
}

impl Localization {
    pub fn heatmap_png(&self, cfg: &PipelineConfig) -> Result<Vec<u8>, PipelineError> {
        let colormap: Colormap = cfg.colormap.parse()?;
        encode_png(render_heatmap(&self.smoothed, colormap, cfg.heatmap_scale))
    }

    pub fn mask_png(&self, cfg: &PipelineConfig) -> Result<Vec<u8>, PipelineError> {
        encode_png(render_mask(&self.mask, cfg.heatmap_scale))
    }
}

/// Assemble, smooth, threshold and trace contours. Mean probabilities come
/// from the unsmoothed grid.
pub fn localize(scored: &SlideScores, cfg: &PipelineConfig) -> Result<Localization, PipelineError> {
    let grid = assemble_grid(
        &scored.scores,
        &scored.qc,
        scored.cols,
        scored.rows,
        scored.tile_size,
        scored.downsample,
    )?;
    let smoothed = gaussian_smooth(&grid, cfg.sigma)?;
    let mask = threshold_mask(&smoothed, cfg.threshold)?;
    let annotations = extract_contours(&mask, &grid, cfg.min_area)?
        .iter()
        .map(|a| rescale_to_level0(a, scored.tile_size, scored.downsample))
        .collect();
    Ok(Localization {
        grid,
        smoothed,
        mask,
        annotations,
    })
}

struct SlideResult {
    qc: Vec<QcRecord>,
    scores: Vec<ScoreRecord>,
    source_profile: Option<StainProfile>,
    heatmap_png: Vec<u8>,
    mask_png: Vec<u8>,
    geojson: String,
    tiles: usize,
    annotations: usize,
}

fn encode_png(img: impl Into<image::DynamicImage>) -> Result<Vec<u8>, PipelineError> {
    let mut buf = Cursor::new(Vec::new());
    img.into()
        .write_to(&mut buf, ImageFormat::Png)
        .map_err(|e| PipelineError::Output(e.to_string()))?;
    Ok(buf.into_inner())
}

fn process_slide(path: &Path, ctx: &RunContext) -> Result<SlideResult, PipelineError> {
    let scored = score_slide(path, ctx)?;
    let loc = localize(&scored, ctx.cfg)?;
    Ok(SlideResult {
        scores: scored
            .scores
            .iter()
            .map(|s| ScoreRecord::new(s, scored.downsample))
            .collect(),
        heatmap_png: loc.heatmap_png(ctx.cfg)?,
        mask_png: loc.mask_png(ctx.cfg)?,
        geojson: to_geojson(&loc.annotations, &scored.slide_id)?,
        tiles: scored.qc.len(),
        annotations: loc.annotations.len(),
        qc: scored.qc,
        source_profile: scored.source_profile,
    })
}

fn write_outputs(dir: &Path, result: &SlideResult) -> Result<(), PipelineError> {
    let io_err = |e: std::io::Error| PipelineError::Output(format!("{}: {e}", dir.display()));
    write_atomic(&dir.join(SCORES_CSV), |w| {
        write_scores_csv(w, &result.scores).map_err(std::io::Error::other)
    })
    .map_err(io_err)?;
    write_atomic(&dir.join(QC_CSV), |w| {
        write_qc_csv(w, &result.qc).map_err(std::io::Error::other)
    })
    .map_err(io_err)?;
    if let Some(p) = &result.source_profile {
        write_atomic_bytes(&dir.join(PROFILE_JSON), p.to_json().as_bytes()).map_err(io_err)?;
    }
    write_atomic_bytes(&dir.join(HEATMAP_PNG), &result.heatmap_png).map_err(io_err)?;
    write_atomic_bytes(&dir.join(MASK_PNG), &result.mask_png).map_err(io_err)?;
    write_atomic_bytes(&dir.join(GEOJSON), result.geojson.as_bytes()).map_err(io_err)?;
    Ok(())
}

/// Runs one slide end to end into `{out_dir}/{slide_id}/`. A slide with a
/// `.done` marker is skipped unless `force`. Failures go to `error.log`.
pub fn run_slide(path: &Path, ctx: &RunContext, force: bool) -> Result<SlideOutcome, PipelineError> {
    let dir = slide_out_dir(ctx.cfg, &slide_id_of(path));
    let done = dir.join(DONE_MARKER);
    if done.exists() && !force {
        return Ok(SlideOutcome::Skipped);
    }
    fs::create_dir_all(&dir).map_err(|e| PipelineError::Output(format!("{}: {e}", dir.display())))?;
    let _ = fs::remove_file(&done);
    let _ = fs::remove_file(dir.join(ERROR_LOG));

    let result = process_slide(path, ctx).and_then(|r| {
        write_outputs(&dir, &r)?;
        Ok(r)
    });
    match result {
        Ok(r) => {
            let outcome = SlideOutcome::Done {
                tiles: r.tiles,
                passed: r.scores.len(),
                annotations: r.annotations,
            };
            let marker = serde_json::to_string(&outcome).expect("outcome serializes");
            write_atomic_bytes(&done, marker.as_bytes())
                .map_err(|e| PipelineError::Output(format!("{}: {e}", done.display())))?;
            Ok(outcome)
        }
        Err(e) => {
            let _ = write_atomic_bytes(&dir.join(ERROR_LOG), format!("{}: {e}\n", path.display()).as_bytes());
            Err(e)
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub shard_id: usize,
    pub n_shards: usize,
    pub done: Vec<String>,
    pub skipped: Vec<String>,
    pub failed: Vec<FailedSlide>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedSlide {
    pub slide: String,
    pub error: String,
}

impl RunSummary {
    pub fn succeeded(&self) -> bool {
        self.failed.is_empty()
    }
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    Ok(pool.install(f))
}

/// Processes shard `shard_id` of `n_shards` over the given slides. One
/// slide failing does not stop the others.
pub fn run_slides(
    slides: &[PathBuf],
    ctx: &RunContext,
    shard_id: usize,
    n_shards: usize,
    force: bool,
) -> Result<RunSummary, PipelineError> {
    if n_shards == 0 || shard_id >= n_shards {
        return Err(PipelineError::Config(format!("shard {shard_id} of {n_shards} is out of range")));
    }
    let shard = shard_slides(slides, n_shards).swap_remove(shard_id);
    let mut summary = RunSummary {
        shard_id,
        n_shards,
        ..RunSummary::default()
    };
    for slide in &shard.slides {
        let name = slide.display().to_string();
        match with_workers(ctx.cfg.workers, || run_slide(slide, ctx, force))? {
            Ok(SlideOutcome::Skipped) => summary.skipped.push(name),
            Ok(SlideOutcome::Done { .. }) => summary.done.push(name),
            Err(e) => summary.failed.push(FailedSlide {
                slide: name,
                error: e.to_string(),
            }),
        }
    }
    Ok(summary)
}

/// Loads the classifier and reference named by `cfg`, reads the slide list
/// and runs one shard. The summary is also written to
/// `{out_dir}/summary-{shard_id}-of-{n_shards}.json`.
pub fn run_all(
    manifest: &Path,
    cfg: &PipelineConfig,
    shard_id: usize,
    n_shards: usize,
    force: bool,
) -> Result<RunSummary, PipelineError> {
    cfg.validate()?;
    let slides = read_slide_list(manifest)?;
    let reference = cfg.reference()?;
    let classifier = load_classifier(cfg.classifier_spec()?, &reference)
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let ctx = RunContext::new(cfg, classifier.as_ref(), &reference)?;
    let summary = run_slides(&slides, &ctx, shard_id, n_shards, force)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| PipelineError::Output(e.to_string()))?;
    let path = cfg.out_dir.join(format!("summary-{shard_id}-of-{n_shards}.json"));
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic_bytes(&path, text.as_bytes()).map_err(|e| PipelineError::Output(e.to_string()))?;
    Ok(summary)
}
