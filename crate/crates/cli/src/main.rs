use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use tumormap::balance::{balance_manifest, read_manifest, write_manifest, DEFAULT_TARGET_PER_TYPE};
use tumormap::classifier::{load_classifier, ClassifierSpec};
use tumormap::heatmap::{from_geojson, to_geojson, Colormap};
use tumormap::metrics::{read_predictions_csv, stratified_report};
use tumormap::pipeline::{
    localize, read_scores_csv, read_slide_list, run_all, score_slide, shard_slides, write_atomic,
    write_atomic_bytes, write_scores_csv, PipelineConfig, PipelineError, RunContext, ScoreRecord,
    SlideScores, CONFIG_ENV,
};
use tumormap::qc::{qc_filter, read_qc_csv, write_qc_csv, QcRecord};
use tumormap::slide::{extract_tile, open_slide, tile_grid, TileCoord, TileRecord};
use tumormap::stain::{estimate_stain_profile_pooled, normalize_tile, StainProfile};
use tumormap::synthetic::{write_tiff_pyramid, SyntheticSlide, TileRect};

const TILE_MANIFEST: &str = "manifest.ndjson";

#[derive(Parser)]
#[command(name = "tumormap", version, about = "Whole-slide tumor localization")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cut a slide into non-overlapping PNG tiles plus an NDJSON manifest.
    Tile(TileArgs),
    /// Score tiles for tissue, blur and blood and write a QC report.
    Qc(QcArgs),
    /// Map tiles onto a reference stain profile.
    Normalize(NormalizeArgs),
    /// Tile, QC, normalize and score one slide.
    Infer(InferArgs),
    /// Build heatmap, mask and contours from scores and QC reports.
    Heatmap(HeatmapArgs),
    /// Validate a tumor GeoJSON file and rewrite it canonically.
    Geojson(GeojsonArgs),
    /// Per-cohort tile metrics from a predictions CSV.
    Eval(EvalArgs),
    /// Build a class-balanced tile manifest.
    Balance(BalanceArgs),
    /// Show how a slide list splits into shards.
    Shard(ShardArgs),
    /// Run the full pipeline over one shard of a slide list.
    Run(RunArgs),
    /// Write a synthetic demo slide, stub score table, config and slide list.
    Synth(SynthArgs),
}

#[derive(Args)]
struct TileArgs {
    #[arg(long)]
    slide: PathBuf,
    #[arg(long)]
    level: Option<usize>,
    #[arg(long)]
    tile_size: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QcArgs {
    /// Tile directory or NDJSON tile manifest.
    #[arg(long)]
    tiles: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct NormalizeArgs {
    /// Tile directory or NDJSON tile manifest.
    #[arg(long)]
    tiles: PathBuf,
    /// Reference profile JSON. Written instead of read with `--estimate-reference`.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Estimate the reference from this slide's QC-passed tiles.
    #[arg(long)]
    estimate_reference: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    slide: PathBuf,
    /// `stub:<csv>`, `baseline:<json>` or `graph:<onnx>`; overrides the config.
    #[arg(long)]
    classifier: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Scores CSV.
    #[arg(long)]
    out: PathBuf,
    /// Also write the QC report here.
    #[arg(long)]
    qc: Option<PathBuf>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    qc: PathBuf,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    geojson: PathBuf,
    #[arg(long)]
    png: PathBuf,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    tile_size: Option<u32>,
    /// Level downsample of the scored tiles; inferred from x0/y0 when omitted.
    #[arg(long)]
    downsample: Option<f64>,
    #[arg(long)]
    min_area: Option<usize>,
    #[arg(long)]
    colormap: Option<Colormap>,
}

#[derive(Args)]
struct GeojsonArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Slide id stored in feature metadata when rewriting.
    #[arg(long, default_value = "")]
    slide_id: String,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BalanceArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TARGET_PER_TYPE)]
    target: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    by_patient: bool,
    /// Draw with replacement when a class is short.
    #[arg(long)]
    oversample: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ShardArgs {
    /// Slide list, one path per line.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 1)]
    n_shards: usize,
    /// Report per-slide status found under this output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Slide list, one path per line.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    shard_id: usize,
    #[arg(long, default_value_t = 1)]
    n_shards: usize,
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    cols: u32,
    #[arg(long, default_value_t = 20)]
    rows: u32,
    /// Tumor block as `col0,row0,col1,row1` (exclusive end).
    #[arg(long, default_value = "5,5,15,15")]
    tumor: String,
    #[arg(long, default_value_t = 0)]
    seed: u32,
    #[arg(long, default_value = "demo")]
    name: String,
}

/// Marks errors that exit with status 2.
#[derive(Debug)]
struct ConfigError(String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_error(msg: impl fmt::Display) -> anyhow::Error {
    ConfigError(msg.to_string()).into()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| {
                c.is::<ConfigError>() || matches!(c.downcast_ref(), Some(PipelineError::Config(_)))
            });
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(config_error),
        None => Ok(PipelineConfig::default()),
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Tile(a) => tile(a, &mut cfg),
        Command::Qc(a) => qc(a, &cfg),
        Command::Normalize(a) => normalize(a, &cfg),
        Command::Infer(a) => infer(a, &mut cfg),
        Command::Heatmap(a) => heatmap(a, &mut cfg),
        Command::Geojson(a) => geojson(a),
        Command::Eval(a) => eval(a),
        Command::Balance(a) => balance(a),
        Command::Shard(a) => shard(a),
        Command::Run(a) => run(a, &mut cfg),
        Command::Synth(a) => synth(a),
    }
    .map(|()| ExitCode::SUCCESS)
    .or_else(|e| match e.downcast::<SlideFailures>() {
        Ok(f) => {
            eprintln!("{f}");
            Ok(ExitCode::from(1))
        }
        Err(e) => Err(e),
    })
}

#[derive(Debug)]
struct SlideFailures(usize);

impl fmt::Display for SlideFailures {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} slide(s) failed", self.0)
    }
}

impl std::error::Error for SlideFailures {}

/// One line of the tile manifest written by `tile`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TileRef {
    path: String,
    slide_id: String,
    col: u32,
    row: u32,
}

fn tile_file_name(slide_id: &str, col: u32, row: u32) -> String {
    format!("{slide_id}_c{col}_r{row}.png")
}

/// Splits `{slide_id}_c{col}_r{row}.png`.
fn parse_tile_name(name: &str) -> Option<(String, u32, u32)> {
    let stem = name.strip_suffix(".png")?;
    let (rest, row) = stem.rsplit_once("_r")?;
    let (slide, col) = rest.rsplit_once("_c")?;
    Some((slide.to_string(), col.parse().ok()?, row.parse().ok()?))
}

/// Tiles from a directory of named PNGs or an NDJSON manifest with
/// `path`, `slide_id`, `col` and `row` fields.
fn list_tiles(source: &Path) -> Result<Vec<TileRef>> {
    let mut tiles = Vec::new();
    if source.is_dir() {
        for entry in fs::read_dir(source).with_context(|| source.display().to_string())? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if let Some((slide_id, col, row)) = parse_tile_name(name) {
                tiles.push(TileRef {
                    path: path.display().to_string(),
                    slide_id,
                    col,
                    row,
                });
            }
        }
    } else {
        let text = fs::read_to_string(source).with_context(|| source.display().to_string())?;
        let base = source.parent().unwrap_or(Path::new(""));
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut t: TileRef = serde_json::from_str(line)
                .with_context(|| format!("{} line {}", source.display(), i + 1))?;
            if Path::new(&t.path).is_relative() {
                t.path = base.join(&t.path).display().to_string();
            }
            tiles.push(t);
        }
    }
    tiles.sort_by(|a, b| (&a.slide_id, a.row, a.col).cmp(&(&b.slide_id, b.row, b.col)));
    Ok(tiles)
}

fn load_tile(t: &TileRef) -> Result<TileRecord> {
    let img = image::open(&t.path)
        .with_context(|| t.path.clone())?
        .to_rgb8();
    let size = img.width();
    if img.height() != size {
        bail!("{}: tile is not square", t.path);
    }
    Ok(TileRecord::new(&t.slide_id, TileCoord::new(t.col, t.row, 0, size), img)?)
}

fn write_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    let mut buf = io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    write_atomic_bytes(path, buf.get_ref()).with_context(|| path.display().to_string())
}

fn tile(a: TileArgs, cfg: &mut PipelineConfig) -> Result<()> {
    cfg.level = a.level.unwrap_or(cfg.level);
    cfg.tile_size = a.tile_size.unwrap_or(cfg.tile_size);
    let slide = open_slide(&a.slide)?;
    let coords = tile_grid(&slide, cfg.level, cfg.tile_size)?;
    fs::create_dir_all(&a.out)?;
    let refs: Vec<TileRef> = coords
        .par_iter()
        .map(|&c| {
            let tile = extract_tile(&slide, c)?;
            let name = tile_file_name(slide.slide_id(), c.col, c.row);
            write_png(&a.out.join(&name), tile.pixels())?;
            Ok(TileRef {
                path: name,
                slide_id: slide.slide_id().to_string(),
                col: c.col,
                row: c.row,
            })
        })
        .collect::<Result<_>>()?;
    write_atomic(&a.out.join(TILE_MANIFEST), |w| {
        for r in &refs {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    println!("{} tiles written to {}", refs.len(), a.out.display());
    Ok(())
}

fn qc(a: QcArgs, cfg: &PipelineConfig) -> Result<()> {
    let tiles = list_tiles(&a.tiles)?;
    let records: Vec<QcRecord> = tiles
        .par_iter()
        .map(|t| {
            let tile = load_tile(t)?;
            Ok(QcRecord::new(&t.slide_id, t.col, t.row, &qc_filter(&tile, &cfg.qc)))
        })
        .collect::<Result<_>>()?;
    write_atomic(&a.report, |w| write_qc_csv(w, &records).map_err(io::Error::other))?;
    let passed = records.iter().filter(|r| r.pass).count();
    println!("{passed}/{} tiles passed QC", records.len());
    Ok(())
}

fn estimate_reference(slide_path: &Path, cfg: &PipelineConfig) -> Result<StainProfile> {
    let slide = open_slide(slide_path)?;
    let mut tiles = Vec::new();
    for c in tile_grid(&slide, cfg.level, cfg.tile_size)? {
        let t = extract_tile(&slide, c)?;
        if qc_filter(&t, &cfg.qc).passed() {
            tiles.push(t);
        }
    }
    if tiles.is_empty() {
        bail!("{}: no tile passed QC", slide_path.display());
    }
    Ok(estimate_stain_profile_pooled(&tiles, &cfg.macenko)?)
}

fn normalize(a: NormalizeArgs, cfg: &PipelineConfig) -> Result<()> {
    let reference = match (&a.estimate_reference, &a.reference) {
        (Some(slide), target) => {
            let profile = estimate_reference(slide, cfg)?;
            if let Some(path) = target {
                write_atomic_bytes(path, profile.to_json().as_bytes())?;
                println!("reference profile written to {}", path.display());
            }
            profile
        }
        (None, Some(path)) => StainProfile::load(path).map_err(config_error)?,
        (None, None) => cfg.reference().map_err(config_error)?,
    };
    let tiles = list_tiles(&a.tiles)?;
    fs::create_dir_all(&a.out)?;
    let mut by_slide: BTreeMap<&str, Vec<&TileRef>> = BTreeMap::new();
    for t in &tiles {
        by_slide.entry(&t.slide_id).or_default().push(t);
    }
    for (slide_id, refs) in by_slide {
        let records = refs.par_iter().map(|t| load_tile(t)).collect::<Result<Vec<_>>>()?;
        let source = estimate_stain_profile_pooled(&records, &cfg.macenko)
            .with_context(|| format!("estimating the stain profile of {slide_id}"))?;
        records.par_iter().try_for_each(|t| -> Result<()> {
            let out = normalize_tile(t, &source, &reference, &cfg.macenko)?;
            let c = t.coord();
            write_png(&a.out.join(tile_file_name(slide_id, c.col, c.row)), out.pixels())
        })?;
    }
    println!("{} tiles normalized into {}", tiles.len(), a.out.display());
    Ok(())
}

fn infer(a: InferArgs, cfg: &mut PipelineConfig) -> Result<()> {
    if let Some(spec) = &a.classifier {
        cfg.classifier = Some(spec.parse::<ClassifierSpec>().map_err(config_error)?);
    }
    if let Some(b) = a.batch_size {
        cfg.batch.batch_size = b;
    }
    let reference = cfg.reference()?;
    let model = load_classifier(cfg.classifier_spec()?, &reference).map_err(config_error)?;
    let ctx = RunContext::new(cfg, model.as_ref(), &reference)?;
    let scored = score_slide(&a.slide, &ctx)?;
    let records: Vec<ScoreRecord> = scored
        .scores
        .iter()
        .map(|s| ScoreRecord::new(s, scored.downsample))
        .collect();
    write_atomic(&a.out, |w| write_scores_csv(w, &records).map_err(io::Error::other))?;
    if let Some(path) = &a.qc {
        write_atomic(path, |w| write_qc_csv(w, &scored.qc).map_err(io::Error::other))?;
    }
    println!("{} of {} tiles scored with {}", records.len(), scored.qc.len(), model.describe());
    Ok(())
}

/// Level downsample recovered from a score's level-0 origin.
fn infer_downsample(scores: &[ScoreRecord], tile_size: u32) -> f64 {
    scores
        .iter()
        .find_map(|s| {
            let (cells, origin) = if s.col > 0 { (s.col, s.x0) } else { (s.row, s.y0) };
            (cells > 0).then(|| origin as f64 / (cells as f64 * tile_size as f64))
        })
        .unwrap_or(1.0)
}

fn heatmap(a: HeatmapArgs, cfg: &mut PipelineConfig) -> Result<()> {
    cfg.sigma = a.sigma.unwrap_or(cfg.sigma);
    cfg.threshold = a.threshold.unwrap_or(cfg.threshold);
    cfg.tile_size = a.tile_size.unwrap_or(cfg.tile_size);
    cfg.min_area = a.min_area.unwrap_or(cfg.min_area);
    if let Some(c) = a.colormap {
        cfg.colormap = c.to_string();
    }
    cfg.validate()?;
    let scores = read_scores_csv(fs::File::open(&a.scores).with_context(|| a.scores.display().to_string())?)
        .with_context(|| a.scores.display().to_string())?;
    let qc = read_qc_csv(fs::File::open(&a.qc).with_context(|| a.qc.display().to_string())?)
        .with_context(|| a.qc.display().to_string())?;
    let Some(first) = qc.first() else {
        bail!("{}: QC report has no tiles", a.qc.display());
    };
    let slide_id = first.slide_id.clone();
    if qc.iter().any(|q| q.slide_id != slide_id)
        || scores.iter().any(|s| s.slide_id != slide_id)
    {
        bail!("scores and QC report must cover exactly one slide");
    }
    let downsample = a.downsample.unwrap_or_else(|| infer_downsample(&scores, cfg.tile_size));
    let scored = SlideScores {
        slide_id: slide_id.clone(),
        cols: qc.iter().map(|q| q.col + 1).max().unwrap_or(0),
        rows: qc.iter().map(|q| q.row + 1).max().unwrap_or(0),
        tile_size: cfg.tile_size,
        downsample,
        scores: scores.iter().map(|s| s.to_score(cfg.level, cfg.tile_size)).collect(),
        qc,
        source_profile: None,
    };
    let loc = localize(&scored, cfg)?;
    write_atomic_bytes(&a.png, &loc.heatmap_png(cfg)?)?;
    if let Some(mask) = &a.mask {
        write_atomic_bytes(mask, &loc.mask_png(cfg)?)?;
    }
    write_atomic_bytes(&a.geojson, to_geojson(&loc.annotations, &slide_id)?.as_bytes())?;
    println!(
        "{} tumor region(s), {} of {} cells above threshold",
        loc.annotations.len(),
        loc.mask.count(),
        scored.cols * scored.rows
    );
    Ok(())
}

fn geojson(a: GeojsonArgs) -> Result<()> {
    let text = fs::read_to_string(&a.input).with_context(|| a.input.display().to_string())?;
    let annotations = from_geojson(&text).with_context(|| a.input.display().to_string())?;
    for (i, ann) in annotations.iter().enumerate() {
        println!(
            "feature {i}: area {:.1} px, {} hole(s), mean probability {:.3}",
            ann.area_px,
            ann.holes.len(),
            ann.mean_probability
        );
    }
    if let Some(out) = &a.out {
        write_atomic_bytes(out, to_geojson(&annotations, &a.slide_id)?.as_bytes())?;
    }
    println!("{} valid feature(s)", annotations.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let file = fs::File::open(&a.predictions).with_context(|| a.predictions.display().to_string())?;
    let scores = read_predictions_csv(file)?;
    let report = stratified_report(&scores, a.threshold)?;
    print!("{}", report.to_table());
    if let Some(out) = &a.out {
        write_atomic_bytes(out, report.to_json()?.as_bytes())?;
    }
    Ok(())
}

fn balance(a: BalanceArgs) -> Result<()> {
    let file = fs::File::open(&a.manifest).with_context(|| a.manifest.display().to_string())?;
    let entries = read_manifest(BufReader::new(file))?;
    let out = balance_manifest(&entries, a.target, a.seed, a.oversample, a.by_patient)?;
    write_atomic(&a.out, |w| write_manifest(w, &out).map_err(io::Error::other))?;
    println!("{} of {} entries selected", out.len(), entries.len());
    Ok(())
}

fn shard(a: ShardArgs) -> Result<()> {
    if a.n_shards == 0 {
        return Err(config_error("--n-shards must be >= 1"));
    }
    let slides = read_slide_list(&a.manifest)?;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for s in shard_slides(&slides, a.n_shards) {
        let line = match &a.out_dir {
            Some(dir) => {
                let status: Vec<_> = s
                    .status(dir)
                    .into_iter()
                    .map(|(path, status)| serde_json::json!({ "path": path, "status": status }))
                    .collect();
                serde_json::json!({ "shard_id": s.shard_id, "slides": status })
            }
            None => serde_json::to_value(&s)?,
        };
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn run(a: RunArgs, cfg: &mut PipelineConfig) -> Result<()> {
    if let Some(dir) = a.out_dir {
        cfg.out_dir = dir;
    }
    let summary = run_all(&a.manifest, cfg, a.shard_id, a.n_shards, a.force)?;
    println!(
        "shard {}/{}: {} done, {} skipped, {} failed",
        summary.shard_id,
        summary.n_shards,
        summary.done.len(),
        summary.skipped.len(),
        summary.failed.len()
    );
    for f in &summary.failed {
        eprintln!("failed: {}: {}", f.slide, f.error);
    }
    if summary.succeeded() {
        Ok(())
    } else {
        Err(SlideFailures(summary.failed.len()).into())
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let bounds: Vec<u32> = a
        .tumor
        .split(',')
        .map(|v| v.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| config_error(format!("bad --tumor {:?}", a.tumor)))?;
    let [c0, r0, c1, r1] = bounds[..] else {
        return Err(config_error("--tumor takes four comma-separated numbers"));
    };
    let spec = SyntheticSlide::new(a.cols, a.rows, tumormap::slide::DEFAULT_TILE_SIZE)
        .with_tumor(TileRect::new(c0, r0, c1, r1))
        .with_seed(a.seed);
    fs::create_dir_all(&a.out)?;
    let slide = a.out.join(format!("{}.tiff", a.name));
    write_tiff_pyramid(&slide, &spec.render(), &[4])?;
    fs::write(a.out.join("stub.csv"), spec.stub_table(&a.name, 0.9, 0.1))?;
    fs::write(a.out.join("slides.txt"), format!("{}.tiff\n", a.name))?;
    let cfg = PipelineConfig {
        classifier: Some(ClassifierSpec::Stub { path: "stub.csv".into() }),
        out_dir: "out".into(),
        ..PipelineConfig::default()
    };
    fs::write(a.out.join("config.toml"), cfg.to_toml())?;
    println!("wrote {} with {} tumor tiles", slide.display(), spec.tumor_tiles().len());
    Ok(())
}
