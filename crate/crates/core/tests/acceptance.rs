//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any gating criterion fails. Throughput is reported only.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::time::{Duration, Instant, SystemTime};

use image::{imageops, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tumormap::balance::{balance_by_patient, write_manifest, TileManifestEntry};
use tumormap::classifier::ClassifierSpec;
use tumormap::heatmap::{
    extract_contours, from_geojson, rescale_to_level0, to_geojson, BinaryMask, ProbabilityGrid,
    TumorAnnotation,
};
use tumormap::metrics::{roc_auc, stratified_report, LabeledScore};
use tumormap::pipeline::{run_all, PipelineConfig, DONE_MARKER, GEOJSON, MASK_PNG, SCORES_CSV};
use tumormap::qc::{blur_score, qc_filter, tissue_fraction, QcConfig, RejectReason};
use tumormap::slide::TileRecord;
use tumormap::stain::{
    angle_deg, estimate_stain_profile, normalize_tile, rgb_to_od, MacenkoConfig, StainProfile,
};
use tumormap::synthetic::{hash01, stain_pixel, write_tiff_pyramid, SyntheticSlide, TileRect};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome, bool);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !($cond) {
            return Err(format!($($fmt)+));
        }
    };
}

const TILE: u32 = 224;

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

/// Two random stain directions at least 15 degrees apart, hematoxylin first
/// (larger blue OD component).
fn random_stains(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let a = unit([0; 3].map(|_| rng.random_range(0.05..1.0)));
        let b = unit([0; 3].map(|_| rng.random_range(0.05..1.0)));
        if angle_deg(&a, &b) < 15.0 || (a[2] - b[2]).abs() < 1e-3 {
            continue;
        }
        return if a[2] > b[2] { (a, b) } else { (b, a) };
    }
}

fn two_stain_tile(h: [f64; 3], e: [f64; 3], rng: &mut ChaCha8Rng) -> TileRecord {
    let img = RgbImage::from_fn(TILE, TILE, |_, _| {
        let c = [rng.random_range(0.0..0.9), rng.random_range(0.0..0.9)];
        Rgb([0, 1, 2].map(|k| (255.0 * 10f64.powf(-(h[k] * c[0] + e[k] * c[1]))).round() as u8))
    });
    TileRecord::from_image(img).unwrap()
}

fn c1_macenko_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cases: Vec<_> = (0..60)
        .map(|_| {
            let (h, e) = random_stains(&mut rng);
            (h, e, two_stain_tile(h, e, &mut rng))
        })
        .collect();
    let cfg = MacenkoConfig::default();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (i, (h, e, tile)) in cases.iter().enumerate() {
        let est = estimate_stain_profile(tile, &cfg).map_err(|err| format!("tile {i}: {err}"))?;
        worst = worst
            .max(angle_deg(&est.hematoxylin(), h))
            .max(angle_deg(&est.eosin(), e));
    }
    let elapsed = start.elapsed();
    ensure!(worst < 2.0, "worst angular error {worst:.3} deg");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("{} tiles, worst error {worst:.3} deg, {elapsed:.2?}", cases.len()))
}

fn c2_self_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = MacenkoConfig::default();
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let (h, e) = if i == 0 {
            let r = StainProfile::default_reference();
            (r.hematoxylin(), r.eosin())
        } else {
            random_stains(&mut rng)
        };
        let tile = two_stain_tile(h, e, &mut rng);
        let est = estimate_stain_profile(&tile, &cfg).map_err(|err| err.to_string())?;
        let out = normalize_tile(&tile, &est, &est, &cfg).map_err(|err| err.to_string())?;
        let od = rgb_to_od(tile.pixels(), cfg.io);
        let (mut tissue, mut changed) = (0usize, 0usize);
        for ((a, b), od) in tile.pixels().pixels().zip(out.pixels().pixels()).zip(&od) {
            if od.iter().map(|x| x * x).sum::<f64>().sqrt() > cfg.od_threshold {
                tissue += 1;
                if (0..3).any(|k| (i16::from(a[k]) - i16::from(b[k])).abs() > 2) {
                    changed += 1;
                }
            }
        }
        worst = worst.max(changed as f64 / tissue as f64);
    }
    ensure!(worst <= 0.01, "worst tile changed {:.2}% of tissue pixels", worst * 100.0);
    Ok(format!("20 tiles, worst {:.3}% of tissue pixels off by > 2", worst * 100.0))
}

fn brute_auc(scores: &[LabeledScore]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for p in scores.iter().filter(|s| s.label == 1) {
        for n in scores.iter().filter(|s| s.label == 0) {
            pairs += 1.0;
            wins += if p.p_pos > n.p_pos {
                1.0
            } else if p.p_pos == n.p_pos {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn c3_auc_oracle() -> Outcome {
    let example: Vec<LabeledScore> = [(0.1, 0), (0.4, 0), (0.35, 1), (0.8, 1)]
        .iter()
        .map(|&(p, l)| LabeledScore::new(p, l, "X"))
        .collect();
    let fixed = roc_auc(&example).map_err(|e| e.to_string())?;
    ensure!(fixed == 0.75, "fixed example gave {fixed}");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut tie_heavy = 0;
    for i in 0..200 {
        let n = rng.random_range(2..=1000);
        let levels = if i % 2 == 0 { Some(rng.random_range(2..12)) } else { None };
        tie_heavy += usize::from(levels.is_some());
        let mut scores: Vec<LabeledScore> = (0..n)
            .map(|_| {
                let p: f64 = rng.random();
                let p = levels.map_or(p, |l| (p * f64::from(l)).floor() / f64::from(l));
                LabeledScore::new(p, u8::from(rng.random_bool(0.4)), "X")
            })
            .collect();
        scores[0].label = 1;
        scores[1].label = 0;
        let got = roc_auc(&scores).map_err(|e| e.to_string())?;
        worst = worst.max((got - brute_auc(&scores)).abs());
    }
    ensure!(worst <= 1e-9, "max deviation {worst:e}");
    Ok(format!("200 instances ({tie_heavy} tie-heavy), max deviation {worst:.1e}, fixed example 0.75"))
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

fn c4_table_consistency() -> Outcome {
    // cohort, sensitivity, specificity, F1, tiles
    let table = [
        ("MEL", 0.950, 0.829, 0.892, 1947u64),
        ("HCC", 0.813, 0.628, 0.744, 2000),
        ("CRC", 0.995, 0.995, 0.995, 2000),
        ("NSCLC", 1.000, 1.000, 1.000, 1922),
        ("PDAC", 0.543, 0.757, 0.609, 7346),
    ];
    let mut scores = Vec::new();
    for &(cohort, sens, spec, _, n) in &table {
        let pos = n.div_ceil(2);
        let neg = n - pos;
        let tp = (sens * pos as f64).round() as u64;
        let tn = (spec * neg as f64).round() as u64;
        let mut push = |count: u64, p: f64, label: u8| {
            scores.extend((0..count).map(|_| LabeledScore::new(p, label, cohort)));
        };
        push(tp, 0.9, 1);
        push(pos - tp, 0.1, 1);
        push(tn, 0.1, 0);
        push(neg - tn, 0.9, 0);
    }
    let report = stratified_report(&scores, 0.5).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for &(cohort, sens, spec, f1, n) in &table {
        let row = report.rows.iter().find(|r| r.cohort == cohort).ok_or(format!("no {cohort} row"))?;
        ensure!(row.n_tiles == n, "{cohort}: {} tiles", row.n_tiles);
        for (got, want) in [(row.sensitivity, sens), (row.specificity, spec), (row.f1, f1)] {
            let got = round3(got.ok_or(format!("{cohort}: missing rate"))?);
            worst = worst.max((got - want).abs());
        }
    }
    ensure!(worst <= 0.005 + 1e-12, "max deviation {worst:.3}");
    let hcc = report.rows.iter().find(|r| r.cohort == "HCC").unwrap();
    let mis = hcc.misclassification_rate.unwrap();
    ensure!((0.26..=0.29).contains(&mis), "HCC misclassification {mis:.4}");
    Ok(format!("max deviation {worst:.3}, HCC misclassification {mis:.4}"))
}

fn disk_mask(radius: i64, size: u32) -> BinaryMask {
    let c = i64::from(size / 2);
    BinaryMask::from_fn(size, size, |col, row| {
        let (dx, dy) = (i64::from(col) - c, i64::from(row) - c);
        dx * dx + dy * dy <= radius * radius
    })
}

fn uniform_grid(cols: u32, rows: u32, p: f64) -> ProbabilityGrid {
    ProbabilityGrid::from_rows(&vec![vec![Some(p); cols as usize]; rows as usize]).unwrap()
}

fn c5_geometry() -> Outcome {
    let mask = disk_mask(8, 24);
    let anns = extract_contours(&mask, &uniform_grid(24, 24, 0.8), 2).map_err(|e| e.to_string())?;
    ensure!(anns.len() == 1, "{} annotations", anns.len());
    let cells = mask.count() as f64;
    let rel = (anns[0].area_px - cells).abs() / cells;
    ensure!(rel <= 0.05, "area {} vs {cells} cells", anns[0].area_px);
    let scaled = rescale_to_level0(&anns[0], 224, 4.0);
    let rings = |a: &TumorAnnotation| {
        std::iter::once(a.outer_ring.clone())
            .chain(a.holes.iter().cloned())
            .flatten()
            .collect::<Vec<_>>()
    };
    let exact = rings(&anns[0])
        .iter()
        .zip(rings(&scaled))
        .all(|(a, b)| b[0] == a[0] * 896.0 && b[1] == a[1] * 896.0);
    ensure!(exact, "rescaled coordinates are not exactly 896x");
    Ok(format!("1 annotation, area {} for {cells} cells, x896 exact", anns[0].area_px))
}

fn check_feature_collection(text: &str) -> Result<usize, String> {
    let gj = geojson::GeoJson::from_str(text).map_err(|e| e.to_string())?;
    let geojson::GeoJson::FeatureCollection(fc) = gj else {
        return Err("not a FeatureCollection".into());
    };
    for f in &fc.features {
        let geom = f.geometry.as_ref().ok_or("feature without geometry")?;
        let geojson::GeometryValue::Polygon { coordinates: rings } = &geom.value else {
            return Err("geometry is not a Polygon".into());
        };
        for ring in rings {
            ensure!(ring.len() >= 4, "ring with {} positions", ring.len());
            ensure!(ring.first() == ring.last(), "open ring");
        }
    }
    Ok(fc.features.len())
}

fn c6_geojson() -> Outcome {
    let ring_mask = BinaryMask::from_fn(20, 20, |c, r| {
        let inside = (3..17).contains(&c) && (3..17).contains(&r);
        let hole = (7..11).contains(&c) && (7..11).contains(&r);
        inside && !hole
    });
    let blobs = BinaryMask::from_fn(30, 12, |c, r| {
        (1..5).contains(&c) && (1..5).contains(&r) || (10..20).contains(&c) && (2..9).contains(&r) || c == 25 && r == 5
    });
    let mut docs = Vec::new();
    for (mask, ds) in [(disk_mask(8, 24), 1.0), (ring_mask, 2.0), (blobs, 4.0), (BinaryMask::from_fn(3, 3, |_, _| false), 1.0)] {
        let grid = uniform_grid(mask.cols(), mask.rows(), 0.7);
        let anns: Vec<TumorAnnotation> = extract_contours(&mask, &grid, 1)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|a| rescale_to_level0(a, 224, ds))
            .collect();
        docs.push(to_geojson(&anns, "slide").map_err(|e| e.to_string())?);
    }
    let mut features = 0;
    for doc in &docs {
        features += check_feature_collection(doc)?;
        let again = to_geojson(&from_geojson(doc).map_err(|e| e.to_string())?, "slide").map_err(|e| e.to_string())?;
        ensure!(&again == doc, "round trip changed bytes");
    }
    Ok(format!(
        "{} documents, {features} features valid and byte-stable; QuPath import is a manual check (README)",
        docs.len()
    ))
}

fn write_slide(dir: &Path, name: &str, spec: &SyntheticSlide) -> PathBuf {
    let path = dir.join(format!("{name}.tiff"));
    write_tiff_pyramid(&path, &spec.render(), &[]).unwrap();
    path
}

fn mask_cells(png: &Path, scale: u32) -> HashSet<(u32, u32)> {
    let img = image::open(png).unwrap().to_luma8();
    let mut cells = HashSet::new();
    for r in 0..img.height() / scale {
        for c in 0..img.width() / scale {
            if img.get_pixel(c * scale, r * scale)[0] > 0 {
                cells.insert((c, r));
            }
        }
    }
    cells
}

fn c7_end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let spec = SyntheticSlide::new(20, 20, TILE).with_tumor(TileRect::new(5, 5, 15, 15));
    let start = Instant::now();
    write_slide(dir.path(), "block", &spec);
    let table = dir.path().join("stub.csv");
    fs::write(&table, spec.stub_table("block", 0.9, 0.1)).map_err(|e| e.to_string())?;
    let cfg = PipelineConfig {
        classifier: Some(ClassifierSpec::Stub { path: table }),
        out_dir: dir.path().join("out"),
        ..PipelineConfig::default()
    };
    let list = dir.path().join("slides.txt");
    fs::write(&list, "block.tiff\n").map_err(|e| e.to_string())?;
    let summary = run_all(&list, &cfg, 0, 1, false).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure!(summary.succeeded(), "{summary:?}");
    let out = cfg.out_dir.join("block");
    let truth: HashSet<(u32, u32)> = spec.tumor_tiles().into_iter().collect();
    let predicted = mask_cells(&out.join(MASK_PNG), cfg.heatmap_scale);
    let iou = truth.intersection(&predicted).count() as f64 / truth.union(&predicted).count() as f64;
    let anns = from_geojson(&fs::read_to_string(out.join(GEOJSON)).unwrap()).map_err(|e| e.to_string())?;
    ensure!(!anns.is_empty(), "no annotation");
    ensure!(iou >= 0.9, "IoU {iou:.3}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("4480x4480 slide, IoU {iou:.3}, {} annotation(s), {elapsed:.2?}", anns.len()))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let entry = entry.unwrap();
        let p = entry.path();
        let name = entry.file_name().to_string_lossy().into_owned();
        if p.is_dir() {
            out.extend(tree(&p).into_iter().map(|(k, v)| (format!("{name}/{k}"), v)));
        } else if !name.starts_with("summary-") {
            out.insert(name, fs::read(&p).unwrap());
        }
    }
    out
}

fn mtimes(dir: &Path) -> BTreeMap<PathBuf, SystemTime> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(mtimes(&p));
        } else {
            out.insert(p.clone(), fs::metadata(&p).unwrap().modified().unwrap());
        }
    }
    out
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let mut lines = String::new();
    for i in 0..4u32 {
        let spec = SyntheticSlide::new(5, 4, TILE)
            .with_tumor(TileRect::new(1 + i % 2, 1, 3 + i % 2, 3))
            .with_seed(i);
        write_slide(d, &format!("slide{i}"), &spec);
        lines.push_str(&format!("slide{i}.tiff\n"));
    }
    let list = d.join("slides.txt");
    fs::write(&list, lines).unwrap();
    let weights = d.join("weights.json");
    fs::write(&weights, "[4.0, -2.0, 0.5, 0.0, -1.0, 2.0, -0.8]").unwrap();
    let config = |out: &str, batch: usize| {
        let mut cfg = PipelineConfig {
            classifier: Some(ClassifierSpec::Baseline { path: weights.clone() }),
            out_dir: d.join(out),
            ..PipelineConfig::default()
        };
        cfg.batch.batch_size = batch;
        cfg
    };

    let one = config("one", 375);
    ensure!(run_all(&list, &one, 0, 1, false).map_err(|e| e.to_string())?.succeeded(), "1-shard run failed");
    let four = config("four", 375);
    for shard in 0..4 {
        let s = run_all(&list, &four, shard, 4, false).map_err(|e| e.to_string())?;
        ensure!(s.done.len() == 1, "shard {shard} did {} slides", s.done.len());
    }
    let a = tree(&one.out_dir);
    ensure!(a == tree(&four.out_dir), "1-shard and 4-shard trees differ");

    let before = mtimes(&one.out_dir.join("slide0"));
    std::thread::sleep(Duration::from_millis(20));
    let again = run_all(&list, &one, 0, 1, false).map_err(|e| e.to_string())?;
    ensure!(again.skipped.len() == 4 && again.done.is_empty(), "rerun did work: {again:?}");
    ensure!(mtimes(&one.out_dir.join("slide0")) == before, "rerun touched outputs");

    let small = config("batch3", 3);
    run_all(&list, &small, 0, 1, false).map_err(|e| e.to_string())?;
    let b = tree(&small.out_dir);
    let csvs: Vec<&String> = a.keys().filter(|k| k.ends_with(SCORES_CSV)).collect();
    ensure!(csvs.len() == 4, "{} score files", csvs.len());
    for k in &csvs {
        ensure!(a[*k] == b[*k], "{k} differs between batch 375 and 3");
    }
    ensure!(a.keys().filter(|k| k.ends_with(DONE_MARKER)).count() == 4, "missing .done markers");
    Ok(format!("{} files identical across topologies, rerun no-op, batch 3 == 375", a.len()))
}

fn textured_tile(seed: u32) -> RgbImage {
    let profile = StainProfile::default_reference();
    RgbImage::from_fn(TILE, TILE, |x, y| {
        let coarse = hash01(x / 4, y / 4, seed);
        stain_pixel(&profile, [0.2 + 0.8 * coarse * hash01(x, y, seed + 1), 0.3 + 0.5 * hash01(x, y, seed + 2)])
    })
}

fn c9_qc_suite() -> Outcome {
    let cfg = QcConfig::default();
    let white = TileRecord::from_image(RgbImage::from_pixel(TILE, TILE, Rgb([255, 255, 255]))).unwrap();
    let report = qc_filter(&white, &cfg);
    ensure!(report.reject_reasons().contains(&RejectReason::LowTissue), "white tile: {report:?}");

    let mut min_gap = f64::INFINITY;
    for seed in 0..20 {
        let img = textured_tile(seed * 10);
        let blurred = imageops::blur(&img, 2.0);
        let sharp = blur_score(&TileRecord::from_image(img).unwrap());
        let soft = blur_score(&TileRecord::from_image(blurred).unwrap());
        ensure!(soft < sharp, "tile {seed}: blurred {soft} >= original {sharp}");
        min_gap = min_gap.min(sharp - soft);
    }

    let tissue = textured_tile(999);
    let composite = RgbImage::from_fn(TILE, TILE, |x, y| {
        if x < TILE / 2 { Rgb([255, 255, 255]) } else { *tissue.get_pixel(x, y) }
    });
    let tf_tissue = tissue_fraction(&TileRecord::from_image(tissue.clone()).unwrap(), &cfg);
    ensure!(tf_tissue == 1.0, "textured tile tissue fraction {tf_tissue}");
    let tf = tissue_fraction(&TileRecord::from_image(composite).unwrap(), &cfg);
    ensure!(tf == 0.5, "composite tissue fraction {tf}");
    Ok(format!("white -> LowTissue, 20/20 blurred copies lower (min gap {min_gap:.1}), composite 0.5"))
}

fn c10_balancer() -> Outcome {
    let mut entries = Vec::new();
    for (p, n) in [("pA", 80), ("pB", 70), ("pC", 60)] {
        for i in 0..n {
            for label in [0u8, 1] {
                entries.push(TileManifestEntry {
                    path: Some(format!("{p}/{label}/{i}.png")),
                    slide_id: None,
                    col: None,
                    row: None,
                    label,
                    tumor_type: "HCC".into(),
                    patient_id: Some(p.into()),
                });
            }
        }
    }
    let out = balance_by_patient(&entries, 200, 42).map_err(|e| e.to_string())?;
    let mut per: HashMap<(String, u8), usize> = HashMap::new();
    for e in &out {
        *per.entry((e.patient_id.clone().unwrap(), e.label)).or_default() += 1;
    }
    for label in [0u8, 1] {
        let mut q: Vec<usize> = per.iter().filter(|((_, l), _)| *l == label).map(|(_, n)| *n).collect();
        q.sort_unstable_by(|a, b| b.cmp(a));
        ensure!(q == [34, 33, 33], "class {label} quotas {q:?}");
    }
    let bytes = |v: &[TileManifestEntry]| {
        let mut buf = Vec::new();
        write_manifest(&mut buf, v).unwrap();
        buf
    };
    let again = balance_by_patient(&entries, 200, 42).map_err(|e| e.to_string())?;
    ensure!(bytes(&out) == bytes(&again), "same seed gave different bytes");
    Ok("100 per class, patient quotas {34,33,33}, same seed byte-identical".into())
}

fn c11_throughput() -> Outcome {
    let slide = SyntheticSlide::new(16, 16, TILE).with_tumor(TileRect::new(4, 4, 12, 12));
    let img = slide.render();
    let tiles: Vec<TileRecord> = (1..15u32)
        .flat_map(|r| (1..15u32).map(move |c| (c, r)))
        .map(|(c, r)| {
            TileRecord::from_image(imageops::crop_imm(&img, c * TILE, r * TILE, TILE, TILE).to_image()).unwrap()
        })
        .collect();
    let qc = QcConfig::default();
    let macenko = MacenkoConfig::default();
    let reference = StainProfile::default_reference();
    let source = estimate_stain_profile(&tiles[0], &macenko).map_err(|e| e.to_string())?;
    let round = || {
        let start = Instant::now();
        let done: usize = tiles
            .par_iter()
            .filter(|t| qc_filter(t, &qc).passed())
            .map(|t| normalize_tile(t, &source, &reference, &macenko).map(|_| 1).unwrap_or(0))
            .sum();
        (tiles.len() as f64 / start.elapsed().as_secs_f64(), done)
    };
    round();
    let mut rates: Vec<f64> = Vec::new();
    let mut done = 0;
    for _ in 0..5 {
        let (r, d) = round();
        rates.push(r);
        done = d;
    }
    rates.sort_by(f64::total_cmp);
    let (rate, median) = (rates[4], rates[2]);
    let line = format!(
        "best {rate:.0} tiles/s, median {median:.0} over 5 rounds of {} tiles ({done} normalized) on {} threads, target 500",
        tiles.len(),
        rayon::current_num_threads()
    );
    if rate >= 500.0 { Ok(line) } else { Err(line) }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        (1, "Macenko recovery", c1_macenko_recovery, true),
        (2, "Normalization idempotence", c2_self_normalization, true),
        (3, "AUC oracle equivalence", c3_auc_oracle, true),
        (4, "Table consistency", c4_table_consistency, true),
        (5, "Contour geometry", c5_geometry, true),
        (6, "GeoJSON validity", c6_geojson, true),
        (7, "End-to-end localization", c7_end_to_end, true),
        (8, "Determinism and sharding", c8_determinism, true),
        (9, "QC suite", c9_qc_suite, true),
        (10, "Balancer", c10_balancer, true),
        (11, "Throughput (soft)", c11_throughput, false),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    println!("acceptance criteria");
    for (id, name, check, gating) in criteria {
        let result = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|e| Err(format!("panicked: {:?}", e.downcast_ref::<String>().map(String::as_str).or(e.downcast_ref::<&str>().copied()))));
        let status = match (&result, gating) {
            (Ok(_), _) => "PASS",
            (Err(_), true) => {
                failed += 1;
                "FAIL"
            }
            (Err(_), false) => "MISS",
        };
        let detail = result.unwrap_or_else(|e| e);
        println!("[{status}] {id:>2}. {name}: {detail}");
    }
    let _ = panic::take_hook();
    println!("{} gating criteria failed", failed);
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
