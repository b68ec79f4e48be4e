//! Macenko stain estimation and normalization in optical-density space.
//!
//! Optical density uses base-10 logarithms with the intensity clamped at 1,
//! `OD = -log10(max(I, 1) / io)`. A profile holds two unit OD columns
//! (hematoxylin first, then eosin) and the 99th-percentile concentration of
//! each stain on the tissue it was estimated from.

use std::path::Path;

use image::RgbImage;
use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::slide::TileRecord;

/// Unit-norm tolerance for stain columns.
const UNIT_TOLERANCE: f64 = 1e-9;
/// Extreme directions closer than this (degrees) are one stain.
const MIN_STAIN_SEPARATION_DEG: f64 = 1.0;
const CONCENTRATION_PERCENTILE: f64 = 99.0;

#[derive(Debug, thiserror::Error)]
pub enum StainError {
    #[error("only {kept} pixels above the optical density threshold, need {required}")]
    InsufficientTissue { kept: usize, required: usize },
    #[error("stain directions are {angle_deg:.3} degrees apart; tile holds a single stain")]
    DegenerateStains { angle_deg: f64 },
    #[error("stain matrix columns are linearly dependent")]
    SingularStainMatrix,
    #[error("invalid stain profile: {0}")]
    InvalidProfile(String),
    #[error("invalid Macenko configuration: {0}")]
    InvalidConfig(String),
    #[error("stain profile json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("stain profile file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MacenkoConfig {
    /// Pixels whose OD norm does not exceed this are background.
    pub od_threshold: f64,
    /// Percentile (and its complement) of the angle distribution taken as
    /// the extreme stain directions.
    pub angle_percentile: f64,
    /// Incident light intensity.
    pub io: f64,
    pub min_valid_pixels: usize,
}

impl Default for MacenkoConfig {
    fn default() -> Self {
        Self {
            od_threshold: 0.15,
            angle_percentile: 1.0,
            io: 255.0,
            min_valid_pixels: 100,
        }
    }
}

impl MacenkoConfig {
    pub fn validate(&self) -> Result<(), StainError> {
        if !(self.angle_percentile > 0.0 && self.angle_percentile < 50.0) {
            return Err(StainError::InvalidConfig(format!(
                "angle_percentile {} must be in (0, 50)",
                self.angle_percentile
            )));
        }
        if !(self.od_threshold > 0.0) {
            return Err(StainError::InvalidConfig(format!(
                "od_threshold {} must be > 0",
                self.od_threshold
            )));
        }
        if !(self.io >= 1.0) {
            return Err(StainError::InvalidConfig(format!("io {} must be >= 1", self.io)));
        }
        Ok(())
    }
}

/// Two-stain OD matrix plus per-stain concentration maxima.
#[derive(Debug, Clone, PartialEq)]
pub struct StainProfile {
    hematoxylin: [f64; 3],
    eosin: [f64; 3],
    max_concentration: [f64; 2],
}

/// On-disk form: `stain_matrix` is row-major 3x2 (rows R, G, B; columns H, E).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StainProfileFile {
    stain_matrix: [[f64; 2]; 3],
    max_concentration: [f64; 2],
}

fn norm(v: &[f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Angle between two vectors in degrees.
pub fn angle_deg(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let c = (dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

impl StainProfile {
    /// Validating constructor; columns must already be unit norm.
    pub fn new(
        hematoxylin: [f64; 3],
        eosin: [f64; 3],
        max_concentration: [f64; 2],
    ) -> Result<Self, StainError> {
        for (name, col) in [("hematoxylin", &hematoxylin), ("eosin", &eosin)] {
            if col.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
                return Err(StainError::InvalidProfile(format!(
                    "{name} column {col:?} has a negative or non-finite component"
                )));
            }
            if (norm(col) - 1.0).abs() > UNIT_TOLERANCE {
                return Err(StainError::InvalidProfile(format!(
                    "{name} column {col:?} is not unit norm"
                )));
            }
        }
        if hematoxylin[2] < eosin[2] {
            return Err(StainError::InvalidProfile(
                "hematoxylin must be the column with the larger blue OD component".into(),
            ));
        }
        if max_concentration.iter().any(|&c| !(c > 0.0) || !c.is_finite()) {
            return Err(StainError::InvalidProfile(format!(
                "max_concentration {max_concentration:?} must be positive"
            )));
        }
        Ok(Self {
            hematoxylin,
            eosin,
            max_concentration,
        })
    }

    /// Normalizes both columns before validating.
    pub fn from_unnormalized(
        hematoxylin: [f64; 3],
        eosin: [f64; 3],
        max_concentration: [f64; 2],
    ) -> Result<Self, StainError> {
        let unit = |v: [f64; 3]| -> Result<[f64; 3], StainError> {
            let n = norm(&v);
            if !(n > 0.0) || !n.is_finite() {
                return Err(StainError::InvalidProfile(format!("zero stain column {v:?}")));
            }
            Ok(v.map(|x| x / n))
        };
        Self::new(unit(hematoxylin)?, unit(eosin)?, max_concentration)
    }

    /// Ruifrok-Johnston H&E optical densities with commonly used
    /// concentration maxima. Replaceable via a profile file.
    pub fn default_reference() -> Self {
        Self::from_unnormalized([0.650, 0.704, 0.286], [0.072, 0.990, 0.105], [1.9705, 1.0308])
            .expect("built-in reference profile is valid")
    }

    pub fn hematoxylin(&self) -> [f64; 3] {
        self.hematoxylin
    }

    pub fn eosin(&self) -> [f64; 3] {
        self.eosin
    }

    pub fn max_concentration(&self) -> [f64; 2] {
        self.max_concentration
    }

    /// Row-major 3x2 matrix, columns (H, E).
    pub fn stain_matrix(&self) -> [[f64; 2]; 3] {
        [
            [self.hematoxylin[0], self.eosin[0]],
            [self.hematoxylin[1], self.eosin[1]],
            [self.hematoxylin[2], self.eosin[2]],
        ]
    }

    /// OD of a concentration pair.
    pub fn mix(&self, c: [f64; 2]) -> [f64; 3] {
        [
            self.hematoxylin[0] * c[0] + self.eosin[0] * c[1],
            self.hematoxylin[1] * c[0] + self.eosin[1] * c[1],
            self.hematoxylin[2] * c[0] + self.eosin[2] * c[1],
        ]
    }

    pub fn to_json(&self) -> String {
        let file = StainProfileFile {
            stain_matrix: self.stain_matrix(),
            max_concentration: self.max_concentration,
        };
        serde_json::to_string_pretty(&file).expect("profile serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, StainError> {
        let file: StainProfileFile = serde_json::from_str(text)?;
        let m = file.stain_matrix;
        Self::from_unnormalized(
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            file.max_concentration,
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, StainError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| StainError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    fn pseudo_inverse(&self) -> Result<[[f64; 3]; 2], StainError> {
        let (h, e) = (&self.hematoxylin, &self.eosin);
        let (hh, he, ee) = (dot(h, h), dot(h, e), dot(e, e));
        let det = hh * ee - he * he;
        if !(det > 1e-12 * hh * ee) {
            return Err(StainError::SingularStainMatrix);
        }
        let (i00, i01, i11) = (ee / det, -he / det, hh / det);
        let mut p = [[0.0; 3]; 2];
        for k in 0..3 {
            p[0][k] = i00 * h[k] + i01 * e[k];
            p[1][k] = i01 * h[k] + i11 * e[k];
        }
        Ok(p)
    }
}

/// Per-intensity OD lookup table for 8-bit input.
struct OdTable([f64; 256]);

impl OdTable {
    fn new(io: f64) -> Self {
        let mut t = [0.0; 256];
        for (i, v) in t.iter_mut().enumerate() {
            let intensity = (i as f64).max(1.0);
            *v = (-(intensity / io).log10()).max(0.0);
        }
        Self(t)
    }

    #[inline]
    fn od(&self, p: &[u8]) -> [f64; 3] {
        [self.0[p[0] as usize], self.0[p[1] as usize], self.0[p[2] as usize]]
    }
}

/// Optical density of every pixel, row-major.
pub fn rgb_to_od(pixels: &RgbImage, io: f64) -> Vec<[f64; 3]> {
    let table = OdTable::new(io);
    pixels.as_raw().chunks_exact(3).map(|p| table.od(p)).collect()
}

/// Linear-interpolated percentile of a sorted slice (numpy's default rule).
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

fn percentile(mut values: Vec<f64>, q: f64) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    percentile_sorted(&values, q)
}

/// Estimates a profile from one tile.
pub fn estimate_stain_profile(
    tile: &TileRecord,
    cfg: &MacenkoConfig,
) -> Result<StainProfile, StainError> {
    estimate_from_pixels(tile.pixels().as_raw().chunks_exact(3), cfg)
}

/// Estimates one profile from the pooled pixels of several tiles.
pub fn estimate_stain_profile_pooled(
    tiles: &[TileRecord],
    cfg: &MacenkoConfig,
) -> Result<StainProfile, StainError> {
    estimate_from_pixels(
        tiles.iter().flat_map(|t| t.pixels().as_raw().chunks_exact(3)),
        cfg,
    )
}

fn estimate_from_pixels<'a>(
    pixels: impl Iterator<Item = &'a [u8]>,
    cfg: &MacenkoConfig,
) -> Result<StainProfile, StainError> {
    cfg.validate()?;
    let table = OdTable::new(cfg.io);
    let threshold_sq = cfg.od_threshold * cfg.od_threshold;
    let tissue: Vec<[f64; 3]> = pixels
        .map(|p| table.od(p))
        .filter(|od| dot(od, od) > threshold_sq)
        .collect();
    let required = cfg.min_valid_pixels.max(2);
    if tissue.len() < required {
        return Err(StainError::InsufficientTissue {
            kept: tissue.len(),
            required,
        });
    }

    let n = tissue.len() as f64;
    let mut mean = [0.0; 3];
    for od in &tissue {
        for k in 0..3 {
            mean[k] += od[k];
        }
    }
    mean = mean.map(|m| m / n);
    let mut cov = Matrix3::<f64>::zeros();
    for od in &tissue {
        let d = Vector3::new(od[0] - mean[0], od[1] - mean[1], od[2] - mean[2]);
        cov += d * d.transpose();
    }
    cov /= n - 1.0;

    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || !(l2 > 1e-12 * l1) {
        return Err(StainError::DegenerateStains { angle_deg: 0.0 });
    }
    let col = |i: usize| -> [f64; 3] {
        let c = eig.eigenvectors.column(order[i]);
        [c[0], c[1], c[2]]
    };
    let mut e1 = col(0);
    let e2 = col(1);
    if dot(&e1, &mean) < 0.0 {
        e1 = e1.map(|v| -v);
    }

    let angles: Vec<f64> = tissue
        .iter()
        .map(|od| dot(od, &e2).atan2(dot(od, &e1)))
        .collect();
    let mut sorted = angles;
    sorted.sort_unstable_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, cfg.angle_percentile);
    let hi = percentile_sorted(&sorted, 100.0 - cfg.angle_percentile);

    let direction = |phi: f64| -> Result<[f64; 3], StainError> {
        let (s, c) = phi.sin_cos();
        let v = [0, 1, 2].map(|k| (e1[k] * c + e2[k] * s).max(0.0));
        let n = norm(&v);
        if !(n > 0.0) {
            return Err(StainError::DegenerateStains { angle_deg: 0.0 });
        }
        Ok(v.map(|x| x / n))
    };
    let v_lo = direction(lo)?;
    let v_hi = direction(hi)?;
    let separation = angle_deg(&v_lo, &v_hi);
    if !(separation >= MIN_STAIN_SEPARATION_DEG) {
        return Err(StainError::DegenerateStains {
            angle_deg: separation,
        });
    }
    // Hematoxylin carries the larger blue OD; a tie keeps the first column.
    let (h, e) = if v_lo[2] >= v_hi[2] {
        (v_lo, v_hi)
    } else {
        (v_hi, v_lo)
    };

    // Provisional maxima only serve to build a solvable matrix.
    let provisional = StainProfile {
        hematoxylin: h,
        eosin: e,
        max_concentration: [1.0, 1.0],
    };
    let conc = solve_concentrations(&tissue, &provisional)?;
    let max_h = percentile(conc.iter().map(|c| c[0]).collect(), CONCENTRATION_PERCENTILE);
    let max_e = percentile(conc.iter().map(|c| c[1]).collect(), CONCENTRATION_PERCENTILE);
    if !(max_h > 0.0 && max_e > 0.0) {
        return Err(StainError::DegenerateStains {
            angle_deg: separation,
        });
    }
    StainProfile::new(h, e, [max_h, max_e])
}

/// Least-squares concentrations via the pseudo-inverse, clamped at zero.
pub fn solve_concentrations(
    od_pixels: &[[f64; 3]],
    profile: &StainProfile,
) -> Result<Vec<[f64; 2]>, StainError> {
    let p = profile.pseudo_inverse()?;
    Ok(od_pixels
        .iter()
        .map(|od| [dot(&p[0], od).max(0.0), dot(&p[1], od).max(0.0)])
        .collect())
}

/// Inverse of [`OdTable`]: `round(io * 10^-od)` clamped to 0..=255.
/// `bounds[k]` is the largest OD that still yields intensity `k + 1`;
/// `start` indexes them by OD bucket so a lookup scans only a few bounds.
struct IntensityTable {
    bounds: [f64; 255],
    start: Vec<u8>,
}

const OD_BUCKET: f64 = 1e-3;

impl IntensityTable {
    fn new(io: f64) -> Self {
        let mut bounds = [0.0; 255];
        for (k, v) in bounds.iter_mut().enumerate() {
            *v = (io / (k as f64 + 0.5)).log10();
        }
        let buckets = (bounds[0].max(0.0) / OD_BUCKET) as usize + 2;
        let start = (0..buckets)
            .map(|b| {
                let top = (b + 1) as f64 * OD_BUCKET;
                bounds.partition_point(|&x| x >= top) as u8
            })
            .collect();
        Self { bounds, start }
    }

    #[inline]
    fn intensity(&self, od: f64) -> u8 {
        let b = (od.max(0.0) / OD_BUCKET) as usize;
        let Some(&lo) = self.start.get(b) else {
            return 0;
        };
        let mut k = lo as usize;
        while k < 255 && od <= self.bounds[k] {
            k += 1;
        }
        k as u8
    }
}

/// Re-renders a tile: concentrations against `source`, scaled per stain,
/// then mixed with `target` columns.
fn remix(
    tile: &TileRecord,
    source: &StainProfile,
    target: &StainProfile,
    scale: [f64; 2],
    io: f64,
) -> Result<TileRecord, StainError> {
    let p = source.pseudo_inverse()?;
    let table = OdTable::new(io);
    let back = IntensityTable::new(io);
    let image = tile.pixels();
    let mut out = Vec::with_capacity(image.as_raw().len());
    for px in image.as_raw().chunks_exact(3) {
        let od = table.od(px);
        let c = [
            dot(&p[0], &od).max(0.0) * scale[0],
            dot(&p[1], &od).max(0.0) * scale[1],
        ];
        let mixed = target.mix(c);
        out.extend(mixed.map(|v| back.intensity(v)));
    }
    let pixels = RgbImage::from_raw(image.width(), image.height(), out)
        .expect("output buffer matches input dimensions");
    Ok(tile
        .with_pixels(pixels)
        .expect("output dimensions match input"))
}

/// Maps a tile's stains onto the reference profile.
pub fn normalize_tile(
    tile: &TileRecord,
    source: &StainProfile,
    reference: &StainProfile,
    cfg: &MacenkoConfig,
) -> Result<TileRecord, StainError> {
    let scale = [
        reference.max_concentration[0] / source.max_concentration[0],
        reference.max_concentration[1] / source.max_concentration[1],
    ];
    remix(tile, source, reference, scale, cfg.io)
}

/// Seeded per-stain draws from `[1 - jitter, 1 + jitter]`.
pub fn perturbation_factors(seed: u64, jitter: f64) -> [f64; 2] {
    if jitter == 0.0 {
        return [1.0, 1.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo = (1.0 - jitter).max(0.0);
    let hi = 1.0 + jitter;
    [rng.random_range(lo..=hi), rng.random_range(lo..=hi)]
}

/// Stain augmentation: scales each stain's concentrations by a seeded random factor.
pub fn perturb_stains(
    tile: &TileRecord,
    profile: &StainProfile,
    seed: u64,
    jitter: f64,
    cfg: &MacenkoConfig,
) -> Result<TileRecord, StainError> {
    if !(jitter >= 0.0) {
        return Err(StainError::InvalidConfig(format!("jitter {jitter} must be >= 0")));
    }
    remix(tile, profile, profile, perturbation_factors(seed, jitter), cfg.io)
}
