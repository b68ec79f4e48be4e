//! Per-tile quality control: tissue fraction, blur (variance of Laplacian)
//! and blood-clot (red hue fraction) gates.

use std::fmt;
use std::io;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::slide::TileRecord;

#[derive(Debug, thiserror::Error)]
pub enum QcError {
    #[error("invalid QC configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown reject reason {0:?}")]
    UnknownReason(String),
    #[error("QC report csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QcConfig {
    /// Tiles must have strictly more tissue than this fraction.
    pub min_tissue_fraction: f64,
    /// A pixel is background when its HSV value exceeds this...
    pub background_value_min: f64,
    /// ...and its HSV saturation is below this.
    pub background_saturation_max: f64,
    /// Laplacian variance on the 0-255 gray scale; lower scores are blurred.
    pub min_blur_score: f64,
    pub max_blood_fraction: f64,
    /// Red hue window in degrees; wraps through 0 when `blood_hue_low > blood_hue_high`.
    pub blood_hue_low: f64,
    pub blood_hue_high: f64,
    pub blood_min_saturation: f64,
    pub blood_min_value: f64,
}

impl Default for QcConfig {
    fn default() -> Self {
        Self {
            min_tissue_fraction: 0.70,
            background_value_min: 0.90,
            background_saturation_max: 0.07,
            min_blur_score: 50.0,
            max_blood_fraction: 0.30,
            blood_hue_low: 340.0,
            blood_hue_high: 20.0,
            blood_min_saturation: 0.50,
            blood_min_value: 0.25,
        }
    }
}

impl QcConfig {
    pub fn validate(&self) -> Result<(), QcError> {
        let unit = [
            ("min_tissue_fraction", self.min_tissue_fraction),
            ("background_value_min", self.background_value_min),
            ("background_saturation_max", self.background_saturation_max),
            ("max_blood_fraction", self.max_blood_fraction),
            ("blood_min_saturation", self.blood_min_saturation),
            ("blood_min_value", self.blood_min_value),
        ];
        for (name, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(QcError::InvalidConfig(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.min_blur_score >= 0.0) {
            return Err(QcError::InvalidConfig(format!(
                "min_blur_score = {} must be >= 0",
                self.min_blur_score
            )));
        }
        for (name, v) in [
            ("blood_hue_low", self.blood_hue_low),
            ("blood_hue_high", self.blood_hue_high),
        ] {
            if !(0.0..=360.0).contains(&v) {
                return Err(QcError::InvalidConfig(format!("{name} = {v} is outside [0, 360]")));
            }
        }
        Ok(())
    }

    fn in_blood_hue(&self, hue: f64) -> bool {
        if self.blood_hue_low <= self.blood_hue_high {
            hue >= self.blood_hue_low && hue <= self.blood_hue_high
        } else {
            hue >= self.blood_hue_low || hue <= self.blood_hue_high
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RejectReason {
    LowTissue,
    Blurred,
    BloodClot,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::LowTissue => "LowTissue",
            RejectReason::Blurred => "Blurred",
            RejectReason::BloodClot => "BloodClot",
        })
    }
}

impl FromStr for RejectReason {
    type Err = QcError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LowTissue" => Ok(RejectReason::LowTissue),
            "Blurred" => Ok(RejectReason::Blurred),
            "BloodClot" => Ok(RejectReason::BloodClot),
            other => Err(QcError::UnknownReason(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QcReport {
    pub tissue_fraction: f64,
    pub blur_score: f64,
    pub blood_fraction: f64,
    reject_reasons: Vec<RejectReason>,
}

impl QcReport {
    /// Applies the thresholds of `cfg` to already measured statistics.
    pub fn from_measurements(
        tissue_fraction: f64,
        blur_score: f64,
        blood_fraction: f64,
        cfg: &QcConfig,
    ) -> Self {
        let mut reject_reasons = Vec::new();
        if !(tissue_fraction > cfg.min_tissue_fraction) {
            reject_reasons.push(RejectReason::LowTissue);
        }
        if !(blur_score >= cfg.min_blur_score) {
            reject_reasons.push(RejectReason::Blurred);
        }
        if !(blood_fraction <= cfg.max_blood_fraction) {
            reject_reasons.push(RejectReason::BloodClot);
        }
        Self {
            tissue_fraction,
            blur_score,
            blood_fraction,
            reject_reasons,
        }
    }

    pub fn passed(&self) -> bool {
        self.reject_reasons.is_empty()
    }

    pub fn reject_reasons(&self) -> &[RejectReason] {
        &self.reject_reasons
    }
}

/// HSV saturation and value in [0, 1], hue in degrees [0, 360).
#[inline]
fn hsv(r: u8, g: u8, b: u8) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let value = f64::from(max) / 255.0;
    if max == 0 {
        return (0.0, 0.0, 0.0);
    }
    let delta = f64::from(max - min);
    let saturation = delta / f64::from(max);
    if delta == 0.0 {
        return (0.0, saturation, value);
    }
    let (rf, gf, bf) = (f64::from(r), f64::from(g), f64::from(b));
    let hue = if max == r {
        60.0 * ((gf - bf) / delta)
    } else if max == g {
        60.0 * ((bf - rf) / delta + 2.0)
    } else {
        60.0 * ((rf - gf) / delta + 4.0)
    };
    (if hue < 0.0 { hue + 360.0 } else { hue }, saturation, value)
}

fn pixel_fraction(image: &RgbImage, mut keep: impl FnMut(u8, u8, u8) -> bool) -> f64 {
    let raw = image.as_raw();
    let n = raw.len() / 3;
    if n == 0 {
        return 0.0;
    }
    let count = raw
        .chunks_exact(3)
        .filter(|p| keep(p[0], p[1], p[2]))
        .count();
    count as f64 / n as f64
}

fn is_tissue(s: f64, v: f64, cfg: &QcConfig) -> bool {
    !(v > cfg.background_value_min && s < cfg.background_saturation_max)
}

fn is_blood(h: f64, s: f64, v: f64, cfg: &QcConfig) -> bool {
    s > 0.0 && s >= cfg.blood_min_saturation && v >= cfg.blood_min_value && cfg.in_blood_hue(h)
}

pub fn tissue_fraction(tile: &TileRecord, cfg: &QcConfig) -> f64 {
    pixel_fraction(tile.pixels(), |r, g, b| {
        let (_, s, v) = hsv(r, g, b);
        is_tissue(s, v, cfg)
    })
}

pub fn blood_fraction(tile: &TileRecord, cfg: &QcConfig) -> f64 {
    pixel_fraction(tile.pixels(), |r, g, b| {
        let (h, s, v) = hsv(r, g, b);
        is_blood(h, s, v, cfg)
    })
}

/// Tissue and blood fractions from one HSV pass.
fn color_fractions(image: &RgbImage, cfg: &QcConfig) -> (f64, f64) {
    let n = image.as_raw().len() / 3;
    if n == 0 {
        return (0.0, 0.0);
    }
    let (mut tissue, mut blood) = (0usize, 0usize);
    for p in image.as_raw().chunks_exact(3) {
        let (h, s, v) = hsv(p[0], p[1], p[2]);
        tissue += usize::from(is_tissue(s, v, cfg));
        blood += usize::from(is_blood(h, s, v, cfg));
    }
    (tissue as f64 / n as f64, blood as f64 / n as f64)
}

/// Luma (0.299 R + 0.587 G + 0.114 B) on the 0-255 scale, row-major.
pub fn grayscale(image: &RgbImage) -> Vec<f64> {
    image
        .as_raw()
        .chunks_exact(3)
        .map(|p| 0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2]))
        .collect()
}

/// Population variance of the 4-neighbour Laplacian over interior pixels.
pub fn laplacian_variance(gray: &[f64], width: usize, height: usize) -> f64 {
    if width < 3 || height < 3 {
        return 0.0;
    }
    let mut responses = Vec::with_capacity((width - 2) * (height - 2));
    for y in 1..height - 1 {
        let row = y * width;
        for x in 1..width - 1 {
            let i = row + x;
            responses.push(gray[i - width] + gray[i + width] + gray[i - 1] + gray[i + 1] - 4.0 * gray[i]);
        }
    }
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    responses.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

pub fn blur_score(tile: &TileRecord) -> f64 {
    let image = tile.pixels();
    let gray = grayscale(image);
    laplacian_variance(&gray, image.width() as usize, image.height() as usize)
}

pub fn qc_filter(tile: &TileRecord, cfg: &QcConfig) -> QcReport {
    let (tissue, blood) = color_fractions(tile.pixels(), cfg);
    QcReport::from_measurements(tissue, blur_score(tile), blood, cfg)
}

/// One row of the QC report CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRecord {
    pub slide_id: String,
    pub col: u32,
    pub row: u32,
    pub tissue_fraction: f64,
    pub blur_score: f64,
    pub blood_fraction: f64,
    pub pass: bool,
    pub reject_reasons: String,
}

impl QcRecord {
    pub fn new(slide_id: &str, col: u32, row: u32, report: &QcReport) -> Self {
        Self {
            slide_id: slide_id.to_string(),
            col,
            row,
            tissue_fraction: report.tissue_fraction,
            blur_score: report.blur_score,
            blood_fraction: report.blood_fraction,
            pass: report.passed(),
            reject_reasons: report
                .reject_reasons
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        }
    }

    pub fn reasons(&self) -> Result<Vec<RejectReason>, QcError> {
        self.reject_reasons
            .split(';')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect()
    }
}

pub fn write_qc_csv<W: io::Write>(writer: W, records: &[QcRecord]) -> Result<(), QcError> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record([
            "slide_id",
            "col",
            "row",
            "tissue_fraction",
            "blur_score",
            "blood_fraction",
            "pass",
            "reject_reasons",
        ])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_qc_csv<R: io::Read>(reader: R) -> Result<Vec<QcRecord>, QcError> {
    let mut r = csv::Reader::from_reader(reader);
    let records = r.deserialize().collect::<Result<Vec<QcRecord>, _>>()?;
    Ok(records)
}
