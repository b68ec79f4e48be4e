use std::fmt;
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, RgbImage};

use super::grid::{BinaryMask, ProbabilityGrid};
use super::HeatmapError;

/// Color of cells without tissue.
pub const NO_TISSUE_COLOR: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Colormap {
    /// Black, red, yellow, white.
    #[default]
    Hot,
    /// Blue, white, red.
    Bwr,
    Gray,
}

impl FromStr for Colormap {
    type Err = HeatmapError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hot" => Ok(Colormap::Hot),
            "bwr" => Ok(Colormap::Bwr),
            "gray" | "grey" => Ok(Colormap::Gray),
            other => Err(HeatmapError::UnknownColormap(other.to_string())),
        }
    }
}

impl fmt::Display for Colormap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Colormap::Hot => "hot",
            Colormap::Bwr => "bwr",
            Colormap::Gray => "gray",
        })
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Colormap {
    pub fn color(self, p: f64) -> [u8; 3] {
        let p = p.clamp(0.0, 1.0);
        match self {
            Colormap::Hot => [
                to_u8(p / 0.375),
                to_u8((p - 0.375) / 0.375),
                to_u8((p - 0.75) / 0.25),
            ],
            Colormap::Bwr => [
                to_u8(2.0 * p),
                to_u8(1.0 - (2.0 * p - 1.0).abs()),
                to_u8(2.0 - 2.0 * p),
            ],
            Colormap::Gray => [to_u8(p); 3],
        }
    }
}

/// One `scale`×`scale` block per grid cell.
pub fn render_heatmap(grid: &ProbabilityGrid, colormap: Colormap, scale: u32) -> RgbImage {
    let scale = scale.max(1);
    RgbImage::from_fn(grid.cols() * scale, grid.rows() * scale, |x, y| {
        Rgb(grid
            .get(y / scale, x / scale)
            .map_or(NO_TISSUE_COLOR, |p| colormap.color(p)))
    })
}

/// Tumor cells white, everything else black.
pub fn render_mask(mask: &BinaryMask, scale: u32) -> GrayImage {
    let scale = scale.max(1);
    GrayImage::from_fn(mask.cols() * scale, mask.rows() * scale, |x, y| {
        Luma([if mask.get(i64::from(y / scale), i64::from(x / scale)) { 255 } else { 0 }])
    })
}
