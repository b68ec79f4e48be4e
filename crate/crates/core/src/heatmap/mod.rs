//! Tile scores to slide-level heatmaps, tumor masks and GeoJSON contours.

mod contour;
mod geo;
mod grid;
mod render;

pub use contour::{extract_contours, rescale_to_level0, signed_area, Point, TumorAnnotation, DEFAULT_MIN_AREA};
pub use geo::{from_geojson, to_geojson};
pub use grid::{
    assemble_grid, gaussian_kernel, gaussian_smooth, threshold_mask, BinaryMask, ProbabilityGrid,
    DEFAULT_THRESHOLD,
};
pub use render::{render_heatmap, render_mask, Colormap, NO_TISSUE_COLOR};

pub const DEFAULT_SIGMA: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum HeatmapError {
    #[error("tile ({col}, {row}) scored twice")]
    DuplicateTile { col: u32, row: u32 },
    #[error("tile ({col}, {row}) outside {cols}x{rows} grid")]
    CoordOutOfGrid { col: u32, row: u32, cols: u32, rows: u32 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("sigma must be finite and >= 0, got {0}")]
    InvalidSigma(f64),
    #[error("threshold must lie in [0, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("invalid ring: {0}")]
    InvalidRing(String),
    #[error("unknown colormap {0:?}; expected hot, bwr or gray")]
    UnknownColormap(String),
    #[error("GeoJSON: {0}")]
    Json(#[from] serde_json::Error),
}
