use std::collections::HashSet;

use super::HeatmapError;
use crate::classifier::TileScore;
use crate::qc::QcRecord;

/// Tile-resolution tumor probabilities. `None` marks cells without tissue:
/// never scored, or rejected by QC.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrid {
    cols: u32,
    rows: u32,
    values: Vec<Option<f64>>,
    tile_size: u32,
    level_downsample: f64,
}

impl ProbabilityGrid {
    pub fn new(
        cols: u32,
        rows: u32,
        values: Vec<Option<f64>>,
        tile_size: u32,
        level_downsample: f64,
    ) -> Result<Self, HeatmapError> {
        if cols == 0 || rows == 0 {
            return Err(HeatmapError::InvalidGrid(format!("grid {cols}x{rows} is empty")));
        }
        if values.len() != cols as usize * rows as usize {
            return Err(HeatmapError::InvalidGrid(format!(
                "{} values for a {cols}x{rows} grid",
                values.len()
            )));
        }
        if tile_size == 0 || !(level_downsample >= 1.0) {
            return Err(HeatmapError::InvalidGrid(format!(
                "tile size {tile_size} / downsample {level_downsample}"
            )));
        }
        if let Some(v) = values.iter().flatten().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(HeatmapError::InvalidGrid(format!("value {v} outside [0, 1]")));
        }
        Ok(Self {
            cols,
            rows,
            values,
            tile_size,
            level_downsample,
        })
    }

    /// Row-major rows; unit tile size and downsample.
    pub fn from_rows(rows: &[Vec<Option<f64>>]) -> Result<Self, HeatmapError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HeatmapError::InvalidGrid("ragged rows".into()));
        }
        Self::new(cols as u32, rows.len() as u32, rows.concat(), 1, 1.0)
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    pub fn tile_size(&self) -> u32 {
        self.tile_size
    }

    pub fn level_downsample(&self) -> f64 {
        self.level_downsample
    }

    pub fn get(&self, row: u32, col: u32) -> Option<f64> {
        self.values[self.index(row, col)]
    }

    pub fn values(&self) -> &[Option<f64>] {
        &self.values
    }

    fn index(&self, row: u32, col: u32) -> usize {
        assert!(row < self.rows && col < self.cols, "cell ({row}, {col}) outside grid");
        row as usize * self.cols as usize + col as usize
    }

    fn with_values(&self, values: Vec<Option<f64>>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }
}

/// Places scores on the tile grid. Cells with no score, or whose QC record
/// did not pass, hold no tissue.
pub fn assemble_grid(
    scores: &[TileScore],
    qc: &[QcRecord],
    cols: u32,
    rows: u32,
    tile_size: u32,
    level_downsample: f64,
) -> Result<ProbabilityGrid, HeatmapError> {
    let mut grid = ProbabilityGrid::new(
        cols,
        rows,
        vec![None; cols as usize * rows as usize],
        tile_size,
        level_downsample,
    )?;
    let in_grid = |col: u32, row: u32| {
        if col < cols && row < rows {
            Ok(())
        } else {
            Err(HeatmapError::CoordOutOfGrid { col, row, cols, rows })
        }
    };
    let mut rejected = HashSet::new();
    for rec in qc {
        in_grid(rec.col, rec.row)?;
        if !rec.pass {
            rejected.insert((rec.col, rec.row));
        }
    }
    let mut seen = HashSet::new();
    for score in scores {
        let (col, row) = (score.coord.col, score.coord.row);
        in_grid(col, row)?;
        if !seen.insert((col, row)) {
            return Err(HeatmapError::DuplicateTile { col, row });
        }
        if !(0.0..=1.0).contains(&score.p_pos) {
            return Err(HeatmapError::InvalidGrid(format!(
                "score {} at ({col}, {row}) outside [0, 1]",
                score.p_pos
            )));
        }
        if !rejected.contains(&(col, row)) {
            let i = grid.index(row, col);
            grid.values[i] = Some(score.p_pos);
        }
    }
    Ok(grid)
}

/// Normalized Gaussian weights for offsets `-r..=r`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: i64) -> usize {
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn convolve_axis(data: &[f64], cols: usize, rows: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let off = k as i64 - radius;
                let (rr, cc) = if along_rows {
                    (r, reflect(c as i64 + off, cols as i64))
                } else {
                    (reflect(r as i64 + off, rows as i64), c)
                };
                acc += w * data[rr * cols + cc];
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

/// Separable Gaussian blur at grid resolution. No-tissue cells count as 0
/// and stay no-tissue.
pub fn gaussian_smooth(grid: &ProbabilityGrid, sigma: f64) -> Result<ProbabilityGrid, HeatmapError> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(HeatmapError::InvalidSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(grid.clone());
    }
    let (cols, rows) = (grid.cols as usize, grid.rows as usize);
    let kernel = gaussian_kernel(sigma);
    let data: Vec<f64> = grid.values.iter().map(|v| v.unwrap_or(0.0)).collect();
    let horizontal = convolve_axis(&data, cols, rows, &kernel, true);
    let both = convolve_axis(&horizontal, cols, rows, &kernel, false);
    let values = grid
        .values
        .iter()
        .zip(both)
        .map(|(orig, v)| orig.map(|_| v.clamp(0.0, 1.0)))
        .collect();
    Ok(grid.with_values(values))
}

/// Binary tumor mask on the tile grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    cols: u32,
    rows: u32,
    cells: Vec<bool>,
}

impl BinaryMask {
    pub fn new(cols: u32, rows: u32, cells: Vec<bool>) -> Result<Self, HeatmapError> {
        if cells.len() != cols as usize * rows as usize {
            return Err(HeatmapError::InvalidGrid(format!(
                "{} cells for a {cols}x{rows} mask",
                cells.len()
            )));
        }
        Ok(Self { cols, rows, cells })
    }

    pub fn from_fn(cols: u32, rows: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let cells = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| f(r, c))
            .collect();
        Self { cols, rows, cells }
    }

    pub fn cols(&self) -> u32 {
        self.cols
    }

    pub fn rows(&self) -> u32 {
        self.rows
    }

    /// Out-of-range cells read as false.
    pub fn get(&self, row: i64, col: i64) -> bool {
        row >= 0
            && col >= 0
            && row < i64::from(self.rows)
            && col < i64::from(self.cols)
            && self.cells[row as usize * self.cols as usize + col as usize]
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&b| b).count()
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// True where the cell holds tissue with value `>= t`.
pub fn threshold_mask(grid: &ProbabilityGrid, t: f64) -> Result<BinaryMask, HeatmapError> {
    if !(0.0..=1.0).contains(&t) {
        return Err(HeatmapError::InvalidThreshold(t));
    }
    let cells = grid.values.iter().map(|v| v.is_some_and(|p| p >= t)).collect();
    BinaryMask::new(grid.cols, grid.rows, cells)
}
