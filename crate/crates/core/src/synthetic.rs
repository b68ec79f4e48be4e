//! Synthetic H&E-like slides with known ground truth, for tests and demos.

use std::fs::File;
use std::io::{self, BufWriter};
use std::path::Path;

use image::{imageops, Rgb, RgbImage};
use rayon::prelude::*;

use crate::stain::StainProfile;

/// Deterministic value in [0, 1) from pixel position and salt.
pub fn hash01(x: u32, y: u32, salt: u32) -> f64 {
    let mut h = x.wrapping_mul(0x9E37_79B1) ^ y.wrapping_mul(0x85EB_CA77) ^ salt.wrapping_mul(0xC2B2_AE3D);
    h ^= h >> 15;
    h = h.wrapping_mul(0x2C1B_3C6D);
    h ^= h >> 12;
    h = h.wrapping_mul(0x297A_2D39);
    h ^= h >> 15;
    f64::from(h % 10_000) / 10_000.0
}

/// Renders stain concentrations through Beer-Lambert with `io = 255`.
pub fn stain_pixel(profile: &StainProfile, c: [f64; 2]) -> Rgb<u8> {
    let od = profile.mix(c);
    Rgb(od.map(|v| (255.0 * 10f64.powf(-v)).round().clamp(0.0, 255.0) as u8))
}

/// Half-open tile rectangle `[col0, col1) x [row0, row1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRect {
    pub col0: u32,
    pub row0: u32,
    pub col1: u32,
    pub row1: u32,
}

impl TileRect {
    pub fn new(col0: u32, row0: u32, col1: u32, row1: u32) -> Self {
        Self { col0, row0, col1, row1 }
    }

    pub fn contains(&self, col: u32, row: u32) -> bool {
        (self.col0..self.col1).contains(&col) && (self.row0..self.row1).contains(&row)
    }

    pub fn tiles(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (self.row0..self.row1).flat_map(move |r| (self.col0..self.col1).map(move |c| (c, r)))
    }
}

/// White background, textured tissue inside `tissue`, and denser
/// hematoxylin inside `tumor`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSlide {
    pub cols: u32,
    pub rows: u32,
    pub tile_size: u32,
    pub tissue: TileRect,
    pub tumor: Option<TileRect>,
    pub seed: u32,
}

impl SyntheticSlide {
    /// `cols` x `rows` tiles, one-tile white margin, no tumor.
    pub fn new(cols: u32, rows: u32, tile_size: u32) -> Self {
        Self {
            cols,
            rows,
            tile_size,
            tissue: TileRect::new(1.min(cols), 1.min(rows), cols.saturating_sub(1), rows.saturating_sub(1)),
            tumor: None,
            seed: 0,
        }
    }

    pub fn with_tumor(mut self, rect: TileRect) -> Self {
        self.tumor = Some(rect);
        self
    }

    pub fn with_seed(mut self, seed: u32) -> Self {
        self.seed = seed;
        self
    }

    pub fn width(&self) -> u32 {
        self.cols * self.tile_size
    }

    pub fn height(&self) -> u32 {
        self.rows * self.tile_size
    }

    fn pixel(&self, profile: &StainProfile, x: u32, y: u32) -> Rgb<u8> {
        let (col, row) = (x / self.tile_size, y / self.tile_size);
        let salt = self.seed.wrapping_mul(4);
        if !self.tissue.contains(col, row) {
            let v = 250 + (hash01(x, y, salt + 3) * 6.0) as u8;
            return Rgb([v, v, v]);
        }
        let (h, e) = (hash01(x, y, salt + 1), hash01(x, y, salt + 2));
        let c = if self.tumor.is_some_and(|t| t.contains(col, row)) {
            [0.6 + 0.6 * h, 0.1 + 0.4 * e]
        } else {
            [0.1 + 0.5 * h, 0.2 + 0.7 * e]
        };
        stain_pixel(profile, c)
    }

    pub fn render(&self) -> RgbImage {
        let profile = StainProfile::default_reference();
        let (w, h) = (self.width(), self.height());
        let mut buf = vec![0u8; w as usize * h as usize * 3];
        buf.par_chunks_mut(w as usize * 3).enumerate().for_each(|(y, row)| {
            for (x, px) in row.chunks_exact_mut(3).enumerate() {
                px.copy_from_slice(&self.pixel(&profile, x as u32, y as u32).0);
            }
        });
        RgbImage::from_raw(w, h, buf).expect("buffer sized to image")
    }

    /// Tiles inside the tumor block.
    pub fn tumor_tiles(&self) -> Vec<(u32, u32)> {
        self.tumor.map(|t| t.tiles().collect()).unwrap_or_default()
    }

    /// Stub classifier table scoring the tumor block `p_tumor` and every
    /// other tile `p_other`.
    pub fn stub_table(&self, slide_id: &str, p_tumor: f64, p_other: f64) -> String {
        let mut out = String::from("slide_id,col,row,p_pos\n");
        for (c, r) in self.tumor_tiles() {
            out.push_str(&format!("{slide_id},{c},{r},{p_tumor}\n"));
        }
        out.push_str(&format!("default,,,{p_other}\n"));
        out
    }
}

/// Writes `level0` and its box-filtered reductions by each factor in
/// `downsamples` as pages of one RGB TIFF.
pub fn write_tiff_pyramid(path: &Path, level0: &RgbImage, downsamples: &[u32]) -> io::Result<()> {
    let to_io = |e: tiff::TiffError| io::Error::other(e.to_string());
    let mut enc = tiff::encoder::TiffEncoder::new(BufWriter::new(File::create(path)?)).map_err(to_io)?;
    enc.write_image::<tiff::encoder::colortype::RGB8>(level0.width(), level0.height(), level0.as_raw())
        .map_err(to_io)?;
    for &d in downsamples.iter().filter(|&&d| d > 1) {
        let (w, h) = (level0.width() / d, level0.height() / d);
        let page = imageops::resize(level0, w, h, imageops::FilterType::Triangle);
        enc.write_image::<tiff::encoder::colortype::RGB8>(w, h, page.as_raw())
            .map_err(to_io)?;
    }
    Ok(())
}
