//! Slide access: leveled RGB pyramids, the non-overlapping tile grid and
//! byte-exact tile extraction.
//!
//! Supported inputs are PNG (one level) and 8-bit RGB TIFF. A multi-page TIFF
//! is read as a pyramid: pages are ordered by descending pixel area and each
//! page's downsample is the ratio of the level-0 width to its own width.
//!
//! Level pixels are decoded lazily on first access and shared read-only
//! between workers afterwards.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use image::{ImageFormat, RgbImage};

/// Tile edge length used throughout the pipeline unless configured otherwise.
pub const DEFAULT_TILE_SIZE: u32 = 224;

/// Relative tolerance between width and height downsample ratios of a level.
const DOWNSAMPLE_AGREEMENT: f64 = 0.01;

#[derive(Debug, Clone, thiserror::Error)]
pub enum SlideError {
    #[error("unsupported slide format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt slide image: {0}")]
    CorruptImage(String),
    #[error("slide image has zero area")]
    EmptyImage,
    #[error("level {level} does not exist (slide has {count} levels)")]
    NoSuchLevel { level: usize, count: usize },
    #[error("level {level} ({width}x{height}) is smaller than one {tile_size}px tile")]
    NoTiles {
        level: usize,
        width: u32,
        height: u32,
        tile_size: u32,
    },
    #[error("tile size must be at least 1")]
    InvalidTileSize,
    #[error("tile (col {col}, row {row}) lies outside level {level}")]
    OutOfBounds { col: u32, row: u32, level: usize },
    #[error("tile pixels are {width}x{height}, expected {expected}x{expected}")]
    TileShape {
        width: u32,
        height: u32,
        expected: u32,
    },
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// Geometry of one pyramid level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelInfo {
    pub width: u32,
    pub height: u32,
    /// Level-0 width divided by this level's width; exactly 1 for level 0.
    pub downsample: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Container {
    Png,
    Tiff,
}

#[derive(Debug)]
enum Backing {
    Memory,
    File {
        path: PathBuf,
        container: Container,
        /// Source page index of each level (levels are area-sorted).
        pages: Vec<usize>,
    },
}

/// A multi-level 8-bit RGB image pyramid.
#[derive(Debug)]
pub struct SlideSource {
    slide_id: String,
    levels: Vec<LevelInfo>,
    pixels: Vec<OnceLock<Result<RgbImage, SlideError>>>,
    backing: Backing,
}

impl SlideSource {
    /// Builds a single-level slide from an in-memory image.
    pub fn from_image(slide_id: impl Into<String>, image: RgbImage) -> Result<Self, SlideError> {
        Self::from_levels(slide_id, vec![image])
    }

    /// Builds a pyramid from in-memory levels. Levels are reordered by
    /// descending area, like pages of a pyramidal TIFF.
    pub fn from_levels(
        slide_id: impl Into<String>,
        mut images: Vec<RgbImage>,
    ) -> Result<Self, SlideError> {
        if images.is_empty() {
            return Err(SlideError::EmptyImage);
        }
        images.sort_by_key(|im| std::cmp::Reverse(u64::from(im.width()) * u64::from(im.height())));
        let dims: Vec<(u32, u32)> = images.iter().map(|im| im.dimensions()).collect();
        let levels = level_infos(&dims)?;
        let pixels = images
            .into_iter()
            .map(|im| {
                let cell = OnceLock::new();
                let _ = cell.set(Ok(im));
                cell
            })
            .collect();
        Ok(Self {
            slide_id: slide_id.into(),
            levels,
            pixels,
            backing: Backing::Memory,
        })
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn levels(&self) -> &[LevelInfo] {
        &self.levels
    }

    pub fn level(&self, level: usize) -> Result<LevelInfo, SlideError> {
        self.levels.get(level).copied().ok_or(SlideError::NoSuchLevel {
            level,
            count: self.levels.len(),
        })
    }

    /// Decoded pixels of a level. The first call decodes; later calls share the result.
    pub fn level_image(&self, level: usize) -> Result<&RgbImage, SlideError> {
        self.level(level)?;
        let cell = &self.pixels[level];
        let decoded = cell.get_or_init(|| self.decode_level(level));
        decoded.as_ref().map_err(Clone::clone)
    }

    /// Copies a rectangular region of a level. The region must lie inside the level.
    pub fn read_region(
        &self,
        level: usize,
        x: u32,
        y: u32,
        width: u32,
        height: u32,
    ) -> Result<RgbImage, SlideError> {
        let info = self.level(level)?;
        let fits = u64::from(x) + u64::from(width) <= u64::from(info.width)
            && u64::from(y) + u64::from(height) <= u64::from(info.height);
        if !fits {
            return Err(SlideError::OutOfBounds {
                col: x,
                row: y,
                level,
            });
        }
        let image = self.level_image(level)?;
        Ok(image::imageops::crop_imm(image, x, y, width, height).to_image())
    }

    fn decode_level(&self, level: usize) -> Result<RgbImage, SlideError> {
        let Backing::File {
            path,
            container,
            pages,
        } = &self.backing
        else {
            unreachable!("in-memory levels are initialised at construction");
        };
        let info = self.levels[level];
        let image = match container {
            Container::Png => {
                let img = image::ImageReader::open(path)
                    .map_err(|e| io_error(path, e))?
                    .with_guessed_format()
                    .map_err(|e| io_error(path, e))?
                    .decode()
                    .map_err(|e| SlideError::CorruptImage(e.to_string()))?;
                match img {
                    image::DynamicImage::ImageRgb8(rgb) => rgb,
                    other => {
                        return Err(SlideError::UnsupportedFormat(format!(
                            "{:?} PNG",
                            other.color()
                        )))
                    }
                }
            }
            Container::Tiff => decode_tiff_page(path, pages[level])?,
        };
        if image.dimensions() != (info.width, info.height) {
            return Err(SlideError::CorruptImage(format!(
                "level {level} decoded to {:?}, header says {}x{}",
                image.dimensions(),
                info.width,
                info.height
            )));
        }
        Ok(image)
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> SlideError {
    SlideError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn level_infos(dims: &[(u32, u32)]) -> Result<Vec<LevelInfo>, SlideError> {
    let (w0, h0) = dims[0];
    let mut levels = Vec::with_capacity(dims.len());
    for &(w, h) in dims {
        if w == 0 || h == 0 {
            return Err(SlideError::EmptyImage);
        }
        let dw = f64::from(w0) / f64::from(w);
        let dh = f64::from(h0) / f64::from(h);
        if (dw - dh).abs() > DOWNSAMPLE_AGREEMENT * dw {
            return Err(SlideError::CorruptImage(format!(
                "level {w}x{h} has inconsistent downsample (width {dw:.4}, height {dh:.4})"
            )));
        }
        levels.push(LevelInfo {
            width: w,
            height: h,
            downsample: dw,
        });
    }
    Ok(levels)
}

fn sniff(path: &Path) -> Result<Container, SlideError> {
    let mut head = [0u8; 8];
    let mut file = File::open(path).map_err(|e| io_error(path, e))?;
    let n = file.read(&mut head).map_err(|e| io_error(path, e))?;
    match image::guess_format(&head[..n]) {
        Ok(ImageFormat::Png) => Ok(Container::Png),
        Ok(ImageFormat::Tiff) => Ok(Container::Tiff),
        Ok(other) => Err(SlideError::UnsupportedFormat(format!("{other:?}"))),
        Err(_) if n == 0 => Err(SlideError::EmptyImage),
        Err(_) => Err(SlideError::UnsupportedFormat("unrecognised file signature".into())),
    }
}

fn tiff_decoder(path: &Path) -> Result<tiff::decoder::Decoder<BufReader<File>>, SlideError> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    tiff::decoder::Decoder::new(BufReader::new(file))
        .map(|d| d.with_limits(tiff::decoder::Limits::unlimited()))
        .map_err(|e| SlideError::CorruptImage(e.to_string()))
}

fn check_tiff_color(color: tiff::ColorType) -> Result<(), SlideError> {
    match color {
        tiff::ColorType::RGB(8) => Ok(()),
        other => Err(SlideError::UnsupportedFormat(format!("TIFF {other:?}"))),
    }
}

fn decode_tiff_page(path: &Path, page: usize) -> Result<RgbImage, SlideError> {
    let corrupt = |e: tiff::TiffError| SlideError::CorruptImage(e.to_string());
    let mut decoder = tiff_decoder(path)?;
    decoder.seek_to_image(page).map_err(corrupt)?;
    check_tiff_color(decoder.colortype().map_err(corrupt)?)?;
    let (w, h) = decoder.dimensions().map_err(corrupt)?;
    match decoder.read_image().map_err(corrupt)? {
        tiff::decoder::DecodingResult::U8(buf) => RgbImage::from_raw(w, h, buf)
            .ok_or_else(|| SlideError::CorruptImage("short TIFF pixel buffer".into())),
        _ => Err(SlideError::UnsupportedFormat("TIFF sample type is not u8".into())),
    }
}

fn tiff_pages(path: &Path) -> Result<Vec<(usize, u32, u32)>, SlideError> {
    let corrupt = |e: tiff::TiffError| SlideError::CorruptImage(e.to_string());
    let mut decoder = tiff_decoder(path)?;
    let mut pages = Vec::new();
    let mut index = 0;
    loop {
        check_tiff_color(decoder.colortype().map_err(corrupt)?)?;
        let (w, h) = decoder.dimensions().map_err(corrupt)?;
        pages.push((index, w, h));
        if !decoder.more_images() {
            break;
        }
        decoder.next_image().map_err(corrupt)?;
        index += 1;
    }
    Ok(pages)
}

/// Opens a PNG or 8-bit RGB TIFF slide. Only headers are read here.
pub fn open_slide(path: impl AsRef<Path>) -> Result<SlideSource, SlideError> {
    let path = path.as_ref();
    let container = sniff(path)?;
    let slide_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "slide".to_string());

    let mut pages = match container {
        Container::Png => {
            let reader = image::ImageReader::open(path)
                .map_err(|e| io_error(path, e))?
                .with_guessed_format()
                .map_err(|e| io_error(path, e))?;
            let decoder = reader
                .into_decoder()
                .map_err(|e| SlideError::CorruptImage(e.to_string()))?;
            use image::ImageDecoder;
            if decoder.color_type() != image::ColorType::Rgb8 {
                return Err(SlideError::UnsupportedFormat(format!(
                    "{:?} PNG",
                    decoder.color_type()
                )));
            }
            let (w, h) = decoder.dimensions();
            vec![(0, w, h)]
        }
        Container::Tiff => tiff_pages(path)?,
    };
    if pages.iter().any(|&(_, w, h)| w == 0 || h == 0) {
        return Err(SlideError::EmptyImage);
    }
    pages.sort_by_key(|&(idx, w, h)| (std::cmp::Reverse(u64::from(w) * u64::from(h)), idx));
    let dims: Vec<(u32, u32)> = pages.iter().map(|&(_, w, h)| (w, h)).collect();
    let levels = level_infos(&dims)?;
    Ok(SlideSource {
        slide_id,
        pixels: levels.iter().map(|_| OnceLock::new()).collect(),
        levels,
        backing: Backing::File {
            path: path.to_path_buf(),
            container,
            pages: pages.into_iter().map(|(idx, _, _)| idx).collect(),
        },
    })
}

/// Position of one tile in the grid of a level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TileCoord {
    pub col: u32,
    pub row: u32,
    pub level: usize,
    pub tile_size: u32,
}

impl TileCoord {
    pub fn new(col: u32, row: u32, level: usize, tile_size: u32) -> Self {
        Self {
            col,
            row,
            level,
            tile_size,
        }
    }

    /// Top-left pixel of the tile in its level's pixel space.
    pub fn origin(&self) -> (u64, u64) {
        (
            u64::from(self.col) * u64::from(self.tile_size),
            u64::from(self.row) * u64::from(self.tile_size),
        )
    }

    /// Top-left pixel of the tile in level-0 pixel space.
    pub fn origin_level0(&self, downsample: f64) -> (u64, u64) {
        let (x, y) = self.origin();
        (
            (x as f64 * downsample).round() as u64,
            (y as f64 * downsample).round() as u64,
        )
    }
}

/// One square RGB tile cut from a slide.
#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    slide_id: String,
    coord: TileCoord,
    pixels: RgbImage,
}

impl TileRecord {
    pub fn new(
        slide_id: impl Into<String>,
        coord: TileCoord,
        pixels: RgbImage,
    ) -> Result<Self, SlideError> {
        let (width, height) = pixels.dimensions();
        if width != coord.tile_size || height != coord.tile_size {
            return Err(SlideError::TileShape {
                width,
                height,
                expected: coord.tile_size,
            });
        }
        Ok(Self {
            slide_id: slide_id.into(),
            coord,
            pixels,
        })
    }

    /// Wraps a square image as tile (0, 0) of level 0 of an anonymous slide.
    pub fn from_image(pixels: RgbImage) -> Result<Self, SlideError> {
        let size = pixels.width();
        Self::new("", TileCoord::new(0, 0, 0, size), pixels)
    }

    pub fn slide_id(&self) -> &str {
        &self.slide_id
    }

    pub fn coord(&self) -> TileCoord {
        self.coord
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_pixels(self) -> RgbImage {
        self.pixels
    }

    /// Same tile position with different pixel content of identical size.
    pub fn with_pixels(&self, pixels: RgbImage) -> Result<Self, SlideError> {
        Self::new(self.slide_id.clone(), self.coord, pixels)
    }
}

/// Row-major grid of every whole tile in a level. Partial edge tiles are dropped.
pub fn tile_grid(
    slide: &SlideSource,
    level: usize,
    tile_size: u32,
) -> Result<Vec<TileCoord>, SlideError> {
    if tile_size == 0 {
        return Err(SlideError::InvalidTileSize);
    }
    let info = slide.level(level)?;
    let cols = info.width / tile_size;
    let rows = info.height / tile_size;
    if cols == 0 || rows == 0 {
        return Err(SlideError::NoTiles {
            level,
            width: info.width,
            height: info.height,
            tile_size,
        });
    }
    Ok((0..rows)
        .flat_map(|row| (0..cols).map(move |col| TileCoord::new(col, row, level, tile_size)))
        .collect())
}

/// Grid dimensions (cols, rows) of a level for a tile size.
pub fn grid_dims(info: &LevelInfo, tile_size: u32) -> (u32, u32) {
    (info.width / tile_size, info.height / tile_size)
}

pub fn extract_tile(slide: &SlideSource, coord: TileCoord) -> Result<TileRecord, SlideError> {
    let info = slide.level(coord.level)?;
    if coord.tile_size == 0 {
        return Err(SlideError::InvalidTileSize);
    }
    let (cols, rows) = grid_dims(&info, coord.tile_size);
    if coord.col >= cols || coord.row >= rows {
        return Err(SlideError::OutOfBounds {
            col: coord.col,
            row: coord.row,
            level: coord.level,
        });
    }
    let (x, y) = coord.origin();
    let pixels = slide.read_region(
        coord.level,
        x as u32,
        y as u32,
        coord.tile_size,
        coord.tile_size,
    )?;
    TileRecord::new(slide.slide_id(), coord, pixels)
}
