use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::classifier::TileScore;
use crate::slide::TileCoord;

pub const SCORES_CSV: &str = "scores.csv";
pub const QC_CSV: &str = "qc.csv";
pub const HEATMAP_PNG: &str = "heatmap.png";
pub const MASK_PNG: &str = "mask.png";
pub const GEOJSON: &str = "tumor.geojson";
pub const PROFILE_JSON: &str = "stain_profile.json";
pub const DONE_MARKER: &str = ".done";
pub const ERROR_LOG: &str = "error.log";

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_path(target: &Path) -> PathBuf {
    let name = target.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let n = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    target.with_file_name(format!(".{name}.tmp-{}-{n}", std::process::id()))
}

/// Writes through a uniquely named sibling temp file, then renames over `target`.
pub fn write_atomic(target: &Path, write: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> io::Result<()> {
    let tmp = temp_path(target);
    let result = (|| {
        let mut file = io::BufWriter::new(fs::File::create(&tmp)?);
        write(&mut file)?;
        file.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        fs::rename(&tmp, target)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn write_atomic_bytes(target: &Path, bytes: &[u8]) -> io::Result<()> {
    write_atomic(target, |w| w.write_all(bytes))
}

/// One row of `scores.csv`; `x0`/`y0` are the tile origin in level-0 pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub slide_id: String,
    pub col: u32,
    pub row: u32,
    pub x0: u64,
    pub y0: u64,
    pub p_pos: f64,
}

impl ScoreRecord {
    pub fn new(score: &TileScore, downsample: f64) -> Self {
        let (x0, y0) = score.coord.origin_level0(downsample);
        Self {
            slide_id: score.slide_id.clone(),
            col: score.coord.col,
            row: score.coord.row,
            x0,
            y0,
            p_pos: score.p_pos,
        }
    }

    pub fn to_score(&self, level: usize, tile_size: u32) -> TileScore {
        TileScore {
            slide_id: self.slide_id.clone(),
            coord: TileCoord::new(self.col, self.row, level, tile_size),
            p_pos: self.p_pos,
        }
    }
}

pub fn write_scores_csv<W: Write>(writer: W, records: &[ScoreRecord]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if records.is_empty() {
        w.write_record(["slide_id", "col", "row", "x0", "y0", "p_pos"])?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: io::Read>(reader: R) -> csv::Result<Vec<ScoreRecord>> {
    csv::Reader::from_reader(reader).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("a.txt");
        write_atomic_bytes(&target, b"one").unwrap();
        write_atomic_bytes(&target, b"two").unwrap();
        assert_eq!(fs::read(&target).unwrap(), b"two");
        let failed = write_atomic(&dir.path().join("b.txt"), |_| Err(io::Error::other("boom")));
        assert!(failed.is_err());
        let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("a.txt")]);
    }

    #[test]
    fn scores_round_trip() {
        let score = TileScore {
            slide_id: "s".into(),
            coord: TileCoord::new(3, 2, 1, 224),
            p_pos: 0.25,
        };
        let rec = ScoreRecord::new(&score, 4.0);
        assert_eq!((rec.x0, rec.y0), (2688, 1792));
        let mut buf = Vec::new();
        write_scores_csv(&mut buf, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "slide_id,col,row,x0,y0,p_pos\ns,3,2,2688,1792,0.25\n");
        let back = read_scores_csv(buf.as_slice()).unwrap();
        assert_eq!(back, vec![rec]);
        assert_eq!(back[0].to_score(1, 224), score);
        let mut empty = Vec::new();
        write_scores_csv(&mut empty, &[]).unwrap();
        assert!(read_scores_csv(empty.as_slice()).unwrap().is_empty());
    }
}
