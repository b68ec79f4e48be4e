use std::collections::HashMap;
use std::path::Path;

use serde::Deserialize;

use super::{ClassifierError, TileClassifier};
use crate::slide::TileRecord;

/// Slide id that matches every slide in a stub table.
pub const ANY_SLIDE: &str = "*";
const DEFAULT_ROW: &str = "default";

#[derive(Debug, Deserialize)]
struct StubRow {
    slide_id: String,
    col: Option<u32>,
    row: Option<u32>,
    p_pos: f64,
}

/// Lookup-table classifier. Exact (slide, col, row) entries win over
/// wildcard `*` entries, which win over the default.
#[derive(Debug, Clone)]
pub struct StubClassifier {
    table: HashMap<(String, u32, u32), f64>,
    default: f64,
}

impl StubClassifier {
    pub fn new(table: HashMap<(String, u32, u32), f64>, default: f64) -> Self {
        Self { table, default }
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let load_err = |msg: String| ClassifierError::ModelLoad(format!("{}: {msg}", path.display()));
        let mut reader = csv::Reader::from_path(path).map_err(|e| load_err(e.to_string()))?;
        let mut table = HashMap::new();
        let mut default = None;
        for row in reader.deserialize::<StubRow>() {
            let row = row.map_err(|e| load_err(e.to_string()))?;
            if !(0.0..=1.0).contains(&row.p_pos) {
                return Err(load_err(format!("p_pos {} outside [0, 1]", row.p_pos)));
            }
            if row.slide_id == DEFAULT_ROW {
                if default.replace(row.p_pos).is_some() {
                    return Err(load_err("more than one default row".into()));
                }
                continue;
            }
            let (Some(col), Some(r)) = (row.col, row.row) else {
                return Err(load_err(format!("row for {} lacks col/row", row.slide_id)));
            };
            if table.insert((row.slide_id.clone(), col, r), row.p_pos).is_some() {
                return Err(load_err(format!("duplicate entry {},{},{}", row.slide_id, col, r)));
            }
        }
        let default = default.ok_or_else(|| load_err("missing `default` row".into()))?;
        Ok(Self { table, default })
    }

    pub fn lookup(&self, slide_id: &str, col: u32, row: u32) -> f64 {
        self.table
            .get(&(slide_id.to_string(), col, row))
            .or_else(|| self.table.get(&(ANY_SLIDE.to_string(), col, row)))
            .copied()
            .unwrap_or(self.default)
    }
}

impl TileClassifier for StubClassifier {
    fn predict(&self, batch: &[TileRecord]) -> Result<Vec<f64>, ClassifierError> {
        Ok(batch
            .iter()
            .map(|t| self.lookup(t.slide_id(), t.coord().col, t.coord().row))
            .collect())
    }

    fn describe(&self) -> String {
        format!("stub({} entries, default {})", self.table.len(), self.default)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slide::TileCoord;
    use image::RgbImage;

    fn load(text: &str) -> Result<StubClassifier, ClassifierError> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, text).unwrap();
        StubClassifier::load(&p)
    }

    fn tile(slide: &str, col: u32, row: u32) -> TileRecord {
        TileRecord::new(slide, TileCoord::new(col, row, 0, 4), RgbImage::new(4, 4)).unwrap()
    }

    #[test]
    fn table_contract() {
        let stub = load("slide_id,col,row,p_pos\ns1,0,0,0.8\n*,1,0,0.6\ndefault,,,0.1\n").unwrap();
        let got = stub
            .predict(&[tile("s1", 0, 0), tile("s2", 0, 0), tile("s2", 1, 0), tile("s1", 5, 5)])
            .unwrap();
        assert_eq!(got, vec![0.8, 0.1, 0.6, 0.1]);
    }

    #[test]
    fn empty_table_scores_default() {
        let stub = load("slide_id,col,row,p_pos\ndefault,,,0.25\n").unwrap();
        assert_eq!(stub.predict(&[tile("x", 3, 4)]).unwrap(), vec![0.25]);
    }

    #[test]
    fn malformed_tables() {
        assert!(load("slide_id,col,row,p_pos\ns,0,0,0.5\n").is_err());
        assert!(load("slide_id,col,row,p_pos\ns,0,0,1.5\ndefault,,,0\n").is_err());
        assert!(load("slide_id,col,row,p_pos\ns,,0,0.5\ndefault,,,0\n").is_err());
        assert!(load("slide_id,col,row,p_pos\ns,0,0,0.5\ns,0,0,0.6\ndefault,,,0\n").is_err());
        assert!(matches!(
            StubClassifier::load(Path::new("/nonexistent/t.csv")),
            Err(ClassifierError::ModelLoad(_))
        ));
    }
}
