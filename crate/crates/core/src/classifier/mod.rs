//! Batched tile scoring behind one interface.
//!
//! Three backends implement [`TileClassifier`]:
//!
//! * `stub` - a lookup table keyed by (slide, col, row), for tests and dry runs;
//! * `baseline` - logistic regression over six hand-crafted tile features;
//! * `graph` - an exported ONNX network, compiled in with the `onnx` feature.
//!
//! Handles are immutable once loaded and can be shared across workers.

mod baseline;
#[cfg(feature = "onnx")]
mod graph;
mod stub;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::slide::{TileCoord, TileRecord};
use crate::stain::{StainError, StainProfile};

pub use baseline::{baseline_features, BaselineClassifier, FEATURE_COUNT};
pub use stub::StubClassifier;

/// Training-time batch size of the reference model.
pub const DEFAULT_BATCH_SIZE: usize = 375;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("failed to load classifier: {0}")]
    ModelLoad(String),
    #[error("classifier backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("tile {col},{row} is {width}x{height}, classifier expects {expected}x{expected}")]
    Shape {
        col: u32,
        row: u32,
        width: u32,
        height: u32,
        expected: u32,
    },
    #[error("batch size must be at least 1")]
    InvalidBatchSize,
    #[error("invalid classifier spec {0:?}; expected stub:<csv>, baseline:<json> or graph:<onnx>")]
    InvalidSpec(String),
    #[error(transparent)]
    Stain(#[from] StainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchConfig {
    pub batch_size: usize,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
        }
    }
}

/// Tumor probability for one tile.
#[derive(Debug, Clone, PartialEq)]
pub struct TileScore {
    pub slide_id: String,
    pub coord: TileCoord,
    pub p_pos: f64,
}

pub trait TileClassifier: Send + Sync {
    /// Square input edge the model requires, if it is fixed.
    fn input_size(&self) -> Option<u32> {
        None
    }

    /// Positive-class probability for every tile of the batch, in order.
    fn predict(&self, batch: &[TileRecord]) -> Result<Vec<f64>, ClassifierError>;

    fn describe(&self) -> String;
}

impl fmt::Debug for dyn TileClassifier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.describe())
    }
}

/// How an exported graph's output tensor maps to a probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphOutput {
    /// Per-class logits; softmax, then the positive column.
    #[default]
    Softmax,
    /// One logit per tile.
    Sigmoid,
    /// Output already holds probabilities.
    Probability,
}

fn default_positive_index() -> usize {
    1
}

fn default_graph_input() -> u32 {
    crate::slide::DEFAULT_TILE_SIZE
}

fn default_mean() -> [f32; 3] {
    [0.485, 0.456, 0.406]
}

fn default_std() -> [f32; 3] {
    [0.229, 0.224, 0.225]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub path: PathBuf,
    #[serde(default)]
    pub output: GraphOutput,
    #[serde(default = "default_positive_index")]
    pub positive_index: usize,
    #[serde(default = "default_graph_input")]
    pub input_size: u32,
    /// Per-channel normalization applied to `pixel / 255`.
    #[serde(default = "default_mean")]
    pub mean: [f32; 3],
    #[serde(default = "default_std")]
    pub std: [f32; 3],
}

impl GraphSpec {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self {
            path: path.into(),
            output: GraphOutput::default(),
            positive_index: default_positive_index(),
            input_size: default_graph_input(),
            mean: default_mean(),
            std: default_std(),
        }
    }
}

/// Which classifier to load and from where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClassifierSpec {
    /// CSV table `slide_id,col,row,p_pos` with one `default` row.
    Stub { path: PathBuf },
    /// JSON array of six feature weights followed by the bias.
    Baseline { path: PathBuf },
    Graph(GraphSpec),
}

impl FromStr for ClassifierSpec {
    type Err = ClassifierError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (kind, path) = s
            .split_once(':')
            .ok_or_else(|| ClassifierError::InvalidSpec(s.to_string()))?;
        let path = PathBuf::from(path);
        match kind {
            "stub" => Ok(ClassifierSpec::Stub { path }),
            "baseline" => Ok(ClassifierSpec::Baseline { path }),
            "graph" => Ok(ClassifierSpec::Graph(GraphSpec::new(path))),
            _ => Err(ClassifierError::InvalidSpec(s.to_string())),
        }
    }
}

/// Loads a classifier. `reference` is the stain profile the baseline
/// features are computed against.
pub fn load_classifier(
    spec: &ClassifierSpec,
    reference: &StainProfile,
) -> Result<Box<dyn TileClassifier>, ClassifierError> {
    match spec {
        ClassifierSpec::Stub { path } => Ok(Box::new(StubClassifier::load(path)?)),
        ClassifierSpec::Baseline { path } => {
            Ok(Box::new(BaselineClassifier::load(path, reference.clone())?))
        }
        ClassifierSpec::Graph(graph) => load_graph(graph),
    }
}

#[cfg(feature = "onnx")]
fn load_graph(spec: &GraphSpec) -> Result<Box<dyn TileClassifier>, ClassifierError> {
    Ok(Box::new(graph::GraphClassifier::load(spec)?))
}

#[cfg(not(feature = "onnx"))]
fn load_graph(spec: &GraphSpec) -> Result<Box<dyn TileClassifier>, ClassifierError> {
    Err(ClassifierError::BackendUnavailable(format!(
        "{} needs the graph backend; rebuild with `--features onnx`",
        spec.path.display()
    )))
}

/// Scores tiles in batches of `cfg.batch_size`. Output order follows input
/// order and does not depend on the batch partition.
pub fn score_batch(
    tiles: &[TileRecord],
    model: &dyn TileClassifier,
    cfg: &BatchConfig,
) -> Result<Vec<TileScore>, ClassifierError> {
    if cfg.batch_size == 0 {
        return Err(ClassifierError::InvalidBatchSize);
    }
    for tile in tiles {
        let (width, height) = tile.pixels().dimensions();
        let expected = model.input_size().unwrap_or(tile.coord().tile_size);
        if width != expected || height != expected {
            return Err(ClassifierError::Shape {
                col: tile.coord().col,
                row: tile.coord().row,
                width,
                height,
                expected,
            });
        }
    }
    let per_batch: Vec<Vec<f64>> = tiles
        .par_chunks(cfg.batch_size)
        .map(|batch| {
            let probs = model.predict(batch)?;
            if probs.len() != batch.len() {
                return Err(ClassifierError::Inference(format!(
                    "model returned {} scores for {} tiles",
                    probs.len(),
                    batch.len()
                )));
            }
            if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(ClassifierError::Inference(format!(
                    "probability {bad} outside [0, 1]"
                )));
            }
            Ok(probs)
        })
        .collect::<Result<_, _>>()?;
    Ok(tiles
        .iter()
        .zip(per_batch.into_iter().flatten())
        .map(|(tile, p_pos)| TileScore {
            slide_id: tile.slide_id().to_string(),
            coord: tile.coord(),
            p_pos,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn tiles(n: u32) -> Vec<TileRecord> {
        (0..n)
            .map(|i| {
                let img = RgbImage::from_fn(224, 224, |x, y| {
                    let v = ((x * (i + 3) + y * (2 * i + 1)) % 97) as u8;
                    Rgb([140 + v, 60 + v / 2, 120 + v])
                });
                TileRecord::new("s", TileCoord::new(i, 0, 0, 224), img).unwrap()
            })
            .collect()
    }

    fn write(dir: &std::path::Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "stub:t.csv".parse::<ClassifierSpec>().unwrap(),
            ClassifierSpec::Stub { path: "t.csv".into() }
        );
        assert!(matches!(
            "graph:m.onnx".parse::<ClassifierSpec>().unwrap(),
            ClassifierSpec::Graph(GraphSpec { output: GraphOutput::Softmax, positive_index: 1, .. })
        ));
        assert!("resnet".parse::<ClassifierSpec>().is_err());
        assert!("svm:x".parse::<ClassifierSpec>().is_err());
        let from_toml: ClassifierSpec = toml::from_str("kind = \"baseline\"\npath = \"w.json\"").unwrap();
        assert_eq!(from_toml, ClassifierSpec::Baseline { path: "w.json".into() });
    }

    #[test]
    fn batching_does_not_change_scores() {
        let dir = tempfile::tempdir().unwrap();
        let weights = write(dir.path(), "w.json", "[1.5, -2.0, 0.8, 3.0, -1.0, 4.0, 0.1]");
        let model = load_classifier(
            &ClassifierSpec::Baseline { path: weights },
            &StainProfile::default_reference(),
        )
        .unwrap();
        let ts = tiles(10);
        let a = score_batch(&ts, model.as_ref(), &BatchConfig { batch_size: 3 }).unwrap();
        let b = score_batch(&ts, model.as_ref(), &BatchConfig { batch_size: 10 }).unwrap();
        let c = score_batch(&ts, model.as_ref(), &BatchConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(a.len(), 10);
        for (s, t) in a.iter().zip(&ts) {
            assert_eq!(s.coord, t.coord());
            assert!((0.0..=1.0).contains(&s.p_pos));
        }
        // Not all identical, so the comparison above is meaningful.
        assert!(a.iter().any(|s| (s.p_pos - a[0].p_pos).abs() > 1e-6));
    }

    #[test]
    fn zero_batch_size_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let table = write(dir.path(), "t.csv", "slide_id,col,row,p_pos\ndefault,,,0.5\n");
        let model = load_classifier(&ClassifierSpec::Stub { path: table }, &StainProfile::default_reference()).unwrap();
        assert!(matches!(
            score_batch(&tiles(1), model.as_ref(), &BatchConfig { batch_size: 0 }),
            Err(ClassifierError::InvalidBatchSize)
        ));
    }

    struct Fixed224;
    impl TileClassifier for Fixed224 {
        fn input_size(&self) -> Option<u32> {
            Some(224)
        }
        fn predict(&self, batch: &[TileRecord]) -> Result<Vec<f64>, ClassifierError> {
            Ok(vec![0.5; batch.len()])
        }
        fn describe(&self) -> String {
            "fixed".into()
        }
    }

    struct Broken;
    impl TileClassifier for Broken {
        fn predict(&self, batch: &[TileRecord]) -> Result<Vec<f64>, ClassifierError> {
            Ok(vec![1.5; batch.len()])
        }
        fn describe(&self) -> String {
            "broken".into()
        }
    }

    #[test]
    fn shape_and_range_errors() {
        let small = TileRecord::from_image(RgbImage::new(100, 100)).unwrap();
        assert!(matches!(
            score_batch(&[small], &Fixed224, &BatchConfig::default()),
            Err(ClassifierError::Shape { expected: 224, width: 100, .. })
        ));
        assert!(matches!(
            score_batch(&tiles(2), &Broken, &BatchConfig::default()),
            Err(ClassifierError::Inference(_))
        ));
    }

    #[cfg(not(feature = "onnx"))]
    #[test]
    fn graph_without_backend_is_unavailable() {
        let spec: ClassifierSpec = "graph:model.onnx".parse().unwrap();
        assert!(matches!(
            load_classifier(&spec, &StainProfile::default_reference()),
            Err(ClassifierError::BackendUnavailable(_))
        ));
    }
}
