use std::path::Path;

use super::{ClassifierError, TileClassifier};
use crate::qc::{self, QcConfig};
use crate::slide::TileRecord;
use crate::stain::{rgb_to_od, solve_concentrations, StainProfile};

pub const FEATURE_COUNT: usize = 6;

/// `[mean H, mean E, tissue fraction, blur / 1000, mean gray / 255, std gray / 255]`.
///
/// Concentrations are solved against `reference` and averaged over every
/// pixel; tissue fraction uses the default QC thresholds.
pub fn baseline_features(
    tile: &TileRecord,
    reference: &StainProfile,
) -> Result<[f64; FEATURE_COUNT], ClassifierError> {
    let image = tile.pixels();
    let od = rgb_to_od(image, 255.0);
    let conc = solve_concentrations(&od, reference)?;
    let n = conc.len().max(1) as f64;
    let (sum_h, sum_e) = conc.iter().fold((0.0, 0.0), |(h, e), c| (h + c[0], e + c[1]));

    let gray = qc::grayscale(image);
    let mean = gray.iter().sum::<f64>() / n;
    let var = gray.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
    let blur = qc::laplacian_variance(&gray, image.width() as usize, image.height() as usize);

    Ok([
        sum_h / n,
        sum_e / n,
        qc::tissue_fraction(tile, &QcConfig::default()),
        blur / 1000.0,
        mean / 255.0,
        var.sqrt() / 255.0,
    ])
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Logistic regression over [`baseline_features`].
#[derive(Debug, Clone)]
pub struct BaselineClassifier {
    weights: [f64; FEATURE_COUNT],
    bias: f64,
    reference: StainProfile,
}

impl BaselineClassifier {
    pub fn new(weights: [f64; FEATURE_COUNT], bias: f64, reference: StainProfile) -> Self {
        Self {
            weights,
            bias,
            reference,
        }
    }

    /// Reads a JSON array of seven reals: six weights, then the bias.
    pub fn load(path: &Path, reference: StainProfile) -> Result<Self, ClassifierError> {
        let load_err = |msg: String| ClassifierError::ModelLoad(format!("{}: {msg}", path.display()));
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let values: Vec<f64> = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        if values.len() != FEATURE_COUNT + 1 {
            return Err(load_err(format!(
                "expected {} weights, found {}",
                FEATURE_COUNT + 1,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(load_err("weights must be finite".into()));
        }
        let mut weights = [0.0; FEATURE_COUNT];
        weights.copy_from_slice(&values[..FEATURE_COUNT]);
        Ok(Self::new(weights, values[FEATURE_COUNT], reference))
    }

    pub fn weights(&self) -> ([f64; FEATURE_COUNT], f64) {
        (self.weights, self.bias)
    }

    pub fn probability(&self, features: &[f64; FEATURE_COUNT]) -> f64 {
        let z = self.bias
            + self
                .weights
                .iter()
                .zip(features)
                .map(|(w, f)| w * f)
                .sum::<f64>();
        sigmoid(z)
    }
}

impl TileClassifier for BaselineClassifier {
    fn predict(&self, batch: &[TileRecord]) -> Result<Vec<f64>, ClassifierError> {
        batch
            .iter()
            .map(|t| Ok(self.probability(&baseline_features(t, &self.reference)?)))
            .collect()
    }

    fn describe(&self) -> String {
        format!("baseline(weights {:?}, bias {})", self.weights, self.bias)
    }
}
