use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::classifier::{BatchConfig, ClassifierSpec};
use crate::heatmap::{Colormap, DEFAULT_MIN_AREA, DEFAULT_SIGMA, DEFAULT_THRESHOLD};
use crate::qc::QcConfig;
use crate::slide::DEFAULT_TILE_SIZE;
use crate::stain::{MacenkoConfig, StainProfile};

/// Environment variable naming a config file when none is passed.
pub const CONFIG_ENV: &str = "TUMORMAP_CONFIG";

/// Which stain profile a slide's tiles are mapped from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// One profile per slide, estimated from a seeded sample of QC-passed tiles.
    #[default]
    Slide,
    /// Tiles are scored as scanned.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub tile_size: u32,
    /// Pyramid level tiles are cut from.
    pub level: usize,
    pub qc: QcConfig,
    pub macenko: MacenkoConfig,
    pub normalization: NormalizationMode,
    /// Tiles pooled for the per-slide stain estimate.
    pub profile_tiles: usize,
    /// Reference stain profile JSON; built-in reference when absent.
    pub reference_profile: Option<PathBuf>,
    pub classifier: Option<ClassifierSpec>,
    pub batch: BatchConfig,
    pub sigma: f64,
    pub threshold: f64,
    pub min_area: usize,
    pub colormap: String,
    /// Pixels per grid cell in heatmap and mask images.
    pub heatmap_scale: u32,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Tile worker threads; 0 uses every core.
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tile_size: DEFAULT_TILE_SIZE,
            level: 0,
            qc: QcConfig::default(),
            macenko: MacenkoConfig::default(),
            normalization: NormalizationMode::default(),
            profile_tiles: 64,
            reference_profile: None,
            classifier: None,
            batch: BatchConfig::default(),
            sigma: DEFAULT_SIGMA,
            threshold: DEFAULT_THRESHOLD,
            min_area: DEFAULT_MIN_AREA,
            colormap: Colormap::default().to_string(),
            heatmap_scale: 8,
            out_dir: PathBuf::from("out"),
            seed: 0,
            workers: 0,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file. Relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| match e {
            PipelineError::Config(msg) => PipelineError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        if let Some(p) = self.reference_profile.as_mut() {
            fix(p);
        }
        match self.classifier.as_mut() {
            Some(ClassifierSpec::Stub { path } | ClassifierSpec::Baseline { path }) => fix(path),
            Some(ClassifierSpec::Graph(g)) => fix(&mut g.path),
            None => {}
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: String| Err(PipelineError::Config(msg));
        if self.tile_size == 0 {
            return bad("tile_size must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be finite and >= 0", self.sigma));
        }
        if self.batch.batch_size == 0 {
            return bad("batch.batch_size must be >= 1".into());
        }
        if self.profile_tiles == 0 {
            return bad("profile_tiles must be >= 1".into());
        }
        if self.heatmap_scale == 0 {
            return bad("heatmap_scale must be >= 1".into());
        }
        self.colormap
            .parse::<Colormap>()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.qc.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.macenko
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn reference(&self) -> Result<StainProfile, PipelineError> {
        match &self.reference_profile {
            Some(p) => StainProfile::load(p).map_err(|e| PipelineError::Config(e.to_string())),
            None => Ok(StainProfile::default_reference()),
        }
    }

    pub fn classifier_spec(&self) -> Result<&ClassifierSpec, PipelineError> {
        self.classifier
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no classifier configured".into()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
