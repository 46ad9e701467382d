//! JSON run configuration.

use std::path::{Path, PathBuf};

use inrcodec::compressor::RdConfig;
use inrcodec::data::{CoordinateKind, ModalitySpec};
use inrcodec::inr::InrConfig;
use inrcodec::meta::MetaTrainConfig;
use inrcodec::metrics::RateUnit;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Psnr,
    /// Voxel accuracy at `EvalConfig::threshold`.
    Accuracy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    Bpp,
    Kbps,
}

impl From<RateKind> for RateUnit {
    fn from(k: RateKind) -> Self {
        match k {
            RateKind::Bpp => RateUnit::Bpp,
            RateKind::Kbps => RateUnit::Kbps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub quality: Quality,
    pub rate_unit: RateKind,
    /// Samples per second along the first axis; needed for kbps.
    pub sample_rate: Option<f64>,
    pub threshold: f64,
    /// Name written to the RD CSV.
    pub dataset: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            quality: Quality::Psnr,
            rate_unit: RateKind::Bpp,
            sample_rate: None,
            threshold: 0.5,
            dataset: "data".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub quantizer: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub modality: ModalitySpec,
    pub inr: InrConfig,
    pub meta: MetaTrainConfig,
    pub rd: RdConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
    /// Inner steps used to fit latents of new items; defaults to `meta.inner_steps`.
    pub fit_steps: Option<usize>,
    /// Weights swept by `rd-curve` when none are given on the command line.
    pub lambdas: Vec<f64>,
    /// Overrides `meta.seed` and `rd.seed`.
    pub seed: Option<u64>,
    /// Overrides `meta.threads` and `rd.threads`.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            modality: ModalitySpec::default(),
            inr: InrConfig::default(),
            meta: MetaTrainConfig::default(),
            rd: RdConfig::default(),
            eval: EvalConfig::default(),
            paths: Paths::default(),
            fit_steps: None,
            lambdas: Vec::new(),
            seed: None,
            threads: None,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn at(path: &str, e: impl std::fmt::Display) -> ConfigError {
    ConfigError(format!("{path}: {e}"))
}

impl RunConfig {
    /// Parses and validates; errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut config: RunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| at(&e.path().to_string(), e.inner()))?;
        config.apply_overrides();
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    fn apply_overrides(&mut self) {
        if let Some(s) = self.seed {
            self.meta.seed = s;
            self.rd.seed = s;
        }
        if let Some(t) = self.threads {
            self.meta.threads = t;
            self.rd.threads = t;
        }
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.apply_overrides();
    }

    pub fn set_threads(&mut self, threads: usize) {
        self.threads = Some(threads);
        self.apply_overrides();
    }

    pub fn fit_steps(&self) -> usize {
        self.fit_steps.unwrap_or(self.meta.inner_steps)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.inr.validate().map_err(|e| at("inr", e))?;
        self.meta.validate().map_err(|e| at("meta", e))?;
        self.rd.validate().map_err(|e| at("rd", e))?;
        match (&self.modality.coordinates, &self.modality.patch_shape) {
            (CoordinateKind::Sphere, _) if self.inr.coord_dim != 3 => {
                return Err(at(
                    "inr.coord_dim",
                    format!("sphere coordinates are 3-D, got {}", self.inr.coord_dim),
                ));
            }
            (CoordinateKind::Sphere, Some(_)) => {
                return Err(at("modality.patch_shape", "sphere coordinates do not support patching"));
            }
            (CoordinateKind::Grid { .. }, Some(p)) if p.len() != self.inr.coord_dim => {
                return Err(at(
                    "inr.coord_dim",
                    format!("{} does not match the {} axes of modality.patch_shape", self.inr.coord_dim, p.len()),
                ));
            }
            (_, Some(p)) if p.contains(&0) => return Err(at("modality.patch_shape", "zero-length axis")),
            _ => {}
        }
        if let CoordinateKind::Grid { lo, hi } = self.modality.coordinates {
            if !(hi > lo) {
                return Err(at("modality.coordinates", format!("empty range [{lo}, {hi}]")));
            }
        }
        if self.eval.rate_unit == RateKind::Kbps && !self.eval.sample_rate.is_some_and(|r| r > 0.0) {
            return Err(at("eval.sample_rate", "kbps needs a positive sample rate"));
        }
        if self.fit_steps == Some(0) {
            return Err(at("fit_steps", "must be at least 1"));
        }
        if let Some(l) = self.lambdas.iter().find(|l| !(**l > 0.0)) {
            return Err(at("lambdas", format!("weights must be positive, got {l}")));
        }
        Ok(())
    }

    /// Checks the model configuration against items of `shape` (spatial axes then channels).
    pub fn check_items(&self, shape: &[usize]) -> Result<(), ConfigError> {
        let (channels, spatial) = shape.split_last().ok_or_else(|| at("data", "scalar item"))?;
        if *channels != self.inr.feature_dim {
            return Err(at(
                "inr.feature_dim",
                format!("{} but the data has {channels} channels", self.inr.feature_dim),
            ));
        }
        let want = self.modality.coord_dim(spatial.len());
        if want != self.inr.coord_dim {
            return Err(at(
                "inr.coord_dim",
                format!("{} but items with {} spatial axes need {want}", self.inr.coord_dim, spatial.len()),
            ));
        }
        Ok(())
    }
}
