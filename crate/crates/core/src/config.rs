//! Pipeline configuration file (TOML). Unknown keys are rejected; relative
//! paths resolve against the directory of the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registration::RegistrationParams;
use crate::training::TrainConfig;

pub const CACHE_ENV: &str = "PADDYSPEC_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Holds `<label>/<id>_rgb.png`, `<label>/<id>_rgnir.png`, `sessions.csv`.
    pub data_root: PathBuf,
    /// Fused training samples.
    pub cache_dir: PathBuf,
    /// One subdirectory per subcommand.
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            cache_dir: "cache".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Directory of session files (`<session_id>.toml`).
    pub sessions_dir: PathBuf,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            sessions_dir: "data/sessions".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub k: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Drives RANSAC sampling, fold assignment, initialization and batch order.
    pub seed: u64,
    pub paths: Paths,
    pub registration: RegistrationParams,
    pub calibration: CalibrationConfig,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.k == 0 {
            return Err(Error::Config("dataset.k must be at least 1".into()));
        }
        let r = &self.registration;
        if !(0.0..1.0).contains(&r.drop_fraction) {
            return Err(Error::Config(format!("registration.drop_fraction {} must be in [0, 1)", r.drop_fraction)));
        }
        if r.ransac.iters == 0 || !(r.ransac.inlier_px > 0.0) || r.ransac.min_inliers < 4 {
            return Err(Error::Config("registration.ransac needs iters >= 1, inlier_px > 0, min_inliers >= 4".into()));
        }
        if r.detector.target_count < 4 || r.detector.octaves == 0 || !(r.detector.scale_factor > 1.0) {
            return Err(Error::Config(
                "registration.detector needs target_count >= 4, octaves >= 1, scale_factor > 1".into(),
            ));
        }
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Defaults as TOML, including the optional keys that have no TOML null.
    pub fn defaults_toml() -> String {
        let mut s = Self::default().to_toml();
        s.push_str(
            "\n# Optional:\n\
             # [train]\n\
             # class_weights = [1.0, 1.0, 1.0]   # default: N / (K * n_c) from the training folds\n",
        );
        s
    }

    /// Copies the top-level seed into the stages and makes relative paths
    /// absolute against `base`. `cache_override` (from the environment) wins
    /// over the file.
    pub fn resolve(&self, base: &Path, cache_override: Option<PathBuf>) -> PipelineConfig {
        let mut c = self.clone();
        c.registration.ransac.seed = c.seed;
        c.train.seed = c.seed;
        if let Some(cache) = cache_override {
            c.paths.cache_dir = cache;
        }
        let abs = |p: &PathBuf| if p.is_relative() { base.join(p) } else { p.clone() };
        c.paths.data_root = abs(&c.paths.data_root);
        c.paths.cache_dir = abs(&c.paths.cache_dir);
        c.paths.output_dir = abs(&c.paths.output_dir);
        c.calibration.sessions_dir = abs(&c.calibration.sessions_dir);
        c
    }
}
