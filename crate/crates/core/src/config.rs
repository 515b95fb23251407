//! Run configuration: a JSON file with flag overrides on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::restore::TrainConfig;
use crate::synth::SensorProfile;
use crate::tta::TtaConfig;
use crate::voxel::GridSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grid: GridSpec,
    /// Beam bins used for labelling (M).
    pub beams: usize,
    /// Per-point removal probability after decimation (P).
    pub dropout: f64,
    pub train: TrainSection,
    pub tta: TtaSection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub det_epochs: usize,
    pub ssl_epochs: usize,
    pub det_lr: f64,
    pub ssl_lr: f64,
    pub batch_size: usize,
    pub ssl_factors: Vec<u32>,
    pub lambda1: f64,
    pub momentum: f64,
    pub feature_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtaSection {
    pub n_iter: usize,
    pub lr: f64,
    pub factors: Vec<u32>,
    /// Queries are adapted one at a time; only 1 is accepted.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub profile: String,
    pub frames: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: 0,
            grid: t.grid,
            beams: t.beams,
            dropout: t.dropout,
            train: TrainSection::default(),
            tta: TtaSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            det_epochs: t.det_epochs,
            ssl_epochs: t.ssl_epochs,
            det_lr: t.det_lr,
            ssl_lr: t.ssl_lr,
            batch_size: t.batch_size,
            ssl_factors: t.ssl_factors,
            lambda1: t.lambda1,
            momentum: t.momentum,
            feature_seed: t.feature_seed,
        }
    }
}

impl Default for TtaSection {
    fn default() -> Self {
        let t = TtaConfig::default();
        Self {
            n_iter: t.n_iter,
            lr: t.lr,
            factors: t.factors,
            batch_size: 1,
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            profile: "waymo".into(),
            frames: 16,
        }
    }
}

impl RunConfig {
    /// Defaults, or the file's values over the defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.tta.batch_size != 1 {
            return Err(Error::Config(format!(
                "tta.batch_size must be 1, got {}",
                self.tta.batch_size
            )));
        }
        if SensorProfile::by_name(&self.synth.profile).is_none() {
            return Err(Error::Config(format!(
                "unknown sensor profile {:?} (expected waymo, kitti or nuscenes)",
                self.synth.profile
            )));
        }
        self.train_config().validate()?;
        self.tta_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            grid: self.grid,
            beams: self.beams,
            det_epochs: t.det_epochs,
            ssl_epochs: t.ssl_epochs,
            det_lr: t.det_lr,
            ssl_lr: t.ssl_lr,
            batch_size: t.batch_size,
            dropout: self.dropout,
            ssl_factors: t.ssl_factors.clone(),
            lambda1: t.lambda1,
            momentum: t.momentum,
            seed: self.seed,
            feature_seed: t.feature_seed,
        }
    }

    pub fn tta_config(&self) -> TtaConfig {
        TtaConfig {
            n_iter: self.tta.n_iter,
            lr: self.tta.lr,
            factors: self.tta.factors.clone(),
            dropout: self.dropout,
            beams: self.beams,
            seed: self.seed,
        }
    }
}
