use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::HeadConfig;
use crate::losses::{BoxLossKind, LossWeights};
use crate::model::{ModelConfig, ModelSpec};

/// Post-processing settings for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// Expected network input; `None` accepts whatever the model was built for.
    pub input_size: Option<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            nms_iou: 0.45,
            max_detections: 300,
            input_size: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("nms_iou", self.nms_iou),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} {v} must lie in (0, 1)")));
            }
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be >= 1".into()));
        }
        Ok(())
    }
}

/// Toy training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub box_loss: BoxLossKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub inner_ratio: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
    /// Moving-average window for the smoothed loss.
    pub smoothing: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            box_loss: BoxLossKind::Ciou,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            steps: 300,
            batch_size: 16,
            weights: LossWeights::default(),
            inner_ratio: 0.75,
            max_grad_norm: Some(10.0),
            smoothing: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.smoothing == 0 {
            return Err(Error::Config(
                "batch_size and smoothing must be >= 1".into(),
            ));
        }
        if !(self.inner_ratio > 0.0) {
            return Err(Error::Config(format!(
                "inner_ratio {} must be positive",
                self.inner_ratio
            )));
        }
        Ok(())
    }
}

/// Top-level JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelSpec,
    pub head: HeadConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub run: RunConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Config =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.run.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            model: self.model.clone(),
            head: self.head.clone(),
        }
    }
}
