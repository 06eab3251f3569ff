//! Training, evaluation protocols and checkpoint persistence.

mod checkpoint;
mod eval;
mod train;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, ArraySpec, Checkpoint, CheckpointMeta, FORMAT_VERSION, MAGIC,
};
pub use eval::{
    evaluate, length_sweep, predict_camera_shapes, reprojection_rmse, sweep_csv, EvalMode,
    EvalOptions,
};
pub use train::{lr_at, resume, train, LogRecord, TrainRun, Trainer};

use serde::{Deserialize, Serialize};

use crate::diffcore::AdamConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Width {
    Standard,
    Tiny,
}

impl Width {
    pub fn model_config(self, points: usize, max_len: usize) -> ModelConfig {
        match self {
            Width::Standard => ModelConfig::standard(points, max_len),
            Width::Tiny => ModelConfig::tiny(points, max_len),
        }
    }
}

impl std::str::FromStr for Width {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Width::Standard),
            "tiny" => Ok(Width::Tiny),
            _ => Err(Error::InvalidArgument(format!("unknown width {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seq_len: usize,
    pub lr: f64,
    /// Steps at which the learning rate drops tenfold; `None` means 40% and 80% of `total_steps`.
    pub decay_steps: Option<Vec<usize>>,
    pub total_steps: usize,
    pub weights: LossWeights,
    pub seed: u64,
    pub shuffle_chunks: bool,
    pub width: Width,
    /// Rescales the gradient to this global norm when it is larger.
    pub clip_norm: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            seq_len: 32,
            lr: 1e-3,
            decay_steps: None,
            total_steps: 1000,
            weights: LossWeights::default(),
            seed: 0,
            shuffle_chunks: true,
            width: Width::Standard,
            clip_norm: None,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn decay_schedule(&self) -> Vec<usize> {
        match &self.decay_steps {
            Some(d) => d.clone(),
            None => {
                let t = self.total_steps;
                let mut d = vec![t * 2 / 5, t * 4 / 5];
                d.dedup();
                d.retain(|&s| s < t);
                d
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::InvalidArgument("seq_len must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        let d = self.decay_schedule();
        if d.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(format!(
                "decay steps {d:?} must be strictly increasing"
            )));
        }
        if let Some(&last) = d.last() {
            if last >= self.total_steps {
                return Err(Error::InvalidArgument(format!(
                    "decay step {last} is not below total_steps {}",
                    self.total_steps
                )));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "clip norm {c} must be positive"
                )));
            }
        }
        self.weights.validate()
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}
