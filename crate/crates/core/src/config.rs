//! Hyperparameters for training and inference.
//!
//! The on-disk form is TOML: training keys at top level, loss keys under
//! `[loss]`. Unknown keys are rejected with their line number.

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How the AACM scores become per-patch probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AacmActivation {
    /// Independent logistic per patch.
    #[default]
    Sigmoid,
    /// Softmax across all patches of an image.
    SoftmaxPatches,
}

/// Per-sample work inside a batch, and per-image work during evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, else sequential.
    #[default]
    Parallel,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
    pub lambda_cm: f64,
    pub lambda_aacm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
            lambda_cm: 1.0,
            lambda_aacm: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0 && self.focal_gamma.is_finite()) {
            return Err(Error::Config(format!(
                "loss.focal_gamma must be >= 0, got {}",
                self.focal_gamma
            )));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha < 1.0) {
            return Err(Error::Config(format!(
                "loss.focal_alpha must be in (0,1), got {}",
                self.focal_alpha
            )));
        }
        if !(self.dice_eps > 0.0 && self.dice_eps.is_finite()) {
            return Err(Error::Config(format!(
                "loss.dice_eps must be > 0, got {}",
                self.dice_eps
            )));
        }
        for (name, v) in [("lambda_cm", self.lambda_cm), ("lambda_aacm", self.lambda_aacm)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("loss.{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Softmax temperature applied to patch/text cosines.
    pub temperature: f64,
    /// Backbone layers feeding the stage adapters; the last one also feeds AACM.
    pub layer_indices: Vec<u32>,
    /// Shared adapter output dimension.
    pub d_e: usize,
    /// Adapter hidden width is `ceil(d_in / hidden_divisor)` unless `hidden_dim` is set.
    pub hidden_divisor: usize,
    pub hidden_dim: Option<usize>,
    pub leaky_slope: f64,
    pub seed: u64,
    pub smoothing: bool,
    pub smoothing_sigma: f64,
    pub aacm_activation: AacmActivation,
    pub execution: Execution,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 64,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            temperature: 0.07,
            layer_indices: vec![6, 12, 18, 24],
            d_e: 768,
            hidden_divisor: 4,
            hidden_dim: None,
            leaky_slope: 0.01,
            seed: 0,
            smoothing: false,
            smoothing_sigma: 4.0,
            aacm_activation: AacmActivation::Sigmoid,
            execution: Execution::Parallel,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return fail(format!("{name} must be in (0,1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return fail(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.layer_indices.is_empty() {
            return fail("layer_indices must not be empty".into());
        }
        if self.layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "layer_indices must be strictly increasing, got {:?}",
                self.layer_indices
            ));
        }
        if self.d_e == 0 {
            return fail("d_e must be at least 1".into());
        }
        if self.hidden_divisor == 0 {
            return fail("hidden_divisor must be at least 1".into());
        }
        if self.hidden_dim == Some(0) {
            return fail("hidden_dim must be at least 1".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return fail(format!("leaky_slope must be in (0,1), got {}", self.leaky_slope));
        }
        if !(self.smoothing_sigma > 0.0 && self.smoothing_sigma.is_finite()) {
            return fail(format!(
                "smoothing_sigma must be > 0, got {}",
                self.smoothing_sigma
            ));
        }
        self.loss.validate()
    }

    pub fn hidden_for(&self, d_in: usize) -> usize {
        self.hidden_dim
            .unwrap_or_else(|| d_in.div_ceil(self.hidden_divisor))
    }

    /// Digest of the settings that determine the adapter architecture.
    pub fn arch_hash(&self) -> [u8; 32] {
        let canonical = format!(
            "d_e={};layers={:?};hidden_divisor={};hidden_dim={:?};slope={:016x}",
            self.d_e,
            self.layer_indices,
            self.hidden_divisor,
            self.hidden_dim,
            self.leaky_slope.to_bits()
        );
        Sha256::digest(canonical.as_bytes()).into()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
