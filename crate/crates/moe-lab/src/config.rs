//! Experiment configuration: a TOML-backed struct that round-trips
//! losslessly and validates every referenced range.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use moe_core::losses::AuxLossConfig;
use moe_core::moe::RouterKind;

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token feature width.
    pub token_dim: usize,
    /// Expert hidden width.
    pub hidden_dim: usize,
    pub experts: usize,
    /// Number of stacked MoE blocks (1 or 2).
    pub moe_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub classes: usize,
    pub tokens_per_image: usize,
    pub cluster_spread: f64,
    pub train_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub router: RouterKind,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub aux: AuxLossConfig,
    /// Gate logit noise during training; 0 disables it. The conventional
    /// scale when enabled is `1 / experts`.
    pub gate_noise_stddev: f64,
    /// Constant added to the first gate column at initialization; skews
    /// routing toward expert 0 for the drop-rate stress runs.
    pub gate_skew: f64,
    pub output_dir: PathBuf,
    pub log_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            router: RouterKind::SoftmaxTokenChoice {
                k: 1,
                capacity_factor: None,
            },
            model: ModelConfig {
                token_dim: 16,
                hidden_dim: 64,
                experts: 4,
                moe_layers: 1,
            },
            data: DataConfig {
                classes: 8,
                tokens_per_image: 16,
                cluster_spread: 0.3,
                train_images: 256,
            },
            optim: OptimConfig {
                learning_rate: 0.3,
                steps: 2000,
                batch_size: 8,
            },
            aux: AuxLossConfig::default(),
            gate_noise_stddev: 0.0,
            gate_skew: 0.0,
            output_dir: PathBuf::from("runs/default"),
            log_every: 50,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let m = &self.model;
        if m.token_dim < 1 || m.hidden_dim < 1 || m.experts < 1 {
            return Err(HarnessError::config("model dims must be >= 1"));
        }
        if !(1..=2).contains(&m.moe_layers) {
            return Err(HarnessError::config("moe_layers must be 1 or 2"));
        }
        let d = &self.data;
        if d.classes < 2 {
            return Err(HarnessError::config("need at least two classes"));
        }
        if d.classes > 4 * m.experts {
            return Err(HarnessError::config(
                "classes must not exceed 4x the expert count",
            ));
        }
        if d.tokens_per_image < 1 || d.train_images < 1 {
            return Err(HarnessError::config("dataset sizes must be >= 1"));
        }
        if !(d.cluster_spread >= 0.0 && d.cluster_spread.is_finite()) {
            return Err(HarnessError::config("cluster spread must be finite and >= 0"));
        }
        let o = &self.optim;
        if !(o.learning_rate >= 0.0 && o.learning_rate.is_finite()) {
            return Err(HarnessError::config("learning rate must be finite and >= 0"));
        }
        if o.steps < 1 || o.batch_size < 1 {
            return Err(HarnessError::config("steps and batch size must be >= 1"));
        }
        if o.batch_size > d.train_images {
            return Err(HarnessError::config("batch size exceeds dataset size"));
        }
        if self.log_every < 1 {
            return Err(HarnessError::config("log_every must be >= 1"));
        }
        if !(self.gate_noise_stddev >= 0.0 && self.gate_noise_stddev.is_finite()) {
            return Err(HarnessError::config("gate noise must be finite and >= 0"));
        }
        if !self.gate_skew.is_finite() {
            return Err(HarnessError::config("gate skew must be finite"));
        }
        self.aux
            .validate()
            .map_err(|e| HarnessError::config(e.to_string()))?;
        // the capacity rule must resolve for both routing group sizes
        let group = self.hard_group_tokens();
        self.router
            .capacity(group, m.experts)
            .map_err(|e| HarnessError::config(e.to_string()))?;
        Ok(())
    }

    /// Tokens per routing group for the hard routers (the flattened batch).
    pub fn hard_group_tokens(&self) -> usize {
        self.optim.batch_size * self.data.tokens_per_image
    }

    /// Slots per expert for soft routing (one image per group).
    pub fn soft_slots(&self) -> Result<usize, HarnessError> {
        self.router
            .capacity(self.data.tokens_per_image, self.model.experts)
            .map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use moe_core::affinity::SinkhornParams;

    #[test]
    fn default_config_is_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_lossless() {
        let mut cfg = ExperimentConfig::default();
        cfg.router = RouterKind::SinkhornTokenChoice {
            k: 2,
            capacity_factor: Some(1.5),
            sinkhorn: SinkhornParams {
                iters: 73,
                tol: 3.25e-7,
            },
            softmax_combine: false,
        };
        cfg.optim.learning_rate = 0.12345678901234567;
        cfg.gate_skew = -2.5;
        let text = cfg.to_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn class_count_is_bounded_by_experts() {
        let mut cfg = ExperimentConfig::default();
        cfg.data.classes = 17; // 4*E = 16
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batch_size_cannot_exceed_dataset() {
        let mut cfg = ExperimentConfig::default();
        cfg.optim.batch_size = cfg.data.train_images + 1;
        assert!(cfg.validate().is_err());
    }
}
