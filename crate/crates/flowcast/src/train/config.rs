//! Run configuration: every tunable of the model and training loop.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::Neighborhood;
use crate::model::{EncoderConfig, ModelDims};

/// All hyperparameters of a training run. The JSON config file mirrors these
/// field names; unknown keys are rejected, omitted keys take the defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Embedding width D.
    pub embedding_dim: usize,
    /// Temporal kernel size k.
    pub kernel_size: usize,
    /// Sandwich blocks before the closing temporal convolution.
    pub num_blocks: usize,
    /// Cluster prototype count K.
    pub clusters: usize,
    /// Softmax temperature γ of the clustering cross-entropy.
    pub temperature: f64,
    /// Entropy weight ε of the balanced assignment projection.
    pub assignment_smoothing: f64,
    pub sinkhorn_max_iters: usize,
    /// Tolerance on the assignment's column-marginal residual.
    pub sinkhorn_tol: f64,
    /// Inflow/outflow balance λ of the prediction loss.
    pub flow_balance: f64,
    /// Expected fraction of masked traffic entries and rewired edges.
    pub perturbation_ratio: f64,
    pub recent_steps: usize,
    pub daily_steps: usize,
    /// Steps of one day; `None` derives it from the dataset interval.
    pub steps_per_day: Option<usize>,
    pub neighborhood: Neighborhood,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    /// Clustering auxiliary loss on/off.
    pub use_spatial_loss: bool,
    /// Contrastive auxiliary loss on/off.
    pub use_temporal_loss: bool,
    /// Relevance-guided traffic masking; false falls back to uniform masking.
    pub adaptive_traffic_augmentation: bool,
    /// Similarity-guided rewiring; false falls back to uniform rewiring.
    pub adaptive_topology_augmentation: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            embedding_dim: 64,
            kernel_size: 3,
            num_blocks: 1,
            clusters: 4,
            temperature: 0.5,
            assignment_smoothing: 0.05,
            sinkhorn_max_iters: 100,
            sinkhorn_tol: 1e-3,
            flow_balance: 0.5,
            perturbation_ratio: 0.1,
            recent_steps: 4,
            daily_steps: 3,
            steps_per_day: None,
            neighborhood: Neighborhood::Four,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            seed: 0,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            use_spatial_loss: true,
            use_temporal_loss: true,
            adaptive_traffic_augmentation: true,
            adaptive_topology_augmentation: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |msg: String| Err(TrainError::Config(msg));
        if !(0.0..=1.0).contains(&self.flow_balance) {
            return err(format!("flow_balance {} must lie in [0,1]", self.flow_balance));
        }
        if !(0.0..=1.0).contains(&self.perturbation_ratio) {
            return err(format!(
                "perturbation_ratio {} must lie in [0,1]",
                self.perturbation_ratio
            ));
        }
        if self.embedding_dim == 0 || self.clusters < 2 || self.batch_size == 0 {
            return err("embedding_dim, clusters (≥2) and batch_size must be positive".into());
        }
        if self.recent_steps == 0 {
            return err("recent_steps must be at least 1".into());
        }
        if self.temperature <= 0.0 || self.assignment_smoothing <= 0.0 {
            return err("temperature and assignment_smoothing must be positive".into());
        }
        if self.learning_rate <= 0.0 {
            return err("learning_rate must be positive".into());
        }
        if let Some(spd) = self.steps_per_day {
            if spd == 0 {
                return err("steps_per_day must be positive".into());
            }
        }
        self.encoder_config().validate(self.input_len())?;
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.recent_steps + self.daily_steps
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            dim: self.embedding_dim,
            kernel_size: self.kernel_size,
            num_blocks: self.num_blocks,
        }
    }

    pub fn model_dims(&self) -> ModelDims {
        ModelDims {
            encoder: self.encoder_config(),
            clusters: self.clusters,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| TrainError::Config(format!("bad config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let r = RunConfig::from_json(r#"{"embedding_dim": 8, "bogus": 1}"#);
        assert!(matches!(r, Err(TrainError::Config(_))));
    }

    #[test]
    fn partial_json_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"embedding_dim": 16, "seed": 9}"#).unwrap();
        assert_eq!(cfg.embedding_dim, 16);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.batch_size, 32);
    }

    #[test]
    fn bad_window_geometry_rejected() {
        let cfg = RunConfig {
            recent_steps: 5,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lambda_bounds_enforced() {
        let cfg = RunConfig {
            flow_balance: 1.5,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
