//! Typed experiment configuration, one section per module.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::algorithms::{Algorithm, LocalRunConfig};
use crate::error::{FedError, Result};
use crate::sampling::{GateConfig, SamplerConfig};

fn default_eval_every() -> u64 {
    1
}
fn default_resamples() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seed: u64,
    pub total_rounds: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Cohort resamples per round for the empirical descent constant on
    /// synthetic tasks; 0 disables it.
    #[serde(default = "default_resamples")]
    pub descent_resamples: usize,
    /// Accuracy threshold for rounds-to-target reporting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

fn default_mnist_hidden() -> Vec<usize> {
    vec![200, 200]
}
fn default_eval_subset() -> usize {
    2048
}
fn default_quad_dim() -> usize {
    10
}
fn default_heterogeneity() -> f64 {
    1.0
}
fn default_features() -> usize {
    20
}
fn default_classes() -> usize {
    5
}
fn default_train_samples() -> usize {
    5000
}
fn default_test_samples() -> usize {
    1000
}
fn default_separation() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    Mnist {
        /// Directory holding the four IDX files; falls back to
        /// `FEDLAB_DATA_DIR`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data_dir: Option<PathBuf>,
        #[serde(default = "default_mnist_hidden")]
        hidden: Vec<usize>,
        /// Training samples used to measure `f(ω)` and `‖∇f(ω)‖²`.
        #[serde(default = "default_eval_subset")]
        eval_subset: usize,
    },
    SyntheticQuadratic {
        #[serde(default = "default_quad_dim")]
        dim: usize,
        #[serde(default = "default_heterogeneity")]
        heterogeneity: f64,
    },
    SyntheticLogistic {
        #[serde(default = "default_features")]
        features: usize,
        #[serde(default = "default_classes")]
        classes: usize,
        #[serde(default = "default_train_samples")]
        train_samples: usize,
        #[serde(default = "default_test_samples")]
        test_samples: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        hidden: Vec<usize>,
    },
}

impl TaskConfig {
    pub fn is_synthetic(&self) -> bool {
        !matches!(self, TaskConfig::Mnist { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionConfig {
    /// Class-stratified round-robin split.
    #[default]
    Iid,
    Dirichlet { concentration: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub task: TaskConfig,
    #[serde(default)]
    pub partition: PartitionConfig,
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub gate: GateConfig,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub run: LocalRunConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.total_rounds == 0 {
            return Err(FedError::config("total_rounds", "must be at least 1"));
        }
        if e.eval_every == 0 {
            return Err(FedError::config("eval_every", "must be at least 1"));
        }
        if let Some(t) = e.target_accuracy {
            if !(t > 0.0 && t < 1.0) {
                return Err(FedError::config("target_accuracy", "must lie in (0, 1)"));
            }
        }
        self.sampler.validate()?;
        self.gate.validate()?;
        self.algorithm.validate()?;
        self.run.validate()?;
        if let PartitionConfig::Dirichlet { concentration } = self.partition {
            if !(concentration > 0.0) || !concentration.is_finite() {
                return Err(FedError::config("partition.concentration", "must be positive"));
            }
        }
        match &self.task {
            TaskConfig::Mnist { hidden, eval_subset, .. } => {
                if hidden.contains(&0) {
                    return Err(FedError::config("task.hidden", "layer widths must be positive"));
                }
                if *eval_subset == 0 {
                    return Err(FedError::config("task.eval_subset", "must be positive"));
                }
            }
            TaskConfig::SyntheticQuadratic { dim, heterogeneity } => {
                if *dim == 0 {
                    return Err(FedError::config("task.dim", "must be at least 1"));
                }
                if !(*heterogeneity >= 0.0) || !heterogeneity.is_finite() {
                    return Err(FedError::config("task.heterogeneity", "must be non-negative"));
                }
            }
            TaskConfig::SyntheticLogistic {
                features,
                classes,
                train_samples,
                test_samples,
                separation,
                hidden,
            } => {
                if *features == 0 {
                    return Err(FedError::config("task.features", "must be at least 1"));
                }
                if *classes < 2 {
                    return Err(FedError::config("task.classes", "must be at least 2"));
                }
                if *train_samples < self.sampler.n_clients {
                    return Err(FedError::config("task.train_samples", "fewer samples than clients"));
                }
                if *test_samples == 0 {
                    return Err(FedError::config("task.test_samples", "must be positive"));
                }
                if !(*separation >= 0.0) || !separation.is_finite() {
                    return Err(FedError::config("task.separation", "must be non-negative"));
                }
                if hidden.contains(&0) {
                    return Err(FedError::config("task.hidden", "layer widths must be positive"));
                }
            }
        }
        Ok(())
    }
}
