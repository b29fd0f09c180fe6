//! Federated optimization toolkit: FedSSG (drift-aligned local training with a
//! participation-aware gate) together with FedAvg, FedProx, SCAFFOLD, FedDyn
//! and FedDC baselines, a deterministic round orchestrator, and the analysis
//! helpers used to compare them.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod algorithms;
pub mod config;
pub mod datasets;
pub mod error;
pub mod models;
pub mod numkit;
pub mod orchestrator;
pub mod sampling;
pub mod task;

pub use algorithms::{
    ablation_mask, Algorithm, Component, CorrectionReference, CorrectionState, FedSsgParams, LocalRunConfig, MemoryAggregation,
    MemoryMode,
};
pub use config::{ExperimentConfig, ExperimentSection, PartitionConfig, TaskConfig};
pub use error::{FedError, Result};
pub use models::{AlignmentForm, ObjectiveSpec};
pub use numkit::{DenseMatrix, ParamVector, RngStream};
pub use orchestrator::{run, RoundRecord, RunOutput};
pub use sampling::{ExpectationHorizon, GateConfig, GateMode, SamplerConfig};
pub use task::FederatedTask;
