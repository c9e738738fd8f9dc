//! MAML-family and ProtoNet learners with optional task interpolation.
//!
//! Training steps take an optional [`TaskMixer`](crate::mlti::TaskMixer);
//! `None` is the interpolation-free path and consumes no randomness.

mod checkpoint;
mod maml;
mod metric;
mod model;
mod optim;
mod protonet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, GradOrder};
use crate::mlti::MixError;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_HEADER};
pub use maml::{maml_meta_test, maml_task_gradient, maml_train_step, TaskGradient};
pub use metric::{episode_metric, MetricKind};
pub use model::{variant_config, AdaptPolicy, LayeredModel, Variant};
pub use optim::{OptimizerKind, OuterOptimizer};
pub use protonet::{
    prototype_probabilities, prototypes, protonet_meta_test, protonet_task_gradient,
    protonet_train_step,
};

/// Meta-training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Inner-loop step size η.
    pub inner_lr: f64,
    /// Outer-loop step size γ.
    pub outer_lr: f64,
    /// Inner-loop updates U during meta-training.
    pub inner_updates: usize,
    /// Inner-loop updates at meta-test; defaults to `inner_updates`.
    pub test_updates: Option<usize>,
    pub batch_size: usize,
    pub iterations: usize,
    pub order: GradOrder,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_updates: 5,
            test_updates: None,
            batch_size: 4,
            iterations: 2000,
            order: GradOrder::First,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    /// η may be 0 (a no-op inner loop); γ must be positive.
    pub fn validate(&self) -> Result<(), LearnError> {
        if !(self.inner_lr.is_finite() && self.inner_lr >= 0.0) {
            return Err(LearnError::Config(format!(
                "inner_lr must be finite and >= 0, got {}",
                self.inner_lr
            )));
        }
        if !(self.outer_lr.is_finite() && self.outer_lr > 0.0) {
            return Err(LearnError::Config(format!(
                "outer_lr must be finite and > 0, got {}",
                self.outer_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(LearnError::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn meta_test_updates(&self) -> usize {
        self.test_updates.unwrap_or(self.inner_updates)
    }
}

/// Per-task record of one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrace {
    pub task_id: usize,
    pub partner_task_id: usize,
    pub layer: usize,
    /// Support λ, or `None` when the task was not interpolated.
    pub lambda: Option<f64>,
    /// Parameters the inner loop updated.
    pub adapted: Vec<String>,
    /// Parameters whose adapted value is the untouched initialization.
    pub untouched: Vec<String>,
    pub query_loss: f64,
}

/// Outcome of one outer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// Mean query loss over the batch, before the update.
    pub loss: f64,
    pub tasks: Vec<TaskTrace>,
}

/// Query predictions and metric of one meta-test episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Raw outputs (logits or regression values) for MAML, class probabilities for ProtoNet.
    pub predictions: crate::diffcore::Tensor,
    pub metric: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnError {
    #[error("invalid learner config: {0}")]
    Config(String),
    #[error("invalid model: {0}")]
    Model(String),
    #[error("interpolation layer {layer} must be below the layer count {layers}")]
    LayerOutOfRange { layer: usize, layers: usize },
    #[error("class {class} has no support rows")]
    EmptyClass { class: usize },
    #[error("empty query set")]
    EmptyQuery,
    #[error("{what}: {message}")]
    Episode { what: &'static str, message: String },
    #[error(
        "non-finite loss at iteration {iteration} (tasks {task_id} and {partner_task_id}, λ = {lambda:?}): {source}"
    )]
    Diverged {
        iteration: usize,
        task_id: usize,
        partner_task_id: usize,
        lambda: Option<f64>,
        source: DiffError,
    },
    #[error("checkpoint line {line}: {message}")]
    Checkpoint { line: usize, message: String },
    #[error(transparent)]
    Mix(#[from] MixError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}
