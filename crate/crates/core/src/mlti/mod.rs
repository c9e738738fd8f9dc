//! Task interpolation: λ sampling, partner and layer selection, label-sharing
//! and non-label-sharing mixing, CutMix patches and interpolated episodes.
//!
//! Mixing is split into a [`MixPlan`] (every random choice: partner, layer,
//! λ, row pairing, patch) and its application, which happens either on plain
//! tensors or on graph nodes so gradients flow into the layers below the
//! interpolation layer.

mod cutmix;
mod lambda;
mod metamix;
mod plan;
mod select;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tensor};
use crate::taskgen::Scenario;

pub use cutmix::{cutmix, cutmix_at, Patch};
pub use lambda::sample_lambda;
pub use metamix::metamix_query_only;
pub use plan::{
    build_interpolated_task, mix_ls, mix_nls, plan_interpolation, Blend, IdentityMixer, MixPlan,
    RowPairing, TaskMixer,
};
pub use select::{select_pair_and_layer, Selection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMethod {
    /// Interpolation of raw inputs only.
    Mixup,
    /// Interpolation at a random layer in `0..=layer_max`.
    ManifoldMixup,
    /// Rectangular patch swap on grid inputs.
    Cutmix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixMode {
    /// No interpolation; the original task is used as is.
    Vanilla,
    /// Partner is the task itself.
    Intra,
    /// Partner is another task of the batch.
    Cross,
    /// Partner is any task of the batch, itself included.
    Both,
}

/// Interpolation policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixConfig {
    pub method: MixMethod,
    pub alpha: f64,
    pub beta: f64,
    pub mode: MixMode,
    /// Highest layer index that may be interpolated; 0 is the input.
    pub layer_max: usize,
    /// Symmetric Beta parameter used instead of (alpha, beta) when the partner is the task itself.
    pub alpha_intra: Option<f64>,
    /// Symmetric Beta parameter used instead of (alpha, beta) for a different partner.
    pub alpha_cross: Option<f64>,
    /// Forbid fixed points of the class pairing when a task is mixed with itself.
    pub derangement_only: bool,
    /// Resample partner rows with replacement when row counts differ.
    pub resample: bool,
    /// Draw separate λ for support and query (experimental; off by default).
    pub independent_lambda: bool,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            method: MixMethod::ManifoldMixup,
            alpha: 2.0,
            beta: 2.0,
            mode: MixMode::Both,
            layer_max: 1,
            alpha_intra: None,
            alpha_cross: None,
            derangement_only: false,
            resample: true,
            independent_lambda: false,
        }
    }
}

impl MixConfig {
    pub fn vanilla() -> Self {
        Self {
            mode: MixMode::Vanilla,
            ..Self::default()
        }
    }

    pub fn validate(&self, shared_prefix: usize) -> Result<(), MixError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.alpha) || !positive(self.beta) {
            return Err(MixError::Config(format!(
                "Beta parameters must be positive, got ({}, {})",
                self.alpha, self.beta
            )));
        }
        for v in [self.alpha_intra, self.alpha_cross].into_iter().flatten() {
            if !positive(v) {
                return Err(MixError::Config(format!(
                    "per-mode Beta parameter must be positive, got {v}"
                )));
            }
        }
        if self.layer_max > shared_prefix {
            return Err(MixError::Config(format!(
                "layer_max {} exceeds the shared prefix length {shared_prefix}",
                self.layer_max
            )));
        }
        if matches!(self.method, MixMethod::Cutmix | MixMethod::Mixup) && self.layer_max != 0 {
            return Err(MixError::Config(format!(
                "{:?} interpolates inputs only; layer_max must be 0",
                self.method
            )));
        }
        Ok(())
    }

    /// Beta parameters for a draw, honouring the per-mode overrides.
    pub fn beta_params(&self, same_task: bool) -> (f64, f64) {
        let over = if same_task {
            self.alpha_intra
        } else {
            self.alpha_cross
        };
        match over {
            Some(a) => (a, a),
            None => (self.alpha, self.beta),
        }
    }
}

/// Forward pass up to a hidden layer, as needed to mix hidden representations.
pub trait LayerForward {
    /// Number of dense layers.
    fn layer_count(&self) -> usize;
    /// Layers that may be interpolated after: `0..=shared_prefix`.
    fn shared_prefix(&self) -> usize;
    /// Representation `H^layer` of `x`, with `H^0 = x`.
    fn hidden(&self, x: &Tensor, layer: usize) -> Result<Tensor, DiffError>;
}

/// Result of interpolating two tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedEpisode {
    pub layer: usize,
    pub support_h: Tensor,
    pub query_h: Tensor,
    pub support_y: Tensor,
    pub query_y: Tensor,
    /// λ used for the support set (after CutMix area correction).
    pub lambda: f64,
    /// λ used for the query set; equals `lambda` unless independent draws are enabled.
    pub query_lambda: f64,
    pub source_pair: (usize, usize),
    pub scenario: Scenario,
    pub n_way: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MixError {
    #[error("invalid interpolation config: {0}")]
    Config(String),
    #[error("cross-task interpolation needs a batch of at least 2 tasks, got {0}")]
    BatchTooSmall(usize),
    #[error("incompatible tasks: {0}")]
    Incompatible(String),
    #[error("row counts differ ({left} vs {right}) and resampling is disabled")]
    Cardinality { left: usize, right: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}
