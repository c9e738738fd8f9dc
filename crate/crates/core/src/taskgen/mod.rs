//! Synthetic task banks and episodic samplers.
//!
//! Three bank kinds are available. `gaussian-classes` is a non-label-sharing
//! pool of classes whose means sit on a sphere. `glyph-grid` is a
//! label-sharing family of 10-way glyph tasks, one per transform combination.
//! `rotation-regression` asks for the rotation angle of a glyph object.

mod bank;
mod episode;
pub mod glyph;
mod io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tensor};

pub use bank::{build_bank, split_pools, BankData, TaskBank};
pub use episode::sample_episode;
pub use io::{export_bank, import_bank};

/// Whether tasks share one label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    #[serde(rename = "ls")]
    LabelSharing,
    #[serde(rename = "nls")]
    NonLabelSharing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolSplit {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    /// One-hot rows over the episode's N labels.
    Classes,
    /// A single real target column.
    Scalar,
}

/// Bank construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BankSpec {
    GaussianClasses {
        classes: usize,
        dim: usize,
        radius: f64,
        noise: f64,
        /// Finite sample pool per class; fresh noise per draw when absent.
        #[serde(default)]
        samples_per_class: Option<usize>,
        /// Constant added to every input coordinate (domain shift).
        #[serde(default)]
        shift: f64,
        train_count: usize,
        test_count: usize,
    },
    GlyphGrid {
        grid: usize,
        noise: f64,
        train_count: usize,
        test_count: usize,
    },
    RotationRegression {
        grid: usize,
        noise: f64,
        train_count: usize,
        test_count: usize,
    },
}

impl BankSpec {
    pub fn kind_name(&self) -> &'static str {
        match self {
            BankSpec::GaussianClasses { .. } => "gaussian-classes",
            BankSpec::GlyphGrid { .. } => "glyph-grid",
            BankSpec::RotationRegression { .. } => "rotation-regression",
        }
    }

    pub fn scenario(&self) -> Scenario {
        match self {
            BankSpec::GaussianClasses { .. } => Scenario::NonLabelSharing,
            _ => Scenario::LabelSharing,
        }
    }

    pub fn target_kind(&self) -> TargetKind {
        match self {
            BankSpec::RotationRegression { .. } => TargetKind::Scalar,
            _ => TargetKind::Classes,
        }
    }

    /// Flattened input width.
    pub fn input_dim(&self) -> usize {
        match self {
            BankSpec::GaussianClasses { dim, .. } => *dim,
            BankSpec::GlyphGrid { grid, .. } | BankSpec::RotationRegression { grid, .. } => {
                grid * grid
            }
        }
    }

    /// Grid side for image-like inputs.
    pub fn grid_side(&self) -> Option<usize> {
        match self {
            BankSpec::GaussianClasses { .. } => None,
            BankSpec::GlyphGrid { grid, .. } | BankSpec::RotationRegression { grid, .. } => {
                Some(*grid)
            }
        }
    }

    pub fn counts(&self) -> (usize, usize) {
        match self {
            BankSpec::GaussianClasses {
                train_count,
                test_count,
                ..
            }
            | BankSpec::GlyphGrid {
                train_count,
                test_count,
                ..
            }
            | BankSpec::RotationRegression {
                train_count,
                test_count,
                ..
            } => (*train_count, *test_count),
        }
    }

    pub(crate) fn set_counts(&mut self, train: usize, test: usize) {
        match self {
            BankSpec::GaussianClasses {
                train_count,
                test_count,
                ..
            }
            | BankSpec::GlyphGrid {
                train_count,
                test_count,
                ..
            }
            | BankSpec::RotationRegression {
                train_count,
                test_count,
                ..
            } => {
                *train_count = train;
                *test_count = test;
            }
        }
    }
}

/// One few-shot task. Rows are grouped class by class: support rows
/// `r*K..(r+1)*K` and query rows `r*Q..(r+1)*Q` carry label `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
    pub scenario: Scenario,
    pub target: TargetKind,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    /// Global class id behind each episode label (label `r` is `class_ids[r]`).
    pub class_ids: Vec<usize>,
    pub task_id: usize,
    /// Grid side when inputs are flattened square grids.
    pub grid: Option<usize>,
}

impl Episode {
    /// Label of each support row (empty for regression).
    pub fn support_labels(&self) -> Vec<usize> {
        labels_for(self.target, self.n_way, self.k_shot)
    }

    pub fn query_labels(&self) -> Vec<usize> {
        labels_for(self.target, self.n_way, self.q_queries)
    }
}

fn labels_for(target: TargetKind, n_way: usize, per_class: usize) -> Vec<usize> {
    match target {
        TargetKind::Classes => (0..n_way)
            .flat_map(|r| std::iter::repeat_n(r, per_class))
            .collect(),
        TargetKind::Scalar => Vec::new(),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BankError {
    #[error("invalid bank parameters: {0}")]
    Invalid(String),
    #[error("pools need {needed} {what} but only {available} exist")]
    PoolTooLarge {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("fewer base classes than needed: {needed}-way episode from a pool of {available}")]
    FewerClasses { needed: usize, available: usize },
    #[error("class pool holds {available} samples per class, episode needs {needed}")]
    FewerSamples { needed: usize, available: usize },
    #[error("label-sharing bank has {labels} labels, episode asked for {requested}-way")]
    WayMismatch { labels: usize, requested: usize },
    #[error("bank text line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Diff(#[from] DiffError),
}
