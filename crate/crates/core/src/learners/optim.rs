use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::diffcore::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `θ ← θ − γ g`.
    #[default]
    Sgd,
    /// Bias-corrected Adam with β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
    Adam,
}

/// Outer-loop optimizer with its per-parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterOptimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: i32,
    m: ParamSet,
    v: ParamSet,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl OuterOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            m: ParamSet::new(),
            v: ParamSet::new(),
        }
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<(), LearnError> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| LearnError::Model(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(LearnError::Model(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        self.steps += 1;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *x -= self.lr * d;
                    }
                }
                OptimizerKind::Adam => {
                    let m = self
                        .m
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let v = self
                        .v
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(g.shape()));
                    let c1 = 1.0 - BETA1.powi(self.steps);
                    let c2 = 1.0 - BETA2.powi(self.steps);
                    for (((x, d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mi = BETA1 * *mi + (1.0 - BETA1) * d;
                        *vi = BETA2 * *vi + (1.0 - BETA2) * d * d;
                        *x -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
