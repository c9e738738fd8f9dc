//! Numerical checks of the second-order regularization expansions of task
//! interpolation, and of the variance ordering between cross-task and
//! within-task mixing.
//!
//! Every expansion is checked two ways: against a plain Monte-Carlo average
//! over interpolation draws (with its standard error), and against a
//! deterministic reference that enumerates partners exactly and integrates λ
//! by Gauss–Legendre quadrature, which makes the remainder measurable at
//! small feature scales.

mod model;
mod moments;
mod taylor;
mod variance;

use thiserror::Error;

use crate::diffcore::kernels::pairwise_sum;

pub use model::{center_features, class_weighted_mean, TheoryModel, TheoryTask};
pub use moments::{
    lambda_moments, LambdaLaw, LambdaMoments, MixMoments, DIAGNOSTIC_DRAWS,
    DIVERGENCE_TOLERANCE,
};
pub use taylor::{
    epsilon_sweep, gbml_taylor_check, protonet_taylor_check, remainder_slope, PartnerMode,
    TaylorForm, TaylorOptions,
};
pub use variance::{variance_ordering_check, VarianceOrdering};

/// `ψ(u) = eᵘ/(1+eᵘ)²`, the logistic density; lies in `(0, 1/4]`.
pub fn psi(u: f64) -> f64 {
    let e = (-u.abs()).exp();
    e / ((1.0 + e) * (1.0 + e))
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + eᵘ)` without overflow.
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Estimate {
    /// Pairwise-summed mean and `s/√n` with the `n − 1` sample deviation.
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        let mean = pairwise_sum(values) / n as f64;
        let dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
        let var = if n > 1 {
            pairwise_sum(&dev) / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n as f64).sqrt(),
            n,
        }
    }
}

/// Outcome of one expansion check at one feature scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub check: String,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub n_mc: usize,
    /// Monte-Carlo average of the interpolated loss.
    pub mc_value: f64,
    pub stderr: f64,
    /// Second-order expansion.
    pub taylor_value: f64,
    /// `|mc_value − taylor_value|`.
    pub abs_error: f64,
    /// Exact expectation by enumeration and quadrature.
    pub reference_value: f64,
    /// `|reference_value − taylor_value|`, the expansion remainder.
    pub remainder: f64,
    /// Mean of the reweighted mixing law.
    pub lambda_bar: f64,
    /// `E[(1−λ)²/λ²]` under the reweighted law.
    pub c: f64,
    /// Curvature-weighted penalty on the partner second moment.
    pub regularizer: f64,
}

pub const REPORT_HEADER: &str = "check,alpha,beta,epsilon,n_mc,mc_value,taylor_value,abs_error,stderr,reference_value,remainder,lambda_bar,c,regularizer";

impl TheoryReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.check,
            self.alpha,
            self.beta,
            self.epsilon,
            self.n_mc,
            self.mc_value,
            self.taylor_value,
            self.abs_error,
            self.stderr,
            self.reference_value,
            self.remainder,
            self.lambda_bar,
            self.c,
            self.regularizer
        )
    }
}

/// Header plus one row per report.
pub fn reports_csv(reports: &[TheoryReport]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid theory input: {0}")]
    Invalid(String),
    #[error("E[(1-λ)²/λ²] diverges for Beta({alpha}, {beta}); running means {running:?}")]
    DivergentC {
        alpha: f64,
        beta: f64,
        running: Vec<(usize, f64)>,
    },
    #[error("features are not centred: grand mean has max-norm {0:e}")]
    NotCentered(f64),
    #[error("covariance difference is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),
}
