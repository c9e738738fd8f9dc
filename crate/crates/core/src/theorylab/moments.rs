use std::num::NonZeroUsize;

use gauss_quad::legendre::GaussLegendre;
use rand::Rng as _;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;

use super::{Estimate, TheoryError};
use crate::rng::{substream, Rng};

/// Relative drift between successive doublings above which a running mean
/// is declared non-convergent.
pub const DIVERGENCE_TOLERANCE: f64 = 0.1;

/// Draws behind the divergence diagnostic of `c`; the integrand has infinite
/// variance even where its mean is finite, so smaller samples trip spuriously.
pub const DIAGNOSTIC_DRAWS: usize = 1 << 22;

/// First two moments of a mixing distribution over λ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixMoments {
    pub mean: f64,
    pub second: f64,
}

impl MixMoments {
    pub fn var(&self) -> f64 {
        self.second - self.mean * self.mean
    }

    /// `E[(1 − λ)²]`.
    pub fn one_minus_sq(&self) -> f64 {
        1.0 - 2.0 * self.mean + self.second
    }
}

/// Which distribution λ follows in an expansion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaLaw {
    /// `Beta(α, β)`.
    Beta(f64, f64),
    /// `α/(α+β)·Beta(α+1, β) + β/(α+β)·Beta(β+1, α)`.
    Reweighted(f64, f64),
}

fn beta_moments(a: f64, b: f64) -> MixMoments {
    MixMoments {
        mean: a / (a + b),
        second: a * (a + 1.0) / ((a + b) * (a + b + 1.0)),
    }
}

impl LambdaLaw {
    /// Mixture components `(weight, a, b)`.
    fn components(self) -> Vec<(f64, f64, f64)> {
        match self {
            LambdaLaw::Beta(a, b) => vec![(1.0, a, b)],
            LambdaLaw::Reweighted(a, b) => {
                vec![(a / (a + b), a + 1.0, b), (b / (a + b), b + 1.0, a)]
            }
        }
    }

    pub fn moments(self) -> MixMoments {
        let mut out = MixMoments {
            mean: 0.0,
            second: 0.0,
        };
        for (w, a, b) in self.components() {
            let m = beta_moments(a, b);
            out.mean += w * m.mean;
            out.second += w * m.second;
        }
        out
    }

    /// `E[(1 − λ)²/λ²]`, or `None` when the integral diverges.
    ///
    /// For one `Beta(a, b)` component the value is `b(b+1)/((a−1)(a−2))`, finite iff `a > 2`.
    pub fn c_moment(self) -> Option<f64> {
        let mut total = 0.0;
        for (w, a, b) in self.components() {
            if a <= 2.0 {
                return None;
            }
            total += w * b * (b + 1.0) / ((a - 1.0) * (a - 2.0));
        }
        Some(total)
    }

    pub fn sample(self, rng: &mut Rng) -> f64 {
        let comps = self.components();
        let (_, a, b) = if comps.len() == 1 {
            comps[0]
        } else {
            let u: f64 = rng.random();
            if u < comps[0].0 {
                comps[0]
            } else {
                comps[1]
            }
        };
        let d = Beta::new(a, b).expect("parameters validated positive");
        d.sample(rng).clamp(0.0, 1.0)
    }

    /// Quadrature rule `(λ_q, w_q)` with `Σ w_q f(λ_q) ≈ E f(λ)`; exact for
    /// polynomial integrands of moderate degree when both shape parameters are integers.
    pub fn quadrature(self, degree: usize) -> Vec<(f64, f64)> {
        let rule = GaussLegendre::new(NonZeroUsize::new(degree).expect("degree >= 1"));
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (w, a, b) in self.components() {
            let raw: Vec<(f64, f64)> = rule
                .as_node_weight_pairs()
                .iter()
                .map(|(x, wq)| {
                    let t = 0.5 * (x + 1.0);
                    (t, 0.5 * wq * t.powf(a - 1.0) * (1.0 - t).powf(b - 1.0))
                })
                .collect();
            let norm: f64 = raw.iter().map(|p| p.1).sum();
            out.extend(raw.into_iter().map(|(t, v)| (t, w * v / norm)));
        }
        out
    }
}

pub(crate) fn validate_shape(alpha: f64, beta: f64) -> Result<(), TheoryError> {
    if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && beta > 0.0) {
        return Err(TheoryError::Invalid(format!(
            "Beta parameters must be positive, got ({alpha}, {beta})"
        )));
    }
    Ok(())
}

/// Closed-form and Monte-Carlo moments of the reweighted mixing law.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaMoments {
    pub alpha: f64,
    pub beta: f64,
    /// Closed-form `E[λ]`.
    pub lambda_bar: f64,
    pub lambda_bar_mc: Estimate,
    /// Closed-form `E[(1−λ)²/λ²]`; `None` when it diverges.
    pub c: Option<f64>,
    pub c_mc: Estimate,
    /// Running means of the `c` integrand at doubling sample sizes.
    pub c_running: Vec<(usize, f64)>,
    /// Whether the running means settled within [`DIVERGENCE_TOLERANCE`].
    pub c_mc_converged: bool,
}

impl LambdaMoments {
    /// The `c` value, refusing when either the closed form or the Monte-Carlo
    /// diagnostic says the integral diverges.
    pub fn c_value(&self) -> Result<f64, TheoryError> {
        match self.c {
            Some(c) if self.c_mc_converged => Ok(c),
            _ => Err(TheoryError::DivergentC {
                alpha: self.alpha,
                beta: self.beta,
                running: self.c_running.clone(),
            }),
        }
    }
}

const CHUNK: usize = 1 << 14;

/// Draws `n` values of `f(λ)` with λ from `law`, in fixed chunks so the
/// result does not depend on the thread count.
pub(crate) fn draw_lambda_values(law: LambdaLaw, n: usize, seed: u64, f: impl Fn(f64) -> f64 + Sync + Send) -> Vec<f64> {
    let chunks = n.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = substream(seed, &[c as u64]);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len).map(|_| f(law.sample(&mut rng))).collect::<Vec<_>>()
        })
        .collect()
}

/// `E[λ]` and `c = E[(1−λ)²/λ²]` under the reweighted law, with Monte-Carlo
/// estimates and a divergence diagnostic for `c`.
pub fn lambda_moments(alpha: f64, beta: f64, n_mc: usize, seed: u64) -> Result<LambdaMoments, TheoryError> {
    validate_shape(alpha, beta)?;
    if n_mc < 1024 {
        return Err(TheoryError::Invalid(format!("n_mc must be >= 1024, got {n_mc}")));
    }
    let law = LambdaLaw::Reweighted(alpha, beta);
    let lambdas = draw_lambda_values(law, n_mc, seed, |l| l);
    let lambda_bar_mc = Estimate::from_values(&lambdas);
    let ratios: Vec<f64> = lambdas
        .iter()
        .map(|l| ((1.0 - l) / l).powi(2))
        .collect();
    let c_mc = Estimate::from_values(&ratios);
    let mut c_running = Vec::new();
    let mut size = n_mc;
    while size >= 1024 && c_running.len() < 8 {
        c_running.push((size, Estimate::from_values(&ratios[..size]).mean));
        size /= 2;
    }
    c_running.reverse();
    let c_mc_converged = c_running
        .windows(2)
        .rev()
        .take(3)
        .all(|w| (w[1].1 - w[0].1).abs() <= DIVERGENCE_TOLERANCE * w[1].1.abs());
    Ok(LambdaMoments {
        alpha,
        beta,
        lambda_bar: law.moments().mean,
        lambda_bar_mc,
        c: law.c_moment(),
        c_mc,
        c_running,
        c_mc_converged,
    })
}
