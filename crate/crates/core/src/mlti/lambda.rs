use rand_distr::{Beta, Distribution};

use super::MixError;
use crate::rng::Rng;

/// One draw of λ ~ Beta(alpha, beta).
pub fn sample_lambda(alpha: f64, beta: f64, rng: &mut Rng) -> Result<f64, MixError> {
    let dist = Beta::new(alpha, beta).map_err(|e| {
        MixError::Config(format!("Beta({alpha}, {beta}) is not a valid distribution: {e}"))
    })?;
    Ok(dist.sample(rng).clamp(0.0, 1.0))
}
