use nalgebra::{DMatrix, SymmetricEigen};

use super::moments::{validate_shape, LambdaLaw};
use super::TheoryError;
use crate::diffcore::Tensor;

/// Covariances of the interpolated representation `λh + (1 − λ)h'`,
/// averaged over anchors `h`, under cross-task and within-task partners.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceOrdering {
    /// Partner task `G` uniform over all tasks, partner row uniform in `G`.
    pub cross: Tensor,
    /// Average over `G` of the covariance given partner task `G`.
    pub within: Tensor,
    /// `cross − within`.
    pub diff: Tensor,
    /// `(1 − E[λ])² Cov_G(μ_G)`, the spread of the partner task means.
    pub between: Tensor,
    pub min_eigenvalue: f64,
    /// Trace of `diff`.
    pub trace: f64,
    /// `diff` is positive semi-definite up to `1e-8 · tr(cross)`.
    pub psd: bool,
    /// `diff` is positive definite beyond `1e-8 · tr(cross)`.
    pub positive_definite: bool,
}

/// Mean row and second-moment matrix `(1/n) Σ h hᵀ`.
fn task_moments(t: &Tensor) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n, d) = (t.rows(), t.cols());
    let h = DMatrix::from_row_slice(n, d, t.data());
    let mean = DMatrix::from_column_slice(d, 1, h.row_mean().as_slice());
    let second = h.transpose() * &h / n as f64;
    (mean, second)
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let d = m.nrows();
    let data = (0..d).flat_map(|r| (0..d).map(move |c| m[(r, c)])).collect();
    Tensor::matrix(d, d, data).expect("square")
}

/// `Cov(λh + (1 − λ)h')` for λ independent of a partner with mean `mu` and
/// second moment `second`.
fn mix_cov(h: &DMatrix<f64>, mu: &DMatrix<f64>, second: &DMatrix<f64>, m1: f64, m2: f64) -> DMatrix<f64> {
    let cross = m1 - m2;
    let s2 = 1.0 - 2.0 * m1 + m2;
    let mean = h * m1 + mu * (1.0 - m1);
    let hh = h * h.transpose();
    let hm = h * mu.transpose();
    let raw = hh * m2 + (&hm + hm.transpose()) * cross + second * s2;
    raw - &mean * mean.transpose()
}

/// Compares cross-task and within-task interpolation covariances for tasks
/// given as `[n_i, d]` representation matrices, with `λ ~ Beta(α, β)`.
///
/// The difference is checked for symmetry and its spectrum computed; it is
/// semi-definite in general and definite only when the task means span the
/// feature space, which needs at least `d + 1` tasks.
pub fn variance_ordering_check(tasks: &[Tensor], alpha: f64, beta: f64) -> Result<VarianceOrdering, TheoryError> {
    validate_shape(alpha, beta)?;
    let Some(first) = tasks.first() else {
        return Err(TheoryError::Invalid("no tasks".into()));
    };
    let d = first.cols();
    for (i, t) in tasks.iter().enumerate() {
        if t.shape().len() != 2 || t.rows() == 0 || t.cols() != d || !t.is_finite() {
            return Err(TheoryError::Invalid(format!("task {i} is empty, malformed or non-finite")));
        }
    }
    let m = LambdaLaw::Beta(alpha, beta).moments();
    let (m1, m2) = (m.mean, m.second);
    let t = tasks.len() as f64;
    let moments: Vec<_> = tasks.iter().map(task_moments).collect();
    let mu_bar = moments.iter().fold(DMatrix::zeros(d, 1), |acc, (mu, _)| acc + mu) / t;
    let second_bar = moments.iter().fold(DMatrix::zeros(d, d), |acc, (_, s)| acc + s) / t;

    let mut cross = DMatrix::zeros(d, d);
    let mut within = DMatrix::zeros(d, d);
    for task in tasks {
        let n = task.rows();
        let share = 1.0 / (t * n as f64);
        for r in 0..n {
            let h = DMatrix::from_column_slice(d, 1, task.row(r));
            cross += mix_cov(&h, &mu_bar, &second_bar, m1, m2) * share;
            for (mu, second) in &moments {
                within += mix_cov(&h, mu, second, m1, m2) * (share / t);
            }
        }
    }
    let diff = &cross - &within;
    let asym = (&diff - diff.transpose()).amax();
    let scale = cross.amax().max(within.amax()).max(f64::MIN_POSITIVE);
    if asym > 1e-12 * scale.max(1.0) {
        return Err(TheoryError::Asymmetric(asym));
    }
    let sym = (&diff + diff.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let min_eigenvalue = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let trace = sym.trace();
    let tol = 1e-8 * cross.trace().abs().max(f64::MIN_POSITIVE);

    let spread = moments.iter().fold(DMatrix::zeros(d, d), |acc, (mu, _)| {
        let c = mu - &mu_bar;
        acc + &c * c.transpose()
    }) / t;
    let between = spread * (1.0 - m1).powi(2);

    Ok(VarianceOrdering {
        cross: to_tensor(&cross),
        within: to_tensor(&within),
        diff: to_tensor(&sym),
        between: to_tensor(&between),
        min_eigenvalue,
        trace,
        psd: min_eigenvalue >= -tol,
        positive_definite: min_eigenvalue > tol,
    })
}
