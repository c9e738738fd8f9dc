use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::{TheoryModel, TheoryTask};
use super::moments::{lambda_moments, validate_shape, LambdaLaw, MixMoments, DIAGNOSTIC_DRAWS};
use super::{psi, sigmoid, softplus, Estimate, TheoryError, TheoryReport};
use crate::diffcore::Tensor;
use crate::rng::{substream, Rng};
use crate::taskgen::Scenario;

/// Which expansion is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaylorForm {
    /// Exact second-order expansion around `λ̄·a`, including the `Var(λ)`
    /// term, with the partner second moment summed once.
    #[default]
    Exact,
    /// The published closed form: `L(λ̄·D) + c·mean ψ(a)·wᵀ M w`, where λ̄ and
    /// c come from the reweighted law and `M` keeps the duplicated outer sum
    /// over tasks (pooled second moment for label sharing).
    Printed,
}

/// Partner task choice for interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartnerMode {
    /// Any task, itself included.
    #[default]
    Both,
    /// The task itself.
    Intra,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorOptions {
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub n_mc: usize,
    pub seed: u64,
    pub form: TaylorForm,
    pub partner: PartnerMode,
    /// Gauss–Legendre nodes per mixture component for the reference.
    pub quad_degree: usize,
    /// Draws for the `λ̄`/`c` estimates and the divergence diagnostic.
    pub c_draws: usize,
}

impl Default for TaylorOptions {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 2.0,
            epsilon: 0.1,
            n_mc: 1_000_000,
            seed: 0,
            form: TaylorForm::Exact,
            partner: PartnerMode::Both,
            quad_degree: 64,
            c_draws: DIAGNOSTIC_DRAWS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Loss {
    /// `log(1 + eᵘ) − y·u`.
    Logistic,
    /// `1/(1 + eᶻ)`, label-free.
    Proto,
}

impl Loss {
    fn value(self, u: f64, y: f64) -> f64 {
        match self {
            Loss::Logistic => softplus(u) - y * u,
            Loss::Proto => sigmoid(-u),
        }
    }

    fn d1(self, u: f64, y: f64) -> f64 {
        match self {
            Loss::Logistic => sigmoid(u) - y,
            Loss::Proto => -psi(u),
        }
    }

    fn d2(self, u: f64) -> f64 {
        match self {
            Loss::Logistic => psi(u),
            Loss::Proto => psi(u) * (2.0 * sigmoid(u) - 1.0),
        }
    }
}

/// One anchor row with its exact partner distribution, in projected form.
struct Anchor {
    weight: f64,
    a: f64,
    y: f64,
    /// `(probability, partner projection b, partner label)`.
    partners: Vec<(f64, f64, f64)>,
}

/// The enumerated problem behind one check.
struct Problem {
    loss: Loss,
    /// Labels are mixed with λ (label sharing).
    mixed_labels: bool,
    /// Law of λ in the exact expansion.
    law: LambdaLaw,
    anchors: Vec<Anchor>,
}

impl Problem {
    fn mixed_loss(&self, l: f64, a: f64, b: f64, y: f64, y2: f64) -> f64 {
        let u = l * a + (1.0 - l) * b;
        if self.mixed_labels {
            softplus(u) - (l * y + (1.0 - l) * y2) * u
        } else {
            self.loss.value(u, y)
        }
    }

    /// Exact expectation over partners (enumerated) and λ (quadrature).
    fn reference(&self, draw_law: LambdaLaw, degree: usize) -> f64 {
        let quad = draw_law.quadrature(degree);
        self.anchors
            .iter()
            .map(|an| {
                let inner: f64 = an
                    .partners
                    .iter()
                    .map(|&(p, b, y2)| {
                        p * quad
                            .iter()
                            .map(|&(l, w)| w * self.mixed_loss(l, an.a, b, an.y, y2))
                            .sum::<f64>()
                    })
                    .sum();
                an.weight * inner
            })
            .sum()
    }

    /// Second-order expansion around `u₀ = E[λ]·a`; returns (value, curvature penalty).
    fn taylor_exact(&self) -> (f64, f64) {
        let m: MixMoments = self.law.moments();
        let (mut total, mut reg) = (0.0, 0.0);
        for an in &self.anchors {
            let mb: f64 = an.partners.iter().map(|&(p, b, _)| p * b).sum();
            let sb: f64 = an.partners.iter().map(|&(p, b, _)| p * b * b).sum();
            let u0 = m.mean * an.a;
            let d2 = self.loss.d2(u0);
            let second = m.var() * an.a * an.a + m.one_minus_sq() * sb - 2.0 * m.var() * an.a * mb;
            total += an.weight
                * (self.loss.value(u0, an.y)
                    + self.loss.d1(u0, an.y) * (1.0 - m.mean) * mb
                    + 0.5 * d2 * second);
            reg += an.weight * 0.5 * d2 * m.one_minus_sq() * sb;
        }
        (total, reg)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `wᵀ M w` for the second moment `M = Σ_rows weight·x xᵀ`.
fn quad_form(rows: &[(f64, &[f64])], w: &[f64]) -> f64 {
    rows.iter().map(|(p, x)| p * dot(x, w).powi(2)).sum()
}

fn partner_tasks(mode: PartnerMode, i: usize, count: usize) -> Vec<usize> {
    match mode {
        PartnerMode::Both => (0..count).collect(),
        PartnerMode::Intra => vec![i],
    }
}

/// Features re-centred on each task's class midpoint `(c₀ + c₁)/2`.
fn midpoint_centred(task: &TheoryTask) -> TheoryTask {
    let d = task.dim();
    let rows = task.class_rows();
    let mut mid = vec![0.0; d];
    for class in &rows {
        for &r in class {
            for (m, v) in mid.iter_mut().zip(task.features.row(r)) {
                *m += 0.5 * v / class.len() as f64;
            }
        }
    }
    let data = task
        .features
        .data()
        .iter()
        .enumerate()
        .map(|(n, v)| v - mid[n % d])
        .collect();
    TheoryTask {
        features: Tensor::matrix(task.features.rows(), d, data).expect("same shape"),
        ..task.clone()
    }
}

/// Builds the enumerated problem. Class-matched scenarios pair class `r`
/// with a uniformly random class of the partner task; label sharing pairs
/// rows of the whole task.
fn build_problem(tasks: &[TheoryTask], class_matched: bool, mixed_labels: bool, loss: Loss, law: LambdaLaw, mode: PartnerMode) -> Problem {
    let t = tasks.len();
    let mut anchors = Vec::new();
    for (i, task) in tasks.iter().enumerate() {
        let n = task.features.rows();
        let partners_of = partner_tasks(mode, i, t);
        let mut partners = Vec::new();
        for &j in &partners_of {
            let pj = &tasks[j];
            let rows = pj.features.rows();
            for r in 0..rows {
                let p = if class_matched {
                    // Uniform class, then uniform row within it.
                    let size = pj.class_rows()[pj.labels[r]].len();
                    1.0 / (partners_of.len() as f64 * 2.0 * size as f64)
                } else {
                    1.0 / (partners_of.len() * rows) as f64
                };
                partners.push((p, dot(pj.features.row(r), &task.weights), pj.labels[r] as f64));
            }
        }
        for k in 0..n {
            anchors.push(Anchor {
                weight: 1.0 / (t * n) as f64,
                a: dot(task.features.row(k), &task.weights),
                y: task.labels[k] as f64,
                partners: partners.clone(),
            });
        }
    }
    Problem {
        loss,
        mixed_labels,
        law,
        anchors,
    }
}

/// Chunked, thread-count-independent Monte-Carlo mean of `draw`.
fn monte_carlo(n: usize, seed: u64, draw: impl Fn(&mut Rng) -> f64 + Sync + Send) -> Estimate {
    const CHUNK: usize = 1 << 12;
    let chunks = n.div_ceil(CHUNK);
    let values: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = substream(seed, &[c as u64]);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len).map(|_| draw(&mut rng)).collect::<Vec<_>>()
        })
        .collect();
    Estimate::from_values(&values)
}

fn pick_partner(mode: PartnerMode, i: usize, count: usize, rng: &mut Rng) -> usize {
    match mode {
        PartnerMode::Both => rng.random_range(0..count),
        PartnerMode::Intra => i,
    }
}

/// For each anchor row of `ti`, the paired row of `tj`: class `r` meets class
/// `π(r)` (uniform π) through a uniform within-class permutation, or rows of
/// the whole task are permuted when not class-matched.
fn pair_rows(ti: &TheoryTask, tj: &TheoryTask, class_matched: bool, rng: &mut Rng) -> Vec<usize> {
    let n = ti.features.rows();
    let mut out = vec![0; n];
    if class_matched {
        let swap = rng.random_bool(0.5);
        let rows_i = ti.class_rows();
        let rows_j = tj.class_rows();
        for (r, anchors) in rows_i.iter().enumerate() {
            let mut partners = rows_j[if swap { 1 - r } else { r }].clone();
            partners.shuffle(rng);
            for (a, p) in anchors.iter().zip(partners) {
                out[*a] = p;
            }
        }
    } else {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        out = perm;
    }
    out
}

fn check_options(opts: &TaylorOptions) -> Result<(), TheoryError> {
    validate_shape(opts.alpha, opts.beta)?;
    if !(opts.epsilon.is_finite() && opts.epsilon > 0.0) {
        return Err(TheoryError::Invalid(format!("epsilon must be positive, got {}", opts.epsilon)));
    }
    if opts.n_mc < 1024 || opts.quad_degree == 0 {
        return Err(TheoryError::Invalid("n_mc must be >= 1024 and quad_degree >= 1".into()));
    }
    Ok(())
}

fn report(check: &str, opts: &TaylorOptions, mc: Estimate, taylor: (f64, f64), reference: f64, lambda_bar: f64, c: f64) -> TheoryReport {
    TheoryReport {
        check: check.to_string(),
        alpha: opts.alpha,
        beta: opts.beta,
        epsilon: opts.epsilon,
        n_mc: opts.n_mc,
        mc_value: mc.mean,
        stderr: mc.stderr,
        taylor_value: taylor.0,
        abs_error: (mc.mean - taylor.0).abs(),
        reference_value: reference,
        remainder: (reference - taylor.0).abs(),
        lambda_bar,
        c,
        regularizer: taylor.1,
    }
}

/// Printed closed form: `mean ℓ(λ̄ a) + c · mean ψ(a) wᵀ M w`.
fn printed_value(tasks: &[TheoryTask], loss: Loss, lambda_bar: f64, c: f64, pooled: bool) -> Result<(f64, f64), TheoryError> {
    let t = tasks.len();
    let per_class = tasks[0].class_rows()[0].len();
    let mut rows: Vec<(f64, &[f64])> = Vec::new();
    if pooled {
        let n = tasks[0].features.rows();
        for task in tasks {
            for r in 0..task.features.rows() {
                rows.push((1.0 / (t * n) as f64, task.features.row(r)));
            }
        }
    } else {
        // (1/|I|) Σ_i ½ Σ_r (1/N_{i,r}) Σ_i' Σ_{k ≤ N_{i,r}} x_{i',k;r} x_{i',k;r}ᵀ
        for _outer in 0..t {
            for r in 0..2 {
                for task in tasks {
                    for &row in task.class_rows()[r].iter().take(per_class) {
                        rows.push((0.5 / (t * per_class) as f64, task.features.row(row)));
                    }
                }
            }
        }
    }
    let (mut base, mut reg) = (0.0, 0.0);
    let mut count = 0usize;
    for task in tasks {
        let q = quad_form(&rows, &task.weights);
        for k in 0..task.features.rows() {
            let a = dot(task.features.row(k), &task.weights);
            base += loss.value(lambda_bar * a, task.labels[k] as f64);
            reg += psi(a) * q;
            count += 1;
        }
    }
    Ok((base / count as f64 + c * reg / count as f64, c * reg / count as f64))
}

/// Expansion check for a two-layer logistic model with task heads `φ_i`
/// interpolated at the hidden layer.
///
/// Non-label-sharing keeps the anchor labels and draws λ from `Beta(α, β)`.
/// Label sharing mixes labels too; its expansion uses the reweighted law,
/// which is exact in expectation when the partner distribution is
/// symmetric, so it needs a head shared by all tasks unless `partner` is `Intra`.
pub fn gbml_taylor_check(model: &TheoryModel, scenario: Scenario, opts: &TaylorOptions) -> Result<TheoryReport, TheoryError> {
    check_options(opts)?;
    model.validate()?;
    let moments = lambda_moments(opts.alpha, opts.beta, opts.c_draws, opts.seed ^ 0x5eed)?;
    let c = moments.c_value()?;
    let centre = super::class_weighted_mean(&model.tasks)?;
    let off = centre.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = model.tasks.iter().flat_map(|t| t.features.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    if off > 1e-9 * scale.max(1e-300) {
        return Err(TheoryError::NotCentered(off));
    }
    let ls = scenario == Scenario::LabelSharing;
    if ls && opts.partner == PartnerMode::Both {
        let w0 = &model.tasks[0].weights;
        if model.tasks.iter().any(|t| &t.weights != w0) {
            return Err(TheoryError::Invalid(
                "the label-sharing expansion needs one head shared by all tasks".into(),
            ));
        }
    }
    let scaled = model.scaled(opts.epsilon);
    let tasks = &scaled.tasks;
    let draw_law = LambdaLaw::Beta(opts.alpha, opts.beta);
    let law = if ls { LambdaLaw::Reweighted(opts.alpha, opts.beta) } else { draw_law };
    let problem = build_problem(tasks, !ls, ls, Loss::Logistic, law, opts.partner);
    let reference = problem.reference(draw_law, opts.quad_degree);
    let taylor = match opts.form {
        TaylorForm::Exact => problem.taylor_exact(),
        TaylorForm::Printed => printed_value(tasks, Loss::Logistic, moments.lambda_bar, c, ls)?,
    };
    let count = tasks.len();
    let mc = monte_carlo(opts.n_mc, opts.seed, |rng| {
        let i = rng.random_range(0..count);
        let lambda = draw_law.sample(rng);
        let j = pick_partner(opts.partner, i, count, rng);
        let (ti, tj) = (&tasks[i], &tasks[j]);
        let pairs = pair_rows(ti, tj, !ls, rng);
        let mut total = 0.0;
        for (k, &p) in pairs.iter().enumerate() {
            let a = dot(ti.features.row(k), &ti.weights);
            let b = dot(tj.features.row(p), &ti.weights);
            total += problem.mixed_loss(lambda, a, b, ti.labels[k] as f64, tj.labels[p] as f64);
        }
        total / pairs.len() as f64
    });
    let check = if ls { "gbml-ls" } else { "gbml-nls" };
    Ok(report(check, opts, mc, taylor, reference, moments.lambda_bar, c))
}

/// Expansion check for a linear ProtoNet `f(x) = θᵀx` on two-class tasks,
/// interpolated at the input with the class-matched form; the loss is
/// `1/(1 + exp⟨x − (c₁+c₂)/2, θ⟩)` with prototypes recomputed from the mixed task.
pub fn protonet_taylor_check(model: &TheoryModel, opts: &TaylorOptions) -> Result<TheoryReport, TheoryError> {
    check_options(opts)?;
    model.validate()?;
    let moments = lambda_moments(opts.alpha, opts.beta, opts.c_draws, opts.seed ^ 0x5eed)?;
    let c = moments.c_value()?;
    let scaled = model.scaled(opts.epsilon);
    let raw = &scaled.tasks;
    let centred: Vec<TheoryTask> = raw.iter().map(midpoint_centred).collect();
    let draw_law = LambdaLaw::Beta(opts.alpha, opts.beta);
    let problem = build_problem(&centred, true, false, Loss::Proto, draw_law, opts.partner);
    let reference = problem.reference(draw_law, opts.quad_degree);
    let taylor = match opts.form {
        TaylorForm::Exact => problem.taylor_exact(),
        TaylorForm::Printed => printed_value(&centred, Loss::Proto, moments.lambda_bar, c, false)?,
    };
    let count = raw.len();
    let d = raw[0].dim();
    let mc = monte_carlo(opts.n_mc, opts.seed, |rng| {
        let i = rng.random_range(0..count);
        let lambda = draw_law.sample(rng);
        let j = pick_partner(opts.partner, i, count, rng);
        let (ti, tj) = (&raw[i], &raw[j]);
        let pairs = pair_rows(ti, tj, true, rng);
        let mixed: Vec<Vec<f64>> = pairs
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                ti.features
                    .row(k)
                    .iter()
                    .zip(tj.features.row(p))
                    .map(|(x, z)| lambda * x + (1.0 - lambda) * z)
                    .collect()
            })
            .collect();
        let mut mid = vec![0.0; d];
        for class in ti.class_rows() {
            for &r in &class {
                for (m, v) in mid.iter_mut().zip(&mixed[r]) {
                    *m += 0.5 * v / class.len() as f64;
                }
            }
        }
        let theta = &ti.weights;
        let total: f64 = mixed
            .iter()
            .map(|x| {
                let z: f64 = x.iter().zip(&mid).zip(theta).map(|((v, m), w)| (v - m) * w).sum();
                sigmoid(-z)
            })
            .sum();
        total / mixed.len() as f64
    });
    Ok(report("protonet", opts, mc, taylor, reference, moments.lambda_bar, c))
}

/// Runs `check` at every scale in `epsilons`.
pub fn epsilon_sweep<F>(epsilons: &[f64], mut check: F) -> Result<Vec<TheoryReport>, TheoryError>
where
    F: FnMut(f64) -> Result<TheoryReport, TheoryError>,
{
    epsilons.iter().map(|&e| check(e)).collect()
}

/// Least-squares slope of `ln remainder` against `ln ε`.
pub fn remainder_slope(reports: &[TheoryReport]) -> f64 {
    let pts: Vec<(f64, f64)> = reports
        .iter()
        .map(|r| (r.epsilon.ln(), r.remainder.max(f64::MIN_POSITIVE).ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}
