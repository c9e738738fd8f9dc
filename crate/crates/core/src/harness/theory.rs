use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::config::TheoryConfig;
use super::metrics::format_value;
use super::run::{create_dir, write_file};
use super::HarnessError;
use crate::diffcore::Tensor;
use crate::rng::substream;
use crate::taskgen::Scenario;
use crate::theorylab::{
    epsilon_sweep, gbml_taylor_check, lambda_moments, protonet_taylor_check, remainder_slope,
    reports_csv, variance_ordering_check, LambdaMoments, TaylorOptions, TheoryModel, TheoryReport,
    VarianceOrdering, DIAGNOSTIC_DRAWS,
};

/// Every lemma check of one `theory` run.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryOutput {
    pub moments: LambdaMoments,
    /// Reports of each check over the ε sweep, check by check.
    pub reports: Vec<TheoryReport>,
    /// `(check, log-log remainder slope)`.
    pub slopes: Vec<(String, f64)>,
    pub variance: Vec<VarianceOrdering>,
}

/// Random tasks for the variance-ordering check: 2 to 5 tasks of 2 to 8 rows
/// in 1 to 4 dimensions. With `separated`, there are `d + 1` tasks whose
/// means sit at least `5σ` apart.
pub fn variance_instance(seed: u64, separated: bool) -> Vec<Tensor> {
    let mut rng = substream(seed, &[]);
    let d = rng.random_range(1..=4usize);
    let count = if separated { d + 1 } else { rng.random_range(2..=5usize) };
    let sigma = rng.random_range(0.2..2.0f64);
    (0..count)
        .map(|t| {
            let rows = rng.random_range(2..=8usize);
            // Task t > 0 sits 5√2·σ along axis t − 1, so every pair is at least 5σ apart.
            let mean: Vec<f64> = (0..d)
                .map(|c| {
                    if separated {
                        if t > 0 && c == t - 1 { 5.0 * sigma * 2f64.sqrt() } else { 0.0 }
                    } else {
                        rng.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect();
            let data: Vec<f64> = (0..rows * d)
                .map(|k| mean[k % d] + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Tensor::matrix(rows, d, data).expect("shape")
        })
        .collect()
}

/// λ moments, the three expansion checks over the ε sweep, and the
/// variance ordering on random instances.
pub fn run_theory(config: &TheoryConfig) -> Result<TheoryOutput, HarnessError> {
    let moments = lambda_moments(config.alpha, config.beta, DIAGNOSTIC_DRAWS, config.seed)?;
    let nls = TheoryModel::gbml(config.tasks, config.per_class, config.input_dim, config.hidden_dim, false, config.seed)?;
    let ls = TheoryModel::gbml(config.tasks, config.per_class, config.input_dim, config.hidden_dim, true, config.seed)?;
    let proto = TheoryModel::protonet(config.tasks, config.per_class, config.input_dim, config.seed)?;
    let opts = |epsilon| TaylorOptions {
        alpha: config.alpha,
        beta: config.beta,
        epsilon,
        n_mc: config.n_mc,
        seed: config.seed,
        form: config.form,
        partner: config.partner,
        ..TaylorOptions::default()
    };
    let sweeps = [
        ("gbml-nls", epsilon_sweep(&config.epsilons, |e| gbml_taylor_check(&nls, Scenario::NonLabelSharing, &opts(e)))?),
        ("gbml-ls", epsilon_sweep(&config.epsilons, |e| gbml_taylor_check(&ls, Scenario::LabelSharing, &opts(e)))?),
        ("protonet", epsilon_sweep(&config.epsilons, |e| protonet_taylor_check(&proto, &opts(e)))?),
    ];
    let slopes = sweeps.iter().map(|(n, r)| (n.to_string(), remainder_slope(r))).collect();
    let reports = sweeps.into_iter().flat_map(|(_, r)| r).collect();
    let variance = (0..config.variance_instances as u64)
        .map(|i| variance_ordering_check(&variance_instance(config.seed ^ i.wrapping_mul(0x9E37), false), config.alpha, config.beta))
        .collect::<Result<_, _>>()?;
    Ok(TheoryOutput {
        moments,
        reports,
        slopes,
        variance,
    })
}

pub const LAMBDA_HEADER: &str = "alpha,beta,lambda_bar,lambda_bar_mc,lambda_bar_stderr,c,c_mc,c_stderr,c_converged";
pub const VARIANCE_HEADER: &str = "instance,dim,min_eigenvalue,trace,psd,positive_definite";
pub const SLOPE_HEADER: &str = "check,remainder_slope";

/// Writes `theory.csv`, `lambda.csv`, `slopes.csv` and `variance.csv`.
pub fn write_theory(dir: &Path, out: &TheoryOutput) -> Result<(), HarnessError> {
    create_dir(dir)?;
    write_file(&dir.join("theory.csv"), &reports_csv(&out.reports))?;
    let m = &out.moments;
    let c = m.c.map_or("divergent".to_string(), format_value);
    let lambda = format!(
        "{LAMBDA_HEADER}\n{},{},{},{},{},{c},{},{},{}\n",
        format_value(m.alpha),
        format_value(m.beta),
        format_value(m.lambda_bar),
        format_value(m.lambda_bar_mc.mean),
        format_value(m.lambda_bar_mc.stderr),
        format_value(m.c_mc.mean),
        format_value(m.c_mc.stderr),
        m.c_mc_converged
    );
    write_file(&dir.join("lambda.csv"), &lambda)?;
    let mut slopes = format!("{SLOPE_HEADER}\n");
    for (name, s) in &out.slopes {
        let _ = writeln!(slopes, "{name},{}", format_value(*s));
    }
    write_file(&dir.join("slopes.csv"), &slopes)?;
    let mut var = format!("{VARIANCE_HEADER}\n");
    for (i, v) in out.variance.iter().enumerate() {
        let _ = writeln!(
            var,
            "{i},{},{},{},{},{}",
            v.diff.rows(),
            format_value(v.min_eigenvalue),
            format_value(v.trace),
            v.psd,
            v.positive_definite
        );
    }
    write_file(&dir.join("variance.csv"), &var)
}
