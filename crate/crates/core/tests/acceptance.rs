//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero when any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::Rng as _;
use rand_distr::StandardNormal;

use common::{episodes, gaussian_bank, separable_bank};
use mlti_core::diffcore::{
    finite_diff_oracle, insert_params, relative_error, DiffError, GradOrder, Graph, ParamSet, Tensor,
};
use mlti_core::harness::{
    ablation, evaluate_model, init_model, preset, run_experiment, sweep_tasks, variance_instance,
    write_run, RunConfig,
};
use mlti_core::learners::{
    maml_task_gradient, maml_train_step, protonet_meta_test, protonet_train_step, LayeredModel,
    OptimizerKind, OuterOptimizer, TrainConfig,
};
use mlti_core::mlti::{
    Blend, IdentityMixer, LayerForward, MixConfig, MixError, MixMethod, MixMode, MixPlan, TaskMixer,
};
use mlti_core::rng::{substream, Rng};
use mlti_core::taskgen::{
    build_bank, sample_episode, BankSpec, Episode, PoolSplit, Scenario, TargetKind, TaskBank,
};
use mlti_core::theorylab::{
    epsilon_sweep, gbml_taylor_check, lambda_moments, protonet_taylor_check, remainder_slope,
    variance_ordering_check, TaylorOptions, TheoryModel, TheoryReport, DIAGNOSTIC_DRAWS,
};

/// Outcome of one criterion: pass flag and a one-line detail.
type Outcome = (bool, String);

fn model(dims: &[usize], prefix: usize, rng: &mut Rng) -> LayeredModel {
    LayeredModel::new(dims, prefix, rng).expect("valid dims")
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

fn random_dims(rng: &mut Rng) -> Vec<usize> {
    let depth = rng.random_range(1..=3usize);
    let mut dims = vec![rng.random_range(2..=5usize)];
    dims.extend((0..depth - 1).map(|_| rng.random_range(2..=6usize)));
    dims.push(rng.random_range(2..=4usize));
    dims
}

/// Loss of a random small net under one of three heads: soft-target cross
/// entropy, squared error, or prototype distances.
fn head_loss(net: &LayeredModel, params: &ParamSet, x: &Tensor, y: &Tensor, head: usize) -> Result<(Graph, f64, ParamSet), DiffError> {
    let mut g = Graph::new();
    let p = insert_params(&mut g, params);
    let xin = g.input(x.clone());
    let out = net.forward_nodes(&mut g, &p, xin, 0, net.layer_count())?;
    let target = g.constant(y.clone());
    let loss = match head {
        0 => g.softmax_cross_entropy(out, target)?,
        1 => g.mse(out, target)?,
        _ => {
            let protos = g.index_rows(out, &[0, 1])?;
            let d = g.pairwise_sq_dist(out, protos)?;
            let logits = g.scale(d, -1.0)?;
            g.softmax_cross_entropy(logits, target)?
        }
    };
    let value = g.value(loss).item()?;
    let grads = g.gradients(loss, &p)?;
    Ok((g, value, grads))
}

/// Zero biases put rows whose units are all dead exactly on the next ReLU kink.
fn randomize_biases(net: &mut LayeredModel, rng: &mut Rng) {
    for (name, t) in net.params_mut().iter_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
}

fn norm(p: &ParamSet) -> f64 {
    p.values().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt()
}

fn criterion_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let (mut accepted, mut redrawn) = (0, 0);
    let mut case = 0u64;
    while accepted < 100 {
        case += 1;
        let mut rng = substream(101, &[case]);
        let dims = random_dims(&mut rng);
        let mut net = model(&dims, 0, &mut rng);
        // Random biases as well as weights, away from ReLU kinks.
        for t in net.params_mut().values_mut() {
            for v in t.data_mut() {
                *v = 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let rows = rng.random_range(3..=6usize);
        let x = normal_matrix(rows, dims[0], &mut rng);
        let head = (case % 3) as usize;
        let classes = if head == 2 { 2 } else { *dims.last().unwrap() };
        let y = if head == 1 {
            normal_matrix(rows, classes, &mut rng)
        } else {
            // Random points on the simplex.
            let raw: Vec<f64> = (0..rows * classes).map(|_| rng.random_range(0.05..1.0)).collect();
            let data = raw
                .chunks(classes)
                .flat_map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(move |v| v / s)
                })
                .collect();
            Tensor::matrix(rows, classes, data).unwrap()
        };
        let (_, _, ana) = match head_loss(&net, net.params(), &x, &y, head) {
            Ok(v) => v,
            Err(e) => return (false, format!("case {case}: {e}")),
        };
        let fd = match finite_diff_oracle(|p| head_loss(&net, p, &x, &y, head).map(|r| r.1), net.params(), 1e-5) {
            Ok(fd) => fd,
            Err(e) => return (false, format!("case {case}: {e}")),
        };
        // Every ReLU dead: the loss is locally constant and the ratio is undefined.
        if norm(&fd) < 1e-8 {
            redrawn += 1;
            continue;
        }
        accepted += 1;
        worst = worst.max(relative_error(&ana, &fd));
    }
    (
        worst < 1e-5,
        format!("worst relative error {worst:.2e} over 100 nets ({redrawn} constant-loss draws replaced)"),
    )
}

fn criterion_bilevel() -> Outcome {
    let bank = gaussian_bank(12, 4, 2.0, 0.5, 3);
    let mut worst: f64 = 0.0;
    for case in 0..20u64 {
        let mut rng = substream(202, &[case]);
        let n_way = rng.random_range(2..=3usize);
        let batch = episodes(&bank, PoolSplit::Train, 2, n_way, 2, 2, 500 + case);
        let hidden = rng.random_range(3..=6usize);
        let depth = rng.random_range(1..=2usize);
        let mut dims = vec![4];
        dims.extend(std::iter::repeat_n(hidden, depth));
        dims.push(n_way);
        let mut net = model(&dims, depth, &mut rng);
        randomize_biases(&mut net, &mut rng);
        let updates = (case % 3 + 1) as usize;
        let eta = rng.random_range(0.05..0.4);
        let mix = MixConfig {
            layer_max: rng.random_range(0..=depth),
            ..MixConfig::default()
        };
        let plan = match mix.plan(&batch, 0, false, &mut rng) {
            Ok(p) => p,
            Err(e) => return (false, format!("case {case}: {e}")),
        };
        let tj = &batch[plan.as_ref().map_or(0, |p| p.j)];
        let ana = maml_task_gradient(&net, net.params(), &batch[0], tj, plan.as_ref(), eta, updates, GradOrder::Second);
        let fd = finite_diff_oracle(
            |p| {
                maml_task_gradient(&net, p, &batch[0], tj, plan.as_ref(), eta, updates, GradOrder::First)
                    .map(|t| t.query_loss)
                    .map_err(|e| DiffError::Validation(e.to_string()))
            },
            net.params(),
            1e-5,
        );
        match (ana, fd) {
            (Ok(a), Ok(f)) => worst = worst.max(relative_error(&a.grads, &f)),
            (a, f) => return (false, format!("case {case}: {:?} / {:?}", a.err(), f.err())),
        }
    }
    (worst < 1e-4, format!("worst relative error {worst:.2e} over 20 instances, 1 to 3 inner steps"))
}

/// Interpolates the inputs only with λ = 1 against a random partner and a
/// random row pairing.
struct UnitLambdaMixer(MixConfig);

impl TaskMixer for UnitLambdaMixer {
    fn plan(&self, batch: &[Episode], i: usize, relabel: bool, rng: &mut Rng) -> Result<Option<MixPlan>, MixError> {
        Ok(self.0.plan(batch, i, relabel, rng)?.map(|mut p| {
            p.layer = 0;
            p.support_blend = Blend::Scalar(1.0);
            p.query_blend = Blend::Scalar(1.0);
            p
        }))
    }
}

fn train_steps(protonet: bool, mixer: Option<&dyn TaskMixer>, steps: usize) -> ParamSet {
    let bank = gaussian_bank(12, 4, 2.0, 0.5, 3);
    let mut net = model(&[4, 6, 6, 3], 2, &mut substream(11, &[]));
    let config = TrainConfig {
        inner_lr: 0.1,
        outer_lr: 0.05,
        inner_updates: 2,
        ..TrainConfig::default()
    };
    let mut opt = OuterOptimizer::new(OptimizerKind::Adam, config.outer_lr);
    let mut rng = substream(5, &[]);
    for it in 0..steps {
        let batch = episodes(&bank, PoolSplit::Train, 4, 3, 2, 3, 100 + it as u64);
        if protonet {
            protonet_train_step(&mut net, &batch, &config, mixer, &mut opt, it, &mut rng).unwrap();
        } else {
            maml_train_step(&mut net, &batch, &config, mixer, &mut opt, it, &mut rng).unwrap();
        }
    }
    net.params().clone()
}

fn bits(p: &ParamSet) -> Vec<(String, Vec<u64>)> {
    p.iter()
        .map(|(n, t)| (n.clone(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn tiny(config: RunConfig) -> RunConfig {
    RunConfig {
        seeds: vec![0, 1],
        test_episodes: 100,
        train: TrainConfig {
            iterations: 30,
            ..config.train.clone()
        },
        ..config
    }
}

fn csv_bytes(config: &RunConfig) -> Result<(Vec<u8>, Vec<u8>), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = run_experiment(config).map_err(|e| e.to_string())?;
    write_run(dir.path(), &out).map_err(|e| e.to_string())?;
    let read = |f: &str| std::fs::read(dir.path().join(f)).map_err(|e| e.to_string());
    Ok((read("metrics.csv")?, read("summary.csv")?))
}

fn criterion_degenerate() -> Outcome {
    let mut failures = Vec::new();
    let unit = UnitLambdaMixer(MixConfig {
        mode: MixMode::Cross,
        ..MixConfig::default()
    });
    for (name, protonet) in [("maml", false), ("protonet", true)] {
        let plain = bits(&train_steps(protonet, None, 50));
        let cases: [(&str, &dyn TaskMixer); 3] = [
            ("identity plan", &IdentityMixer),
            ("unit lambda", &unit),
            ("vanilla mode", &MixConfig::vanilla()),
        ];
        for (label, mixer) in cases {
            if bits(&train_steps(protonet, Some(mixer), 50)) != plain {
                failures.push(format!("{name} {label}"));
            }
        }
        if bits(&train_steps(protonet, Some(&MixConfig::default()), 50)) == plain {
            failures.push(format!("{name} mixing had no effect"));
        }
    }
    // Vanilla runs ignore every other interpolation setting.
    for learner in ["nls-maml", "nls-protonet"] {
        let base = tiny(preset(learner).unwrap());
        let mut vanilla = base.clone();
        vanilla.mix.mode = MixMode::Vanilla;
        let mut altered = vanilla.clone();
        altered.mix = MixConfig {
            mode: MixMode::Vanilla,
            alpha: 0.3,
            beta: 5.0,
            layer_max: 0,
            method: MixMethod::Mixup,
            ..MixConfig::default()
        };
        match (csv_bytes(&vanilla), csv_bytes(&altered)) {
            (Ok(a), Ok(b)) if a == b => {}
            (Ok(_), Ok(_)) => failures.push(format!("{learner}: vanilla output depends on mix settings")),
            (a, b) => failures.push(format!("{learner}: {:?} {:?}", a.err(), b.err())),
        }
    }
    (
        failures.is_empty(),
        if failures.is_empty() {
            "50-step parameters bit-identical for both learners; vanilla tables byte-identical".into()
        } else {
            failures.join("; ")
        },
    )
}

fn check(cond: bool, what: impl FnOnce() -> String) -> Result<(), TestCaseError> {
    if cond {
        Ok(())
    } else {
        Err(TestCaseError::fail(what()))
    }
}

struct Banks {
    gaussian: TaskBank,
    glyph: TaskBank,
    rotation: TaskBank,
}

/// One generated pair of tasks interpolated by a random plan.
fn interpolation_case(banks: &Banks, kind: usize, method: usize, mode: usize, seed: u64) -> Result<(), TestCaseError> {
    let mut rng = substream(404, &[seed]);
    let (bank, n_way, relabel) = match kind {
        0 => (&banks.gaussian, rng.random_range(2..=5usize), false),
        1 => (&banks.glyph, 10, rng.random_bool(0.5)),
        _ => (&banks.rotation, 1, false),
    };
    let k = rng.random_range(1..=3usize);
    let q = rng.random_range(1..=4usize);
    let pair: Vec<Episode> = (0..2)
        .map(|_| sample_episode(bank, PoolSplit::Train, n_way, k, q, &mut rng))
        .collect::<Result<_, _>>()
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    let grid = bank.spec.grid_side();
    let method = match (method, grid) {
        (0, _) => MixMethod::ManifoldMixup,
        (1, _) | (_, None) => MixMethod::Mixup,
        _ => MixMethod::Cutmix,
    };
    let config = MixConfig {
        method,
        mode: [MixMode::Intra, MixMode::Cross, MixMode::Both][mode],
        layer_max: if method == MixMethod::ManifoldMixup { 1 } else { 0 },
        ..MixConfig::default()
    };
    let out_dim = if pair[0].target == TargetKind::Scalar { 1 } else { n_way };
    let net = model(&[bank.input_dim(), 6, out_dim], 1, &mut rng);
    let plan = config
        .plan(&pair, 0, relabel, &mut rng)
        .map_err(|e| TestCaseError::fail(e.to_string()))?
        .ok_or_else(|| TestCaseError::fail("no plan"))?;
    let (ti, tj) = (&pair[plan.i], &pair[plan.j]);
    let h = |x: &Tensor| net.hidden(x, plan.layer).unwrap();
    let (hi_s, hj_s) = (h(&ti.support_x), h(&tj.support_x));
    let (s, _) = plan
        .mix_tensors(&hi_s, &hj_s, &h(&ti.query_x), &h(&tj.query_x))
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    let (sy, qy) = plan.labels(ti, tj).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let partner = hj_s.select_rows(&plan.pairing.support);

    if plan.relabels() {
        let perm = plan.class_perm.clone().unwrap();
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        check(sorted == (0..n_way).collect::<Vec<_>>(), || format!("class pairing {perm:?} is not a bijection"))?;
        for y in [&sy, &qy] {
            for r in 0..y.rows() {
                let row = y.row(r);
                check(row.iter().all(|&v| v == 0.0 || v == 1.0) && row.iter().sum::<f64>() == 1.0, || format!("label row {row:?} is not one-hot"))?;
            }
        }
        check(sy == ti.support_y && qy == ti.query_y, || "relabelled targets differ from the anchor's".into())?;
        for (r, &p) in perm.iter().enumerate() {
            for &row in &plan.pairing.support[r * k..(r + 1) * k] {
                check(row / tj.k_shot == p, || format!("class {r} paired with a row of class {}", row / tj.k_shot))?;
            }
        }
    } else if ti.target == TargetKind::Classes {
        let l = plan.lambda();
        for r in 0..sy.rows() {
            let row = sy.row(r);
            check((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9 && row.iter().all(|&v| v >= -1e-12), || format!("label row {row:?} is off the simplex"))?;
            let yj = tj.support_y.row(plan.pairing.support[r]);
            for ((m, a), b) in row.iter().zip(ti.support_y.row(r)).zip(yj) {
                check((m - (l * a + (1.0 - l) * b)).abs() <= 1e-12, || format!("label {m} is not λ-mixed with λ = {l}"))?;
            }
        }
    } else {
        for r in 0..sy.rows() {
            let (a, b) = (ti.support_y.row(r)[0], tj.support_y.row(plan.pairing.support[r])[0]);
            let m = sy.row(r)[0];
            check(m >= a.min(b) - 1e-12 && m <= a.max(b) + 1e-12, || format!("target {m} outside [{a}, {b}]"))?;
        }
    }

    match &plan.support_blend {
        Blend::Scalar(l) => {
            check((0.0..=1.0).contains(l), || format!("λ = {l} outside [0, 1]"))?;
            for ((m, a), b) in s.data().iter().zip(hi_s.data()).zip(partner.data()) {
                let tol = 1e-12 * (1.0 + a.abs().max(b.abs()));
                check(*m >= a.min(*b) - tol && *m <= a.max(*b) + tol, || format!("{m} outside the segment [{a}, {b}]"))?;
            }
        }
        Blend::Mask { keep, lambda_adj } => {
            let side = grid.unwrap();
            let cut = keep.iter().filter(|&&v| v == 0.0).count();
            check(keep.iter().all(|&v| v == 0.0 || v == 1.0), || "mask is not binary".into())?;
            check(*lambda_adj == (side * side - cut) as f64 / (side * side) as f64, || format!("λ_adj {lambda_adj} disagrees with a patch of {cut} cells"))?;
            check(plan.layer == 0, || "cutmix away from the input".into())?;
            let cols = side * side;
            for (n, m) in s.data().iter().enumerate() {
                let want = if keep[n % cols] == 1.0 { hi_s.data()[n] } else { partner.data()[n] };
                check(*m == want, || format!("cell {n} copies neither grid"))?;
            }
        }
    }
    Ok(())
}

fn criterion_interpolation() -> Outcome {
    let banks = Banks {
        gaussian: gaussian_bank(20, 5, 2.0, 0.5, 4),
        glyph: build_bank(
            &BankSpec::GlyphGrid {
                grid: 8,
                noise: 0.1,
                train_count: 12,
                test_count: 12,
            },
            4,
        )
        .unwrap(),
        rotation: build_bank(
            &BankSpec::RotationRegression {
                grid: 8,
                noise: 0.05,
                train_count: 10,
                test_count: 10,
            },
            4,
        )
        .unwrap(),
    };
    let config = PropConfig {
        cases: 10_000,
        failure_persistence: None,
        ..PropConfig::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let result = runner.run(&(0..3usize, 0..3usize, 0..3usize, any::<u64>()), |(kind, method, mode, seed)| {
        interpolation_case(&banks, kind, method, mode, seed)
    });
    match result {
        Ok(()) => (true, "10000 generated task pairs (NLS, LS classes, LS regression)".into()),
        Err(e) => (false, e.to_string()),
    }
}

fn criterion_taylor() -> Outcome {
    let eps = [0.4, 0.2, 0.1, 0.05];
    let opts = |epsilon| TaylorOptions {
        alpha: 2.0,
        beta: 2.0,
        epsilon,
        n_mc: 1_000_000,
        seed: 7,
        ..TaylorOptions::default()
    };
    let run = || -> Result<Vec<(&'static str, Vec<TheoryReport>)>, String> {
        let nls = TheoryModel::gbml(4, 10, 5, 8, false, 7).map_err(|e| e.to_string())?;
        let ls = TheoryModel::gbml(4, 10, 5, 8, true, 7).map_err(|e| e.to_string())?;
        let proto = TheoryModel::protonet(4, 10, 5, 7).map_err(|e| e.to_string())?;
        let e = |r: Result<Vec<TheoryReport>, _>| r.map_err(|e: mlti_core::theorylab::TheoryError| e.to_string());
        Ok(vec![
            ("gbml-nls", e(epsilon_sweep(&eps, |x| gbml_taylor_check(&nls, Scenario::NonLabelSharing, &opts(x))))?),
            ("gbml-ls", e(epsilon_sweep(&eps, |x| gbml_taylor_check(&ls, Scenario::LabelSharing, &opts(x))))?),
            ("protonet", e(epsilon_sweep(&eps, |x| protonet_taylor_check(&proto, &opts(x))))?),
        ])
    };
    let sweeps = match run() {
        Ok(s) => s,
        Err(e) => return (false, e),
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, reports) in &sweeps {
        let slope = remainder_slope(reports);
        let last = reports.last().unwrap();
        let z = last.abs_error / last.stderr;
        let pass = slope >= 2.5 && z <= 3.0;
        ok &= pass;
        parts.push(format!("{name} slope {slope:.2} z {z:.2}{}", if pass { "" } else { " (fail)" }));
    }
    match lambda_moments(2.0, 2.0, DIAGNOSTIC_DRAWS, 7) {
        Ok(m) => {
            let c = m.c_value().ok();
            let lb_ok = (m.lambda_bar - 0.6).abs() <= 0.005 && (m.lambda_bar_mc.mean - 0.6).abs() <= 0.005;
            let c_ok = c.is_some_and(|c| (c - 3.0).abs() <= 0.05) && (m.c_mc.mean - 3.0).abs() <= 0.05;
            ok &= lb_ok && c_ok;
            parts.push(format!(
                "lambda_bar {:.4} (mc {:.4}), c {} (mc {:.4})",
                m.lambda_bar,
                m.lambda_bar_mc.mean,
                c.map_or("refused".into(), |c| format!("{c:.4}")),
                m.c_mc.mean
            ));
        }
        Err(e) => {
            ok = false;
            parts.push(e.to_string());
        }
    }
    (ok, parts.join("; "))
}

fn criterion_variance() -> Outcome {
    let mut worst = f64::INFINITY;
    for i in 0..20u64 {
        match variance_ordering_check(&variance_instance(600 + i, false), 2.0, 2.0) {
            Ok(v) if v.psd => worst = worst.min(v.min_eigenvalue / v.trace.max(f64::MIN_POSITIVE)),
            Ok(v) => return (false, format!("instance {i}: min eigenvalue {:.3e}, trace {:.3e}", v.min_eigenvalue, v.trace)),
            Err(e) => return (false, format!("instance {i}: {e}")),
        }
    }
    for i in 0..20u64 {
        match variance_ordering_check(&variance_instance(700 + i, true), 2.0, 2.0) {
            Ok(v) if v.positive_definite => {}
            Ok(v) => return (false, format!("separated instance {i}: min eigenvalue {:.3e}", v.min_eigenvalue)),
            Err(e) => return (false, format!("separated instance {i}: {e}")),
        }
    }
    (true, format!("20 random instances PSD (min eigenvalue/trace {worst:.2e}); 20 separated instances positive definite"))
}

fn criterion_ablation() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["nls-maml", "nls-protonet"] {
        let out = match ablation(&preset(name).unwrap()) {
            Ok(o) => o,
            Err(e) => return (false, format!("{name}: {e}")),
        };
        let m = |c: &str| out.mean(c).unwrap_or(f64::NAN);
        let (v, i, c, b) = (m("vanilla"), m("intra"), m("cross"), m("mlti"));
        let pass = b - v >= 0.01 && v <= i && v <= c && c <= b;
        ok &= pass;
        parts.push(format!(
            "{name}: vanilla {v:.4} intra {i:.4} cross {c:.4} mlti {b:.4}{}",
            if pass { "" } else { " (fail)" }
        ));
    }
    (ok, parts.join("; "))
}

fn criterion_sweep() -> Outcome {
    let config = preset("task-sweep").unwrap();
    let out = match sweep_tasks(&config) {
        Ok(o) => o,
        Err(e) => return (false, e.to_string()),
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for &size in &config.sweep.pool_sizes {
        let (v, b) = (out.mean(size, "vanilla").unwrap_or(f64::NAN), out.mean(size, "mlti").unwrap_or(f64::NAN));
        ok &= b >= v;
        parts.push(format!("{size}: {v:.4} -> {b:.4}"));
    }
    (ok, format!("vanilla -> mlti at pool {}", parts.join(", ")))
}

fn criterion_sanity() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    // MAML without meta-training or adaptation; ProtoNet with a random embedding.
    for name in ["nls-maml", "nls-protonet"] {
        let mut config = preset(name).unwrap();
        config.train.test_updates = Some(0);
        let bank = build_bank(&config.bank, config.bank_seed).unwrap();
        let records = init_model(&config, 0).and_then(|m| evaluate_model(&config, &m, &bank, 0));
        match records {
            Ok(r) => {
                let acc = r.iter().map(|r| r.value).sum::<f64>() / r.len() as f64;
                let chance = 1.0 / config.n_way as f64;
                let pass = r.len() == 2000 && (acc - chance).abs() <= 0.05;
                ok &= pass;
                parts.push(format!("untrained {name} {acc:.4}{}", if pass { "" } else { " (fail)" }));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }

    let bank = gaussian_bank(10, 4, 2.0, 0.5, 3);
    let batch = episodes(&bank, PoolSplit::Train, 1, 3, 2, 3, 5);
    let mut net = model(&[4, 16, 3], 1, &mut substream(2, &[]));
    let config = TrainConfig::default();
    let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, 0.1);
    let mut rng = substream(1, &[]);
    let mut losses = Vec::new();
    for it in 0..=200 {
        losses.push(maml_train_step(&mut net, &batch, &config, None, &mut opt, it, &mut rng).unwrap().loss);
    }
    let reduction = 1.0 - losses[200] / losses[0];
    ok &= reduction >= 0.5;
    parts.push(format!("overfit loss reduction {:.1}%", 100.0 * reduction));

    let bank = separable_bank(8, 4, 10.0, 1.0, 5.0);
    let mut net = model(&[4, 16, 8], 2, &mut substream(3, &[]));
    let config = TrainConfig {
        outer_lr: 0.01,
        ..TrainConfig::default()
    };
    let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, config.outer_lr);
    let mut rng = substream(8, &[]);
    for it in 0..200 {
        let batch = episodes(&bank, PoolSplit::Train, 4, 2, 1, 5, 1000 + it);
        protonet_train_step(&mut net, &batch, &config, Some(&MixConfig::default()), &mut opt, it as usize, &mut rng).unwrap();
    }
    let test = episodes(&bank, PoolSplit::Test, 2000, 2, 1, 5, 77);
    let acc = test.iter().map(|ep| protonet_meta_test(&net, ep).unwrap().metric).sum::<f64>() / test.len() as f64;
    ok &= acc > 0.9;
    parts.push(format!("protonet on a 5σ-separable bank {acc:.4}"));
    (ok, parts.join("; "))
}

fn criterion_determinism() -> Outcome {
    for name in ["nls-maml", "nls-protonet"] {
        let config = preset(name).unwrap();
        match (csv_bytes(&config), csv_bytes(&config)) {
            (Ok(a), Ok(b)) if a == b => {}
            (Ok(_), Ok(_)) => return (false, format!("{name}: repeated run differs")),
            (a, b) => return (false, format!("{name}: {:?} {:?}", a.err(), b.err())),
        }
    }
    (true, "nls-maml and nls-protonet repeated: metrics.csv and summary.csv byte-identical".into())
}

fn main() -> ExitCode {
    // Only run under `cargo test`, not when listing tests.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("gradient correctness", 60, criterion_gradients),
        ("bilevel correctness", 120, criterion_bilevel),
        ("degenerate identities", 60, criterion_degenerate),
        ("interpolation invariants", 120, criterion_interpolation),
        ("expansion checks", 600, criterion_taylor),
        ("variance ordering", 60, criterion_variance),
        ("ablation pattern", 1200, criterion_ablation),
        ("pool-size sweep", 1200, criterion_sweep),
        ("sanity anchors", 600, criterion_sanity),
        ("determinism", 1200, criterion_determinism),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, (name, budget, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != n + 1) {
            continue;
        }
        let start = Instant::now();
        let (mut pass, detail) = run();
        let elapsed = start.elapsed();
        let in_time = elapsed <= Duration::from_secs(*budget);
        pass &= in_time;
        let verdict = if pass { "PASS" } else { "FAIL" };
        let over = if in_time { String::new() } else { format!(", over the {budget} s budget") };
        println!("{verdict} {:>2} {name}: {detail} ({:.1} s{over})", n + 1, elapsed.as_secs_f64());
        failed += usize::from(!pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
