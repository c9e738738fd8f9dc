mod common;

use common::{episodes, gaussian_bank, separable_bank};
use mlti_core::diffcore::{
    finite_diff_oracle, relative_error, DiffError, GradOrder, ParamSet, Tensor,
};
use mlti_core::learners::{
    maml_meta_test, maml_task_gradient, maml_train_step, prototype_probabilities,
    protonet_meta_test, protonet_train_step, variant_config, LayeredModel, OptimizerKind,
    OuterOptimizer, TrainConfig, Variant,
};
use mlti_core::mlti::{IdentityMixer, MixConfig, TaskMixer};
use mlti_core::rng::substream;
use mlti_core::taskgen::{Episode, PoolSplit};

fn small_model(dims: &[usize], prefix: usize, seed: u64) -> LayeredModel {
    LayeredModel::new(dims, prefix, &mut substream(seed, &[])).unwrap()
}

fn train_batch(seed: u64) -> Vec<Episode> {
    let bank = gaussian_bank(10, 4, 2.0, 0.5, 3);
    episodes(&bank, PoolSplit::Train, 4, 3, 2, 3, seed)
}

/// Mean query loss without adaptation, as a plain function of the parameters.
fn plain_query_loss(model: &LayeredModel, params: &ParamSet, batch: &[Episode]) -> f64 {
    batch
        .iter()
        .map(|t| {
            maml_task_gradient(model, params, t, t, None, 0.0, 1, GradOrder::First)
                .unwrap()
                .query_loss
        })
        .sum::<f64>()
        / batch.len() as f64
}

#[test]
fn zero_inner_rate_vanilla_step_is_gradient_descent() {
    let batch = train_batch(1);
    let mut model = small_model(&[4, 6, 3], 1, 7);
    let before = model.params().clone();
    let config = TrainConfig {
        inner_lr: 0.0,
        outer_lr: 0.1,
        ..TrainConfig::default()
    };
    let fd = finite_diff_oracle(
        |p| Ok(plain_query_loss(&model, p, &batch)),
        &before,
        1e-6,
    )
    .unwrap();
    let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, 0.1);
    let vanilla = MixConfig::vanilla();
    maml_train_step(&mut model, &batch, &config, Some(&vanilla), &mut opt, 0, &mut substream(1, &[]))
        .unwrap();
    for (name, t) in &before {
        for ((a, b), g) in t.data().iter().zip(model.params()[name].data()).zip(fd[name].data()) {
            assert!((a - 0.1 * g - b).abs() < 1e-7, "{name}");
        }
    }
}

fn run_steps(mixer: Option<&dyn TaskMixer>, steps: usize) -> ParamSet {
    let bank = gaussian_bank(10, 4, 2.0, 0.5, 3);
    let mut model = small_model(&[4, 6, 6, 3], 2, 11);
    let config = TrainConfig {
        inner_lr: 0.1,
        outer_lr: 0.05,
        inner_updates: 2,
        ..TrainConfig::default()
    };
    let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, config.outer_lr);
    let mut rng = substream(5, &[]);
    for it in 0..steps {
        let batch = episodes(&bank, PoolSplit::Train, 4, 3, 2, 3, 100 + it as u64);
        maml_train_step(&mut model, &batch, &config, mixer, &mut opt, it, &mut rng).unwrap();
    }
    model.params().clone()
}

#[test]
fn identity_plan_and_vanilla_mode_match_the_plain_step_bitwise() {
    let plain = run_steps(None, 5);
    assert_eq!(run_steps(Some(&IdentityMixer), 5), plain);
    assert_eq!(run_steps(Some(&MixConfig::vanilla()), 5), plain);
    assert_ne!(run_steps(Some(&MixConfig::default()), 5), plain);
}

#[test]
fn second_order_meta_gradient_matches_finite_differences() {
    let batch = train_batch(2);
    let model = small_model(&[4, 5, 3], 1, 3);
    let mut rng = substream(4, &[]);
    let plan = MixConfig {
        layer_max: 1,
        ..MixConfig::default()
    }
    .plan(&batch, 0, false, &mut rng)
    .unwrap();
    let plan = plan.as_ref();
    let tj = &batch[plan.map_or(0, |p| p.j)];
    let ana = maml_task_gradient(&model, model.params(), &batch[0], tj, plan, 0.3, 1, GradOrder::Second)
        .unwrap();
    let fd = finite_diff_oracle(
        |p| {
            maml_task_gradient(&model, p, &batch[0], tj, plan, 0.3, 1, GradOrder::First)
                .map(|t| t.query_loss)
                .map_err(|e| DiffError::Validation(e.to_string()))
        },
        model.params(),
        1e-5,
    )
    .unwrap();
    let err = relative_error(&ana.grads, &fd);
    assert!(err < 1e-4, "relative error {err}");
}

#[test]
fn layer_out_of_range_rejected() {
    let batch = train_batch(3);
    let model = small_model(&[4, 5, 3], 2, 3);
    let mut plan = IdentityMixer.plan(&batch, 0, false, &mut substream(1, &[])).unwrap().unwrap();
    plan.layer = 2;
    assert!(maml_task_gradient(&model, model.params(), &batch[0], &batch[0], Some(&plan), 0.1, 1, GradOrder::First).is_err());
}

#[test]
fn inner_loop_never_touches_layers_up_to_l() {
    let bank = gaussian_bank(10, 4, 2.0, 0.5, 3);
    let mut model = small_model(&[4, 6, 6, 3], 2, 1);
    let config = TrainConfig::default();
    let mix = MixConfig {
        layer_max: 2,
        ..MixConfig::default()
    };
    let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, 0.01);
    let mut rng = substream(2, &[]);
    let mut layers_seen = std::collections::BTreeSet::new();
    for it in 0..10 {
        let batch = episodes(&bank, PoolSplit::Train, 4, 3, 1, 2, it);
        let report = maml_train_step(&mut model, &batch, &config, Some(&mix), &mut opt, it as usize, &mut rng).unwrap();
        for t in &report.tasks {
            layers_seen.insert(t.layer);
            for k in 1..=t.layer {
                for name in [format!("l{k}.w"), format!("l{k}.b")] {
                    assert!(t.untouched.contains(&name) && !t.adapted.contains(&name));
                }
            }
            for k in t.layer + 1..=3 {
                assert!(t.adapted.contains(&format!("l{k}.w")));
            }
        }
    }
    assert_eq!(layers_seen.len(), 3);
}

#[test]
fn anil_keeps_hidden_weights_and_metasgd_reduces_to_maml() {
    let batch = train_batch(4);
    let base = small_model(&[4, 6, 3], 1, 9);
    let anil = variant_config(&base, Variant::Anil, 0.1);
    let tg = maml_task_gradient(&anil, anil.params(), &batch[0], &batch[0], None, 0.1, 3, GradOrder::First).unwrap();
    assert_eq!(tg.adapted, vec!["l2.w", "l2.b"]);
    assert!(tg.untouched.iter().any(|n| n == "l1.w") && tg.untouched.iter().any(|n| n == "l1.b"));

    let sgd = variant_config(&base, Variant::Metasgd, 0.1);
    let a = maml_task_gradient(&base, base.params(), &batch[0], &batch[0], None, 0.1, 3, GradOrder::First).unwrap();
    let b = maml_task_gradient(&sgd, sgd.params(), &batch[0], &batch[0], None, 0.1, 3, GradOrder::First).unwrap();
    assert_eq!(a.query_loss, b.query_loss);
    for (name, g) in &a.grads {
        assert_eq!(g, &b.grads[name]);
    }
    let rate_grad: f64 = b.grads["l1.w.lr"].norm();
    assert!(rate_grad > 0.0);

    let mut model = sgd.clone();
    let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, 0.01);
    let config = TrainConfig { inner_lr: 0.1, ..TrainConfig::default() };
    maml_train_step(&mut model, &batch, &config, None, &mut opt, 0, &mut substream(1, &[])).unwrap();
    assert_ne!(model.params()["l1.w.lr"], sgd.params()["l1.w.lr"]);
}

#[test]
fn single_episode_overfit_halves_the_meta_loss() {
    let batch = train_batch(5)[..1].to_vec();
    let mut model = small_model(&[4, 16, 3], 1, 2);
    let config = TrainConfig::default();
    let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, 0.1);
    let mut rng = substream(1, &[]);
    let first = maml_train_step(&mut model, &batch, &config, None, &mut opt, 0, &mut rng).unwrap().loss;
    let mut last = first;
    for it in 1..=200 {
        last = maml_train_step(&mut model, &batch, &config, None, &mut opt, it, &mut rng).unwrap().loss;
    }
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn meta_test_overfits_support_equal_query_and_zero_rate_is_unadapted() {
    // Two classes on either side of the line x0 = x1.
    let bank = gaussian_bank(4, 2, 3.0, 0.2, 8);
    let mut ep = episodes(&bank, PoolSplit::Train, 1, 2, 5, 5, 1).remove(0);
    let mut xs = Vec::new();
    for i in 0..10 {
        let t = i as f64 * 0.3 - 1.5;
        xs.extend(if i < 5 { [t, t + 1.0] } else { [t + 1.0, t] });
    }
    ep.support_x = Tensor::matrix(10, 2, xs).unwrap();
    ep.query_x = ep.support_x.clone();
    ep.query_y = ep.support_y.clone();
    let model = small_model(&[2, 8, 2], 1, 4);
    assert_eq!(maml_meta_test(&model, &ep, 0.5, 200).unwrap().metric, 1.0);
    let plain = model.forward(&ep.query_x).unwrap();
    let eval = maml_meta_test(&model, &ep, 0.0, 5).unwrap();
    assert_eq!(eval.predictions, plain);
}

#[test]
fn protonet_probabilities_are_distributions_and_scale_invariant_in_argmax() {
    let bank = gaussian_bank(10, 4, 2.0, 0.5, 3);
    let model = small_model(&[4, 8, 4], 2, 5);
    for ep in episodes(&bank, PoolSplit::Test, 20, 5, 1, 3, 9) {
        let eval = protonet_meta_test(&model, &ep).unwrap();
        for r in 0..eval.predictions.rows() {
            let s: f64 = eval.predictions.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let q = model.forward(&ep.query_x).unwrap();
        let s = model.forward(&ep.support_x).unwrap();
        let p1 = prototype_probabilities(&q, &s).unwrap();
        // Scaling embeddings by 0.5 scales squared distances by 0.25.
        let p2 = prototype_probabilities(&q.map(|v| 0.5 * v), &s.map(|v| 0.5 * v)).unwrap();
        assert_eq!(p1.argmax_rows(), p2.argmax_rows());
        assert_eq!(p1.argmax_rows(), eval.predictions.argmax_rows());
    }
}

#[test]
fn protonet_learns_a_separable_bank() {
    let bank = separable_bank(8, 4, 10.0, 1.0, 5.0);
    let mut model = small_model(&[4, 16, 8], 2, 3);
    let config = TrainConfig { outer_lr: 0.01, ..TrainConfig::default() };
    let mut opt = OuterOptimizer::new(OptimizerKind::Sgd, config.outer_lr);
    let mix = MixConfig::default();
    let mut rng = substream(8, &[]);
    for it in 0..200 {
        let batch = episodes(&bank, PoolSplit::Train, 4, 2, 1, 5, 1000 + it);
        protonet_train_step(&mut model, &batch, &config, Some(&mix), &mut opt, it as usize, &mut rng).unwrap();
    }
    let acc: f64 = episodes(&bank, PoolSplit::Test, 500, 2, 1, 5, 77)
        .iter()
        .map(|ep| protonet_meta_test(&model, ep).unwrap().metric)
        .sum::<f64>()
        / 500.0;
    assert!(acc > 0.95, "accuracy {acc}");
}
