use super::metric::{episode_metric, MetricKind};
use super::model::LayeredModel;
use super::optim::OuterOptimizer;
use super::{Evaluation, LearnError, StepReport, TaskTrace, TrainConfig};
use crate::diffcore::{
    insert_params, unroll_inner, DiffError, GradOrder, Graph, InnerRate, NodeId, NodeMap,
    ParamSet, Tensor,
};
use crate::mlti::{LayerForward, MixPlan, TaskMixer};
use crate::rng::Rng;
use crate::taskgen::{Episode, TargetKind};

/// Query loss and outer gradient of one (possibly interpolated) task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskGradient {
    pub query_loss: f64,
    pub grads: ParamSet,
    pub layer: usize,
    pub adapted: Vec<String>,
    pub untouched: Vec<String>,
}

/// Support and query inputs at the interpolation layer, plus their targets.
pub(crate) struct MixedInputs {
    pub layer: usize,
    pub support: NodeId,
    pub query: NodeId,
    pub support_y: Tensor,
    pub query_y: Tensor,
}

/// Runs the prefix of `model` on both tasks and applies `plan`; without a
/// plan the anchor task's inputs are used at layer 0.
pub(crate) fn mixed_inputs(
    model: &LayeredModel,
    g: &mut Graph,
    theta: &NodeMap,
    ti: &Episode,
    tj: &Episode,
    plan: Option<&MixPlan>,
) -> Result<MixedInputs, LearnError> {
    let xs = g.constant(ti.support_x.clone());
    let xq = g.constant(ti.query_x.clone());
    let Some(p) = plan else {
        return Ok(MixedInputs {
            layer: 0,
            support: xs,
            query: xq,
            support_y: ti.support_y.clone(),
            query_y: ti.query_y.clone(),
        });
    };
    if p.layer >= model.layer_count() {
        return Err(LearnError::LayerOutOfRange {
            layer: p.layer,
            layers: model.layer_count(),
        });
    }
    let hs_i = model.forward_nodes(g, theta, xs, 0, p.layer)?;
    let hq_i = model.forward_nodes(g, theta, xq, 0, p.layer)?;
    let (hs_j, hq_j) = if p.i == p.j {
        (hs_i, hq_i)
    } else {
        let xs_j = g.constant(tj.support_x.clone());
        let xq_j = g.constant(tj.query_x.clone());
        (
            model.forward_nodes(g, theta, xs_j, 0, p.layer)?,
            model.forward_nodes(g, theta, xq_j, 0, p.layer)?,
        )
    };
    let (support, query) = p.mix_nodes(g, hs_i, hs_j, hq_i, hq_j)?;
    let (support_y, query_y) = p.labels(ti, tj)?;
    Ok(MixedInputs {
        layer: p.layer,
        support,
        query,
        support_y,
        query_y,
    })
}

fn loss_node(g: &mut Graph, out: NodeId, y: NodeId, target: TargetKind) -> Result<NodeId, DiffError> {
    match target {
        TargetKind::Classes => g.softmax_cross_entropy(out, y),
        TargetKind::Scalar => g.mse(out, y),
    }
}

/// Meta-gradient of one task: interpolate at the plan's layer, adapt the
/// layers after it for `updates` steps on the support, differentiate the
/// query loss with respect to every parameter.
#[allow(clippy::too_many_arguments)]
pub fn maml_task_gradient(
    model: &LayeredModel,
    params: &ParamSet,
    ti: &Episode,
    tj: &Episode,
    plan: Option<&MixPlan>,
    eta: f64,
    updates: usize,
    order: GradOrder,
) -> Result<TaskGradient, LearnError> {
    let mut g = Graph::new();
    let theta = insert_params(&mut g, params);
    let mixed = mixed_inputs(model, &mut g, &theta, ti, tj, plan)?;
    let last = model.layer_count();
    let l = mixed.layer;
    let ys = g.constant(mixed.support_y);
    let yq = g.constant(mixed.query_y);
    let adapt = model.adapt_names(l);
    let rate = model.inner_rate(eta);
    let target = ti.target;
    let support = mixed.support;
    let phi = unroll_inner(&mut g, &theta, &adapt, &rate, updates, order, |g, phi| {
        let out = model.forward_nodes(g, phi, support, l, last)?;
        loss_node(g, out, ys, target)
    })?;
    let out = model.forward_nodes(&mut g, &phi, mixed.query, l, last)?;
    let loss = loss_node(&mut g, out, yq, target)?;
    let query_loss = g.value(loss).item()?;
    let grads = g.gradients(loss, &theta)?;
    let untouched = phi
        .iter()
        .filter(|(n, id)| theta.get(*n) == Some(id))
        .map(|(n, _)| n.clone())
        .collect();
    Ok(TaskGradient {
        query_loss,
        grads,
        layer: l,
        adapted: adapt,
        untouched,
    })
}

/// Sums `src` into `acc`.
pub(crate) fn accumulate(acc: &mut ParamSet, src: ParamSet) {
    for (name, t) in src {
        match acc.get_mut(&name) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(t.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(name, t);
            }
        }
    }
}

pub(crate) fn scale_all(acc: &mut ParamSet, s: f64) {
    for t in acc.values_mut() {
        for x in t.data_mut() {
            *x *= s;
        }
    }
}

pub(crate) fn diverged(
    iteration: usize,
    ti: &Episode,
    tj: &Episode,
    plan: Option<&MixPlan>,
    source: DiffError,
) -> LearnError {
    LearnError::Diverged {
        iteration,
        task_id: ti.task_id,
        partner_task_id: tj.task_id,
        lambda: plan.map(MixPlan::lambda),
        source,
    }
}

/// One outer step of MAML (or a variant, per the model's policy and rates)
/// over `batch`. Each task is interpolated when `mixer` yields a plan.
pub fn maml_train_step(
    model: &mut LayeredModel,
    batch: &[Episode],
    config: &TrainConfig,
    mixer: Option<&dyn TaskMixer>,
    optimizer: &mut OuterOptimizer,
    iteration: usize,
    rng: &mut Rng,
) -> Result<StepReport, LearnError> {
    if batch.is_empty() {
        return Err(LearnError::Config("empty task batch".into()));
    }
    if config.inner_updates == 0 {
        return Err(LearnError::Config("MAML needs at least one inner update".into()));
    }
    let mut total = ParamSet::new();
    let mut traces = Vec::with_capacity(batch.len());
    let mut loss_sum = 0.0;
    for i in 0..batch.len() {
        let plan = match mixer {
            Some(m) => m.plan(batch, i, false, rng)?,
            None => None,
        };
        let ti = &batch[i];
        let tj = plan.as_ref().map_or(ti, |p| &batch[p.j]);
        let tg = maml_task_gradient(
            model,
            model.params(),
            ti,
            tj,
            plan.as_ref(),
            config.inner_lr,
            config.inner_updates,
            config.order,
        )
        .map_err(|e| match e {
            LearnError::Diff(d) => diverged(iteration, ti, tj, plan.as_ref(), d),
            other => other,
        })?;
        if !tg.query_loss.is_finite() {
            return Err(diverged(
                iteration,
                ti,
                tj,
                plan.as_ref(),
                DiffError::NonFinite { op: "query loss" },
            ));
        }
        loss_sum += tg.query_loss;
        traces.push(TaskTrace {
            task_id: ti.task_id,
            partner_task_id: tj.task_id,
            layer: tg.layer,
            lambda: plan.as_ref().map(MixPlan::lambda),
            adapted: tg.adapted,
            untouched: tg.untouched,
            query_loss: tg.query_loss,
        });
        accumulate(&mut total, tg.grads);
    }
    let n = batch.len() as f64;
    scale_all(&mut total, 1.0 / n);
    optimizer.step(model.params_mut(), &total)?;
    Ok(StepReport {
        loss: loss_sum / n,
        tasks: traces,
    })
}

/// Adapts on the true support (first order, policy-restricted) and scores
/// the query. MetaSGD models use their learned rates instead of `eta`.
pub fn maml_meta_test(
    model: &LayeredModel,
    episode: &Episode,
    eta: f64,
    updates: usize,
) -> Result<Evaluation, LearnError> {
    if episode.query_x.rows() == 0 {
        return Err(LearnError::EmptyQuery);
    }
    let mut g = Graph::new();
    let theta = insert_params(&mut g, model.params());
    let last = model.layer_count();
    let xs = g.constant(episode.support_x.clone());
    let ys = g.constant(episode.support_y.clone());
    let target = episode.target;
    let adapt = model.adapt_names(0);
    let rate: InnerRate = model.inner_rate(eta);
    let phi = unroll_inner(&mut g, &theta, &adapt, &rate, updates, GradOrder::First, |g, phi| {
        let out = model.forward_nodes(g, phi, xs, 0, last)?;
        loss_node(g, out, ys, target)
    })?;
    let xq = g.constant(episode.query_x.clone());
    let out = model.forward_nodes(&mut g, &phi, xq, 0, last)?;
    let predictions = g.value(out).clone();
    let kind = match target {
        TargetKind::Classes => MetricKind::Accuracy,
        TargetKind::Scalar => MetricKind::Mse,
    };
    let metric = episode_metric(&predictions, &episode.query_y, kind)?;
    Ok(Evaluation {
        predictions,
        metric,
    })
}
