use super::maml::{accumulate, diverged, mixed_inputs, scale_all, TaskGradient};
use super::metric::{episode_metric, MetricKind};
use super::model::LayeredModel;
use super::optim::OuterOptimizer;
use super::{Evaluation, LearnError, StepReport, TaskTrace, TrainConfig};
use crate::diffcore::{insert_params, DiffError, Graph, NodeId, NodeMap, ParamSet, Tensor};
use crate::mlti::{LayerForward, MixPlan, TaskMixer};
use crate::rng::Rng;
use crate::taskgen::{Episode, TargetKind};

/// `[n_way, rows]` matrix whose product with support embeddings gives the
/// per-class means.
fn averaging_matrix(support_y: &Tensor, n_way: usize) -> Result<Tensor, LearnError> {
    let labels = support_y.argmax_rows();
    let rows = labels.len();
    let mut counts = vec![0usize; n_way];
    for &c in &labels {
        counts[c] += 1;
    }
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(LearnError::EmptyClass { class });
    }
    let mut data = vec![0.0; n_way * rows];
    for (r, &c) in labels.iter().enumerate() {
        data[c * rows + r] = 1.0 / counts[c] as f64;
    }
    Ok(Tensor::matrix(n_way, rows, data)?)
}

/// Per-class mean of `embeddings`, classes taken from the argmax of `support_y`.
pub fn prototypes(embeddings: &Tensor, support_y: &Tensor) -> Result<Tensor, LearnError> {
    let a = averaging_matrix(support_y, support_y.cols())?;
    let mut g = Graph::new();
    let an = g.constant(a);
    let e = g.constant(embeddings.clone());
    let p = g.matmul(an, e)?;
    Ok(g.value(p).clone())
}

/// Softmax over negative squared distances from each query to each prototype.
pub fn prototype_probabilities(queries: &Tensor, protos: &Tensor) -> Result<Tensor, LearnError> {
    let mut g = Graph::new();
    let q = g.constant(queries.clone());
    let p = g.constant(protos.clone());
    let d = g.pairwise_sq_dist(q, p)?;
    let logits = g.scale(d, -1.0)?;
    let probs = g.softmax(logits)?;
    Ok(g.value(probs).clone())
}

/// Logits `−‖f(q) − c_r‖²` built on `g`.
fn distance_logits(
    model: &LayeredModel,
    g: &mut Graph,
    theta: &NodeMap,
    support: NodeId,
    query: NodeId,
    support_y: &Tensor,
    n_way: usize,
    layer: usize,
) -> Result<NodeId, LearnError> {
    let last = model.layer_count();
    let es = model.forward_nodes(g, theta, support, layer, last)?;
    let eq = model.forward_nodes(g, theta, query, layer, last)?;
    let a = g.constant(averaging_matrix(support_y, n_way)?);
    let protos = g.matmul(a, es)?;
    let d = g.pairwise_sq_dist(eq, protos)?;
    Ok(g.scale(d, -1.0)?)
}

fn require_classes(ep: &Episode) -> Result<(), LearnError> {
    if ep.target != TargetKind::Classes {
        return Err(LearnError::Episode {
            what: "protonet",
            message: "prototypes need classification episodes".into(),
        });
    }
    Ok(())
}

/// ProtoNet loss and gradient for one (possibly interpolated) task.
pub fn protonet_task_gradient(
    model: &LayeredModel,
    params: &ParamSet,
    ti: &Episode,
    tj: &Episode,
    plan: Option<&MixPlan>,
) -> Result<TaskGradient, LearnError> {
    require_classes(ti)?;
    if plan.is_some_and(|p| !p.relabels()) {
        return Err(LearnError::Config(
            "prototypes need the relabelling form of interpolation".into(),
        ));
    }
    let mut g = Graph::new();
    let theta = insert_params(&mut g, params);
    let mixed = mixed_inputs(model, &mut g, &theta, ti, tj, plan)?;
    let logits = distance_logits(
        model,
        &mut g,
        &theta,
        mixed.support,
        mixed.query,
        &mixed.support_y,
        ti.n_way,
        mixed.layer,
    )?;
    let yq = g.constant(mixed.query_y);
    let loss = g.softmax_cross_entropy(logits, yq)?;
    let query_loss = g.value(loss).item()?;
    let grads = g.gradients(loss, &theta)?;
    Ok(TaskGradient {
        query_loss,
        grads,
        layer: mixed.layer,
        adapted: Vec::new(),
        untouched: theta.keys().cloned().collect(),
    })
}

/// One optimizer step of ProtoNet over `batch`; interpolation always uses
/// the relabelling form.
pub fn protonet_train_step(
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
    config.validate()?;
    let mut total = ParamSet::new();
    let mut traces = Vec::with_capacity(batch.len());
    let mut loss_sum = 0.0;
    for i in 0..batch.len() {
        let plan = match mixer {
            Some(m) => m.plan(batch, i, true, rng)?,
            None => None,
        };
        let ti = &batch[i];
        let tj = plan.as_ref().map_or(ti, |p| &batch[p.j]);
        let tg = protonet_task_gradient(model, model.params(), ti, tj, plan.as_ref()).map_err(
            |e| match e {
                LearnError::Diff(d) => diverged(iteration, ti, tj, plan.as_ref(), d),
                other => other,
            },
        )?;
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

/// Nearest-prototype classification of the query set; predictions are class probabilities.
pub fn protonet_meta_test(model: &LayeredModel, episode: &Episode) -> Result<Evaluation, LearnError> {
    require_classes(episode)?;
    if episode.query_x.rows() == 0 {
        return Err(LearnError::EmptyQuery);
    }
    let mut g = Graph::new();
    let theta = model.constant_params(&mut g);
    let xs = g.constant(episode.support_x.clone());
    let xq = g.constant(episode.query_x.clone());
    let logits = distance_logits(
        model,
        &mut g,
        &theta,
        xs,
        xq,
        &episode.support_y,
        episode.n_way,
        0,
    )?;
    let probs = g.softmax(logits)?;
    let predictions = g.value(probs).clone();
    let metric = episode_metric(&predictions, &episode.query_y, MetricKind::Accuracy)?;
    Ok(Evaluation {
        predictions,
        metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_shot_prototypes_are_the_embeddings() {
        let e = Tensor::matrix(3, 2, vec![1.0, 2.0, -3.0, 0.5, 0.0, 7.0]).unwrap();
        let y = Tensor::one_hot(&[0, 1, 2], 3).unwrap();
        assert_eq!(prototypes(&e, &y).unwrap(), e);
    }

    #[test]
    fn duplicated_support_keeps_prototypes() {
        let e = Tensor::matrix(4, 1, vec![1.0, 3.0, -2.0, 0.0]).unwrap();
        let y = Tensor::one_hot(&[0, 0, 1, 1], 2).unwrap();
        let p = prototypes(&e, &y).unwrap();
        assert_eq!(p.data(), [2.0, -1.0]);
        let e2 = e.select_rows(&[0, 1, 2, 3, 0, 1, 2, 3]);
        let y2 = y.select_rows(&[0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(prototypes(&e2, &y2).unwrap(), p);
    }

    #[test]
    fn empty_class_rejected() {
        let e = Tensor::zeros(&[2, 1]);
        let y = Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(prototypes(&e, &y), Err(LearnError::EmptyClass { class: 2 }));
    }

    #[test]
    fn distance_zero_and_two_gives_logistic_probability() {
        // Squared distances 0 and 2: p = 1 / (1 + e^-2).
        let q = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let c = Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let p = prototype_probabilities(&q, &c).unwrap();
        assert!((p.data()[0] - 0.8808).abs() < 1e-4);
        assert!((p.data()[0] + p.data()[1] - 1.0).abs() < 1e-12);
    }
}
