use std::collections::BTreeMap;

use super::{insert_params, DiffError, Graph, NodeId, ParamSet};

/// Parameter name to graph node.
pub type NodeMap = BTreeMap<String, NodeId>;

/// Which half of an episode a loss is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Support,
    Query,
}

/// How the outer gradient treats the inner-loop updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradOrder {
    /// Inner gradients are treated as constants.
    #[default]
    First,
    /// Inner gradients are recorded on the graph and differentiated through.
    Second,
}

/// Inner-loop step size.
#[derive(Debug, Clone, PartialEq)]
pub enum InnerRate {
    Fixed(f64),
    /// Elementwise rates: adapted parameter name to the name of its rate tensor.
    Learned(BTreeMap<String, String>),
}

/// Runs `updates` inner steps on the parameters named in `adapt`, recording
/// every step on `graph`, and returns the adapted node map.
///
/// Parameters outside `adapt` map to their original nodes.
pub fn unroll_inner<F>(
    graph: &mut Graph,
    theta: &NodeMap,
    adapt: &[String],
    rate: &InnerRate,
    updates: usize,
    order: GradOrder,
    mut support_loss: F,
) -> Result<NodeMap, DiffError>
where
    F: FnMut(&mut Graph, &NodeMap) -> Result<NodeId, DiffError>,
{
    for name in adapt {
        if !theta.contains_key(name) {
            return Err(DiffError::UnknownParam(name.clone()));
        }
    }
    match rate {
        InnerRate::Fixed(eta) if *eta < 0.0 || !eta.is_finite() => {
            return Err(DiffError::Validation(format!(
                "inner learning rate must be finite and >= 0, got {eta}"
            )));
        }
        InnerRate::Learned(map) => {
            for name in adapt {
                let rate_name = map
                    .get(name)
                    .ok_or_else(|| DiffError::UnknownParam(format!("rate for {name}")))?;
                if !theta.contains_key(rate_name) {
                    return Err(DiffError::UnknownParam(rate_name.clone()));
                }
            }
        }
        InnerRate::Fixed(_) => {}
    }
    let mut phi = theta.clone();
    if adapt.is_empty() {
        return Ok(phi);
    }
    for _ in 0..updates {
        let loss = support_loss(graph, &phi)?;
        let ids: Vec<NodeId> = adapt.iter().map(|n| phi[n]).collect();
        let grads: Vec<NodeId> = match order {
            GradOrder::First => graph
                .backward(loss, &ids)?
                .into_iter()
                .map(|t| graph.constant(t))
                .collect(),
            GradOrder::Second => graph.backward_graph(loss, &ids)?,
        };
        for ((name, id), grad) in adapt.iter().zip(ids).zip(grads) {
            let step = match rate {
                InnerRate::Fixed(eta) => graph.scale(grad, *eta)?,
                InnerRate::Learned(map) => graph.mul(theta[&map[name]], grad)?,
            };
            let next = graph.sub(id, step)?;
            phi.insert(name.clone(), next);
        }
    }
    Ok(phi)
}

/// Outcome of one bilevel gradient evaluation.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub query_loss: f64,
    /// Gradient of the query loss with respect to every tracked parameter.
    pub grads: ParamSet,
    /// Values of the adapted parameters after the inner loop.
    pub adapted: ParamSet,
}

/// Gradient of `θ ↦ L_query(φ(θ))` where `φ` comes from `updates` inner
/// descent steps on the support loss.
///
/// `loss` builds the support or query loss for a given parameter node map.
pub fn meta_gradient<F>(
    params: &ParamSet,
    adapt: &[String],
    rate: &InnerRate,
    updates: usize,
    order: GradOrder,
    mut loss: F,
) -> Result<MetaGradient, DiffError>
where
    F: FnMut(&mut Graph, &NodeMap, Split) -> Result<NodeId, DiffError>,
{
    let mut graph = Graph::new();
    let theta = insert_params(&mut graph, params);
    let phi = unroll_inner(&mut graph, &theta, adapt, rate, updates, order, |g, p| {
        loss(g, p, Split::Support)
    })?;
    let query = loss(&mut graph, &phi, Split::Query)?;
    let grads = graph.gradients(query, &theta)?;
    let adapted = phi
        .iter()
        .map(|(n, id)| (n.clone(), graph.value(*id).clone().with_tracked(false)))
        .collect();
    Ok(MetaGradient {
        query_loss: graph.value(query).item()?,
        grads,
        adapted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{finite_diff_oracle, relative_error, Tensor};

    fn net_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "w0".into(),
            Tensor::matrix(2, 3, vec![0.4, -0.2, 0.7, 0.1, 0.9, -0.5]).unwrap(),
        );
        p.insert("b0".into(), Tensor::matrix(1, 3, vec![0.05, -0.1, 0.2]).unwrap());
        p.insert(
            "w1".into(),
            Tensor::matrix(3, 2, vec![0.3, -0.6, 0.8, 0.2, -0.4, 0.5]).unwrap(),
        );
        p.insert("b1".into(), Tensor::matrix(1, 2, vec![0.0, 0.1]).unwrap());
        p
    }

    fn two_layer_ce(g: &mut Graph, p: &NodeMap, split: Split) -> Result<NodeId, DiffError> {
        let (x, y) = match split {
            Split::Support => (vec![0.5, -1.0, 1.5, 0.3, -0.7, 0.8], vec![0, 1, 1]),
            Split::Query => (vec![1.0, 0.2, -0.4, 0.6, 0.9, -1.2], vec![1, 0, 1]),
        };
        let x = g.constant(Tensor::matrix(3, 2, x).unwrap());
        let t = g.constant(Tensor::one_hot(&y, 2).unwrap());
        let h = g.matmul(x, p["w0"])?;
        let h = g.add_row(h, p["b0"])?;
        let h = g.relu(h)?;
        let z = g.matmul(h, p["w1"])?;
        let z = g.add_row(z, p["b1"])?;
        g.softmax_cross_entropy(z, t)
    }

    fn all_names() -> Vec<String> {
        net_params().keys().cloned().collect()
    }

    #[test]
    fn zero_rate_reduces_to_plain_gradient() {
        let p = net_params();
        let mut g = Graph::new();
        let ids = crate::diffcore::insert_params(&mut g, &p);
        let l = two_layer_ce(&mut g, &ids, Split::Query).unwrap();
        let plain = g.gradients(l, &ids).unwrap();
        for order in [GradOrder::First, GradOrder::Second] {
            for (rate, updates) in [(0.0, 3), (0.5, 0)] {
                let mg = meta_gradient(
                    &p,
                    &all_names(),
                    &InnerRate::Fixed(rate),
                    updates,
                    order,
                    two_layer_ce,
                )
                .unwrap();
                assert_eq!(mg.grads, plain);
            }
        }
    }

    #[test]
    fn second_order_matches_finite_differences() {
        let p = net_params();
        let names = all_names();
        for updates in 1..=3 {
            let rate = InnerRate::Fixed(0.3);
            let mg =
                meta_gradient(&p, &names, &rate, updates, GradOrder::Second, two_layer_ce)
                    .unwrap();
            let fd = finite_diff_oracle(
                |ps: &ParamSet| {
                    meta_gradient(ps, &names, &rate, updates, GradOrder::First, two_layer_ce)
                        .map(|m| m.query_loss)
                },
                &p,
                1e-5,
            )
            .unwrap();
            assert!(relative_error(&mg.grads, &fd) < 1e-6, "updates {updates}");
        }
    }

    #[test]
    fn first_order_is_query_gradient_at_adapted_point() {
        let p = net_params();
        let names = all_names();
        let mg = meta_gradient(&p, &names, &InnerRate::Fixed(0.3), 2, GradOrder::First, two_layer_ce)
            .unwrap();
        let mut g = Graph::new();
        let ids = crate::diffcore::insert_params(&mut g, &mg.adapted);
        let l = two_layer_ce(&mut g, &ids, Split::Query).unwrap();
        let at_phi = g.gradients(l, &ids).unwrap();
        assert!(relative_error(&mg.grads, &at_phi) < 1e-12);
    }

    #[test]
    fn learned_rates_equal_to_fixed_rate_reproduce_update() {
        let mut p = net_params();
        let names = all_names();
        let mut map = BTreeMap::new();
        for n in &names {
            let shape = p[n].shape().to_vec();
            p.insert(format!("rate.{n}"), Tensor::filled(&shape, 0.3));
            map.insert(n.clone(), format!("rate.{n}"));
        }
        let fixed = meta_gradient(&p, &names, &InnerRate::Fixed(0.3), 1, GradOrder::First, two_layer_ce)
            .unwrap();
        let learned = meta_gradient(&p, &names, &InnerRate::Learned(map), 1, GradOrder::First, two_layer_ce)
            .unwrap();
        for n in &names {
            assert_eq!(fixed.adapted[n], learned.adapted[n]);
        }
        assert!(learned.grads["rate.w1"].norm() > 0.0);
    }

    #[test]
    fn unsupported_primitive_is_reported() {
        let mut p = ParamSet::new();
        p.insert("w".into(), Tensor::filled(&[2, 2], 0.5));
        let res = meta_gradient(
            &p,
            &["w".to_string()],
            &InnerRate::Fixed(0.1),
            1,
            GradOrder::Second,
            |g, ids, _| {
                let c = g.constant(Tensor::zeros(&[1, 2]));
                let d = g.pairwise_sq_dist(ids["w"], c)?;
                g.sum(d)
            },
        );
        assert!(matches!(res, Err(DiffError::Unsupported { .. })));
    }
}
