use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::diffcore::{DiffError, Graph, InnerRate, NodeId, NodeMap, ParamSet, Tensor};
use crate::mlti::LayerForward;
use crate::rng::Rng;

/// Which parameters the inner loop may adapt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptPolicy {
    /// Every layer after the interpolation layer.
    #[default]
    AllAfterL,
    /// Only the final layer (ANIL).
    HeadOnly,
}

impl AdaptPolicy {
    pub fn name(self) -> &'static str {
        match self {
            AdaptPolicy::AllAfterL => "all-after-l",
            AdaptPolicy::HeadOnly => "head-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "all-after-l" => Some(AdaptPolicy::AllAfterL),
            "head-only" => Some(AdaptPolicy::HeadOnly),
            _ => None,
        }
    }
}

/// MAML-family learner variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Maml,
    Anil,
    Metasgd,
}

/// Dense network `x → relu(x W₁ + b₁) → … → x W_L + b_L`.
///
/// Layer `k` (1-based) owns `l{k}.w: [d_{k-1}, d_k]` and `l{k}.b: [1, d_k]`;
/// every layer but the last is followed by a ReLU. `H^0` is the input and
/// `H^k` the output of layer `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    dims: Vec<usize>,
    shared_prefix: usize,
    policy: AdaptPolicy,
    learned_rates: bool,
    params: ParamSet,
}

pub(crate) fn weight_name(k: usize) -> String {
    format!("l{k}.w")
}

pub(crate) fn bias_name(k: usize) -> String {
    format!("l{k}.b")
}

pub(crate) fn rate_name(param: &str) -> String {
    format!("{param}.lr")
}

impl LayeredModel {
    /// Uniform fan-in init: weights in `±√(6/fan_in)` before a ReLU and
    /// `±√(3/fan_in)` for the output layer; zero biases.
    pub fn new(dims: &[usize], shared_prefix: usize, rng: &mut Rng) -> Result<Self, LearnError> {
        check_dims(dims, shared_prefix)?;
        let layers = dims.len() - 1;
        let mut params = ParamSet::new();
        for k in 1..=layers {
            let (fan_in, fan_out) = (dims[k - 1], dims[k]);
            let gain = if k < layers { 6.0 } else { 3.0 };
            let bound = (gain / fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            params.insert(weight_name(k), Tensor::matrix(fan_in, fan_out, w)?);
            params.insert(bias_name(k), Tensor::zeros(&[1, fan_out]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            shared_prefix,
            policy: AdaptPolicy::AllAfterL,
            learned_rates: false,
            params,
        })
    }

    /// Rebuilds a model from stored parameters, checking every shape.
    pub fn from_params(
        dims: &[usize],
        shared_prefix: usize,
        policy: AdaptPolicy,
        learned_rates: bool,
        params: ParamSet,
    ) -> Result<Self, LearnError> {
        check_dims(dims, shared_prefix)?;
        let model = Self {
            dims: dims.to_vec(),
            shared_prefix,
            policy,
            learned_rates,
            params,
        };
        let expected = model.expected_shapes();
        if expected.len() != model.params.len() {
            return Err(LearnError::Model(format!(
                "expected {} parameters, found {}",
                expected.len(),
                model.params.len()
            )));
        }
        for (name, shape) in expected {
            match model.params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(LearnError::Model(format!(
                        "{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(LearnError::Model(format!("missing parameter {name}"))),
            }
        }
        Ok(model)
    }

    fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut out = BTreeMap::new();
        for k in 1..=self.layer_count() {
            let w = vec![self.dims[k - 1], self.dims[k]];
            let b = vec![1, self.dims[k]];
            if self.learned_rates {
                out.insert(rate_name(&weight_name(k)), w.clone());
                out.insert(rate_name(&bias_name(k)), b.clone());
            }
            out.insert(weight_name(k), w);
            out.insert(bias_name(k), b);
        }
        out
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn policy(&self) -> AdaptPolicy {
        self.policy
    }

    pub fn learned_rates(&self) -> bool {
        self.learned_rates
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("dims checked non-empty")
    }

    /// Parameters the inner loop adapts when interpolating after layer `l`:
    /// layers strictly after `l`, intersected with the policy.
    pub fn adapt_names(&self, l: usize) -> Vec<String> {
        let last = self.layer_count();
        let mut out = Vec::new();
        for k in l + 1..=last {
            if self.policy == AdaptPolicy::HeadOnly && k != last {
                continue;
            }
            out.push(weight_name(k));
            out.push(bias_name(k));
        }
        out
    }

    /// Fixed η, or the learned elementwise rates.
    pub fn inner_rate(&self, eta: f64) -> InnerRate {
        if !self.learned_rates {
            return InnerRate::Fixed(eta);
        }
        let map = (1..=self.layer_count())
            .flat_map(|k| [weight_name(k), bias_name(k)])
            .map(|n| {
                let r = rate_name(&n);
                (n, r)
            })
            .collect();
        InnerRate::Learned(map)
    }

    /// Applies layers `from+1..=to` to `x` using the parameter nodes in `p`.
    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        p: &NodeMap,
        x: NodeId,
        from: usize,
        to: usize,
    ) -> Result<NodeId, DiffError> {
        let last = self.layer_count();
        if from > to || to > last {
            return Err(DiffError::Validation(format!(
                "layer range {from}..{to} outside 0..{last}"
            )));
        }
        let mut h = x;
        for k in from + 1..=to {
            let w = lookup(p, &weight_name(k))?;
            let b = lookup(p, &bias_name(k))?;
            h = g.matmul(h, w)?;
            h = g.add_row(h, b)?;
            if k < last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Output of the whole network.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, DiffError> {
        self.hidden(x, self.layer_count())
    }

    /// Inserts the parameters as constants.
    pub(crate) fn constant_params(&self, g: &mut Graph) -> NodeMap {
        self.params
            .iter()
            .map(|(n, t)| (n.clone(), g.constant(t.clone())))
            .collect()
    }
}

fn lookup(p: &NodeMap, name: &str) -> Result<NodeId, DiffError> {
    p.get(name)
        .copied()
        .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
}

fn check_dims(dims: &[usize], shared_prefix: usize) -> Result<(), LearnError> {
    if dims.len() < 2 || dims.contains(&0) {
        return Err(LearnError::Model(format!(
            "need at least an input and an output width, all positive; got {dims:?}"
        )));
    }
    if shared_prefix > dims.len() - 1 {
        return Err(LearnError::Model(format!(
            "shared prefix {shared_prefix} exceeds the layer count {}",
            dims.len() - 1
        )));
    }
    Ok(())
}

impl LayerForward for LayeredModel {
    fn layer_count(&self) -> usize {
        self.dims.len() - 1
    }

    fn shared_prefix(&self) -> usize {
        self.shared_prefix
    }

    fn hidden(&self, x: &Tensor, layer: usize) -> Result<Tensor, DiffError> {
        let mut g = Graph::new();
        let p = self.constant_params(&mut g);
        let xi = g.constant(x.clone());
        let h = self.forward_nodes(&mut g, &p, xi, 0, layer)?;
        Ok(g.value(h).clone())
    }
}

/// Derives an ANIL or MetaSGD learner from a MAML model. MetaSGD rates start at `eta`.
pub fn variant_config(base: &LayeredModel, variant: Variant, eta: f64) -> LayeredModel {
    let mut model = base.clone();
    match variant {
        Variant::Maml => {}
        Variant::Anil => model.policy = AdaptPolicy::HeadOnly,
        Variant::Metasgd => {
            if !model.learned_rates {
                let rates: Vec<(String, Tensor)> = model
                    .params
                    .iter()
                    .map(|(n, t)| (rate_name(n), Tensor::filled(t.shape(), eta)))
                    .collect();
                model.params.extend(rates);
                model.learned_rates = true;
            }
        }
    }
    model
}
