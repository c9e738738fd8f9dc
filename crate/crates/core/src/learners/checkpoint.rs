//! Text checkpoint: a header, one `model` line, then one `param` record per
//! tensor (`param <name> <d0,d1,...> <values...>`), values at 17 significant digits.

use super::model::{AdaptPolicy, LayeredModel};
use super::LearnError;
use crate::diffcore::{ParamSet, Tensor};
use crate::mlti::LayerForward;

pub const CHECKPOINT_HEADER: &str = "mlti-ckpt v1";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn write_checkpoint(model: &LayeredModel) -> String {
    let mut out = format!("{CHECKPOINT_HEADER}\n");
    out.push_str(&format!(
        "model dims={} shared_prefix={} policy={} learned_rates={}\n",
        join(model.dims()),
        model.shared_prefix(),
        model.policy().name(),
        model.learned_rates()
    ));
    for (name, t) in model.params() {
        out.push_str(&format!("param {name} {}", join(t.shape())));
        for v in t.data() {
            out.push_str(&format!(" {v:.16e}"));
        }
        out.push('\n');
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<LayeredModel, LearnError> {
    let err = |line: usize, message: String| LearnError::Checkpoint { line, message };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim() == CHECKPOINT_HEADER => {}
        _ => return Err(err(1, format!("expected header `{CHECKPOINT_HEADER}`"))),
    }
    let (mline, model_line) = lines
        .next()
        .ok_or_else(|| err(2, "missing model line".into()))?;
    let mut dims = None;
    let mut prefix = None;
    let mut policy = None;
    let mut rates = None;
    let mut fields = model_line.split_whitespace();
    if fields.next() != Some("model") {
        return Err(err(mline, "expected `model` record".into()));
    }
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| err(mline, format!("malformed field `{f}`")))?;
        match k {
            "dims" => dims = Some(parse_list(v).map_err(|m| err(mline, m))?),
            "shared_prefix" => prefix = Some(v.parse::<usize>().map_err(|e| err(mline, e.to_string()))?),
            "policy" => {
                policy = Some(AdaptPolicy::parse(v).ok_or_else(|| err(mline, format!("unknown policy {v}")))?)
            }
            "learned_rates" => rates = Some(v.parse::<bool>().map_err(|e| err(mline, e.to_string()))?),
            other => return Err(err(mline, format!("unknown field `{other}`"))),
        }
    }
    let missing = |what: &str| err(mline, format!("model line lacks `{what}`"));
    let dims = dims.ok_or_else(|| missing("dims"))?;
    let prefix = prefix.ok_or_else(|| missing("shared_prefix"))?;
    let policy = policy.ok_or_else(|| missing("policy"))?;
    let rates = rates.ok_or_else(|| missing("learned_rates"))?;

    let mut params = ParamSet::new();
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut f = line.split_whitespace();
        if f.next() != Some("param") {
            return Err(err(n, "expected `param` record".into()));
        }
        let name = f.next().ok_or_else(|| err(n, "missing name".into()))?;
        let shape = parse_list(f.next().ok_or_else(|| err(n, "missing shape".into()))?)
            .map_err(|m| err(n, m))?;
        let data = f
            .map(|v| v.parse::<f64>().map_err(|e| err(n, format!("{v}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let t = Tensor::new(shape, data).map_err(|e| err(n, e.to_string()))?;
        if !t.is_finite() {
            return Err(err(n, format!("{name} holds non-finite values")));
        }
        if params.insert(name.to_string(), t).is_some() {
            return Err(err(n, format!("duplicate parameter {name}")));
        }
    }
    LayeredModel::from_params(&dims, prefix, policy, rates, params)
}

fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(|d| d.parse::<usize>().map_err(|e| format!("{d}: {e}")))
        .collect()
}
