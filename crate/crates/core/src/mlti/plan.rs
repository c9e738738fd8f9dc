use rand::seq::SliceRandom;
use rand::Rng as _;

use super::cutmix::Patch;
use super::lambda::sample_lambda;
use super::select::{select_pair_and_layer, Selection};
use super::{InterpolatedEpisode, LayerForward, MixConfig, MixError, MixMethod, MixMode};
use crate::diffcore::{Graph, NodeId, Tensor};
use crate::rng::Rng;
use crate::taskgen::{Episode, Scenario, TargetKind};

/// How the rows of two tasks are combined.
#[derive(Debug, Clone, PartialEq)]
pub enum Blend {
    /// `λ·H_i + (1 − λ)·H_j`.
    Scalar(f64),
    /// Per-column weight of `H_i` (1 outside the patch, 0 inside); labels use `lambda_adj`.
    Mask { keep: Vec<f64>, lambda_adj: f64 },
}

impl Blend {
    /// λ applied to labels.
    pub fn label_lambda(&self) -> f64 {
        match self {
            Blend::Scalar(l) => *l,
            Blend::Mask { lambda_adj, .. } => *lambda_adj,
        }
    }

    fn tensors(&self, hi: &Tensor, hj: &Tensor) -> Tensor {
        let cols = hi.cols();
        let data = match self {
            Blend::Scalar(l) => {
                let m = 1.0 - l;
                hi.data()
                    .iter()
                    .zip(hj.data())
                    .map(|(a, b)| l * a + m * b)
                    .collect()
            }
            Blend::Mask { keep, .. } => hi
                .data()
                .iter()
                .zip(hj.data())
                .enumerate()
                .map(|(n, (a, b))| {
                    let k = keep[n % cols];
                    a * k + b * (1.0 - k)
                })
                .collect(),
        };
        Tensor::new(hi.shape().to_vec(), data).expect("shapes checked by caller")
    }

    fn nodes(&self, g: &mut Graph, hi: NodeId, hj: NodeId) -> Result<NodeId, MixError> {
        match self {
            Blend::Scalar(l) => {
                let a = g.scale(hi, *l)?;
                let b = g.scale(hj, 1.0 - l)?;
                Ok(g.add(a, b)?)
            }
            Blend::Mask { keep, .. } => {
                let rows = g.shape(hi)[0];
                let cols = keep.len();
                let tile = |f: &dyn Fn(f64) -> f64| {
                    let mut d = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        d.extend(keep.iter().map(|k| f(*k)));
                    }
                    Tensor::matrix(rows, cols, d)
                };
                let k = g.constant(tile(&|k| k)?);
                let kc = g.constant(tile(&|k| 1.0 - k)?);
                let a = g.mul(hi, k)?;
                let b = g.mul(hj, kc)?;
                Ok(g.add(a, b)?)
            }
        }
    }
}

/// Row of the partner task paired with each row of the anchor task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowPairing {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Every random choice of one interpolated task.
#[derive(Debug, Clone, PartialEq)]
pub struct MixPlan {
    pub i: usize,
    pub j: usize,
    pub layer: usize,
    pub support_blend: Blend,
    pub query_blend: Blend,
    pub pairing: RowPairing,
    /// Class pairing `r ↦ π(r)` for the relabelling form; `None` for label mixing.
    pub class_perm: Option<Vec<usize>>,
}

impl MixPlan {
    /// λ = 1, partner = self, input layer, identity pairings. Consumes no randomness.
    pub fn identity(task: &Episode, i: usize, relabel: bool) -> Self {
        let relabel = relabel || task.scenario == Scenario::NonLabelSharing;
        Self {
            i,
            j: i,
            layer: 0,
            support_blend: Blend::Scalar(1.0),
            query_blend: Blend::Scalar(1.0),
            pairing: RowPairing {
                support: (0..task.support_x.rows()).collect(),
                query: (0..task.query_x.rows()).collect(),
            },
            class_perm: relabel.then(|| (0..task.n_way).collect()),
        }
    }

    pub fn relabels(&self) -> bool {
        self.class_perm.is_some()
    }

    pub fn lambda(&self) -> f64 {
        self.support_blend.label_lambda()
    }

    pub fn query_lambda(&self) -> f64 {
        self.query_blend.label_lambda()
    }

    /// Mixed support and query features from representations at `self.layer`.
    pub fn mix_tensors(
        &self,
        hi_s: &Tensor,
        hj_s: &Tensor,
        hi_q: &Tensor,
        hj_q: &Tensor,
    ) -> Result<(Tensor, Tensor), MixError> {
        check_cols(hi_s, hj_s)?;
        check_cols(hi_q, hj_q)?;
        let s = self
            .support_blend
            .tensors(hi_s, &hj_s.select_rows(&self.pairing.support));
        let q = self
            .query_blend
            .tensors(hi_q, &hj_q.select_rows(&self.pairing.query));
        Ok((s, q))
    }

    /// Graph version of [`MixPlan::mix_tensors`]; gradients reach both sources.
    pub fn mix_nodes(
        &self,
        g: &mut Graph,
        hi_s: NodeId,
        hj_s: NodeId,
        hi_q: NodeId,
        hj_q: NodeId,
    ) -> Result<(NodeId, NodeId), MixError> {
        let ps = g.index_rows(hj_s, &self.pairing.support)?;
        let s = self.support_blend.nodes(g, hi_s, ps)?;
        let pq = g.index_rows(hj_q, &self.pairing.query)?;
        let q = self.query_blend.nodes(g, hi_q, pq)?;
        Ok((s, q))
    }

    /// Targets of the interpolated task: the anchor's class labels when
    /// relabelling, otherwise λ-mixed targets.
    pub fn labels(&self, ti: &Episode, tj: &Episode) -> Result<(Tensor, Tensor), MixError> {
        if self.relabels() {
            return Ok((ti.support_y.clone(), ti.query_y.clone()));
        }
        if ti.support_y.cols() != tj.support_y.cols() {
            return Err(MixError::Incompatible(
                "label conventions differ between tasks".into(),
            ));
        }
        let mix = |yi: &Tensor, yj: &Tensor, rows: &[usize], l: f64| {
            Blend::Scalar(l).tensors(yi, &yj.select_rows(rows))
        };
        Ok((
            mix(&ti.support_y, &tj.support_y, &self.pairing.support, self.lambda()),
            mix(&ti.query_y, &tj.query_y, &self.pairing.query, self.query_lambda()),
        ))
    }
}

fn check_cols(a: &Tensor, b: &Tensor) -> Result<(), MixError> {
    if a.cols() != b.cols() {
        return Err(MixError::Incompatible(format!(
            "feature widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    Ok(())
}

/// Source of interpolation plans for a training step.
pub trait TaskMixer {
    /// Plan for task `i` of `batch`; `None` keeps the task as is.
    /// `relabel` forces the per-class relabelling form.
    fn plan(
        &self,
        batch: &[Episode],
        i: usize,
        relabel: bool,
        rng: &mut Rng,
    ) -> Result<Option<MixPlan>, MixError>;
}

impl TaskMixer for MixConfig {
    fn plan(
        &self,
        batch: &[Episode],
        i: usize,
        relabel: bool,
        rng: &mut Rng,
    ) -> Result<Option<MixPlan>, MixError> {
        let sel = select_pair_and_layer(i, batch.len(), self, rng)?;
        if sel.vanilla {
            return Ok(None);
        }
        plan_interpolation(&batch[sel.i], &batch[sel.j], sel, self, relabel, rng).map(Some)
    }
}

/// Always returns [`MixPlan::identity`].
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMixer;

impl TaskMixer for IdentityMixer {
    fn plan(
        &self,
        batch: &[Episode],
        i: usize,
        relabel: bool,
        _rng: &mut Rng,
    ) -> Result<Option<MixPlan>, MixError> {
        Ok(Some(MixPlan::identity(&batch[i], i, relabel)))
    }
}

/// Draws λ, the class pairing, the row pairings and (for CutMix) the patch,
/// in that order.
///
/// Non-label-sharing tasks, and any task when `relabel` is set, pair class
/// `r` of `ti` with class `π(r)` of `tj` and keep `ti`'s labels; otherwise
/// rows of the whole set are paired and labels are mixed.
pub fn plan_interpolation(
    ti: &Episode,
    tj: &Episode,
    sel: Selection,
    config: &MixConfig,
    relabel: bool,
    rng: &mut Rng,
) -> Result<MixPlan, MixError> {
    if ti.scenario != tj.scenario || ti.target != tj.target {
        return Err(MixError::Incompatible(
            "tasks differ in scenario or target kind".into(),
        ));
    }
    if ti.support_x.cols() != tj.support_x.cols() {
        return Err(MixError::Incompatible(format!(
            "input widths differ: {} vs {}",
            ti.support_x.cols(),
            tj.support_x.cols()
        )));
    }
    let relabel = relabel || ti.scenario == Scenario::NonLabelSharing;
    if relabel && (ti.target != TargetKind::Classes || ti.n_way != tj.n_way) {
        return Err(MixError::Incompatible(
            "class pairing needs classification tasks with equal way".into(),
        ));
    }
    let same = sel.i == sel.j;
    let (a, b) = config.beta_params(same);
    let lambda_s = sample_lambda(a, b, rng)?;
    let lambda_q = if config.independent_lambda {
        sample_lambda(a, b, rng)?
    } else {
        lambda_s
    };
    let (class_perm, pairing) = if relabel {
        let n = ti.n_way;
        let mut perm: Vec<usize> = (0..n).collect();
        if config.derangement_only && same {
            if n < 2 {
                return Err(MixError::Incompatible(
                    "a derangement needs at least 2 classes".into(),
                ));
            }
            loop {
                perm.shuffle(rng);
                if perm.iter().enumerate().all(|(r, p)| r != *p) {
                    break;
                }
            }
        } else {
            perm.shuffle(rng);
        }
        let support = class_rows(ti.k_shot, tj.k_shot, &perm, config.resample, rng)?;
        let query = class_rows(ti.q_queries, tj.q_queries, &perm, config.resample, rng)?;
        (Some(perm), RowPairing { support, query })
    } else {
        let support = pair_rows(ti.support_x.rows(), tj.support_x.rows(), config.resample, rng)?;
        let query = pair_rows(ti.query_x.rows(), tj.query_x.rows(), config.resample, rng)?;
        (None, RowPairing { support, query })
    };
    let (support_blend, query_blend) = if config.method == MixMethod::Cutmix {
        let side = match (ti.grid, tj.grid) {
            (Some(a), Some(b)) if a == b => a,
            _ => {
                return Err(MixError::Incompatible(
                    "cutmix needs grid inputs of equal size".into(),
                ))
            }
        };
        let ps = Patch::sample(side, side, lambda_s, rng);
        let pq = if config.independent_lambda {
            Patch::sample(side, side, lambda_q, rng)
        } else {
            ps
        };
        let mask = |p: Patch| Blend::Mask {
            keep: p.keep_mask(),
            lambda_adj: p.lambda_adj(),
        };
        (mask(ps), mask(pq))
    } else {
        (Blend::Scalar(lambda_s), Blend::Scalar(lambda_q))
    };
    let layer = if config.method == MixMethod::ManifoldMixup {
        sel.layer
    } else {
        0
    };
    Ok(MixPlan {
        i: sel.i,
        j: sel.j,
        layer,
        support_blend,
        query_blend,
        pairing,
        class_perm,
    })
}

/// A uniform permutation when counts match, otherwise uniform draws with replacement.
fn pair_rows(n_i: usize, n_j: usize, resample: bool, rng: &mut Rng) -> Result<Vec<usize>, MixError> {
    if n_i == n_j {
        let mut p: Vec<usize> = (0..n_j).collect();
        p.shuffle(rng);
        Ok(p)
    } else if resample && n_j > 0 {
        Ok((0..n_i).map(|_| rng.random_range(0..n_j)).collect())
    } else {
        Err(MixError::Cardinality {
            left: n_i,
            right: n_j,
        })
    }
}

/// Row pairing for class-major sets: rows of class `r` in the anchor meet a
/// shuffled copy of class `perm[r]` in the partner.
fn class_rows(
    per_i: usize,
    per_j: usize,
    perm: &[usize],
    resample: bool,
    rng: &mut Rng,
) -> Result<Vec<usize>, MixError> {
    let mut rows = Vec::with_capacity(perm.len() * per_i);
    for &p in perm {
        rows.extend(pair_rows(per_i, per_j, resample, rng)?.into_iter().map(|k| p * per_j + k));
    }
    Ok(rows)
}

/// Label-sharing mix: `(λH_i + (1−λ)H_j[perm], λY_i + (1−λ)Y_j[perm])`.
pub fn mix_ls(
    h_i: &Tensor,
    y_i: &Tensor,
    h_j: &Tensor,
    y_j: &Tensor,
    lambda: f64,
    perm: &[usize],
) -> Result<(Tensor, Tensor), MixError> {
    if y_i.cols() != y_j.cols() {
        return Err(MixError::Incompatible(format!(
            "label conventions differ: {} vs {} target columns",
            y_i.cols(),
            y_j.cols()
        )));
    }
    if perm.len() != h_i.rows() || perm.iter().any(|&r| r >= h_j.rows()) || y_i.rows() != h_i.rows() {
        return Err(MixError::Cardinality {
            left: h_i.rows(),
            right: perm.len(),
        });
    }
    check_cols(h_i, h_j)?;
    let blend = Blend::Scalar(lambda);
    Ok((
        blend.tensors(h_i, &h_j.select_rows(perm)),
        blend.tensors(y_i, &y_j.select_rows(perm)),
    ))
}

/// Non-label-sharing mix of class-major feature sets: new class `r` blends
/// class `r` of `h_i` with class `class_perm[r]` of `h_j`, rows matched through
/// `row_perms[r]`. Labels are one-hot over `0..n_way`.
pub fn mix_nls(
    h_i: &Tensor,
    h_j: &Tensor,
    n_way: usize,
    class_perm: &[usize],
    row_perms: &[Vec<usize>],
    lambda: f64,
) -> Result<(Tensor, Tensor), MixError> {
    let mut seen = vec![false; n_way];
    if class_perm.len() != n_way || row_perms.len() != n_way {
        return Err(MixError::Incompatible(format!(
            "class pairing must cover {n_way} classes"
        )));
    }
    for &p in class_perm {
        if p >= n_way || std::mem::replace(&mut seen[p], true) {
            return Err(MixError::Incompatible(
                "class pairing is not a bijection".into(),
            ));
        }
    }
    if n_way == 0 || h_i.rows() % n_way != 0 || h_j.rows() % n_way != 0 {
        return Err(MixError::Incompatible(
            "feature rows are not divisible by the way".into(),
        ));
    }
    let (per_i, per_j) = (h_i.rows() / n_way, h_j.rows() / n_way);
    let mut rows = Vec::with_capacity(h_i.rows());
    for (r, perm) in row_perms.iter().enumerate() {
        if perm.len() != per_i || perm.iter().any(|&k| k >= per_j) {
            return Err(MixError::Cardinality {
                left: per_i,
                right: perm.len(),
            });
        }
        rows.extend(perm.iter().map(|k| class_perm[r] * per_j + k));
    }
    check_cols(h_i, h_j)?;
    let labels: Vec<usize> = (0..n_way).flat_map(|r| std::iter::repeat_n(r, per_i)).collect();
    Ok((
        Blend::Scalar(lambda).tensors(h_i, &h_j.select_rows(&rows)),
        Tensor::one_hot(&labels, n_way)?,
    ))
}

/// Interpolates `t_i` with `t_j` at a layer drawn from the config, computing
/// hidden representations with `model`. `pair` holds the batch indices of the
/// two tasks (equal indices select the intra-task Beta parameters).
///
/// Vanilla mode returns `t_i` unchanged at layer 0 with λ = 1 and draws nothing.
pub fn build_interpolated_task<M: LayerForward + ?Sized>(
    model: &M,
    t_i: &Episode,
    t_j: &Episode,
    pair: (usize, usize),
    config: &MixConfig,
    relabel: bool,
    rng: &mut Rng,
) -> Result<InterpolatedEpisode, MixError> {
    config.validate(model.shared_prefix())?;
    if config.mode == MixMode::Vanilla {
        return Ok(InterpolatedEpisode {
            layer: 0,
            support_h: t_i.support_x.clone(),
            query_h: t_i.query_x.clone(),
            support_y: t_i.support_y.clone(),
            query_y: t_i.query_y.clone(),
            lambda: 1.0,
            query_lambda: 1.0,
            source_pair: pair,
            scenario: t_i.scenario,
            n_way: t_i.n_way,
        });
    }
    let layer = match config.method {
        MixMethod::ManifoldMixup => rng.random_range(0..=config.layer_max),
        _ => 0,
    };
    let sel = Selection {
        i: pair.0,
        j: pair.1,
        layer,
        vanilla: false,
    };
    let plan = plan_interpolation(t_i, t_j, sel, config, relabel, rng)?;
    apply_plan(model, &plan, t_i, t_j)
}

/// Applies a plan on plain tensors.
pub(crate) fn apply_plan<M: LayerForward + ?Sized>(
    model: &M,
    plan: &MixPlan,
    t_i: &Episode,
    t_j: &Episode,
) -> Result<InterpolatedEpisode, MixError> {
    let h = |x: &Tensor| model.hidden(x, plan.layer);
    let (support_h, query_h) = plan.mix_tensors(
        &h(&t_i.support_x)?,
        &h(&t_j.support_x)?,
        &h(&t_i.query_x)?,
        &h(&t_j.query_x)?,
    )?;
    let (support_y, query_y) = plan.labels(t_i, t_j)?;
    Ok(InterpolatedEpisode {
        layer: plan.layer,
        support_h,
        query_h,
        support_y,
        query_y,
        lambda: plan.lambda(),
        query_lambda: plan.query_lambda(),
        source_pair: (plan.i, plan.j),
        scenario: t_i.scenario,
        n_way: t_i.n_way,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn ls_degenerate_lambdas() {
        let hi = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let hj = m(2, 2, &[-1.0, -2.0, -3.0, -4.0]);
        let yi = m(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let yj = m(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (h, y) = mix_ls(&hi, &yi, &hj, &yj, 1.0, &[1, 0]).unwrap();
        assert_eq!((h, y), (hi.clone(), yi.clone()));
        let (h, y) = mix_ls(&hi, &yi, &hj, &yj, 0.0, &[1, 0]).unwrap();
        assert_eq!(h, hj.select_rows(&[1, 0]));
        assert_eq!(y, yj.select_rows(&[1, 0]));
    }

    #[test]
    fn regression_targets_mix_convexly() {
        let h = m(1, 1, &[0.0]);
        let (_, y) = mix_ls(&h, &m(1, 1, &[0.2]), &h, &m(1, 1, &[0.8]), 0.25, &[0]).unwrap();
        assert!((y.data()[0] - 0.65).abs() < 1e-15);
        let onehot = m(1, 2, &[1.0, 0.0]);
        assert!(mix_ls(&h, &onehot, &h, &m(1, 1, &[0.8]), 0.5, &[0]).is_err());
    }

    #[test]
    fn nls_cyclic_pairing_and_self_mix() {
        // Three classes, one row each, features equal to class index.
        let hi = m(3, 1, &[10.0, 11.0, 12.0]);
        let hj = m(3, 1, &[20.0, 21.0, 22.0]);
        let rows = vec![vec![0], vec![0], vec![0]];
        let (h, y) = mix_nls(&hi, &hj, 3, &[1, 2, 0], &rows, 0.5).unwrap();
        assert_eq!(h.data(), &[15.5, 16.5, 16.0]);
        assert_eq!(y, Tensor::one_hot(&[0, 1, 2], 3).unwrap());
        let (h, _) = mix_nls(&hi, &hi, 3, &[0, 1, 2], &rows, 0.37).unwrap();
        assert!(h.max_abs_diff(&hi) < 1e-12);
        let (h, _) = mix_nls(&hi, &hj, 3, &[1, 2, 0], &rows, 1.0).unwrap();
        assert_eq!(h, hi);
        assert!(mix_nls(&hi, &hj, 3, &[1, 1, 0], &rows, 0.5).is_err());
    }

    #[test]
    fn cardinality_mismatch_without_resampling() {
        let mut rng = substream(0, &[]);
        assert!(pair_rows(3, 2, false, &mut rng).is_err());
        let r = pair_rows(5, 2, true, &mut rng).unwrap();
        assert_eq!(r.len(), 5);
        assert!(r.iter().all(|&k| k < 2));
    }
}
