use std::collections::BTreeMap;

use super::graph::{Op, LOGIT_CLAMP};
use super::kernels;
use super::{DiffError, Graph, NodeId, ParamSet, Tensor};

impl Graph {
    /// Marks nodes in `0..=loss` that depend on any node of `wrt`.
    fn relevance(&self, loss: NodeId, wrt: &[NodeId]) -> Vec<bool> {
        let mut rel = vec![false; loss.0 + 1];
        for w in wrt {
            if w.0 <= loss.0 {
                rel[w.0] = true;
            }
        }
        for id in 0..=loss.0 {
            if !rel[id] {
                rel[id] = self.nodes[id].op.parents().iter().any(|p| rel[p.0]);
            }
        }
        rel
    }

    fn check_scalar(&self, loss: NodeId) -> Result<(), DiffError> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(DiffError::NotScalar {
                shape: v.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Gradient of the scalar `loss` with respect to each node of `wrt`.
    ///
    /// Nodes the loss does not depend on receive a zero gradient.
    pub fn backward(&self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>, DiffError> {
        self.check_scalar(loss)?;
        let rel = self.relevance(loss, wrt);
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut found: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        let targets: std::collections::BTreeSet<usize> = wrt.iter().map(|w| w.0).collect();
        for id in (0..=loss.0).rev() {
            if !rel[id] {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            if targets.contains(&id) {
                found.insert(id, g.clone());
            }
            for (parent, contribution) in self.local_grads(NodeId(id), &g, &rel) {
                match &mut adj[parent.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                let shape = self.shape(*w).to_vec();
                match found.get(&w.0) {
                    Some(g) => Tensor::from_parts(shape, g.clone()),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    /// Gradients keyed by parameter name; untracked leaves are left out.
    pub fn gradients(
        &self,
        loss: NodeId,
        params: &BTreeMap<String, NodeId>,
    ) -> Result<ParamSet, DiffError> {
        let named: Vec<(&String, NodeId)> = params
            .iter()
            .filter(|(_, id)| self.requires_grad(**id))
            .map(|(n, id)| (n, *id))
            .collect();
        let ids: Vec<NodeId> = named.iter().map(|(_, id)| *id).collect();
        let grads = self.backward(loss, &ids)?;
        Ok(named
            .into_iter()
            .map(|(n, _)| n.clone())
            .zip(grads)
            .collect())
    }

    /// Parent contributions of one node's adjoint `g`.
    fn local_grads(&self, id: NodeId, g: &[f64], rel: &[bool]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[id.0];
        let val = |n: NodeId| &self.nodes[n.0].value;
        let want = |n: NodeId| rel[n.0];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if want(*a) {
                    out.push((*a, kernels::matmul_nt(g, val(*b).data(), m, n, k)));
                }
                if want(*b) {
                    out.push((*b, kernels::matmul_tn(val(*a).data(), g, m, k, n)));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                out.push((*a, kernels::transpose(g, s[0], s[1])));
            }
            Op::Add(a, b) => {
                if want(*a) {
                    out.push((*a, g.to_vec()));
                }
                if want(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    out.push((*a, g.to_vec()));
                }
                if want(*b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    out.push((*a, zip_mul(g, val(*b).data())));
                }
                if want(*b) {
                    out.push((*b, zip_mul(g, val(*a).data())));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|v| v * f).collect())),
            Op::AddRow(a, row) => {
                if want(*a) {
                    out.push((*a, g.to_vec()));
                }
                if want(*row) {
                    let n = val(*row).len();
                    out.push((*row, sum_rows(g, n)));
                }
            }
            Op::SumRows(a) => {
                let m = val(*a).shape()[0];
                out.push((*a, repeat_rows(g, m)));
            }
            Op::BroadcastRows(row, _) => {
                let n = val(*row).len();
                out.push((*row, sum_rows(g, n)));
            }
            Op::Relu(a) => {
                let d = val(*a).data();
                out.push((
                    *a,
                    g.iter()
                        .zip(d)
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                ));
            }
            Op::ClampAbs(a, limit) => {
                let mask = kernels::clamp_mask(val(*a).data(), *limit);
                out.push((*a, zip_mul(g, &mask)));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::BroadcastScalar(a, _) => out.push((*a, vec![g.iter().sum()])),
            Op::Softmax(a) => {
                let s = node.value.data();
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mask = kernels::logit_mask(val(*a).data(), m, n, LOGIT_CLAMP);
                let mut ga = vec![0.0; s.len()];
                for r in 0..s.len() / n.max(1) {
                    let span = r * n..(r + 1) * n;
                    let dot: f64 = g[span.clone()].iter().zip(&s[span.clone()]).map(|(x, y)| x * y).sum();
                    for c in span {
                        ga[c] = s[c] * (g[c] - dot) * mask[c];
                    }
                }
                out.push((*a, ga));
            }
            Op::LogSoftmax(a) => {
                let shape = node.value.shape();
                let (m, n) = (shape[0], shape[1]);
                let p = kernels::softmax_rows(val(*a).data(), m, n, LOGIT_CLAMP);
                let mask = kernels::logit_mask(val(*a).data(), m, n, LOGIT_CLAMP);
                let mut ga = vec![0.0; m * n];
                for r in 0..m {
                    let span = r * n..(r + 1) * n;
                    let total: f64 = g[span.clone()].iter().sum();
                    for c in span {
                        ga[c] = (g[c] - p[c] * total) * mask[c];
                    }
                }
                out.push((*a, ga));
            }
            Op::SoftmaxCrossEntropy(z, t) => {
                let shape = val(*z).shape();
                let (m, n) = (shape[0], shape[1]);
                let scale = g[0] / m as f64;
                if want(*z) {
                    let p = kernels::softmax_rows(val(*z).data(), m, n, LOGIT_CLAMP);
                    let mask = kernels::logit_mask(val(*z).data(), m, n, LOGIT_CLAMP);
                    let td = val(*t).data();
                    let gz = (0..m * n)
                        .map(|c| scale * (p[c] - td[c]) * mask[c])
                        .collect();
                    out.push((*z, gz));
                }
                if want(*t) {
                    let ls = kernels::log_softmax_rows(val(*z).data(), m, n, LOGIT_CLAMP);
                    out.push((*t, ls.iter().map(|l| -scale * l).collect()));
                }
            }
            Op::Mse(p, t) => {
                let pd = val(*p).data();
                let td = val(*t).data();
                let scale = 2.0 * g[0] / pd.len() as f64;
                let gp: Vec<f64> = pd.iter().zip(td).map(|(a, b)| scale * (a - b)).collect();
                if want(*t) {
                    out.push((*t, gp.iter().map(|v| -v).collect()));
                }
                if want(*p) {
                    out.push((*p, gp));
                }
            }
            Op::PairwiseSqDist(q, p) => {
                let (m, d) = (val(*q).shape()[0], val(*q).shape()[1]);
                let c = val(*p).shape()[0];
                let qd = val(*q).data();
                let pd = val(*p).data();
                let mut gq = vec![0.0; m * d];
                let mut gp = vec![0.0; c * d];
                for i in 0..m {
                    for j in 0..c {
                        let w = 2.0 * g[i * c + j];
                        if w == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = w * (qd[i * d + k] - pd[j * d + k]);
                            gq[i * d + k] += diff;
                            gp[j * d + k] -= diff;
                        }
                    }
                }
                if want(*q) {
                    out.push((*q, gq));
                }
                if want(*p) {
                    out.push((*p, gp));
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for part in parts {
                    let len = val(*part).len();
                    if want(*part) {
                        out.push((*part, g[offset..offset + len].to_vec()));
                    }
                    offset += len;
                }
            }
            Op::IndexRows(a, index) => {
                let n = val(*a).cols();
                let mut ga = vec![0.0; val(*a).len()];
                for (r, &src) in index.iter().enumerate() {
                    for k in 0..n {
                        ga[src * n + k] += g[r * n + k];
                    }
                }
                out.push((*a, ga));
            }
            Op::ScatterRows(a, index, _) => {
                let n = val(*a).cols();
                let mut ga = Vec::with_capacity(index.len() * n);
                for &dst in index {
                    ga.extend_from_slice(&g[dst * n..(dst + 1) * n]);
                }
                out.push((*a, ga));
            }
        }
        out.retain(|(p, _)| rel[p.0]);
        out
    }

    /// Like [`Graph::backward`], but records the gradient computation on the
    /// graph so the returned nodes can be differentiated again.
    pub fn backward_graph(
        &mut self,
        loss: NodeId,
        wrt: &[NodeId],
    ) -> Result<Vec<NodeId>, DiffError> {
        self.check_scalar(loss)?;
        let rel = self.relevance(loss, wrt);
        let unsupported: Vec<&'static str> = {
            let mut names: Vec<&'static str> = (0..=loss.0)
                .filter(|&id| rel[id])
                .map(|id| self.nodes[id].op.primitive())
                .filter(|p| !p.has_second_order_rule())
                .map(|p| p.name())
                .collect();
            names.sort_unstable();
            names.dedup();
            names
        };
        if !unsupported.is_empty() {
            return Err(DiffError::Unsupported {
                primitives: unsupported,
            });
        }
        let shape = self.shape(loss).to_vec();
        let mut adj: Vec<Option<NodeId>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(self.constant(Tensor::filled(&shape, 1.0)));
        let targets: std::collections::BTreeSet<usize> = wrt.iter().map(|w| w.0).collect();
        let mut found: BTreeMap<usize, NodeId> = BTreeMap::new();
        for id in (0..=loss.0).rev() {
            if !rel[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            if targets.contains(&id) {
                found.insert(id, g);
            }
            let contributions = self.local_grads_graph(NodeId(id), g, &rel)?;
            for (parent, c) in contributions {
                adj[parent.0] = Some(match adj[parent.0] {
                    Some(acc) => self.add(acc, c)?,
                    None => c,
                });
            }
        }
        let mut result = Vec::with_capacity(wrt.len());
        for w in wrt {
            let node = match found.get(&w.0) {
                Some(n) => *n,
                None => {
                    let shape = self.shape(*w).to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            result.push(node);
        }
        Ok(result)
    }

    fn local_grads_graph(
        &mut self,
        id: NodeId,
        g: NodeId,
        rel: &[bool],
    ) -> Result<Vec<(NodeId, NodeId)>, DiffError> {
        let op = self.nodes[id.0].op.clone();
        let want = |n: NodeId| rel[n.0];
        let mut out = Vec::new();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if want(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::Add(a, b) => {
                out.push((a, g));
                out.push((b, g));
            }
            Op::Sub(a, b) => {
                out.push((a, g));
                if want(b) {
                    out.push((b, self.scale(g, -1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if want(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Scale(a, f) => out.push((a, self.scale(g, f)?)),
            Op::AddRow(a, row) => {
                out.push((a, g));
                if want(row) {
                    out.push((row, self.sum_rows(g)?));
                }
            }
            Op::SumRows(a) => {
                let m = self.shape(a)[0];
                out.push((a, self.broadcast_rows(g, m)?));
            }
            Op::BroadcastRows(row, _) => out.push((row, self.sum_rows(g)?)),
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                out.push((a, self.mul(g, mask)?));
            }
            Op::ClampAbs(a, limit) => {
                let mask = self.clamp_mask_node(a, limit);
                out.push((a, self.mul(g, mask)?));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.broadcast_scalar(g, &shape)?));
            }
            Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.value(a).len() as f64;
                let b = self.broadcast_scalar(g, &shape)?;
                out.push((a, self.scale(b, 1.0 / n)?));
            }
            Op::BroadcastScalar(a, _) => out.push((a, self.sum(g)?)),
            Op::SoftmaxCrossEntropy(z, t) => {
                let m = self.shape(z)[0] as f64;
                let scaled_g = self.scale(g, 1.0 / m)?;
                if want(z) {
                    let p = self.softmax(z)?;
                    let diff = self.sub(p, t)?;
                    let weighted = self.mul_scalar_node(diff, scaled_g)?;
                    let mask = self.logit_mask_node(z);
                    out.push((z, self.mul(weighted, mask)?));
                }
                if want(t) {
                    let ls = self.log_softmax(z)?;
                    let weighted = self.mul_scalar_node(ls, scaled_g)?;
                    out.push((t, self.scale(weighted, -1.0)?));
                }
            }
            Op::Mse(p, t) => {
                let n = self.value(p).len() as f64;
                let diff = self.sub(p, t)?;
                let scaled_g = self.scale(g, 2.0 / n)?;
                let gp = self.mul_scalar_node(diff, scaled_g)?;
                if want(t) {
                    out.push((t, self.scale(gp, -1.0)?));
                }
                out.push((p, gp));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for part in parts {
                    let rows = self.shape(part)[0];
                    if want(part) {
                        let index: Vec<usize> = (offset..offset + rows).collect();
                        out.push((part, self.index_rows(g, &index)?));
                    }
                    offset += rows;
                }
            }
            Op::IndexRows(a, index) => {
                let m = self.shape(a)[0];
                out.push((a, self.scatter_rows(g, &index, m)?));
            }
            Op::ScatterRows(a, index, _) => out.push((a, self.index_rows(g, &index)?)),
            Op::Softmax(_) | Op::LogSoftmax(_) | Op::PairwiseSqDist(..) => {
                return Err(DiffError::Unsupported {
                    primitives: vec![self.nodes[id.0].op.primitive().name()],
                });
            }
        }
        out.retain(|(p, _)| rel[p.0]);
        Ok(out)
    }

    fn logit_mask_node(&mut self, z: NodeId) -> NodeId {
        let v = self.value(z);
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mask = Tensor::from_parts(vec![m, n], kernels::logit_mask(v.data(), m, n, LOGIT_CLAMP));
        self.constant(mask)
    }

    fn clamp_mask_node(&mut self, a: NodeId, limit: f64) -> NodeId {
        let v = self.value(a);
        let mask = Tensor::from_parts(v.shape().to_vec(), kernels::clamp_mask(v.data(), limit));
        self.constant(mask)
    }
}

fn zip_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn sum_rows(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

fn repeat_rows(row: &[f64], m: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(row.len() * m);
    for _ in 0..m {
        out.extend_from_slice(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_diff_oracle;

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let c = g.constant(Tensor::new(vec![2], vec![5.0, 1.0]).unwrap());
        let s = g.sum(c).unwrap();
        let grads = g.backward(s, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 0.0]);
        let nodes = g.backward_graph(s, &[x]).unwrap();
        assert_eq!(g.value(nodes[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.backward(x, &[x]),
            Err(DiffError::NotScalar { .. })
        ));
    }

    #[test]
    fn untracked_leaves_left_out_of_named_gradients() {
        let mut g = Graph::new();
        let mut ids = BTreeMap::new();
        ids.insert("w".to_string(), g.param(Tensor::filled(&[1, 2], 1.5)));
        ids.insert("frozen".to_string(), g.constant(Tensor::filled(&[1, 2], 2.0)));
        let p = g.mul(ids["w"], ids["frozen"]).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.gradients(s, &ids).unwrap();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["w"].data(), &[2.0, 2.0]);
    }

    /// Builds every primitive into one loss and compares both backward modes
    /// against central differences.
    fn every_primitive_loss(g: &mut Graph, p: &BTreeMap<String, NodeId>) -> NodeId {
        let x = g.constant(
            Tensor::matrix(3, 2, vec![0.3, -0.8, 1.1, 0.4, -0.5, 0.9]).unwrap(),
        );
        let h = g.matmul(x, p["w"]).unwrap();
        let h = g.add_row(h, p["b"]).unwrap();
        let h = g.relu(h).unwrap();
        let ht = g.transpose(h).unwrap();
        let back = g.transpose(ht).unwrap();
        let h2 = g.mul(back, h).unwrap();
        let h3 = g.sub(h2, h).unwrap();
        let sr = g.sum_rows(h3).unwrap();
        let br = g.broadcast_rows(sr, 3).unwrap();
        let h4 = g.add(h3, br).unwrap();
        let st = g.concat_rows(&[h4, h]).unwrap();
        let sel = g.index_rows(st, &[0, 4, 2, 4]).unwrap();
        let sc = g.scatter_rows(sel, &[1, 0, 1, 2], 3).unwrap();
        let cl = g.clamp_abs(sc, 50.0).unwrap();
        let t = g.constant(Tensor::matrix(3, 2, vec![0.2, 0.8, 1.0, 0.0, 0.5, 0.5]).unwrap());
        let ce = g.softmax_cross_entropy(cl, t).unwrap();
        let y = g.constant(Tensor::filled(&[3, 2], 0.25));
        let mse = g.mse(h, y).unwrap();
        let m = g.mean(h4).unwrap();
        let s = g.sum(h).unwrap();
        let sc2 = g.scale(s, 0.1).unwrap();
        let tot = g.add(ce, mse).unwrap();
        let tot = g.add(tot, m).unwrap();
        g.add(tot, sc2).unwrap()
    }

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "w".into(),
            Tensor::matrix(2, 2, vec![0.7, -0.3, 0.45, 1.2]).unwrap(),
        );
        p.insert("b".into(), Tensor::matrix(1, 2, vec![0.25, 0.35]).unwrap());
        p
    }

    #[test]
    fn all_primitives_match_finite_differences() {
        let point = params();
        let fd = finite_diff_oracle(
            |ps: &ParamSet| {
                let mut g = Graph::new();
                let ids = crate::diffcore::insert_params(&mut g, ps);
                let l = every_primitive_loss(&mut g, &ids);
                g.value(l).item()
            },
            &point,
            1e-5,
        )
        .unwrap();
        let mut g = Graph::new();
        let ids = crate::diffcore::insert_params(&mut g, &point);
        let l = every_primitive_loss(&mut g, &ids);
        let grads = g.gradients(l, &ids).unwrap();
        let err = crate::diffcore::relative_error(&grads, &fd);
        assert!(err < 1e-6, "{err} {grads:?} {fd:?}");
        let nodes: Vec<NodeId> = ids.values().copied().collect();
        let gnodes = g.backward_graph(l, &nodes).unwrap();
        for (name, node) in ids.keys().zip(gnodes) {
            assert!(g.value(node).max_abs_diff(&grads[name]) < 1e-12);
        }
    }

    #[test]
    fn distance_and_softmax_have_no_second_order_rule() {
        let mut g = Graph::new();
        let q = g.param(Tensor::filled(&[2, 2], 1.0));
        let c = g.constant(Tensor::zeros(&[1, 2]));
        let d = g.pairwise_sq_dist(q, c).unwrap();
        let s = g.softmax(d).unwrap();
        let l = g.sum(s).unwrap();
        match g.backward_graph(l, &[q]) {
            Err(DiffError::Unsupported { primitives }) => {
                assert_eq!(primitives, vec!["pairwise_sq_dist", "softmax"]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.backward(l, &[q]).is_ok());
    }
}
