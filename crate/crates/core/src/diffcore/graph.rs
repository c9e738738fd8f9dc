use super::kernels;
use super::{DiffError, Tensor};

/// Before any softmax, logits more than `LOGIT_CLAMP` below their row maximum
/// are raised to that floor (their probability is below `e^-50` either way).
pub const LOGIT_CLAMP: f64 = 50.0;

/// Index of a node in a [`Graph`]. Parents always have smaller ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds, as named in errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    SumRows,
    BroadcastRows,
    Relu,
    ClampAbs,
    Sum,
    Mean,
    BroadcastScalar,
    Softmax,
    LogSoftmax,
    SoftmaxCrossEntropy,
    Mse,
    PairwiseSqDist,
    ConcatRows,
    IndexRows,
    ScatterRows,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::Leaf => "leaf",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddRow => "add_row",
            Primitive::SumRows => "sum_rows",
            Primitive::BroadcastRows => "broadcast_rows",
            Primitive::Relu => "relu",
            Primitive::ClampAbs => "clamp_abs",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::BroadcastScalar => "broadcast_scalar",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
            Primitive::Mse => "mse",
            Primitive::PairwiseSqDist => "pairwise_sq_dist",
            Primitive::ConcatRows => "concat_rows",
            Primitive::IndexRows => "index_rows",
            Primitive::ScatterRows => "scatter_rows",
        }
    }

    /// Whether the backward rule can itself be recorded as graph nodes.
    pub fn has_second_order_rule(self) -> bool {
        !matches!(
            self,
            Primitive::Softmax | Primitive::LogSoftmax | Primitive::PairwiseSqDist
        )
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    SumRows(NodeId),
    BroadcastRows(NodeId, usize),
    Relu(NodeId),
    ClampAbs(NodeId, f64),
    Sum(NodeId),
    Mean(NodeId),
    BroadcastScalar(NodeId, Vec<usize>),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SoftmaxCrossEntropy(NodeId, NodeId),
    Mse(NodeId, NodeId),
    PairwiseSqDist(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    IndexRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>, usize),
}

impl Op {
    pub(crate) fn primitive(&self) -> Primitive {
        match self {
            Op::Leaf => Primitive::Leaf,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(..) => Primitive::Transpose,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddRow(..) => Primitive::AddRow,
            Op::SumRows(..) => Primitive::SumRows,
            Op::BroadcastRows(..) => Primitive::BroadcastRows,
            Op::Relu(..) => Primitive::Relu,
            Op::ClampAbs(..) => Primitive::ClampAbs,
            Op::Sum(..) => Primitive::Sum,
            Op::Mean(..) => Primitive::Mean,
            Op::BroadcastScalar(..) => Primitive::BroadcastScalar,
            Op::Softmax(..) => Primitive::Softmax,
            Op::LogSoftmax(..) => Primitive::LogSoftmax,
            Op::SoftmaxCrossEntropy(..) => Primitive::SoftmaxCrossEntropy,
            Op::Mse(..) => Primitive::Mse,
            Op::PairwiseSqDist(..) => Primitive::PairwiseSqDist,
            Op::ConcatRows(..) => Primitive::ConcatRows,
            Op::IndexRows(..) => Primitive::IndexRows,
            Op::ScatterRows(..) => Primitive::ScatterRows,
        }
    }

    pub(crate) fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SoftmaxCrossEntropy(a, b)
            | Op::Mse(a, b)
            | Op::PairwiseSqDist(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::SumRows(a)
            | Op::BroadcastRows(a, _)
            | Op::Relu(a)
            | Op::ClampAbs(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::BroadcastScalar(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::IndexRows(a, _)
            | Op::ScatterRows(a, _, _) => vec![*a],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Tensor,
    /// True when some tracked leaf is an ancestor (or the node itself).
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Every operation validates shapes, computes its value eagerly and records
/// the node with its parents so [`Graph::backward`] can replay it in reverse.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn primitive(&self, id: NodeId) -> Primitive {
        self.nodes[id.0].op.primitive()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Adds a leaf; tracked tensors become differentiation roots.
    pub fn input(&mut self, tensor: Tensor) -> NodeId {
        let tracked = tensor.is_tracked();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: tensor,
            requires_grad: tracked,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, tensor: Tensor) -> NodeId {
        self.input(tensor.tracked())
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.input(tensor.with_tracked(false))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, DiffError> {
        let primitive = op.primitive();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                op: primitive.name(),
            });
        }
        let requires_grad = op
            .parents()
            .iter()
            .any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> DiffError {
        DiffError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn require_matrix(&self, op: &'static str, a: NodeId) -> Result<(usize, usize), DiffError> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(DiffError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (m, k) = self.require_matrix("matmul", a)?;
        let (k2, n) = self.require_matrix("matmul", b)?;
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let out = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = self.require_matrix("transpose", a)?;
        let out = kernels::transpose(self.value(a).data(), m, n);
        self.push(Op::Transpose(a), Tensor::from_parts(vec![n, m], out))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, DiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(name, a, b));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = va.shape().to_vec();
        self.push(op, Tensor::from_parts(shape, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_same("add", Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_same("sub", Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_same("mul", Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, DiffError> {
        let value = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), value)
    }

    /// `a[m, n] + row[1, n]`, broadcasting the row.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = self.require_matrix("add_row", a)?;
        let rs = self.shape(row);
        if rs != [1, n] {
            return Err(self.shape_err("add_row", a, row));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, y) in data[i * n..(i + 1) * n].iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, row), Tensor::from_parts(vec![m, n], data))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = self.require_matrix("sum_rows", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, x) in out.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), Tensor::from_parts(vec![1, n], out))
    }

    pub fn broadcast_rows(&mut self, row: NodeId, m: usize) -> Result<NodeId, DiffError> {
        let (one, n) = self.require_matrix("broadcast_rows", row)?;
        if one != 1 {
            return Err(DiffError::Shape {
                op: "broadcast_rows",
                lhs: vec![one, n],
                rhs: vec![1, n],
            });
        }
        let r = self.value(row).data();
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(r);
        }
        self.push(Op::BroadcastRows(row, m), Tensor::from_parts(vec![m, n], data))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    pub fn clamp_abs(&mut self, a: NodeId, limit: f64) -> Result<NodeId, DiffError> {
        let value = self.value(a).map(|v| v.clamp(-limit, limit));
        self.push(Op::ClampAbs(a, limit), value)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let s = kernels::pairwise_sum(self.value(a).data());
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(DiffError::Validation("mean of empty tensor".into()));
        }
        let s = kernels::pairwise_sum(v.data()) / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn broadcast_scalar(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId, DiffError> {
        let v = self.value(s).item()?;
        self.push(
            Op::BroadcastScalar(s, shape.to_vec()),
            Tensor::filled(shape, v),
        )
    }

    /// Row-wise softmax of (clamped) logits; see [`LOGIT_CLAMP`].
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = self.require_matrix("softmax", a)?;
        let out = kernels::softmax_rows(self.value(a).data(), m, n, LOGIT_CLAMP);
        self.push(Op::Softmax(a), Tensor::from_parts(vec![m, n], out))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        let (m, n) = self.require_matrix("log_softmax", a)?;
        let out = kernels::log_softmax_rows(self.value(a).data(), m, n, LOGIT_CLAMP);
        self.push(Op::LogSoftmax(a), Tensor::from_parts(vec![m, n], out))
    }

    /// Mean over rows of `-sum_c t[r, c] * log softmax(z)[r, c]` with soft targets.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: NodeId,
    ) -> Result<NodeId, DiffError> {
        let (m, n) = self.require_matrix("softmax_cross_entropy", logits)?;
        if self.shape(targets) != [m, n] {
            return Err(self.shape_err("softmax_cross_entropy", logits, targets));
        }
        if m == 0 {
            return Err(DiffError::Validation(
                "softmax_cross_entropy over zero rows".into(),
            ));
        }
        let t = self.value(targets).data();
        for r in 0..m {
            let row = &t[r * n..(r + 1) * n];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&v| v < -1e-12) {
                return Err(DiffError::Validation(format!(
                    "soft target row {r} is not on the simplex (sum {s})"
                )));
            }
        }
        let ls = kernels::log_softmax_rows(self.value(logits).data(), m, n, LOGIT_CLAMP);
        let terms: Vec<f64> = ls.iter().zip(t).map(|(l, t)| -t * l).collect();
        let loss = kernels::pairwise_sum(&terms) / m as f64;
        self.push(Op::SoftmaxCrossEntropy(logits, targets), Tensor::scalar(loss))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, DiffError> {
        if self.shape(pred) != self.shape(target) {
            return Err(self.shape_err("mse", pred, target));
        }
        let p = self.value(pred);
        if p.is_empty() {
            return Err(DiffError::Validation("mse over zero elements".into()));
        }
        let sq: Vec<f64> = p
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(a, b)| (a - b) * (a - b))
            .collect();
        let loss = kernels::pairwise_sum(&sq) / sq.len() as f64;
        self.push(Op::Mse(pred, target), Tensor::scalar(loss))
    }

    /// `d[i, j] = |q_i - p_j|^2` for queries `[m, d]` and prototypes `[c, d]`.
    pub fn pairwise_sq_dist(&mut self, q: NodeId, p: NodeId) -> Result<NodeId, DiffError> {
        let (m, d) = self.require_matrix("pairwise_sq_dist", q)?;
        let (c, d2) = self.require_matrix("pairwise_sq_dist", p)?;
        if d != d2 {
            return Err(self.shape_err("pairwise_sq_dist", q, p));
        }
        let qv = self.value(q).data();
        let pv = self.value(p).data();
        let mut out = vec![0.0; m * c];
        for i in 0..m {
            let qi = &qv[i * d..(i + 1) * d];
            for j in 0..c {
                let pj = &pv[j * d..(j + 1) * d];
                out[i * c + j] = qi.iter().zip(pj).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        self.push(Op::PairwiseSqDist(q, p), Tensor::from_parts(vec![m, c], out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, DiffError> {
        let first = *parts
            .first()
            .ok_or_else(|| DiffError::Validation("concat_rows of nothing".into()))?;
        let (_, n) = self.require_matrix("concat_rows", first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n2) = self.require_matrix("concat_rows", p)?;
            if n2 != n {
                return Err(self.shape_err("concat_rows", first, p));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::from_parts(vec![rows, n], data),
        )
    }

    pub fn index_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId, DiffError> {
        let (m, _) = self.require_matrix("index_rows", a)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(DiffError::Validation(format!(
                "index_rows: row {bad} out of range for {m} rows"
            )));
        }
        let value = self.value(a).select_rows(index).with_tracked(false);
        self.push(Op::IndexRows(a, index.to_vec()), value)
    }

    /// Adds row `r` of `a` into row `index[r]` of an `[m, n]` zero matrix.
    pub fn scatter_rows(
        &mut self,
        a: NodeId,
        index: &[usize],
        m: usize,
    ) -> Result<NodeId, DiffError> {
        let (rows, n) = self.require_matrix("scatter_rows", a)?;
        if rows != index.len() || index.iter().any(|&i| i >= m) {
            return Err(DiffError::Validation(format!(
                "scatter_rows: {} rows with {} indices into {m}",
                rows,
                index.len()
            )));
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for (r, &dst) in index.iter().enumerate() {
            for (o, x) in out[dst * n..(dst + 1) * n]
                .iter_mut()
                .zip(&src[r * n..(r + 1) * n])
            {
                *o += x;
            }
        }
        self.push(
            Op::ScatterRows(a, index.to_vec(), m),
            Tensor::from_parts(vec![m, n], out),
        )
    }

    /// `a * s` where `s` is a scalar node.
    pub fn mul_scalar_node(&mut self, a: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        let shape = self.shape(a).to_vec();
        let b = self.broadcast_scalar(s, &shape)?;
        self.mul(a, b)
    }

    /// Re-executes every recorded operation from the stored leaf values and
    /// returns the recomputed outputs.
    pub fn replay(&self) -> Result<Vec<Tensor>, DiffError> {
        let mut g = Graph::new();
        for node in &self.nodes {
            let id = match &node.op {
                Op::Leaf => g.input(node.value.clone()),
                Op::MatMul(a, b) => g.matmul(*a, *b)?,
                Op::Transpose(a) => g.transpose(*a)?,
                Op::Add(a, b) => g.add(*a, *b)?,
                Op::Sub(a, b) => g.sub(*a, *b)?,
                Op::Mul(a, b) => g.mul(*a, *b)?,
                Op::Scale(a, f) => g.scale(*a, *f)?,
                Op::AddRow(a, b) => g.add_row(*a, *b)?,
                Op::SumRows(a) => g.sum_rows(*a)?,
                Op::BroadcastRows(a, m) => g.broadcast_rows(*a, *m)?,
                Op::Relu(a) => g.relu(*a)?,
                Op::ClampAbs(a, l) => g.clamp_abs(*a, *l)?,
                Op::Sum(a) => g.sum(*a)?,
                Op::Mean(a) => g.mean(*a)?,
                Op::BroadcastScalar(a, s) => g.broadcast_scalar(*a, s)?,
                Op::Softmax(a) => g.softmax(*a)?,
                Op::LogSoftmax(a) => g.log_softmax(*a)?,
                Op::SoftmaxCrossEntropy(a, b) => g.softmax_cross_entropy(*a, *b)?,
                Op::Mse(a, b) => g.mse(*a, *b)?,
                Op::PairwiseSqDist(a, b) => g.pairwise_sq_dist(*a, *b)?,
                Op::ConcatRows(p) => g.concat_rows(p)?,
                Op::IndexRows(a, i) => g.index_rows(*a, i)?,
                Op::ScatterRows(a, i, m) => g.scatter_rows(*a, i, *m)?,
            };
            debug_assert_eq!(id.0 + 1, g.nodes.len());
        }
        Ok(g.nodes.into_iter().map(|n| n.value).collect())
    }
}
