use std::sync::Arc;

use super::tensor::{strides_of, Tensor};
use super::AutodiffError;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, eps: f64 },
    Silu(Var),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Reshape(Var),
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    ScatterRows { x: Var, idx: Arc<Vec<usize>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Silu(..) => "silu",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterRows { .. } => "scatter_rows",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so every
/// node's inputs precede it and the tape is acyclic by construction.
///
/// Gradients accumulate into leaves across [`Graph::backward`] calls until
/// [`Graph::zero_grad`] is called. A `requires_grad` leaf that the root does
/// not depend on receives a zero gradient rather than an error.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    branch_signature: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), branch_signature: FNV_OFFSET }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a constant (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(t, requires_grad)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, present after a backward pass for
    /// every `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Hash of the discrete branch decisions taken so far (ReLU sign
    /// patterns, externally recorded selections). Two evaluations with the
    /// same signature took the same piecewise-smooth branch.
    pub fn branch_signature(&self) -> u64 {
        self.branch_signature
    }

    /// Mixes discrete decisions made outside the tape (e.g. top-k routing)
    /// into the branch signature.
    pub fn record_branch(&mut self, bits: impl IntoIterator<Item = u64>) {
        for b in bits {
            self.branch_signature ^= b.wrapping_add(0x9e37_79b9_7f4a_7c15);
            self.branch_signature = self.branch_signature.wrapping_mul(FNV_PRIME);
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let requires_grad = self.inputs_of(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_of(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Softmax(a)
            | Op::Silu(a)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::LayerNorm { x, .. }
            | Op::SumAxis { x, .. }
            | Op::Slice { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterRows { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
        }
    }

    // ---- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_eval("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_eval("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_eval("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_eval("div", a, b, |x, y| x / y)?;
        self.push(Op::Div(a, b), out)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.map(a, |x| k * x);
        self.push(Op::Scale(a, k), out)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        let out = self.map(a, |x| x + k);
        self.push(Op::AddScalar(a), out)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, |x| x * sigmoid(x));
        self.push(Op::Silu(a), out)
    }

    /// ReLU; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let bits: Vec<u64> = self.nodes[a.0]
            .value
            .data()
            .chunks(64)
            .map(|c| c.iter().enumerate().fold(0u64, |acc, (i, &x)| acc | (((x > 0.0) as u64) << i)))
            .collect();
        self.record_branch(bits);
        let out = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.map(a, f64::exp);
        self.push(Op::Exp(a), out)
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    /// Sums over `axis`, keeping it with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::AxisOutOfRange { op: "sum_axis", axis, rank: shape.len() });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * n + k) * inner + i];
                }
            }
        }
        let mut oshape = shape;
        oshape[axis] = 1;
        self.push(Op::SumAxis { x: a, axis }, Tensor::from_parts(oshape, out))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::RankMismatch { op: "transpose", expected: 2, got: t.rank() });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let out = transpose_raw(t.data(), m, n);
        self.push(Op::Transpose(a), Tensor::from_parts(vec![n, m], out))
    }

    // ---- normalisation -----------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some(&n) = t.shape().last() else {
            return Err(AutodiffError::AxisOutOfRange { op: "softmax", axis: 0, rank: 0 });
        };
        let mut out = t.data().to_vec();
        if n > 0 {
            for row in out.chunks_mut(n) {
                softmax_in_place(row, None);
            }
        }
        self.push(Op::Softmax(a), Tensor::from_parts(t.shape().to_vec(), out))
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// true; excluded entries get probability exactly zero. Every row must
    /// keep at least one entry.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if mask.len() != t.numel() || t.rank() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "softmax_masked",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let n = *t.shape().last().unwrap();
        let mut out = t.data().to_vec();
        for (row, m) in out.chunks_mut(n).zip(mask.chunks(n)) {
            if !m.iter().any(|&b| b) {
                return Err(AutodiffError::EmptySoftmaxRow);
            }
            softmax_in_place(row, Some(m));
        }
        self.push(Op::Softmax(a), Tensor::from_parts(t.shape().to_vec(), out))
    }

    /// Layer normalisation over the last axis, without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or(AutodiffError::AxisOutOfRange {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let (mu, rstd) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mu) * rstd;
            }
        }
        self.push(Op::LayerNorm { x: a, eps }, Tensor::from_parts(t.shape().to_vec(), out))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(Op::Reshape(a), out)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::AxisOutOfRange { op: "slice", axis, rank: shape.len() });
        }
        if start + len > shape[axis] {
            return Err(AutodiffError::SliceOutOfRange { start, len, dim: shape[axis] });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = len;
        self.push(Op::Slice { x: a, axis, start }, Tensor::from_parts(oshape, out))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or(AutodiffError::EmptyConcat)?).shape().to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::AxisOutOfRange { op: "concat", axis, rank: first.len() });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.value(x).shape();
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut oshape = first;
        oshape[axis] = total;
        self.push(Op::Concat { xs: xs.to_vec(), axis }, Tensor::from_parts(oshape, out))
    }

    /// Selects rows of a 2-D tensor: `out[j] = x[idx[j]]`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(AutodiffError::RankMismatch { op: "gather_rows", expected: 2, got: t.rank() });
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx {
            if r >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: r, len: rows });
            }
            out.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
        }
        let op = Op::GatherRows { x: a, idx: Arc::new(idx.to_vec()) };
        self.push(op, Tensor::from_parts(vec![idx.len(), d], out))
    }

    /// Scatter-adds rows into a zero tensor of `rows` rows:
    /// `out[idx[j]] += x[j]`.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || t.shape()[0] != idx.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "scatter_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let d = t.shape()[1];
        let mut out = vec![0.0; rows * d];
        for (j, &r) in idx.iter().enumerate() {
            if r >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: r, len: rows });
            }
            for c in 0..d {
                out[r * d + c] += t.data()[j * d + c];
            }
        }
        let op = Op::ScatterRows { x: a, idx: Arc::new(idx.to_vec()) };
        self.push(op, Tensor::from_parts(vec![rows, d], out))
    }

    // ---- composites --------------------------------------------------

    /// Mean squared error between two same-shape tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates `d root / d leaf` into every `requires_grad` leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(AutodiffError::NotScalarRoot {
                shape: self.nodes[root.0].value.shape().to_vec(),
            });
        }
        for n in &mut self.nodes {
            if n.requires_grad && matches!(n.op, Op::Leaf) && n.grad.is_none() {
                n.grad = Some(Tensor::zeros(n.value.shape()));
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.shape()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad.as_mut().expect("leaf grad initialised").add_assign(&g);
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, self.reduce_to(g.clone(), *a)),
                (*b, self.reduce_to(g.clone(), *b)),
            ],
            Op::Sub(a, b) => {
                let mut neg = g.clone();
                neg.scale_in_place(-1.0);
                vec![(*a, self.reduce_to(g.clone(), *a)), (*b, self.reduce_to(neg, *b))]
            }
            Op::Mul(a, b) => {
                let ga = self.bcast_zip(g, *b, |gv, bv| gv * bv);
                let gb = self.bcast_zip(g, *a, |gv, av| gv * av);
                vec![(*a, self.reduce_to(ga, *a)), (*b, self.reduce_to(gb, *b))]
            }
            Op::Div(a, b) => {
                let ga = self.bcast_zip(g, *b, |gv, bv| gv / bv);
                // d(a/b)/db = -y/b
                let yb = self.bcast_zip(y, *b, |yv, bv| -yv / bv);
                let gb = Tensor::from_parts(
                    g.shape().to_vec(),
                    g.data().iter().zip(yb.data()).map(|(p, q)| p * q).collect(),
                );
                vec![(*a, self.reduce_to(ga, *a)), (*b, self.reduce_to(gb, *b))]
            }
            Op::Scale(a, k) => {
                let mut t = g.clone();
                t.scale_in_place(*k);
                vec![(*a, t)]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let bt = transpose_raw(tb.data(), k, n);
                let at = transpose_raw(ta.data(), m, k);
                let ga = matmul_raw(g.data(), &bt, m, n, k);
                let gb = matmul_raw(&at, g.data(), k, m, n);
                vec![
                    (*a, Tensor::from_parts(vec![m, k], ga)),
                    (*b, Tensor::from_parts(vec![k, n], gb)),
                ]
            }
            Op::Transpose(a) => {
                let (m, n) = (y.shape()[0], y.shape()[1]);
                vec![(*a, Tensor::from_parts(vec![n, m], transpose_raw(g.data(), m, n)))]
            }
            Op::Softmax(a) => {
                let n = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                if n > 0 {
                    for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            o[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), out))]
            }
            Op::LayerNorm { x, eps } => {
                let tx = self.value(*x);
                let n = *tx.shape().last().unwrap();
                let mut out = vec![0.0; tx.numel()];
                for ((o, xr), (yr, gr)) in out
                    .chunks_mut(n)
                    .zip(tx.data().chunks(n))
                    .zip(y.data().chunks(n).zip(g.data().chunks(n)))
                {
                    let (_, rstd) = row_stats(xr, *eps);
                    let gmean = gr.iter().sum::<f64>() / n as f64;
                    let gy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for j in 0..n {
                        o[j] = rstd * (gr[j] - gmean - yr[j] * gy);
                    }
                }
                vec![(*x, Tensor::from_parts(tx.shape().to_vec(), out))]
            }
            Op::Silu(a) => {
                let t = self.value(*a);
                let d = t
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let s = sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![(*a, Tensor::from_parts(t.shape().to_vec(), d))]
            }
            Op::Relu(a) => {
                let t = self.value(*a);
                let d = t
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![(*a, Tensor::from_parts(t.shape().to_vec(), d))]
            }
            Op::Tanh(a) => {
                let d = y.data().iter().zip(g.data()).map(|(&yv, &gv)| gv * (1.0 - yv * yv)).collect();
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::Exp(a) => {
                let d = y.data().iter().zip(g.data()).map(|(&yv, &gv)| gv * yv).collect();
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                vec![(*a, Tensor::full(self.shape(*a), gv))]
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel().max(1) as f64;
                vec![(*a, Tensor::full(self.shape(*a), g.data()[0] / n))]
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            out[(o * n + k) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(shape, out))]
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = y.shape()[*axis];
                let mut out = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                vec![(*x, Tensor::from_parts(shape, out))]
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut result = Vec::with_capacity(xs.len());
                let mut offset = 0;
                for &x in xs {
                    let shape = self.shape(x).to_vec();
                    let n = shape[*axis];
                    let mut out = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        out.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    offset += n;
                    result.push((x, Tensor::from_parts(shape, out)));
                }
                result
            }
            Op::Reshape(a) => {
                vec![(*a, Tensor::from_parts(self.shape(*a).to_vec(), g.data().to_vec()))]
            }
            Op::GatherRows { x, idx } => {
                let shape = self.shape(*x).to_vec();
                let d = shape[1];
                let mut out = vec![0.0; shape[0] * d];
                for (j, &r) in idx.iter().enumerate() {
                    for c in 0..d {
                        out[r * d + c] += g.data()[j * d + c];
                    }
                }
                vec![(*x, Tensor::from_parts(shape, out))]
            }
            Op::ScatterRows { x, idx } => {
                let d = y.shape()[1];
                let mut out = Vec::with_capacity(idx.len() * d);
                for &r in idx.iter() {
                    out.extend_from_slice(&g.data()[r * d..(r + 1) * d]);
                }
                vec![(*x, Tensor::from_parts(vec![idx.len(), d], out))]
            }
        }
    }

    // ---- broadcasting helpers ----------------------------------------

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    fn broadcast_eval(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let d = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Ok(Tensor::from_parts(ta.shape().to_vec(), d));
        }
        let shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| AutodiffError::ShapeMismatch {
            op,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let ia = broadcast_offsets(&shape, ta.shape());
        let ib = broadcast_offsets(&shape, tb.shape());
        let d = ia.iter().zip(&ib).map(|(&i, &j)| f(ta.data()[i], tb.data()[j])).collect();
        Ok(Tensor::from_parts(shape, d))
    }

    /// Combines an output-shaped tensor with a (possibly broadcast) input.
    fn bcast_zip(&self, out: &Tensor, other: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let to = self.value(other);
        let d = if to.shape() == out.shape() {
            out.data().iter().zip(to.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let io = broadcast_offsets(out.shape(), to.shape());
            out.data().iter().zip(&io).map(|(&x, &j)| f(x, to.data()[j])).collect()
        };
        Tensor::from_parts(out.shape().to_vec(), d)
    }

    /// Sums an output-shaped gradient down to the shape of input `v`.
    fn reduce_to(&self, g: Tensor, v: Var) -> Tensor {
        let target = self.shape(v);
        if g.shape() == target {
            return g;
        }
        let offsets = broadcast_offsets(g.shape(), target);
        let mut out = vec![0.0; target.iter().product()];
        for (&gv, &j) in g.data().iter().zip(&offsets) {
            out[j] += gv;
        }
        Tensor::from_parts(target.to_vec(), out)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

/// Numerically stable softmax of a row, optionally restricted by a mask.
pub(crate) fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.is_none_or(|m| m[j]);
    let max = (0..row.len()).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for j in 0..row.len() {
        if keep(j) {
            row[j] = (row[j] - max).exp();
            total += row[j];
        } else {
            row[j] = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out_shape`, the flat offset into a tensor of
/// `in_shape` that broadcasts to it.
fn broadcast_offsets(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let pad = rank - in_shape.len();
    let in_strides = strides_of(in_shape);
    let eff: Vec<usize> = (0..rank)
        .map(|d| if d < pad || in_shape[d - pad] == 1 { 0 } else { in_strides[d - pad] })
        .collect();
    let total: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}
