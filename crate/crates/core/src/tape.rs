//! Reverse-mode differentiation over a linear recording of operations.
//!
//! Every operation appends a node holding its output value and a description
//! of how it was produced. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients into every node that depends on a parameter leaf.
//! A tape serves exactly one forward/backward pass; call [`Tape::reset`] (or
//! build a new tape) before the next step.

use crate::error::TensorError;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    GatherRows(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    MulRows(Var, Var),
    RowDot(Var, Var),
    ConcatCols(Var, Var),
    GroupSoftmax(Var, Vec<usize>),
    MeanRows(Var),
    ColumnMax(Var, Vec<usize>),
    L2NormalizeRows(Var, f64),
    SelectRows(Vec<bool>, Var, Var),
    Sum(Var),
    BinaryCrossEntropy(Var, usize, f64),
    PairwiseCosine(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backpropagated: bool,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn matrix(data: Vec<f64>, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], data).expect("internal shape bookkeeping")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drops every recorded node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backpropagated = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated for `v` by the last backward pass, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves the gradient of `v` out of the tape, shaped like its value;
    /// zeros when no gradient reached it.
    pub fn take_grad_tensor(&mut self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grads.get_mut(v.0).and_then(Option::take) {
            Some(g) => Tensor::new(shape, g).expect("grad matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradient of `v` shaped like its value; zeros when no gradient reached it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.nodes[v.0].value.shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches value"),
            None => Tensor::zeros(&shape),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = self.rg(inputs);
        self.push(value, op, rg)
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(TensorError::Shape {
                op,
                left: t.shape().to_vec(),
                right: vec![],
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (k2, n) = self.mat_dims(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, (m, k, n), (av, k, 1), (bv, n, 1));
        Ok(self.record(matrix(out, m, n), Op::MatMul(a, b), &[a, b]))
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.mat_dims(a, "matmul_nt")?;
        let (n, k2) = self.mat_dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(shape_err("matmul_nt", self.value(a), self.value(b)));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        gemm_acc(&mut out, (m, k, n), (av, k, 1), (bv, 1, k));
        Ok(self.record(matrix(out, m, n), Op::MatMulNt(a, b), &[a, b]))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::new(ta.shape().to_vec(), data).expect("same shape"))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.record(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.record(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.record(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the vector `b` (length = column count) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.cols();
        if tb.len() != cols {
            return Err(shape_err("add_row", ta, tb));
        }
        let bias = tb.data();
        let data = ta.data().iter().enumerate().map(|(i, x)| x + bias[i % cols]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        Ok(self.record(t, Op::AddRow(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.record(t, Op::Scale(a, c), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape().to_vec(), ta.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { slope * x });
        self.record(t, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.record(t, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f64::tanh);
        self.record(t, Op::Tanh(a), &[a])
    }

    /// Row `r` of the output is row `indices[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(ta.row(i));
        }
        if indices.is_empty() {
            return Err(TensorError::Shape {
                op: "gather_rows",
                left: ta.shape().to_vec(),
                right: vec![0],
            });
        }
        let t = matrix(data, indices.len(), cols);
        Ok(self.record(t, Op::GatherRows(a, indices.to_vec()), &[a]))
    }

    /// Sums row `e` of `a` into output row `segments[e]`; the output has
    /// `num_segments` rows and empty segments are zero. Rows are added in
    /// input order.
    pub fn segment_sum(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let cols = ta.cols();
        if segments.len() != ta.rows() {
            return Err(TensorError::Shape {
                op: "segment_sum",
                left: ta.shape().to_vec(),
                right: vec![segments.len()],
            });
        }
        let mut out = vec![0.0; num_segments * cols];
        for (e, &s) in segments.iter().enumerate() {
            if s >= num_segments {
                return Err(TensorError::Index {
                    op: "segment_sum",
                    index: s,
                    bound: num_segments,
                });
            }
            for (o, x) in out[s * cols..(s + 1) * cols].iter_mut().zip(ta.row(e)) {
                *o += x;
            }
        }
        let t = matrix(out, num_segments, cols);
        Ok(self.record(t, Op::SegmentSum(a, segments.to_vec()), &[a]))
    }

    /// Scales row `r` of `a` by `w[r]`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var, TensorError> {
        let (ta, tw) = (self.value(a), self.value(w));
        if tw.len() != ta.rows() {
            return Err(shape_err("mul_rows", ta, tw));
        }
        let cols = ta.cols();
        let wv = tw.data();
        let data = ta.data().iter().enumerate().map(|(i, x)| x * wv[i / cols]).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        Ok(self.record(t, Op::MulRows(a, w), &[a, w]))
    }

    /// Per-row inner product of two equally shaped matrices, `[m×n] → [m×1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("row_dot", ta, tb));
        }
        let m = ta.rows();
        let out = (0..m)
            .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
            .collect();
        Ok(self.record(matrix(out, m, 1), Op::RowDot(a, b), &[a, b]))
    }

    /// `[m×p] ∥ [m×q] → [m×(p+q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(shape_err("concat_cols", ta, tb));
        }
        let (m, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        Ok(self.record(matrix(data, m, p + q), Op::ConcatCols(a, b), &[a, b]))
    }

    /// Softmax over the flat entries of `a`, normalized separately within each
    /// group. `groups[i]` is the group of entry `i`; every group in
    /// `0..num_groups` must be non-empty.
    pub fn group_softmax(&mut self, a: Var, groups: &[usize], num_groups: usize) -> Result<Var, TensorError> {
        let ta = self.value(a);
        if groups.len() != ta.len() {
            return Err(TensorError::Shape {
                op: "group_softmax",
                left: ta.shape().to_vec(),
                right: vec![groups.len()],
            });
        }
        let x = ta.data();
        let mut max = vec![f64::NEG_INFINITY; num_groups];
        let mut members = vec![0usize; num_groups];
        for (i, &g) in groups.iter().enumerate() {
            if g >= num_groups {
                return Err(TensorError::Index {
                    op: "group_softmax",
                    index: g,
                    bound: num_groups,
                });
            }
            // NaN poisons the group max so it propagates to the output
            max[g] = if x[i].is_nan() || max[g].is_nan() {
                f64::NAN
            } else {
                max[g].max(x[i])
            };
            members[g] += 1;
        }
        if let Some(empty) = members.iter().position(|&c| c == 0) {
            return Err(TensorError::EmptyGroup(empty));
        }
        let mut out: Vec<f64> = groups.iter().enumerate().map(|(i, &g)| (x[i] - max[g]).exp()).collect();
        let mut sums = vec![0.0; num_groups];
        for (i, &g) in groups.iter().enumerate() {
            sums[g] += out[i];
        }
        for (i, &g) in groups.iter().enumerate() {
            out[i] /= sums[g];
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        Ok(self.record(t, Op::GroupSoftmax(a, groups.to_vec()), &[a]))
    }

    /// Softmax within each row of a matrix.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (rows, cols) = {
            let t = self.value(a);
            (t.rows(), t.cols())
        };
        let groups: Vec<usize> = (0..rows * cols).map(|i| i / cols).collect();
        self.group_softmax(a, &groups, rows)
    }

    /// Column means, `[m×n] → [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(ta.row(r)) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        self.record(matrix(out, 1, n), Op::MeanRows(a), &[a])
    }

    /// Column-wise maximum, `[m×n] → [n]`; ties resolve to the lowest row.
    pub fn column_max(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut arg = vec![0usize; n];
        let mut out = ta.row(0).to_vec();
        for r in 1..m {
            for (c, x) in ta.row(r).iter().enumerate() {
                if *x > out[c] {
                    out[c] = *x;
                    arg[c] = r;
                }
            }
        }
        self.record(Tensor::vector(out), Op::ColumnMax(a, arg), &[a])
    }

    /// Divides each row by its L2 norm, guarded below by `eps`.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = ta.row(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(eps);
            out.extend(row.iter().map(|x| x / norm));
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        self.record(t, Op::L2NormalizeRows(a, eps), &[a])
    }

    /// Row `r` comes from `a` when `mask[r]`, otherwise from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || mask.len() != ta.rows() {
            return Err(shape_err("select_rows", ta, tb));
        }
        let mut data = Vec::with_capacity(ta.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { ta.row(r) } else { tb.row(r) });
        }
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        Ok(self.record(t, Op::SelectRows(mask.to_vec(), a, b), &[a, b]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// `-Σ_i [y_i ln p_i + (1 - y_i) ln(1 - p_i)]` for a one-hot `y` at
    /// `target`, with both log arguments clamped below by `eps`.
    pub fn binary_cross_entropy(&mut self, probs: Var, target: usize, eps: f64) -> Result<Var, TensorError> {
        let tp = self.value(probs);
        if target >= tp.len() {
            return Err(TensorError::Index {
                op: "binary_cross_entropy",
                index: target,
                bound: tp.len(),
            });
        }
        let loss = -tp
            .data()
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                if i == target {
                    p.max(eps).ln()
                } else {
                    (1.0 - p).max(eps).ln()
                }
            })
            .sum::<f64>();
        Ok(self.record(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy(probs, target, eps),
            &[probs],
        ))
    }

    /// `Σ_{i<j} cos(row_i, row_j)`, row norms guarded below by `eps`.
    pub fn pairwise_cosine_sum(&mut self, a: Var, eps: f64) -> Var {
        let ta = self.value(a);
        let m = ta.rows();
        let norms: Vec<f64> = (0..m).map(|r| row_norm(ta.row(r)).max(eps)).collect();
        let mut total = 0.0;
        for i in 0..m {
            for j in i + 1..m {
                total += dot(ta.row(i), ta.row(j)) / (norms[i] * norms[j]);
            }
        }
        self.record(Tensor::scalar(total), Op::PairwiseCosine(a, eps), &[a])
    }

    /// Accumulates gradients of the scalar `loss` into every node that
    /// depends on a parameter. Allowed once per tape lifetime.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.backpropagated {
            return Err(TensorError::AlreadyBackpropagated);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        self.backpropagated = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn add_into(&mut self, v: Var, contrib: impl FnOnce(&[f64], &mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let mut slot = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        contrib(self.nodes[v.0].value.data(), &mut slot);
        self.grads[v.0] = Some(slot);
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so input values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let out = std::mem::replace(&mut self.nodes[i].value, Tensor::scalar(0.0));
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                self.add_into(*a, |_, ga| gemm_acc(ga, (m, n, k), (g, n, 1), (bv.data(), 1, n)));
                self.add_into(*b, |_, gb| gemm_acc(gb, (k, m, n), (av.data(), 1, k), (g, n, 1)));
            }
            Op::MatMulNt(a, b) => {
                // out = A·Bᵀ: ga[m×k] += g·B and gb[n×k] += gᵀ·A
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                self.add_into(*a, |_, ga| gemm_acc(ga, (m, n, k), (g, n, 1), (bv.data(), k, 1)));
                self.add_into(*b, |_, gb| gemm_acc(gb, (n, m, k), (g, 1, n), (av.data(), k, 1)));
            }
            Op::Add(a, b) => {
                self.add_into(*a, |_, ga| axpy(ga, g, 1.0));
                self.add_into(*b, |_, gb| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.add_into(*a, |_, ga| axpy(ga, g, 1.0));
                self.add_into(*b, |_, gb| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).clone();
                let bv = bv.data();
                self.add_into(*a, |_, ga| {
                    for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += gi * y;
                    }
                });
                let av = self.value(*a).clone();
                let av = av.data();
                self.add_into(*b, |_, gb| {
                    for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                        *o += gi * x;
                    }
                });
            }
            Op::AddRow(a, b) => {
                self.add_into(*a, |_, ga| axpy(ga, g, 1.0));
                self.add_into(*b, |_, gb| {
                    let cols = gb.len();
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % cols] += gi;
                    }
                });
            }
            Op::Scale(a, c) => self.add_into(*a, |_, ga| axpy(ga, g, *c)),
            Op::LeakyRelu(a, slope) => self.add_into(*a, |x, ga| {
                for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                    *o += if *xi > 0.0 { *gi } else { slope * gi };
                }
            }),
            Op::Sigmoid(a) => {
                let y = out.data();
                self.add_into(*a, |_, ga| {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                self.add_into(*a, |_, ga| {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let cols = out.cols();
                self.add_into(*a, |_, ga| {
                    for (r, &src) in idx.iter().enumerate() {
                        axpy(&mut ga[src * cols..(src + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                    }
                });
            }
            Op::SegmentSum(a, seg) => {
                let cols = out.cols();
                self.add_into(*a, |_, ga| {
                    for (e, &s) in seg.iter().enumerate() {
                        axpy(&mut ga[e * cols..(e + 1) * cols], &g[s * cols..(s + 1) * cols], 1.0);
                    }
                });
            }
            Op::MulRows(a, w) => {
                let cols = out.cols();
                let wv = self.value(*w).clone();
                let wv = wv.data();
                self.add_into(*a, |_, ga| {
                    for (i, (o, gi)) in ga.iter_mut().zip(g).enumerate() {
                        *o += gi * wv[i / cols];
                    }
                });
                let av = self.value(*a).clone();
                let av = av.data();
                self.add_into(*w, |_, gw| {
                    for (i, (gi, x)) in g.iter().zip(av).enumerate() {
                        gw[i / cols] += gi * x;
                    }
                });
            }
            Op::RowDot(a, b) => {
                let cols = self.value(*a).cols();
                let bv = self.value(*b).clone();
                let bv = bv.data();
                self.add_into(*a, |_, ga| {
                    for (i, (o, y)) in ga.iter_mut().zip(bv).enumerate() {
                        *o += g[i / cols] * y;
                    }
                });
                let av = self.value(*a).clone();
                let av = av.data();
                self.add_into(*b, |_, gb| {
                    for (i, (o, x)) in gb.iter_mut().zip(av).enumerate() {
                        *o += g[i / cols] * x;
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let p = self.value(*a).cols();
                let q = self.value(*b).cols();
                let w = p + q;
                self.add_into(*a, |_, ga| {
                    for r in 0..ga.len() / p {
                        axpy(&mut ga[r * p..(r + 1) * p], &g[r * w..r * w + p], 1.0);
                    }
                });
                self.add_into(*b, |_, gb| {
                    for r in 0..gb.len() / q {
                        axpy(&mut gb[r * q..(r + 1) * q], &g[r * w + p..(r + 1) * w], 1.0);
                    }
                });
            }
            Op::GroupSoftmax(a, groups) => {
                let y = out.data();
                let num = groups.iter().max().map_or(0, |m| m + 1);
                let mut dots = vec![0.0; num];
                for (i, &grp) in groups.iter().enumerate() {
                    dots[grp] += y[i] * g[i];
                }
                self.add_into(*a, |_, ga| {
                    for (i, &grp) in groups.iter().enumerate() {
                        ga[i] += y[i] * (g[i] - dots[grp]);
                    }
                });
            }
            Op::MeanRows(a) => {
                let n = out.cols();
                self.add_into(*a, |_, ga| {
                    let m = (ga.len() / n) as f64;
                    for (i, o) in ga.iter_mut().enumerate() {
                        *o += g[i % n] / m;
                    }
                });
            }
            Op::ColumnMax(a, arg) => {
                let n = arg.len();
                self.add_into(*a, |_, ga| {
                    for (c, &r) in arg.iter().enumerate() {
                        ga[r * n + c] += g[c];
                    }
                });
            }
            Op::L2NormalizeRows(a, eps) => {
                let n = out.cols();
                let y = out.data();
                self.add_into(*a, |x, ga| {
                    for r in 0..x.len() / n {
                        let xr = &x[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let norm = row_norm(xr);
                        if norm > *eps {
                            let yg = dot(yr, gr);
                            for c in 0..n {
                                ga[r * n + c] += (gr[c] - yr[c] * yg) / norm;
                            }
                        } else {
                            for c in 0..n {
                                ga[r * n + c] += gr[c] / eps;
                            }
                        }
                    }
                });
            }
            Op::SelectRows(mask, a, b) => {
                let cols = out.cols();
                self.add_into(*a, |_, ga| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                        axpy(&mut ga[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                    }
                });
                self.add_into(*b, |_, gb| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, m)| !**m) {
                        axpy(&mut gb[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols], 1.0);
                    }
                });
            }
            Op::Sum(a) => self.add_into(*a, |_, ga| {
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::BinaryCrossEntropy(p, target, eps) => self.add_into(*p, |x, gp| {
                for (i, (o, &pi)) in gp.iter_mut().zip(x).enumerate() {
                    let d = if i == *target {
                        if pi > *eps {
                            -1.0 / pi
                        } else {
                            0.0
                        }
                    } else if 1.0 - pi > *eps {
                        1.0 / (1.0 - pi)
                    } else {
                        0.0
                    };
                    *o += g[0] * d;
                }
            }),
            Op::PairwiseCosine(a, eps) => {
                let n = self.value(*a).cols();
                self.add_into(*a, |x, ga| {
                    let m = x.len() / n;
                    let raw: Vec<f64> = (0..m).map(|r| row_norm(&x[r * n..(r + 1) * n])).collect();
                    let norms: Vec<f64> = raw.iter().map(|v| v.max(*eps)).collect();
                    for i in 0..m {
                        for j in i + 1..m {
                            let (ui, uj) = (&x[i * n..(i + 1) * n], &x[j * n..(j + 1) * n]);
                            let denom = norms[i] * norms[j];
                            let cos = dot(ui, uj) / denom;
                            for c in 0..n {
                                let mut di = uj[c] / denom;
                                if raw[i] > *eps {
                                    di -= cos * ui[c] / (norms[i] * norms[i]);
                                }
                                let mut dj = ui[c] / denom;
                                if raw[j] > *eps {
                                    dj -= cos * uj[c] / (norms[j] * norms[j]);
                                }
                                ga[i * n + c] += g[0] * di;
                                ga[j * n + c] += g[0] * dj;
                            }
                        }
                    }
                });
            }
        }
        self.nodes[i].op = op;
        self.nodes[i].value = out;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `out += lhs · rhs` for `(rows, inner, cols)` dims; `out` is row-major
/// and each operand is `(data, row_stride, col_stride)`.
fn gemm_acc(
    out: &mut [f64],
    (rows, inner, cols): (usize, usize, usize),
    (lhs, lr, lc): (&[f64], usize, usize),
    (rhs, rr, rc): (&[f64], usize, usize),
) {
    let last = |r: usize, c: usize, sr: usize, sc: usize| (r - 1) * sr + (c - 1) * sc;
    assert!(rows > 0 && inner > 0 && cols > 0);
    assert!(out.len() >= rows * cols);
    assert!(lhs.len() > last(rows, inner, lr, lc) && rhs.len() > last(inner, cols, rr, rc));
    let s = |x: usize| x as isize;
    // SAFETY: the asserts above keep every strided access inside its slice,
    // and `out` is not aliased by either operand.
    unsafe {
        matrixmultiply::dgemm(
            rows,
            inner,
            cols,
            1.0,
            lhs.as_ptr(),
            s(lr),
            s(lc),
            rhs.as_ptr(),
            s(rr),
            s(rc),
            1.0,
            out.as_mut_ptr(),
            s(cols),
            1,
        );
    }
}

/// Four independent partial sums so the loop vectorizes.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn row_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
