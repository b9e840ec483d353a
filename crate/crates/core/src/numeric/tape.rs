//! Define-by-run reverse-mode differentiation.
//!
//! Every forward op appends a node to the [`Tape`] holding its output value and
//! whatever it needs for the backward pass. Nodes are only ever appended, so
//! parents always precede children and [`Tape::backward`] can walk the node
//! list in reverse.

use std::borrow::Cow;

use super::tensor::{dot, gemm, sigmoid, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to arguments of every logarithm.
pub const LOG_EPS: f64 = 1e-12;

/// Handle to a node on a tape.
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
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    Exp(Var),
    Log1mSoftmax(Var, f64),
    RowSoftmax(Var, f64),
    RowLogSoftmax(Var, f64),
    LogSumExpStack(Vec<Var>),
    Sum(Var),
    Mean(Var),
    RowDot(Var, Var),
    GatherRows(Var, Vec<usize>),
    GatherPerRow(Var, Vec<usize>),
    IndexedWeightedSum { weights: Var, values: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    Bce(Var, Vec<f64>),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Recording of one forward computation.
///
/// Leaves may borrow their values (model parameters) for the lifetime `'a`,
/// so binding a large embedding table costs nothing.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    consumed: bool,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf owning its value.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Trainable leaf borrowing its value.
    pub fn param_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Allows another backward pass on this tape.
    pub fn reset(&mut self) {
        self.consumed = false;
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push_op(out, op, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(out, op, &[a, b]))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `a · b` for `a` (m×k) and `b` (k×n). A vector `a` is treated as 1×k and
    /// yields a vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().len() > 2 || av.shape().is_empty() {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k) = av.rows_cols();
        let (k2, n) = bv.rows_cols();
        if k != k2 {
            return Err(Error::dim("matmul", format!("{:?} x {:?}", av.shape(), bv.shape())));
        }
        let data = gemm(av.data(), bv.data(), m, k, n);
        let shape = if av.shape().len() == 1 { vec![n] } else { vec![m, n] };
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a` (m×k) and `b` (n×k).
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.rows_cols();
        let (n, k2) = bv.rows_cols();
        if k != k2 || bv.shape().len() != 2 {
            return Err(Error::dim("matmul_t", format!("{:?} x {:?}T", av.shape(), bv.shape())));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let ar = &av.data()[i * k..(i + 1) * k];
            for j in 0..n {
                data[i * n + j] = dot(ar, &bv.data()[j * k..(j + 1) * k]);
            }
        }
        let shape = if av.shape().len() == 1 { vec![n] } else { vec![m, n] };
        let out = Tensor::new(shape, data)?;
        Ok(self.push_op(out, Op::MatMulT(a, b), &[a, b]))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, r: Var, mul: bool) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(r));
        let (_, c) = xv.rows_cols();
        if rv.numel() != c {
            return Err(Error::dim(name, format!("{:?} with row {:?}", xv.shape(), rv.shape())));
        }
        let row = rv.data();
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|xr| {
                xr.iter()
                    .zip(row)
                    .map(move |(&a, &b)| if mul { a * b } else { a + b })
            })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let op = if mul { Op::MulRow(x, r) } else { Op::AddRow(x, r) };
        Ok(self.push_op(out, op, &[x, r]))
    }

    /// Adds the vector `r` to every row of `x`.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, r, false)
    }

    /// Multiplies every row of `x` elementwise by the vector `r`.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, r, true)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(Error::dim("mul_const", format!("{:?} vs {}", xv.shape(), mask.len())));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::MulConst(x, mask), &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    /// `log(1 + e^x)`.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Natural log with the argument clamped to at least [`LOG_EPS`].
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(LOG_EPS).ln(), Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Row-wise `log(1 - softmax(x / tau))`, evaluated as a leave-one-out
    /// log-sum-exp so it stays finite and exact when one entry takes almost
    /// all of the mass. Rows need at least two entries.
    pub fn log1m_softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau("log1m_softmax_t", tau)?;
        let xv = self.value(x);
        let (_, c) = xv.rows_cols();
        if c < 2 {
            return Err(Error::dim("log1m_softmax_t", "rows need at least two entries"));
        }
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let lo = LeaveOneOut::new(row, tau);
            data.extend((0..c).map(|m| lo.without(m) - lo.lse));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::Log1mSoftmax(x, tau), &[x]))
    }

    // ---------------------------------------------------------------- row-wise

    /// Row-wise `softmax(x / tau)`.
    pub fn softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau("softmax_t", tau)?;
        let xv = self.value(x);
        let (_, c) = xv.rows_cols();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let lse = logsumexp_scaled(row, tau);
            data.extend(row.iter().map(|&v| (v / tau - lse).exp()));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::RowSoftmax(x, tau), &[x]))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_t(x, 1.0)
    }

    /// Row-wise `log softmax(x / tau)`.
    pub fn log_softmax_t(&mut self, x: Var, tau: f64) -> Result<Var> {
        check_tau("log_softmax_t", tau)?;
        let xv = self.value(x);
        let (_, c) = xv.rows_cols();
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let lse = logsumexp_scaled(row, tau);
            data.extend(row.iter().map(|&v| v / tau - lse));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push_op(out, Op::RowLogSoftmax(x, tau), &[x]))
    }

    /// Elementwise `log Σ_j exp(x_j)` across same-shaped tensors.
    pub fn logsumexp_stack(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::Contract("empty stack".into()))?;
        for &x in &xs[1..] {
            self.same_shape("logsumexp_stack", first, x)?;
        }
        let n = self.value(first).numel();
        let mut data = vec![0.0; n];
        for (e, out) in data.iter_mut().enumerate() {
            let m = xs
                .iter()
                .map(|&x| self.value(x).data()[e])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = xs.iter().map(|&x| (self.value(x).data()[e] - m).exp()).sum();
            *out = m + s.ln();
        }
        let out = Tensor::new(self.shape(first).to_vec(), data)?;
        Ok(self.push_op(out, Op::LogSumExpStack(xs.to_vec()), xs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Per-row dot products of two same-shaped matrices.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (_, c) = av.rows_cols();
        let data: Vec<f64> = av
            .data()
            .chunks(c)
            .zip(bv.data().chunks(c))
            .map(|(x, y)| dot(x, y))
            .collect();
        let out = Tensor::vector(data);
        Ok(self.push_op(out, Op::RowDot(a, b), &[a, b]))
    }

    /// Row lookup: `out[r] = table[idx[r]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, c) = tv.rows_cols();
        if idx.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(Error::dim("gather_rows", format!("row {i} of {rows}")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push_op(out, Op::GatherRows(table, idx.to_vec()), &[table]))
    }

    /// Per-row column gather: `out[r][j] = x[r][idx[r * width + j]]`.
    pub fn gather_per_row(&mut self, x: Var, idx: &[usize], width: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.rows_cols();
        if width == 0 || idx.len() != r * width || idx.iter().any(|&i| i >= c) {
            return Err(Error::dim("gather_per_row", format!("{:?} with {} indices", xv.shape(), idx.len())));
        }
        let data = idx
            .chunks(width)
            .enumerate()
            .flat_map(|(row, cols)| cols.iter().map(move |&j| (row, j)))
            .map(|(row, j)| xv.data()[row * c + j])
            .collect();
        let out = Tensor::matrix(r, width, data)?;
        Ok(self.push_op(out, Op::GatherPerRow(x, idx.to_vec()), &[x]))
    }

    /// `out[r] = Σ_j weights[r][j] · values[idx[r * width + j]]` where `width`
    /// is the column count of `weights`.
    pub fn indexed_weighted_sum(&mut self, weights: Var, values: Var, idx: &[usize]) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        let (r, width) = wv.rows_cols();
        let (n, d) = vv.rows_cols();
        if idx.len() != r * width || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim("indexed_weighted_sum", format!("{:?} over {:?}", wv.shape(), vv.shape())));
        }
        let mut data = vec![0.0; r * d];
        for row in 0..r {
            let out = &mut data[row * d..(row + 1) * d];
            for j in 0..width {
                let w = wv.data()[row * width + j];
                for (o, v) in out.iter_mut().zip(vv.row(idx[row * width + j])) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::matrix(r, d, data)?;
        Ok(self.push_op(
            out,
            Op::IndexedWeightedSum { weights, values, idx: idx.to_vec() },
            &[weights, values],
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let ((ra, ca), (rb, cb)) = (av.rows_cols(), bv.rows_cols());
        if ra != rb {
            return Err(Error::dim("concat_cols", format!("{:?} | {:?}", av.shape(), bv.shape())));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let out = Tensor::matrix(ra, ca + cb, data)?;
        Ok(self.push_op(out, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Mean binary cross-entropy of probabilities `p` against `labels`, with
    /// both log arguments clamped to at least [`LOG_EPS`].
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.numel() != labels.len() {
            return Err(Error::dim("bce", format!("{} predictions, {} labels", pv.numel(), labels.len())));
        }
        let n = labels.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| -y * p.max(LOG_EPS).ln() - (1.0 - y) * (1.0 - p).max(LOG_EPS).ln())
            .sum::<f64>()
            / n;
        Ok(self.push_op(Tensor::scalar(loss), Op::Bce(p, labels.to_vec()), &[p]))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    ///
    /// Every trainable leaf gets a gradient, zero if the loss does not depend
    /// on it. A second call fails until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Contract("backward already ran on this tape; reset() first".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                let shape = node.value.shape().to_vec();
                match (g, &node.op, node.requires_grad) {
                    (Some(g), _, _) => Some(Tensor::new(shape, g).expect("grad shape")),
                    (None, Op::Leaf, true) => Some(Tensor::zeros(&shape)),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.rows_cols();
                let (_, n) = bv.rows_cols();
                if rg(*a) {
                    // g (m×n) · bᵀ (n×k)
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] = dot(&g[i * n..(i + 1) * n], &bv.data()[p * n..(p + 1) * n]);
                        }
                    }
                    accumulate(grads, *a, &ga);
                }
                if rg(*b) {
                    // aᵀ (k×m) · g (m×n)
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = av.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o += av * gv;
                            }
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.rows_cols();
                let (n, _) = bv.rows_cols();
                if rg(*a) {
                    // g (m×n) · b (n×k)
                    accumulate(grads, *a, &gemm(g, bv.data(), m, n, k));
                }
                if rg(*b) {
                    // gᵀ (n×m) · a (m×k)
                    let mut gb = vec![0.0; n * k];
                    for i in 0..m {
                        let ar = &av.data()[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for (o, x) in gb[j * k..(j + 1) * k].iter_mut().zip(ar) {
                                *o += gv * x;
                            }
                        }
                    }
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
                if rg(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g);
                }
                if rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                if rg(*a) {
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    accumulate(grads, *a, &ga);
                }
                if rg(*b) {
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::AddRow(x, r) => {
                if rg(*x) {
                    accumulate(grads, *x, g);
                }
                if rg(*r) {
                    let c = val(*r).numel();
                    let mut gr = vec![0.0; c];
                    for row in g.chunks(c) {
                        for (o, v) in gr.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *r, &gr);
                }
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (val(*x).data(), val(*r).data());
                let c = rv.len();
                if rg(*x) {
                    let gx: Vec<f64> = g
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(rv).map(|(g, r)| g * r))
                        .collect();
                    accumulate(grads, *x, &gx);
                }
                if rg(*r) {
                    let mut gr = vec![0.0; c];
                    for (grow, xrow) in g.chunks(c).zip(xv.chunks(c)) {
                        for ((o, gv), xv) in gr.iter_mut().zip(grow).zip(xrow) {
                            *o += gv * xv;
                        }
                    }
                    accumulate(grads, *r, &gr);
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, *x, &gx);
            }
            Op::MulConst(x, mask) => {
                let gx: Vec<f64> = g.iter().zip(mask).map(|(g, m)| g * m).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Relu(x) => {
                let xv = val(*x).data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Softplus(x) => {
                let xv = val(*x).data();
                let gx: Vec<f64> = g.iter().zip(xv).map(|(g, &x)| g * sigmoid(x)).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Log(x) => {
                let xv = val(*x).data();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| if x >= LOG_EPS { g / x } else { 0.0 })
                    .collect();
                accumulate(grads, *x, &gx);
            }
            Op::Exp(x) => {
                let gx: Vec<f64> = g.iter().zip(out).map(|(g, y)| g * y).collect();
                accumulate(grads, *x, &gx);
            }
            Op::Log1mSoftmax(x, tau) => {
                let xv = val(*x);
                let c = xv.rows_cols().1;
                let mut gx = vec![0.0; xv.numel()];
                for ((grow, xrow), orow) in g.chunks(c).zip(xv.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let lo = LeaveOneOut::new(xrow, *tau);
                    let a = lo.argmax;
                    let t = &lo.row_max_terms;
                    // with t_j = exp(z_j - max): exp(max - L_{-m}) = 1 / (sum - t_m) for m != argmax
                    let inv_rest: Vec<f64> = t.iter().map(|&tm| 1.0 / (lo.sum - tm)).collect();
                    // d y_m / d z_j = [j != m] exp(z_j - L_{-m}) - P_j
                    let b: f64 = (0..c).filter(|&m| m != a).map(|m| grow[m] * inv_rest[m]).sum();
                    let g_total: f64 = grow.iter().sum();
                    for j in 0..c {
                        let term = if j == a {
                            b
                        } else {
                            // exp(z_j - L_{-a}) directly: t_j / exp(L_{-a} - max) overflows
                            // when the argmax holds nearly all of the mass
                            let share = (xrow[j] / tau - lo.without_argmax).exp();
                            t[j] * (b - grow[j] * inv_rest[j]) + grow[a] * share
                        };
                        orow[j] = (term - t[j] / lo.sum * g_total) / tau;
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::RowSoftmax(x, tau) => {
                let c = node.value.rows_cols().1;
                let mut gx = vec![0.0; out.len()];
                for ((grow, srow), orow) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let inner = dot(grow, srow);
                    for ((o, gv), s) in orow.iter_mut().zip(grow).zip(srow) {
                        *o = s * (gv - inner) / tau;
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::RowLogSoftmax(x, tau) => {
                let c = node.value.rows_cols().1;
                let mut gx = vec![0.0; out.len()];
                for ((grow, lrow), orow) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let total: f64 = grow.iter().sum();
                    for ((o, gv), l) in orow.iter_mut().zip(grow).zip(lrow) {
                        *o = (gv - l.exp() * total) / tau;
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::LogSumExpStack(xs) => {
                for &x in xs {
                    if !rg(x) {
                        continue;
                    }
                    let xv = val(x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .zip(out)
                        .map(|((g, x), y)| g * (x - y).exp())
                        .collect();
                    accumulate(grads, x, &gx);
                }
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; val(*x).numel()];
                accumulate(grads, *x, &gx);
            }
            Op::Mean(x) => {
                let n = val(*x).numel();
                let gx = vec![g[0] / n as f64; n];
                accumulate(grads, *x, &gx);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = av.rows_cols().1;
                for (target, other) in [(*a, bv), (*b, av)] {
                    if !rg(target) {
                        continue;
                    }
                    let gt: Vec<f64> = other
                        .data()
                        .chunks(c)
                        .zip(g)
                        .flat_map(|(row, gv)| row.iter().map(move |x| x * gv))
                        .collect();
                    accumulate(grads, target, &gt);
                }
            }
            Op::GatherRows(table, idx) => {
                let tv = val(*table);
                let c = tv.rows_cols().1;
                let buf = grads[table.0].get_or_insert_with(|| vec![0.0; tv.numel()]);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in buf[i * c..(i + 1) * c].iter_mut().zip(&g[r * c..(r + 1) * c]) {
                        *o += v;
                    }
                }
            }
            Op::GatherPerRow(x, idx) => {
                let xv = val(*x);
                let (r, c) = xv.rows_cols();
                let width = idx.len() / r;
                let buf = grads[x.0].get_or_insert_with(|| vec![0.0; xv.numel()]);
                for (k, (&j, gv)) in idx.iter().zip(g).enumerate() {
                    buf[(k / width) * c + j] += gv;
                }
            }
            Op::IndexedWeightedSum { weights, values, idx } => {
                let (wv, vv) = (val(*weights), val(*values));
                let (r, width) = wv.rows_cols();
                let d = vv.rows_cols().1;
                if rg(*weights) {
                    let gw: Vec<f64> = (0..r * width)
                        .map(|k| dot(&g[(k / width) * d..(k / width + 1) * d], vv.row(idx[k])))
                        .collect();
                    accumulate(grads, *weights, &gw);
                }
                if rg(*values) {
                    let buf = grads[values.0].get_or_insert_with(|| vec![0.0; vv.numel()]);
                    for (k, &i) in idx.iter().enumerate() {
                        let w = wv.data()[k];
                        let grow = &g[(k / width) * d..(k / width + 1) * d];
                        for (o, gv) in buf[i * d..(i + 1) * d].iter_mut().zip(grow) {
                            *o += w * gv;
                        }
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).rows_cols().1;
                let cb = val(*b).rows_cols().1;
                let rows = g.chunks(ca + cb);
                if rg(*a) {
                    let ga: Vec<f64> = rows.clone().flat_map(|r| r[..ca].iter().copied()).collect();
                    accumulate(grads, *a, &ga);
                }
                if rg(*b) {
                    let gb: Vec<f64> = rows.flat_map(|r| r[ca..].iter().copied()).collect();
                    accumulate(grads, *b, &gb);
                }
            }
            Op::Bce(p, labels) => {
                let pv = val(*p).data();
                let n = labels.len() as f64;
                let gp: Vec<f64> = pv
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        let d_pos = if p >= LOG_EPS { -y / p } else { 0.0 };
                        let d_neg = if 1.0 - p >= LOG_EPS { (1.0 - y) / (1.0 - p) } else { 0.0 };
                        g[0] * (d_pos + d_neg) / n
                    })
                    .collect();
                accumulate(grads, *p, &gp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(buf) => {
            for (o, x) in buf.iter_mut().zip(g) {
                *o += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn check_tau(op: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("temperature must be positive, got {tau}")))
    }
}

pub(crate) fn logsumexp_scaled(row: &[f64], tau: f64) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v / tau));
    m + row.iter().map(|&v| (v / tau - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Log-sum-exp of a scaled row with each single entry left out.
struct LeaveOneOut {
    argmax: usize,
    max: f64,
    sum: f64,
    lse: f64,
    without_argmax: f64,
    row_max_terms: Vec<f64>,
}

impl LeaveOneOut {
    fn new(row: &[f64], tau: f64) -> Self {
        let (argmax, max) = row
            .iter()
            .map(|v| v / tau)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, z)| if z > best.1 { (i, z) } else { best });
        let row_max_terms: Vec<f64> = row.iter().map(|v| (v / tau - max).exp()).collect();
        let sum: f64 = row_max_terms.iter().sum();
        let without_argmax = if sum - 1.0 > 1e-3 {
            max + (sum - 1.0).ln()
        } else {
            // the rest is tiny next to the argmax term: sum it on its own scale
            let second = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != argmax)
                .map(|(_, v)| v / tau)
                .fold(f64::NEG_INFINITY, f64::max);
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != argmax)
                .map(|(_, v)| (v / tau - second).exp())
                .sum();
            second + rest.ln()
        };
        Self {
            argmax,
            max,
            sum,
            lse: max + sum.ln(),
            without_argmax,
            row_max_terms,
        }
    }

    /// `log Σ_{j != m} exp(x_j / tau)`.
    fn without(&self, m: usize) -> f64 {
        if m == self.argmax {
            self.without_argmax
        } else {
            // the argmax term (= 1 after shifting) keeps this well away from zero
            self.max + (self.sum - self.row_max_terms[m]).ln()
        }
    }
}
