//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! the indices of its parents. Because ops can only reference earlier nodes,
//! tape order is a topological order; `backward` walks it once in reverse and
//! accumulates parent gradients in that fixed order, which makes gradient
//! values bit-reproducible across identical runs.
//!
//! Leaves are registered per forward pass ([`GradTape::leaf`] for trainable
//! tensors, [`GradTape::constant`] for data), so model parameters live outside
//! the tape as plain tensors and are re-bound each step.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TVar(usize);

/// Default step size for [`grad_check`] central differences.
pub const GRAD_CHECK_H: f64 = 1e-5;

enum Op<F> {
    Leaf,
    Add(TVar, TVar),
    Sub(TVar, TVar),
    Mul(TVar, TVar),
    Scale(TVar, F),
    AddScalar(TVar),
    Matmul(TVar, TVar),
    Transpose(TVar),
    Reshape(TVar),
    ConcatRows(Vec<TVar>),
    SliceRows(TVar, usize, usize),
    ConcatCols(Vec<TVar>),
    SliceCols(TVar, usize, usize),
    RowAdd(TVar, TVar),
    RowMul(TVar, TVar),
    Softmax(TVar),
    LayerNorm(TVar, F),
    Gelu(TVar),
    Silu(TVar),
    SumAll(TVar),
    MeanAll(TVar),
    GatherRows(TVar, Vec<usize>),
}

struct Node<F> {
    op: Op<F>,
    value: TensorBase<F>,
    needs_grad: bool,
}

pub struct GradTape<F> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<TensorBase<F>>>,
    check_finite: bool,
}

impl<F: Scalar> Default for GradTape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> GradTape<F> {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new(), grads: Vec::new(), check_finite: false }
    }

    /// Checked mode: every op output is scanned for NaN/Inf at creation.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<F>, value: TensorBase<F>, needs_grad: bool) -> Result<TVar> {
        if self.check_finite {
            value.check_finite("tape op output")?;
        }
        self.nodes.push(Node { op, value, needs_grad });
        Ok(TVar(self.nodes.len() - 1))
    }

    fn needs(&self, v: TVar) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable leaf. Its gradient is available after `backward`.
    pub fn leaf(&mut self, t: &TensorBase<F>) -> Result<TVar> {
        self.push(Op::Leaf, t.clone(), true)
    }

    /// Registers a non-trainable input; no gradient is tracked through it.
    pub fn constant(&mut self, t: &TensorBase<F>) -> Result<TVar> {
        self.push(Op::Leaf, t.clone(), false)
    }

    /// Copies a node's current value into a fresh constant, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: TVar) -> Result<TVar> {
        let t = self.value(v).clone();
        self.constant(&t)
    }

    pub fn value(&self, v: TVar) -> &TensorBase<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` call with respect to node `v`.
    pub fn grad(&self, v: TVar) -> Option<&TensorBase<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient or a zero tensor of the node's shape (for leaves that are not
    /// reachable from the loss).
    pub fn grad_or_zeros(&self, v: TVar) -> TensorBase<F> {
        match self.grad(v) {
            Some(g) => g.clone(),
            None => TensorBase::zeros(self.value(v).shape()),
        }
    }

    // ---- elementwise ----

    fn same_shape(&self, a: TVar, b: TVar, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{op}: lhs shape {sa:?} vs rhs shape {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TVar, b: TVar) -> Result<TVar> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), v, ng)
    }

    pub fn sub(&mut self, a: TVar, b: TVar) -> Result<TVar> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), v, ng)
    }

    pub fn mul(&mut self, a: TVar, b: TVar) -> Result<TVar> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).mul_elem(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), v, ng)
    }

    pub fn scale(&mut self, x: TVar, c: F) -> Result<TVar> {
        let v = self.value(x).scale(c);
        let ng = self.needs(x);
        self.push(Op::Scale(x, c), v, ng)
    }

    pub fn add_scalar(&mut self, x: TVar, c: F) -> Result<TVar> {
        let v = self.value(x).map(|t| t + c);
        let ng = self.needs(x);
        self.push(Op::AddScalar(x), v, ng)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: TVar, b: TVar) -> Result<TVar> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), v, ng)
    }

    pub fn transpose(&mut self, x: TVar) -> Result<TVar> {
        let v = self.value(x).transpose2()?;
        let ng = self.needs(x);
        self.push(Op::Transpose(x), v, ng)
    }

    pub fn reshape(&mut self, x: TVar, shape: &[usize]) -> Result<TVar> {
        let v = self.value(x).reshape(shape)?;
        let ng = self.needs(x);
        self.push(Op::Reshape(x), v, ng)
    }

    // ---- concatenation / slicing along rows (token axis) and cols ----

    pub fn concat_rows(&mut self, parts: &[TVar]) -> Result<TVar> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero parts"));
        }
        let cols = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::shape(format!(
                    "concat_rows: part shape {:?} disagrees with leading column count {cols}",
                    self.value(p).shape()
                )));
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = TensorBase::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatRows(parts.to_vec()), v, ng)
    }

    pub fn slice_rows(&mut self, x: TVar, start: usize, end: usize) -> Result<TVar> {
        let (rows, cols) = self.value(x).dims2()?;
        if start > end || end > rows {
            return Err(Error::contract(format!(
                "slice_rows: range {start}..{end} out of bounds for {rows} rows"
            )));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let v = TensorBase::new(vec![end - start, cols], data)?;
        let ng = self.needs(x);
        self.push(Op::SliceRows(x, start, end), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[TVar]) -> Result<TVar> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let rows = self.value(parts[0]).dims2()?.0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(Error::shape(format!(
                    "concat_cols: part shape {:?} disagrees with leading row count {rows}",
                    self.value(p).shape()
                )));
            }
            cols += c;
        }
        let mut data = vec![F::zero(); rows * cols];
        let mut col_off = 0;
        for &p in parts {
            let (_, c) = self.value(p).dims2()?;
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * cols + col_off..r * cols + col_off + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            col_off += c;
        }
        let v = TensorBase::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn slice_cols(&mut self, x: TVar, start: usize, end: usize) -> Result<TVar> {
        let (rows, cols) = self.value(x).dims2()?;
        if start > end || end > cols {
            return Err(Error::contract(format!(
                "slice_cols: range {start}..{end} out of bounds for {cols} columns"
            )));
        }
        let width = end - start;
        let mut data = Vec::with_capacity(rows * width);
        let src = self.value(x).data();
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let v = TensorBase::new(vec![rows, width], data)?;
        let ng = self.needs(x);
        self.push(Op::SliceCols(x, start, end), v, ng)
    }

    // ---- broadcast over rows ----

    fn row_vec_check(&self, x: TVar, v: TVar, op: &str) -> Result<(usize, usize)> {
        let (rows, cols) = self.value(x).dims2()?;
        let vs = self.value(v).shape();
        if vs != [cols] {
            return Err(Error::shape(format!(
                "{op}: matrix shape {:?} needs row vector [{cols}], got {vs:?}",
                self.value(x).shape()
            )));
        }
        Ok((rows, cols))
    }

    /// `x[i, :] + v` for every row i.
    pub fn row_add(&mut self, x: TVar, v: TVar) -> Result<TVar> {
        let (rows, cols) = self.row_vec_check(x, v, "row_add")?;
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let data = (0..rows * cols).map(|i| xd[i] + vd[i % cols]).collect();
        let out = TensorBase::new(vec![rows, cols], data)?;
        let ng = self.needs(x) || self.needs(v);
        self.push(Op::RowAdd(x, v), out, ng)
    }

    /// `x[i, :] * v` for every row i.
    pub fn row_mul(&mut self, x: TVar, v: TVar) -> Result<TVar> {
        let (rows, cols) = self.row_vec_check(x, v, "row_mul")?;
        let xd = self.value(x).data();
        let vd = self.value(v).data();
        let data = (0..rows * cols).map(|i| xd[i] * vd[i % cols]).collect();
        let out = TensorBase::new(vec![rows, cols], data)?;
        let ng = self.needs(x) || self.needs(v);
        self.push(Op::RowMul(x, v), out, ng)
    }

    // ---- nonlinearities / normalization ----

    /// Softmax over the last axis, numerically stabilized by max-subtraction.
    pub fn softmax(&mut self, x: TVar) -> Result<TVar> {
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| Error::shape("softmax on rank-0 tensor"))?;
        let mut data = t.data().to_vec();
        if width > 0 {
            for slice in data.chunks_mut(width) {
                let mut max = slice[0];
                for &s in slice.iter() {
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = F::zero();
                for s in slice.iter_mut() {
                    *s = (*s - max).exp();
                    sum = sum + *s;
                }
                for s in slice.iter_mut() {
                    *s = *s / sum;
                }
            }
        }
        let v = TensorBase::new(t.shape().to_vec(), data)?;
        let ng = self.needs(x);
        self.push(Op::Softmax(x), v, ng)
    }

    /// Per-slice normalization over the last axis:
    /// `y = (x - mean) / max(std, eps)` with population std.
    ///
    /// The eps acts as a divisor floor rather than a variance additive term so
    /// that the output is invariant (up to f64 rounding) under per-slice
    /// affine maps `a*x + b` with a > 0 — the property the modality-specific
    /// normalization study leans on. Constant slices yield zeros.
    pub fn layer_norm(&mut self, x: TVar, eps: F) -> Result<TVar> {
        if eps <= F::zero() {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let t = self.value(x);
        let width = *t.shape().last().ok_or_else(|| Error::shape("layer_norm on rank-0 tensor"))?;
        let mut data = t.data().to_vec();
        if width > 0 {
            let n = F::from_usize_c(width);
            for slice in data.chunks_mut(width) {
                let mut mean = F::zero();
                for &s in slice.iter() {
                    mean = mean + s;
                }
                mean = mean / n;
                let mut var = F::zero();
                for &s in slice.iter() {
                    let d = s - mean;
                    var = var + d * d;
                }
                let std = (var / n).sqrt();
                let denom = if std > eps { std } else { eps };
                for s in slice.iter_mut() {
                    *s = (*s - mean) / denom;
                }
            }
        }
        let v = TensorBase::new(t.shape().to_vec(), data)?;
        let ng = self.needs(x);
        self.push(Op::LayerNorm(x, eps), v, ng)
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: TVar) -> Result<TVar> {
        let v = self.value(x).map(|t| gelu_fwd(t));
        let ng = self.needs(x);
        self.push(Op::Gelu(x), v, ng)
    }

    /// SiLU, `x * sigmoid(x)`.
    pub fn silu(&mut self, x: TVar) -> Result<TVar> {
        let v = self.value(x).map(|t| t * sigmoid(t));
        let ng = self.needs(x);
        self.push(Op::Silu(x), v, ng)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: TVar) -> Result<TVar> {
        let v = TensorBase::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(Op::SumAll(x), v, ng)
    }

    pub fn mean_all(&mut self, x: TVar) -> Result<TVar> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::contract("mean_all over empty tensor"));
        }
        let v = TensorBase::scalar(t.sum() / F::from_usize_c(t.numel()));
        let ng = self.needs(x);
        self.push(Op::MeanAll(x), v, ng)
    }

    // ---- lookup ----

    /// Row lookup into a `[vocab, d]` table. Gradients scatter-add back into
    /// the table rows in ascending output-row order.
    pub fn gather_rows(&mut self, table: TVar, ids: &[usize]) -> Result<TVar> {
        let (vocab, d) = self.value(table).dims2()?;
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, vocab });
            }
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let v = TensorBase::new(vec![ids.len(), d], data)?;
        let ng = self.needs(table);
        self.push(Op::GatherRows(table, ids.to_vec()), v, ng)
    }

    // ---- composite helpers ----

    /// `x @ w + bias` with optional bias row vector.
    pub fn linear(&mut self, x: TVar, w: TVar, bias: Option<TVar>) -> Result<TVar> {
        let y = self.matmul(x, w)?;
        match bias {
            Some(b) => self.row_add(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared error between same-shape tensors, as a scalar node.
    pub fn mse(&mut self, a: TVar, b: TVar) -> Result<TVar> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean_all(sq)
    }

    // ---- backward ----

    /// Reverse pass from a scalar loss node. Visits nodes in reverse tape
    /// order exactly once; gradient accumulation order is fixed by the tape.
    pub fn backward(&mut self, loss: TVar) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<TensorBase<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(TensorBase::full(self.value(loss).shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_none() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &TensorBase<F>,
        grads: &mut [Option<TensorBase<F>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-F::one()));
            }
            Op::Mul(a, b) => {
                self.acc(grads, *a, g.mul_elem(self.value(*b))?);
                self.acc(grads, *b, g.mul_elem(self.value(*a))?);
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, g.scale(*c));
            }
            Op::AddScalar(x) => {
                self.acc(grads, *x, g.clone());
            }
            Op::Matmul(a, b) => {
                let bt = self.value(*b).transpose2()?;
                self.acc(grads, *a, g.matmul(&bt)?);
                let at = self.value(*a).transpose2()?;
                self.acc(grads, *b, at.matmul(g)?);
            }
            Op::Transpose(x) => {
                self.acc(grads, *x, g.transpose2()?);
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, g.reshape(self.value(*x).shape())?);
            }
            Op::ConcatRows(parts) => {
                let cols = g.dims2()?.1;
                let mut row = 0;
                for &p in parts {
                    let r = self.value(p).dims2()?.0;
                    let slice = g.data()[row * cols..(row + r) * cols].to_vec();
                    self.acc(grads, p, TensorBase::new(vec![r, cols], slice)?);
                    row += r;
                }
            }
            Op::SliceRows(x, start, end) => {
                let (rows, cols) = self.value(*x).dims2()?;
                let mut d = TensorBase::zeros(&[rows, cols]);
                d.data_mut()[start * cols..end * cols].copy_from_slice(g.data());
                self.acc(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let (rows, cols) = g.dims2()?;
                let mut col_off = 0;
                for &p in parts {
                    let c = self.value(p).dims2()?.1;
                    let mut d = vec![F::zero(); rows * c];
                    for r in 0..rows {
                        d[r * c..(r + 1) * c]
                            .copy_from_slice(&g.data()[r * cols + col_off..r * cols + col_off + c]);
                    }
                    self.acc(grads, p, TensorBase::new(vec![rows, c], d)?);
                    col_off += c;
                }
            }
            Op::SliceCols(x, start, end) => {
                let (rows, cols) = self.value(*x).dims2()?;
                let width = end - start;
                let mut d = TensorBase::zeros(&[rows, cols]);
                for r in 0..rows {
                    d.data_mut()[r * cols + start..r * cols + end]
                        .copy_from_slice(&g.data()[r * width..(r + 1) * width]);
                }
                self.acc(grads, *x, d);
            }
            Op::RowAdd(x, v) => {
                self.acc(grads, *x, g.clone());
                let (rows, cols) = g.dims2()?;
                let mut gv = vec![F::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gv[c] = gv[c] + g.data()[r * cols + c];
                    }
                }
                self.acc(grads, *v, TensorBase::new(vec![cols], gv)?);
            }
            Op::RowMul(x, v) => {
                let (rows, cols) = g.dims2()?;
                let vd = self.value(*v).data();
                let xd = self.value(*x).data();
                let gx: Vec<F> = (0..rows * cols).map(|i| g.data()[i] * vd[i % cols]).collect();
                self.acc(grads, *x, TensorBase::new(vec![rows, cols], gx)?);
                let mut gv = vec![F::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        gv[c] = gv[c] + g.data()[r * cols + c] * xd[r * cols + c];
                    }
                }
                self.acc(grads, *v, TensorBase::new(vec![cols], gv)?);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let width = *y.shape().last().unwrap();
                let mut d = g.data().to_vec();
                if width > 0 {
                    for (gs, ys) in d.chunks_mut(width).zip(y.data().chunks(width)) {
                        let mut dot = F::zero();
                        for (gi, yi) in gs.iter().zip(ys) {
                            dot = dot + *gi * *yi;
                        }
                        for (gi, yi) in gs.iter_mut().zip(ys) {
                            *gi = *yi * (*gi - dot);
                        }
                    }
                }
                self.acc(grads, *x, TensorBase::new(y.shape().to_vec(), d)?);
            }
            Op::LayerNorm(x, eps) => {
                let y = &node.value;
                let input = self.value(*x);
                let width = *y.shape().last().unwrap();
                let mut d = g.data().to_vec();
                if width > 0 {
                    let n = F::from_usize_c(width);
                    for ((gs, ys), xs) in d
                        .chunks_mut(width)
                        .zip(y.data().chunks(width))
                        .zip(input.data().chunks(width))
                    {
                        let mut mean = F::zero();
                        for &s in xs {
                            mean = mean + s;
                        }
                        mean = mean / n;
                        let mut var = F::zero();
                        for &s in xs {
                            let dd = s - mean;
                            var = var + dd * dd;
                        }
                        let std = (var / n).sqrt();
                        let mut gmean = F::zero();
                        for &s in gs.iter() {
                            gmean = gmean + s;
                        }
                        gmean = gmean / n;
                        if std > *eps {
                            let mut gy = F::zero();
                            for (gi, yi) in gs.iter().zip(ys) {
                                gy = gy + *gi * *yi;
                            }
                            gy = gy / n;
                            for (gi, yi) in gs.iter_mut().zip(ys) {
                                *gi = (*gi - gmean - *yi * gy) / std;
                            }
                        } else {
                            // Floor branch: denominator is the constant eps.
                            for gi in gs.iter_mut() {
                                *gi = (*gi - gmean) / *eps;
                            }
                        }
                    }
                }
                self.acc(grads, *x, TensorBase::new(y.shape().to_vec(), d)?);
            }
            Op::Gelu(x) => {
                let d = g.mul_elem(&self.value(*x).map(gelu_bwd))?;
                self.acc(grads, *x, d);
            }
            Op::Silu(x) => {
                let d = g.mul_elem(&self.value(*x).map(|t| {
                    let s = sigmoid(t);
                    s * (F::one() + t * (F::one() - s))
                }))?;
                self.acc(grads, *x, d);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.acc(grads, *x, TensorBase::full(self.value(*x).shape(), gv));
            }
            Op::MeanAll(x) => {
                let t = self.value(*x);
                let gv = g.data()[0] / F::from_usize_c(t.numel());
                self.acc(grads, *x, TensorBase::full(t.shape(), gv));
            }
            Op::GatherRows(table, ids) => {
                let (vocab, dcols) = self.value(*table).dims2()?;
                let mut d = TensorBase::zeros(&[vocab, dcols]);
                for (row, &id) in ids.iter().enumerate() {
                    for c in 0..dcols {
                        let slot = &mut d.data_mut()[id * dcols + c];
                        *slot = *slot + g.data()[row * dcols + c];
                    }
                }
                self.acc(grads, *table, d);
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<TensorBase<F>>], v: TVar, delta: TensorBase<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e = *e + *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn gelu_fwd<F: Scalar>(x: F) -> F {
    let half = F::from_f64_c(0.5);
    half * x * (F::one() + gelu_inner(x).tanh())
}

fn gelu_inner<F: Scalar>(x: F) -> F {
    let c = F::from_f64_c(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = F::from_f64_c(0.044715);
    c * (x + a * x * x * x)
}

fn gelu_bwd<F: Scalar>(x: F) -> F {
    let half = F::from_f64_c(0.5);
    let c = F::from_f64_c(0.797_884_560_802_865_4);
    let a3 = F::from_f64_c(3.0 * 0.044715);
    let t = gelu_inner(x).tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + a3 * x * x)
}

/// Compares the tape gradient of a scalar-valued function against central
/// finite differences, coordinate by coordinate.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)` where
/// `numeric_i = (f(x + h e_i) - f(x - h e_i)) / 2h`. The finite-difference
/// side never touches the backward pass, so it is an independent oracle for
/// every op the closure uses.
pub fn grad_check<F, Func>(f: Func, x: &TensorBase<F>, h: F) -> Result<F>
where
    F: Scalar,
    Func: Fn(&mut GradTape<F>, TVar) -> Result<TVar>,
{
    if h <= F::zero() {
        return Err(Error::contract("grad_check step h must be positive"));
    }
    let mut tape = GradTape::new();
    let vx = tape.leaf(x)?;
    let loss = f(&mut tape, vx)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::contract(format!(
            "grad_check requires a scalar-valued function, got output shape {:?}",
            tape.value(loss).shape()
        )));
    }
    tape.backward(loss)?;
    let analytic = tape.grad_or_zeros(vx);

    let eval = |pt: &TensorBase<F>| -> Result<F> {
        let mut t = GradTape::new();
        let v = t.leaf(pt)?;
        let out = f(&mut t, v)?;
        Ok(t.value(out).data()[0])
    };

    let two = F::from_f64_c(2.0);
    let mut worst = F::zero();
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (two * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / F::one().max(a.abs());
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}
