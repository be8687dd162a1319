//! Define-by-run reverse-mode autodiff tape.
//!
//! A [`Graph`] is an append-only sequence of operation records; node inputs
//! always precede the node, so the backward pass is a single reverse sweep.
//! Graphs are rebuilt for every forward pass and never shared across threads.
//!
//! All graph values are 2D `[rows, cols]`; a scalar is `[1, 1]`.

use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in one specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    MatMul { a: ValueId, b: ValueId },
    Transpose { a: ValueId },
    Add { a: ValueId, b: ValueId },
    AddRow { a: ValueId, bias: ValueId },
    Mul { a: ValueId, b: ValueId },
    MulCol { a: ValueId, scale: ValueId },
    Affine { a: ValueId, mul: T },
    Silu { a: ValueId },
    Sigmoid { a: ValueId },
    Softmax { a: ValueId },
    LogSoftmax { a: ValueId },
    Log { a: ValueId },
    Clamp { a: ValueId, lo: T, hi: T },
    LayerNorm { a: ValueId, gamma: ValueId, beta: ValueId, eps: T },
    Embedding { table: ValueId, ids: Vec<usize> },
    ConcatCols { a: ValueId, b: ValueId },
    ConcatRows { a: ValueId, b: ValueId },
    SliceCols { a: ValueId, start: usize, len: usize },
    SumAll { a: ValueId },
    MeanAll { a: ValueId },
    SumCols { a: ValueId },
}

struct Node<T: Real> {
    op: Op<T>,
    rows: usize,
    cols: usize,
    data: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, rows: usize, cols: usize, data: Vec<T>, requires_grad: bool) -> ValueId {
        debug_assert_eq!(data.len(), rows * cols);
        debug_assert!(
            kernels::all_finite(&data),
            "non-finite values produced by graph op"
        );
        self.nodes.push(Node { op, rows, cols, data, grad: None, requires_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn node(&self, id: ValueId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn rows(&self, id: ValueId) -> usize {
        self.node(id).rows
    }

    pub fn cols(&self, id: ValueId) -> usize {
        self.node(id).cols
    }

    pub fn shape(&self, id: ValueId) -> Vec<usize> {
        vec![self.node(id).rows, self.node(id).cols]
    }

    pub fn data(&self, id: ValueId) -> &[T] {
        &self.node(id).data
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar(&self, id: ValueId) -> T {
        debug_assert_eq!(self.node(id).data.len(), 1);
        self.node(id).data[0]
    }

    /// Gradient of a node after `backward` (zeros if it did not influence
    /// the loss). `None` if the node does not track gradients.
    pub fn grad(&self, id: ValueId) -> Option<&[T]> {
        self.node(id).grad.as_deref()
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    /// Lease a tensor into the graph, copying its data. Gradient tracking
    /// follows the tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<ValueId> {
        let (r, c) = t.as_2d()?;
        Ok(self.push(Op::Leaf, r, c, t.data().to_vec(), t.requires_grad()))
    }

    /// Non-differentiable leaf from raw data.
    pub fn constant(&mut self, rows: usize, cols: usize, data: &[T]) -> Result<ValueId> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Op::Leaf, rows, cols, data.to_vec(), false))
    }

    pub fn constant_scalar(&mut self, v: T) -> ValueId {
        self.push(Op::Leaf, 1, 1, vec![v], false)
    }

    /// Differentiable leaf from raw data (for tests and probes).
    pub fn var(&mut self, rows: usize, cols: usize, data: &[T]) -> Result<ValueId> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "var",
                lhs: vec![rows, cols],
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(Op::Leaf, rows, cols, data.to_vec(), true))
    }

    // ── Primitives ──────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        if ac != br {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: vec![ar, ac], rhs: vec![br, bc] });
        }
        let data = kernels::matmul(self.data(a), self.data(b), ar, ac, bc);
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::MatMul { a, b }, ar, bc, data, rg))
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = (self.rows(a), self.cols(a));
        let src = self.data(a);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Transpose { a }, c, r, data, rg))
    }

    /// Elementwise add. `b` may also be a single row, broadcast over `a`'s rows.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        if (ar, ac) == (br, bc) {
            let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
            let rg = self.node(a).requires_grad || self.node(b).requires_grad;
            Ok(self.push(Op::Add { a, b }, ar, ac, data, rg))
        } else if br == 1 && bc == ac {
            let mut data = self.data(a).to_vec();
            kernels::add_row_inplace(&mut data, self.data(b));
            let rg = self.node(a).requires_grad || self.node(b).requires_grad;
            Ok(self.push(Op::AddRow { a, bias: b }, ar, ac, data, rg))
        } else {
            Err(Error::ShapeMismatch { op: "add", lhs: vec![ar, ac], rhs: vec![br, bc] })
        }
    }

    /// Elementwise (Hadamard) product, same shapes.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        if (ar, ac) != (br, bc) {
            return Err(Error::ShapeMismatch { op: "mul", lhs: vec![ar, ac], rhs: vec![br, bc] });
        }
        let data: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::Mul { a, b }, ar, ac, data, rg))
    }

    /// Multiply each row of `a` by the matching entry of column vector `scale` `[rows, 1]`.
    pub fn mul_col(&mut self, a: ValueId, scale: ValueId) -> Result<ValueId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (sr, sc) = (self.rows(scale), self.cols(scale));
        if sr != ar || sc != 1 {
            return Err(Error::ShapeMismatch { op: "mul_col", lhs: vec![ar, ac], rhs: vec![sr, sc] });
        }
        let s = self.data(scale).to_vec();
        let data: Vec<T> = self
            .data(a)
            .chunks(ac)
            .zip(&s)
            .flat_map(|(row, &f)| row.iter().map(move |&v| v * f))
            .collect();
        let rg = self.node(a).requires_grad || self.node(scale).requires_grad;
        Ok(self.push(Op::MulCol { a, scale }, ar, ac, data, rg))
    }

    /// `mul * a + add`, scalar coefficients. `scale(a, c)` is `affine(a, c, 0)`.
    pub fn affine(&mut self, a: ValueId, mul: T, add: T) -> ValueId {
        let (r, c) = (self.rows(a), self.cols(a));
        let data: Vec<T> = self.data(a).iter().map(|&x| mul * x + add).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Affine { a, mul }, r, c, data, rg)
    }

    pub fn scale(&mut self, a: ValueId, factor: T) -> ValueId {
        self.affine(a, factor, T::zero())
    }

    pub fn silu(&mut self, a: ValueId) -> ValueId {
        let (r, c) = (self.rows(a), self.cols(a));
        let data: Vec<T> = self.data(a).iter().map(|&x| kernels::silu(x)).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Silu { a }, r, c, data, rg)
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        let (r, c) = (self.rows(a), self.cols(a));
        let data: Vec<T> = self.data(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::Sigmoid { a }, r, c, data, rg)
    }

    /// Row-wise stable softmax.
    pub fn softmax(&mut self, a: ValueId) -> ValueId {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(c) {
            kernels::softmax_row_inplace(row);
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::Softmax { a }, r, c, data, rg)
    }

    /// Row-wise stable log-softmax.
    pub fn log_softmax(&mut self, a: ValueId) -> ValueId {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(c) {
            kernels::log_softmax_row_inplace(row);
        }
        let rg = self.node(a).requires_grad;
        self.push(Op::LogSoftmax { a }, r, c, data, rg)
    }

    /// Elementwise natural log; inputs must be strictly positive.
    pub fn log(&mut self, a: ValueId) -> Result<ValueId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if let Some(&bad) = self.data(a).iter().find(|v| **v <= T::zero()) {
            return Err(Error::Domain { op: "log", msg: format!("nonpositive input {bad}") });
        }
        let data: Vec<T> = self.data(a).iter().map(|&x| x.ln()).collect();
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::Log { a }, r, c, data, rg))
    }

    /// Clamp to `[lo, hi]`. Returns the node and how many entries were clamped.
    pub fn clamp_counted(&mut self, a: ValueId, lo: T, hi: T) -> (ValueId, usize) {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut clamped = 0usize;
        let data: Vec<T> = self
            .data(a)
            .iter()
            .map(|&x| {
                if x < lo {
                    clamped += 1;
                    lo
                } else if x > hi {
                    clamped += 1;
                    hi
                } else {
                    x
                }
            })
            .collect();
        let rg = self.node(a).requires_grad;
        (self.push(Op::Clamp { a, lo, hi }, r, c, data, rg), clamped)
    }

    /// Row-wise layer normalization with learned scale/shift (single rows).
    pub fn layernorm(&mut self, a: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let (r, c) = (self.rows(a), self.cols(a));
        for (id, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.rows(id) != 1 || self.cols(id) != c {
                return Err(Error::ShapeMismatch {
                    op: "layernorm",
                    lhs: vec![r, c],
                    rhs: vec![self.rows(id), self.cols(id)],
                });
            }
            let _ = name;
        }
        let eps = T::from_f64(1e-5);
        let g = self.data(gamma).to_vec();
        let b = self.data(beta).to_vec();
        let mut data = vec![T::zero(); r * c];
        for (i, row) in self.data(a).chunks(c).enumerate() {
            kernels::layernorm_row(row, &g, &b, eps, &mut data[i * c..(i + 1) * c]);
        }
        let rg = self.node(a).requires_grad
            || self.node(gamma).requires_grad
            || self.node(beta).requires_grad;
        Ok(self.push(Op::LayerNorm { a, gamma, beta, eps }, r, c, data, rg))
    }

    /// Gather rows of `table` by token id.
    pub fn embedding(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let (tr, tc) = (self.rows(table), self.cols(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= tr) {
            return Err(Error::Domain {
                op: "embedding",
                msg: format!("id {bad} out of range for table with {tr} rows"),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * tc);
        for &i in ids {
            data.extend_from_slice(&self.data(table)[i * tc..(i + 1) * tc]);
        }
        let rg = self.node(table).requires_grad;
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, ids.len(), tc, data, rg))
    }

    /// Concatenate along the last (column) dimension.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        if ar != br {
            return Err(Error::ShapeMismatch { op: "concat_cols", lhs: vec![ar, ac], rhs: vec![br, bc] });
        }
        let mut data = Vec::with_capacity(ar * (ac + bc));
        for i in 0..ar {
            data.extend_from_slice(&self.data(a)[i * ac..(i + 1) * ac]);
            data.extend_from_slice(&self.data(b)[i * bc..(i + 1) * bc]);
        }
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::ConcatCols { a, b }, ar, ac + bc, data, rg))
    }

    /// Concatenate along the row dimension.
    pub fn concat_rows(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        if ac != bc {
            return Err(Error::ShapeMismatch { op: "concat_rows", lhs: vec![ar, ac], rhs: vec![br, bc] });
        }
        let mut data = Vec::with_capacity((ar + br) * ac);
        data.extend_from_slice(self.data(a));
        data.extend_from_slice(self.data(b));
        let rg = self.node(a).requires_grad || self.node(b).requires_grad;
        Ok(self.push(Op::ConcatRows { a, b }, ar + br, ac, data, rg))
    }

    /// Take a contiguous column range.
    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let (r, c) = (self.rows(a), self.cols(a));
        if start + len > c || len == 0 {
            return Err(Error::ShapeMismatch { op: "slice_cols", lhs: vec![r, c], rhs: vec![start, len] });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.data(a)[i * c + start..i * c + start + len]);
        }
        let rg = self.node(a).requires_grad;
        Ok(self.push(Op::SliceCols { a, start, len }, r, len, data, rg))
    }

    /// Sum of all entries, as a `[1,1]` scalar.
    pub fn sum_all(&mut self, a: ValueId) -> ValueId {
        let s = self.data(a).iter().copied().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::SumAll { a }, 1, 1, vec![s], rg)
    }

    /// Mean of all entries, as a `[1,1]` scalar.
    pub fn mean_all(&mut self, a: ValueId) -> ValueId {
        let n = T::from_f64(self.node(a).data.len() as f64);
        let s: T = self.data(a).iter().copied().sum();
        let rg = self.node(a).requires_grad;
        self.push(Op::MeanAll { a }, 1, 1, vec![s / n], rg)
    }

    /// Row-wise sum, producing a `[rows, 1]` column.
    pub fn sum_cols(&mut self, a: ValueId) -> ValueId {
        let (r, c) = (self.rows(a), self.cols(a));
        let data: Vec<T> = self.data(a).chunks(c).map(|row| row.iter().copied().sum()).collect();
        let rg = self.node(a).requires_grad;
        self.push(Op::SumCols { a }, r, 1, data, rg)
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every gradient-tracking node ends
    /// with a populated gradient (zero if it did not influence the loss).
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let loss_node = self.node(loss);
        if loss_node.rows * loss_node.cols != 1 {
            return Err(Error::NonScalarLoss { shape: vec![loss_node.rows, loss_node.cols] });
        }
        self.consumed = true;

        for node in self.nodes.iter_mut() {
            if node.requires_grad {
                node.grad = Some(vec![T::zero(); node.data.len()]);
            }
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = T::one();
        }

        for idx in (0..self.nodes.len()).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            self.propagate(idx, &op, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: ValueId, contrib: &[T]) {
        if let Some(g) = self.nodes[id.0].grad.as_mut() {
            debug_assert_eq!(g.len(), contrib.len());
            for (dst, &src) in g.iter_mut().zip(contrib) {
                *dst += src;
            }
        }
    }

    fn wants_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.rows(a), self.cols(a));
                let n = self.cols(b);
                if self.wants_grad(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_nt_acc(g, self.data(b), &mut da, m, n, k);
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_tn_acc(self.data(a), g, &mut db, k, m, n);
                    self.add_grad(b, &db);
                }
            }
            Op::Transpose { a } => {
                if self.wants_grad(a) {
                    let (r, c) = (self.rows(a), self.cols(a));
                    // output is [c, r]; transpose g back
                    let mut da = vec![T::zero(); r * c];
                    for i in 0..c {
                        for j in 0..r {
                            da[j * c + i] = g[i * r + j];
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::Add { a, b } => {
                if self.wants_grad(a) {
                    self.add_grad(a, g);
                }
                if self.wants_grad(b) {
                    self.add_grad(b, g);
                }
            }
            Op::AddRow { a, bias } => {
                if self.wants_grad(a) {
                    self.add_grad(a, g);
                }
                if self.wants_grad(bias) {
                    let c = self.cols(bias);
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.add_grad(bias, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.wants_grad(a) {
                    let da: Vec<T> = g.iter().zip(self.data(b)).map(|(&gv, &bv)| gv * bv).collect();
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let db: Vec<T> = g.iter().zip(self.data(a)).map(|(&gv, &av)| gv * av).collect();
                    self.add_grad(b, &db);
                }
            }
            Op::MulCol { a, scale } => {
                let c = self.cols(a);
                if self.wants_grad(a) {
                    let s = self.data(scale);
                    let da: Vec<T> = g
                        .chunks(c)
                        .enumerate()
                        .flat_map(|(i, row)| row.iter().map(move |&v| v * s[i]))
                        .collect();
                    self.add_grad(a, &da);
                }
                if self.wants_grad(scale) {
                    let ds: Vec<T> = g
                        .chunks(c)
                        .zip(self.data(a).chunks(c))
                        .map(|(grow, arow)| kernels::dot(grow, arow))
                        .collect();
                    self.add_grad(scale, &ds);
                }
            }
            Op::Affine { a, mul } => {
                if self.wants_grad(a) {
                    let da: Vec<T> = g.iter().map(|&v| v * mul).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Silu { a } => {
                if self.wants_grad(a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gv, &x)| {
                            let s = kernels::sigmoid(x);
                            gv * s * (T::one() + x * (T::one() - s))
                        })
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Sigmoid { a } => {
                if self.wants_grad(a) {
                    let y = &self.nodes[idx].data;
                    let da: Vec<T> = g.iter().zip(y).map(|(&gv, &s)| gv * s * (T::one() - s)).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Softmax { a } => {
                if self.wants_grad(a) {
                    let c = self.cols(a);
                    let y = &self.nodes[idx].data;
                    let mut da = vec![T::zero(); y.len()];
                    for (row_i, (grow, yrow)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let inner = kernels::dot(grow, yrow);
                        for j in 0..c {
                            da[row_i * c + j] = yrow[j] * (grow[j] - inner);
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::LogSoftmax { a } => {
                if self.wants_grad(a) {
                    let c = self.cols(a);
                    let y = &self.nodes[idx].data;
                    let mut da = vec![T::zero(); y.len()];
                    for (row_i, (grow, yrow)) in g.chunks(c).zip(y.chunks(c)).enumerate() {
                        let gsum: T = grow.iter().copied().sum();
                        for j in 0..c {
                            da[row_i * c + j] = grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::Log { a } => {
                if self.wants_grad(a) {
                    let da: Vec<T> = g.iter().zip(self.data(a)).map(|(&gv, &x)| gv / x).collect();
                    self.add_grad(a, &da);
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.wants_grad(a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.data(a))
                        .map(|(&gv, &x)| if x < lo || x > hi { T::zero() } else { gv })
                        .collect();
                    self.add_grad(a, &da);
                }
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let c = self.cols(a);
                let x = self.data(a).to_vec();
                let gam = self.data(gamma).to_vec();
                let n = T::from_f64(c as f64);
                let mut da = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (row_i, (xrow, grow)) in x.chunks(c).zip(g.chunks(c)).enumerate() {
                    let mut mean = T::zero();
                    for &v in xrow {
                        mean += v;
                    }
                    mean /= n;
                    let mut var = T::zero();
                    for &v in xrow {
                        let d = v - mean;
                        var += d * d;
                    }
                    var /= n;
                    let inv = T::one() / (var + eps).sqrt();
                    // xhat, gxhat and their row means
                    let mut m1 = T::zero(); // mean(gxhat)
                    let mut m2 = T::zero(); // mean(gxhat * xhat)
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * inv;
                        let gx = grow[j] * gam[j];
                        m1 += gx;
                        m2 += gx * xhat;
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                    }
                    m1 /= n;
                    m2 /= n;
                    for j in 0..c {
                        let xhat = (xrow[j] - mean) * inv;
                        let gx = grow[j] * gam[j];
                        da[row_i * c + j] = inv * (gx - m1 - xhat * m2);
                    }
                }
                if self.wants_grad(a) {
                    self.add_grad(a, &da);
                }
                if self.wants_grad(gamma) {
                    self.add_grad(gamma, &dgamma);
                }
                if self.wants_grad(beta) {
                    self.add_grad(beta, &dbeta);
                }
            }
            Op::Embedding { table, ref ids } => {
                if self.wants_grad(table) {
                    let c = self.cols(table);
                    let mut dt = vec![T::zero(); self.nodes[table.0].data.len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..c {
                            dt[id * c + j] += g[r * c + j];
                        }
                    }
                    self.add_grad(table, &dt);
                }
            }
            Op::ConcatCols { a, b } => {
                let (r, ac) = (self.rows(a), self.cols(a));
                let bc = self.cols(b);
                if self.wants_grad(a) {
                    let mut da = vec![T::zero(); r * ac];
                    for i in 0..r {
                        da[i * ac..(i + 1) * ac].copy_from_slice(&g[i * (ac + bc)..i * (ac + bc) + ac]);
                    }
                    self.add_grad(a, &da);
                }
                if self.wants_grad(b) {
                    let mut db = vec![T::zero(); r * bc];
                    for i in 0..r {
                        db[i * bc..(i + 1) * bc]
                            .copy_from_slice(&g[i * (ac + bc) + ac..(i + 1) * (ac + bc)]);
                    }
                    self.add_grad(b, &db);
                }
            }
            Op::ConcatRows { a, b } => {
                let an = self.nodes[a.0].data.len();
                if self.wants_grad(a) {
                    self.add_grad(a, &g[..an]);
                }
                if self.wants_grad(b) {
                    self.add_grad(b, &g[an..]);
                }
            }
            Op::SliceCols { a, start, len } => {
                if self.wants_grad(a) {
                    let (r, c) = (self.rows(a), self.cols(a));
                    let mut da = vec![T::zero(); r * c];
                    for i in 0..r {
                        da[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    self.add_grad(a, &da);
                }
            }
            Op::SumAll { a } => {
                if self.wants_grad(a) {
                    let da = vec![g[0]; self.nodes[a.0].data.len()];
                    self.add_grad(a, &da);
                }
            }
            Op::MeanAll { a } => {
                if self.wants_grad(a) {
                    let n = self.nodes[a.0].data.len();
                    let da = vec![g[0] / T::from_f64(n as f64); n];
                    self.add_grad(a, &da);
                }
            }
            Op::SumCols { a } => {
                if self.wants_grad(a) {
                    let c = self.cols(a);
                    let da: Vec<T> = g.iter().flat_map(|&gv| std::iter::repeat(gv).take(c)).collect();
                    self.add_grad(a, &da);
                }
            }
        }
    }
}
