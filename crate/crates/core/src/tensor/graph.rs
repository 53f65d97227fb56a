//! Tape-recorded tensor operations with reverse-mode differentiation.
//!
//! A [`Graph`] owns every value produced during one forward pass. Each
//! operation appends a node holding its output and, when any input needs a
//! gradient, the record required to push gradients back to its inputs.
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Graph::backward`] is a single reverse sweep.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sqrt(Var),
    /// `ln(max(x, floor))`; zero gradient where the floor is active.
    LnClamped(Var, f64),
    Sum(Var),
    Dot(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    /// Softmax along the last axis. Masked softmax shares the same record:
    /// masked outputs are exactly zero and the backward formula sends them
    /// no gradient.
    Softmax(Var),
    MaskedMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Stack(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Pick(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Confined to one thread; build one per worker.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last [`backward`](Self::backward) loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer matches value shape"),
        )
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push_leaf(Arc::new(value), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers a shared tensor (typically a model parameter) without copying it.
    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.push_leaf(value, requires_grad)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::InvalidArgument(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `m[r, c] + v[c]` for every row `r`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (ms, vs) = (self.shape(m), self.shape(v));
        if ms.len() != 2 || vs.len() != 1 || ms[1] != vs[0] {
            return Err(Error::InvalidArgument(format!(
                "add_row: cannot broadcast {vs:?} over {ms:?}"
            )));
        }
        let cols = ms[1];
        let row = self.data(v);
        let data = self
            .data(m)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + row[i % cols])
            .collect();
        let value = Tensor::new(ms.to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(m, v), &[m, v]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, offset: f64) -> Var {
        self.unary(a, |x| x + offset, Op::AddScalar(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, |x| x.max(floor).ln(), Op::LnClamped(a, floor))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(a), &[a])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "dot: expected rank-1 operands, got {:?}",
                self.shape(a)
            )));
        }
        self.same_shape(a, b, "dot")?;
        let total = dot_slices(self.data(a), self.data(b));
        Ok(self.push(Tensor::scalar(total), Op::Dot(a, b), &[a, b]))
    }

    /// Matrix product. Rank-1 left operands act as row vectors and rank-1
    /// right operands as column vectors; the corresponding output axis is
    /// dropped.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, a_vec) = match sa.as_slice() {
            [k] => (1, *k, true),
            [m, k] => (*m, *k, false),
            _ => return Err(Error::InvalidArgument(format!("matmul: bad lhs {sa:?}"))),
        };
        let (k2, n, b_vec) = match sb.as_slice() {
            [k] => (*k, 1, true),
            [k, n] => (*k, *n, false),
            _ => return Err(Error::InvalidArgument(format!("matmul: bad rhs {sb:?}"))),
        };
        if k != k2 || (a_vec && b_vec) {
            return Err(Error::InvalidArgument(format!(
                "matmul: cannot multiply {sa:?} by {sb:?}"
            )));
        }
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        let shape = match (a_vec, b_vec) {
            (true, false) => vec![n],
            (false, true) => vec![m],
            _ => vec![m, n],
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [r, c] = *self.shape(a) else {
            return Err(Error::InvalidArgument(format!(
                "transpose: expected rank 2, got {:?}",
                self.shape(a)
            )));
        };
        let src = self.data(a);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let cols = *self.shape(a).last().expect("non-empty shape");
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row, None);
        }
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(a), &[a])
    }

    /// Row-wise softmax where masked-out columns (`key_mask[j] == false`) are
    /// treated as `-inf` logits and receive exactly zero weight.
    pub fn masked_softmax(&mut self, a: Var, key_mask: &[bool]) -> Result<Var> {
        let cols = *self.shape(a).last().expect("non-empty shape");
        if key_mask.len() != cols {
            return Err(Error::InvalidArgument(format!(
                "masked_softmax: mask of length {} for {cols} columns",
                key_mask.len()
            )));
        }
        if !key_mask.iter().any(|&k| k) {
            return Err(Error::DegenerateInput(
                "masked_softmax: every position is masked".into(),
            ));
        }
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(cols) {
            softmax_in_place(row, Some(key_mask));
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(a), &[a]))
    }

    /// Column-wise maximum over the rows of `x[r, c]` whose mask entry is true.
    /// Ties resolve to the lowest row index, which also receives the gradient.
    pub fn masked_max_pool(&mut self, x: Var, row_mask: &[bool]) -> Result<Var> {
        let [rows, cols] = *self.shape(x) else {
            return Err(Error::InvalidArgument(format!(
                "masked_max_pool: expected rank 2, got {:?}",
                self.shape(x)
            )));
        };
        if row_mask.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "masked_max_pool: mask of length {} for {rows} rows",
                row_mask.len()
            )));
        }
        let first = row_mask.iter().position(|&m| m).ok_or_else(|| {
            Error::DegenerateInput("masked_max_pool: every position is masked".into())
        })?;
        let src = self.data(x);
        let mut argmax = vec![first; cols];
        let mut best: Vec<f64> = src[first * cols..(first + 1) * cols].to_vec();
        for r in (first + 1)..rows {
            if !row_mask[r] {
                continue;
            }
            for c in 0..cols {
                let v = src[r * cols + c];
                if v > best[c] {
                    best[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let value = Tensor::vector(best);
        Ok(self.push(value, Op::MaskedMaxPool { x, argmax }, &[x]))
    }

    /// Concatenates rank-1 tensors end to end (`axis = 0`), or rank-2
    /// tensors along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat: no inputs".into()))?;
        let rank = self.shape(first).len();
        if parts.iter().any(|&p| self.shape(p).len() != rank) || axis >= rank || rank > 2 {
            return Err(Error::InvalidArgument(format!(
                "concat: incompatible ranks or axis {axis}"
            )));
        }
        let value = if rank == 1 || axis == 0 {
            if rank == 2 {
                let cols = self.shape(first)[1];
                if parts.iter().any(|&p| self.shape(p)[1] != cols) {
                    return Err(Error::InvalidArgument("concat: column counts differ".into()));
                }
            }
            let data: Vec<f64> = parts.iter().flat_map(|&p| self.data(p).to_vec()).collect();
            let mut shape = self.shape(first).to_vec();
            shape[0] = parts.iter().map(|&p| self.shape(p)[0]).sum();
            Tensor::new(shape, data)?
        } else {
            let rows = self.shape(first)[0];
            if parts.iter().any(|&p| self.shape(p)[0] != rows) {
                return Err(Error::InvalidArgument("concat: row counts differ".into()));
            }
            let total_cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
            let mut data = Vec::with_capacity(rows * total_cols);
            for r in 0..rows {
                for &p in parts {
                    let c = self.shape(p)[1];
                    data.extend_from_slice(&self.data(p)[r * c..(r + 1) * c]);
                }
            }
            Tensor::new(vec![rows, total_cols], data)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Stacks equal-length rank-1 tensors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = *rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack: no inputs".into()))?;
        let shape = self.shape(first).to_vec();
        if shape.len() != 1 || rows.iter().any(|&r| self.shape(r) != shape.as_slice()) {
            return Err(Error::InvalidArgument(
                "stack: inputs must be rank-1 tensors of equal length".into(),
            ));
        }
        let data: Vec<f64> = rows.iter().flat_map(|&r| self.data(r).to_vec()).collect();
        let value = Tensor::new(vec![rows.len(), shape[0]], data)?;
        Ok(self.push(value, Op::Stack(rows.to_vec()), rows))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().expect("non-empty shape");
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::InvalidArgument(format!(
                "layer_norm: gain/bias must have shape [{cols}]"
            )));
        }
        let src = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let mut out = Vec::with_capacity(src.len());
        let mut normalized = Vec::with_capacity(src.len());
        let mut inv_std = Vec::with_capacity(src.len() / cols);
        for row in src.chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * inv;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Element `index` of a rank-1 tensor as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = *self.data(a).get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("pick: index {index} out of bounds"))
        })?;
        Ok(self.push(Tensor::scalar(v), Op::Pick(a, index), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[a.0].value.as_ref().clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// `x W + b` for `x` of shape `[in]` or `[rows, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        if self.shape(y).len() == 1 {
            self.add(y, bias)
        } else {
            self.add_row(y, bias)
        }
    }

    /// Scaled dot-product attention `softmax(Q Kᵀ / √d) V` where masked keys
    /// get `-inf` logits.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, key_mask: &[bool]) -> Result<Var> {
        let d = *self.shape(q).last().expect("non-empty shape");
        let kt = self.transpose(k)?;
        let logits = self.matmul(q, kt)?;
        let scaled = self.scale(logits, 1.0 / (d as f64).sqrt());
        let weights = self.masked_softmax(scaled, key_mask)?;
        self.matmul(weights, v)
    }

    /// Reverse sweep from a scalar `loss`. Gradients from several paths into
    /// the same node are summed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |j| g[j]);
                self.accumulate(grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |j| g[j]);
                self.accumulate(grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |j| g[j] * db[j]);
                self.accumulate(grads, *b, |j| g[j] * da[j]);
            }
            Op::Div(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |j| g[j] / db[j]);
                self.accumulate(grads, *b, |j| -g[j] * da[j] / (db[j] * db[j]));
            }
            Op::AddRow(m, v) => {
                self.accumulate(grads, *m, |j| g[j]);
                let cols = self.shape(*v)[0];
                let mut col_sums = vec![0.0; cols];
                for (j, &x) in g.iter().enumerate() {
                    col_sums[j % cols] += x;
                }
                self.accumulate(grads, *v, |j| col_sums[j]);
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, |j| g[j] * f),
            Op::AddScalar(a) => self.accumulate(grads, *a, |j| g[j]),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |j| g[j] * out[j] * (1.0 - out[j])),
            Op::Tanh(a) => self.accumulate(grads, *a, |j| g[j] * (1.0 - out[j] * out[j])),
            Op::Relu(a) => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |j| if x[j] > 0.0 { g[j] } else { 0.0 });
            }
            Op::Sqrt(a) => self.accumulate(grads, *a, |j| g[j] * 0.5 / out[j]),
            Op::LnClamped(a, floor) => {
                let x = self.data(*a);
                self.accumulate(grads, *a, |j| if x[j] > *floor { g[j] / x[j] } else { 0.0 });
            }
            Op::Sum(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::Dot(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |j| g[0] * db[j]);
                self.accumulate(grads, *b, |j| g[0] * da[j]);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.nodes[a.0].requires_grad {
                    let bd = self.data(*b);
                    let mut ga = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] = dot_slices(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                    self.accumulate(grads, *a, |j| ga[j]);
                }
                if self.nodes[b.0].requires_grad {
                    let ad = self.data(*a);
                    let mut gb = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *dst += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, |j| gb[j]);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                // output is [c, r]; input index (row, col) = j maps to output (col, row)
                self.accumulate(grads, *a, |j| g[(j % c) * r + j / c]);
            }
            Op::Softmax(a) => {
                let cols = *node.value.shape().last().unwrap();
                let mut ga = vec![0.0; g.len()];
                for ((grow, yrow), dst) in g
                    .chunks(cols)
                    .zip(out.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let inner = dot_slices(grow, yrow);
                    for j in 0..cols {
                        dst[j] = yrow[j] * (grow[j] - inner);
                    }
                }
                self.accumulate(grads, *a, |j| ga[j]);
            }
            Op::MaskedMaxPool { x, argmax } => {
                let cols = argmax.len();
                let mut gx = vec![0.0; self.data(*x).len()];
                for (c, &r) in argmax.iter().enumerate() {
                    gx[r * cols + c] += g[c];
                }
                self.accumulate(grads, *x, |j| gx[j]);
            }
            Op::Concat { parts, axis } => {
                let rank = node.value.shape().len();
                if rank == 1 || *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.data(p).len();
                        self.accumulate(grads, p, |j| g[offset + j]);
                        offset += len;
                    }
                } else {
                    let total = node.value.shape()[1];
                    let mut col_offset = 0;
                    for &p in parts {
                        let c = self.shape(p)[1];
                        self.accumulate(grads, p, |j| g[(j / c) * total + col_offset + j % c]);
                        col_offset += c;
                    }
                }
            }
            Op::Stack(rows) => {
                let len = self.data(rows[0]).len();
                for (r, &p) in rows.iter().enumerate() {
                    self.accumulate(grads, p, |j| g[r * len + j]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let cols = self.shape(*gain)[0];
                let gv = self.data(*gain);
                let mut gx = vec![0.0; g.len()];
                let mut ggain = vec![0.0; cols];
                let mut gbias = vec![0.0; cols];
                for (r, inv) in inv_std.iter().enumerate() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let xh = &normalized[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..cols {
                        let d = grow[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        ggain[j] += grow[j] * xh[j];
                        gbias[j] += grow[j];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for j in 0..cols {
                        let d = grow[j] * gv[j];
                        gx[r * cols + j] = inv * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                self.accumulate(grads, *x, |j| gx[j]);
                self.accumulate(grads, *gain, |j| ggain[j]);
                self.accumulate(grads, *bias, |j| gbias[j]);
            }
            Op::Pick(a, index) => {
                let index = *index;
                self.accumulate(grads, *a, |j| if j == index { g[0] } else { 0.0 });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |j| g[j]),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: Var, f: impl Fn(usize) -> f64) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let len = self.nodes[target.0].value.len();
        match &mut grads[target.0] {
            Some(buf) => buf.iter_mut().enumerate().for_each(|(j, x)| *x += f(j)),
            slot @ None => *slot = Some((0..len).map(f).collect()),
        }
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

/// Numerically stable softmax; masked entries become exactly zero.
pub fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let keep = |j: usize| mask.map_or(true, |m| m[j]);
    let max = (0..row.len())
        .filter(|&j| keep(j))
        .map(|j| row[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for j in 0..row.len() {
        row[j] = if keep(j) { (row[j] - max).exp() } else { 0.0 };
        total += row[j];
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

pub fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let dst = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in dst.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> Var {
        g.leaf(Tensor::vector(v.to_vec()), true)
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0]);
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).data(), &[0.5]);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.25]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0, 0.0]);
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn product_rule() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[2.0]);
        let b = vec_leaf(&mut g, &[3.0]);
        let p = g.mul(a, b).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[3.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, -1.0, 0.5]);
        let c = g.concat(&[a, a], 0).unwrap();
        let loss = g.sum(c);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_invalid_argument() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        let b = vec_leaf(&mut g, &[1.0, 2.0, 3.0]);
        assert!(matches!(g.add(a, b), Err(Error::InvalidArgument(_))));
        assert!(matches!(g.matmul(a, b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn all_masked_pool_is_degenerate() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            g.masked_max_pool(x, &[false, false]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            g.masked_softmax(x, &[false, false, false]),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let mut g = Graph::new();
        let x = g.leaf(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 2.0], vec![9.0, 9.0]]).unwrap(),
            true,
        );
        let p = g.masked_max_pool(x, &[true, true, false]).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0]);
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(
            g.grad(x).unwrap().data(),
            &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(a), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constants_record_no_ops() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let b = g.tanh(a);
        assert!(!g.requires_grad(b));
        g.backward(b).unwrap();
        assert!(g.grad(a).is_none());
    }
}
