//! Reverse-mode record over batched hyper-dual tensors.
//!
//! Every node holds a `rows × cols` tensor with either one channel (plain
//! values) or three channels (value, first and second derivative with respect
//! to the scalar network input). The reverse sweep propagates adjoints for all
//! three channels, so parameter gradients flow through `ẋ` and `γ̈` as well as
//! through values.
//!
//! Storage is channel-major: the value block, then the `d1` block, then the
//! `d2` block, each row-major. Linear layers therefore act on all channels of
//! a batch with a single matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Self {
            rows,
            cols,
            channels,
            data: vec![0.0; channels * rows * cols],
        }
    }

    /// Single-channel tensor from row-major values.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "shape does not match data");
        Self {
            rows,
            cols,
            channels: 1,
            data: values,
        }
    }

    /// Three-channel tensor from value, first and second derivative blocks.
    pub fn from_channels(rows: usize, cols: usize, value: Vec<f64>, d1: Vec<f64>, d2: Vec<f64>) -> Self {
        let b = rows * cols;
        assert!(value.len() == b && d1.len() == b && d2.len() == b, "shape does not match data");
        let mut data = value;
        data.extend(d1);
        data.extend(d2);
        Self {
            rows,
            cols,
            channels: 3,
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_values(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn block(&self) -> usize {
        self.rows * self.cols
    }

    /// Row-major entries of channel `c` (0 = value, 1 = d1, 2 = d2).
    pub fn chan(&self, c: usize) -> &[f64] {
        let b = self.block();
        &self.data[c * b..(c + 1) * b]
    }

    fn chan_mut(&mut self, c: usize) -> &mut [f64] {
        let b = self.block();
        &mut self.data[c * b..(c + 1) * b]
    }

    pub fn get(&self, c: usize, r: usize, j: usize) -> f64 {
        if c >= self.channels {
            return 0.0;
        }
        self.data[c * self.block() + r * self.cols + j]
    }

    pub fn value(&self, r: usize, j: usize) -> f64 {
        self.get(0, r, j)
    }

    pub fn row(&self, c: usize, r: usize) -> &[f64] {
        let start = c * self.block() + r * self.cols;
        &self.data[start..start + self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn stacked(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.channels * self.rows, self.cols), &self.data)
            .expect("tensor storage is contiguous")
    }

    fn stacked_mut(&mut self) -> ArrayViewMut2<'_, f64> {
        ArrayViewMut2::from_shape((self.channels * self.rows, self.cols), &mut self.data)
            .expect("tensor storage is contiguous")
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param { offset: usize },
    SeedTime(NodeId),
    Linear { x: NodeId, offset: usize, out: usize, inp: usize },
    Tanh(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Recip(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId, f64),
    Channel(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Concat(Vec<NodeId>),
    SumCols(NodeId),
    BatchMatMul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    SumSquares(NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Computation record: an append-only list of primitive operations.
///
/// Nodes are created in topological order, so the reverse sweep simply walks
/// the list backwards.
pub struct Tape<'p> {
    params: &'p [f64],
    nodes: Vec<Node>,
    loss: Option<NodeId>,
}

fn bdim(a: usize, b: usize) -> Option<usize> {
    match (a, b) {
        _ if a == b => Some(a),
        (1, _) => Some(b),
        (_, 1) => Some(a),
        _ => None,
    }
}

#[inline]
fn bidx(t: &Tensor, r: usize, j: usize) -> usize {
    let r = if t.rows == 1 { 0 } else { r };
    let j = if t.cols == 1 { 0 } else { j };
    r * t.cols + j
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [f64]) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            loss: None,
        }
    }

    pub fn params(&self) -> &'p [f64] {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Value channel of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.value(0, 0)
    }

    fn push(&mut self, op: Op) -> NodeId {
        let value = self.compute(&op);
        self.loss = None;
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    // ---- leaves -------------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.loss = None;
        self.nodes.push(Node {
            op: Op::Const,
            value: t,
        });
        self.nodes.len() - 1
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// A `rows × cols` single-channel view of `params[offset..]`.
    pub fn param(&mut self, offset: usize, rows: usize, cols: usize) -> Result<NodeId> {
        if offset + rows * cols > self.params.len() {
            return Err(Error::usage("parameter slice out of range"));
        }
        self.loss = None;
        let value = Tensor::from_values(
            rows,
            cols,
            self.params[offset..offset + rows * cols].to_vec(),
        );
        self.nodes.push(Node {
            op: Op::Param { offset },
            value,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Column of scalar times seeded as independent variables `(t, 1, 0)`.
    pub fn time_input(&mut self, times: &[f64]) -> NodeId {
        let c = self.constant(Tensor::from_values(times.len(), 1, times.to_vec()));
        self.seed_time(c)
    }

    /// Reinterprets a single-channel node as the independent variable.
    pub fn seed_time(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SeedTime(x))
    }

    // ---- layers and elementwise ops ----------------------------------------

    /// `y = x Wᵀ + b` with `W` (`out × inp`, row-major) followed by `b` (`out`)
    /// stored contiguously at `offset`.
    pub fn linear(&mut self, x: NodeId, offset: usize, inp: usize, out: usize) -> Result<NodeId> {
        if self.nodes[x].value.cols != inp {
            return Err(Error::usage(format!(
                "linear layer expects {inp} inputs, got {}",
                self.nodes[x].value.cols
            )));
        }
        if offset + out * inp + out > self.params.len() {
            return Err(Error::usage("linear layer parameters out of range"));
        }
        Ok(self.push(Op::Linear { x, offset, out, inp }))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Tanh(x))
    }

    fn check_broadcast(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if bdim(ta.rows, tb.rows).is_none() || bdim(ta.cols, tb.cols).is_none() {
            return Err(Error::usage(format!(
                "{what}: incompatible shapes {}x{} and {}x{}",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast(a, b, "add")?;
        Ok(self.push(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_broadcast(a, b, "mul")?;
        Ok(self.push(Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let r = self.recip(b);
        self.mul(a, r)
    }

    pub fn recip(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Recip(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Square(x))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        self.push(Op::Scale(x, k))
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.scale(x, -1.0)
    }

    pub fn add_const(&mut self, x: NodeId, k: f64) -> NodeId {
        self.push(Op::AddConst(x, k))
    }

    /// Channel `c` of `x` as a plain single-channel node.
    pub fn channel(&mut self, x: NodeId, c: usize) -> Result<NodeId> {
        if c >= self.nodes[x].value.channels && c != 0 {
            return Err(Error::usage(format!(
                "node has {} channel(s); channel {c} requested",
                self.nodes[x].value.channels
            )));
        }
        Ok(self.push(Op::Channel(x, c)))
    }

    /// Selects columns by index (duplicates allowed).
    pub fn gather(&mut self, x: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let n = self.nodes[x].value.cols;
        if cols.iter().any(|&c| c >= n) {
            return Err(Error::usage("gather index out of range"));
        }
        Ok(self.push(Op::Gather(x, cols)))
    }

    pub fn cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.gather(x, (start..start + len).collect())
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let rows = parts
            .first()
            .map(|&p| self.nodes[p].value.rows)
            .ok_or_else(|| Error::usage("concat of nothing"))?;
        if parts.iter().any(|&p| self.nodes[p].value.rows != rows) {
            return Err(Error::usage("concat: row counts differ"));
        }
        Ok(self.push(Op::Concat(parts)))
    }

    pub fn sum_cols(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumCols(x))
    }

    /// Per-row product of `m × k` and `k × n` matrices stored row-major in
    /// each row of `a` and `b`. A single-row operand is shared by all rows.
    pub fn batch_matmul(
        &mut self,
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
        if ta.cols != m * k || tb.cols != k * n {
            return Err(Error::usage(format!(
                "batch_matmul: operands have {} and {} columns, expected {} and {}",
                ta.cols,
                tb.cols,
                m * k,
                k * n
            )));
        }
        if bdim(ta.rows, tb.rows).is_none() {
            return Err(Error::usage("batch_matmul: row counts differ"));
        }
        Ok(self.push(Op::BatchMatMul { a, b, m, k, n }))
    }

    /// Per-row transpose of an `m × n` matrix.
    pub fn transpose(&mut self, x: NodeId, m: usize, n: usize) -> Result<NodeId> {
        let idx = (0..n)
            .flat_map(|j| (0..m).map(move |i| i * n + j))
            .collect();
        self.gather(x, idx)
    }

    /// Per-row trace of an `n × n` matrix.
    pub fn trace(&mut self, x: NodeId, n: usize) -> Result<NodeId> {
        let d = self.gather(x, (0..n).map(|i| i * n + i).collect())?;
        Ok(self.sum_cols(d))
    }

    /// `Σ value²` over every entry, as a `1 × 1` node.
    pub fn sum_squares(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumSquares(x))
    }

    /// `Σ value` over every entry, as a `1 × 1` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum(x))
    }

    // ---- forward ------------------------------------------------------------

    fn compute(&self, op: &Op) -> Tensor {
        let v = |id: NodeId| &self.nodes[id].value;
        match op {
            Op::Const => unreachable!("leaves are stored, not computed"),
            Op::Param { offset } => {
                let _ = offset;
                unreachable!("leaves are stored, not computed")
            }
            Op::SeedTime(x) => {
                let x = v(*x);
                let mut out = Tensor::zeros(x.rows, x.cols, 3);
                out.chan_mut(0).copy_from_slice(x.chan(0));
                out.chan_mut(1).fill(1.0);
                out
            }
            Op::Linear { x, offset, out, inp } => {
                let x = v(*x);
                let w = ArrayView2::from_shape(
                    (*out, *inp),
                    &self.params[*offset..*offset + out * inp],
                )
                .expect("weight slice");
                let bias = &self.params[offset + out * inp..offset + out * inp + out];
                let mut y = Tensor::zeros(x.rows, *out, x.channels);
                general_mat_mul(1.0, &x.stacked(), &w.t(), 0.0, &mut y.stacked_mut());
                for row in y.chan_mut(0).chunks_exact_mut(*out) {
                    for (yi, bi) in row.iter_mut().zip(bias) {
                        *yi += bi;
                    }
                }
                y
            }
            Op::Tanh(x) => {
                let x = v(*x);
                let mut y = Tensor::zeros(x.rows, x.cols, x.channels);
                let n = x.block();
                if x.channels == 1 {
                    for (yi, xi) in y.data.iter_mut().zip(&x.data) {
                        *yi = xi.tanh();
                    }
                } else {
                    let (xv, rest) = x.data.split_at(n);
                    let (xa, xb) = rest.split_at(n);
                    let (yv, rest) = y.data.split_at_mut(n);
                    let (ya, yb) = rest.split_at_mut(n);
                    for i in 0..n {
                        let t = xv[i].tanh();
                        let s = 1.0 - t * t;
                        yv[i] = t;
                        ya[i] = s * xa[i];
                        yb[i] = s * xb[i] - 2.0 * t * s * xa[i] * xa[i];
                    }
                }
                y
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Add(..)) { 1.0 } else { -1.0 };
                let (a, b) = (v(*a), v(*b));
                let rows = bdim(a.rows, b.rows).unwrap();
                let cols = bdim(a.cols, b.cols).unwrap();
                let ch = a.channels.max(b.channels);
                let mut y = Tensor::zeros(rows, cols, ch);
                for c in 0..ch {
                    for r in 0..rows {
                        for j in 0..cols {
                            let av = if c < a.channels { a.chan(c)[bidx(a, r, j)] } else { 0.0 };
                            let bv = if c < b.channels { b.chan(c)[bidx(b, r, j)] } else { 0.0 };
                            y.chan_mut(c)[r * cols + j] = av + sign * bv;
                        }
                    }
                }
                y
            }
            Op::Mul(a, b) => {
                let (a, b) = (v(*a), v(*b));
                let rows = bdim(a.rows, b.rows).unwrap();
                let cols = bdim(a.cols, b.cols).unwrap();
                let ch = a.channels.max(b.channels);
                let mut y = Tensor::zeros(rows, cols, ch);
                let bs = rows * cols;
                for r in 0..rows {
                    for j in 0..cols {
                        let (ia, ib) = (bidx(a, r, j), bidx(b, r, j));
                        let o = r * cols + j;
                        let (av, bv) = (a.chan(0)[ia], b.chan(0)[ib]);
                        y.data[o] = av * bv;
                        if ch == 3 {
                            let a1 = if a.channels == 3 { a.chan(1)[ia] } else { 0.0 };
                            let a2 = if a.channels == 3 { a.chan(2)[ia] } else { 0.0 };
                            let b1 = if b.channels == 3 { b.chan(1)[ib] } else { 0.0 };
                            let b2 = if b.channels == 3 { b.chan(2)[ib] } else { 0.0 };
                            y.data[bs + o] = av * b1 + a1 * bv;
                            y.data[2 * bs + o] = av * b2 + 2.0 * a1 * b1 + a2 * bv;
                        }
                    }
                }
                y
            }
            Op::Recip(x) => {
                let x = v(*x);
                let mut y = Tensor::zeros(x.rows, x.cols, x.channels);
                let n = x.block();
                for i in 0..n {
                    let r = 1.0 / x.data[i];
                    y.data[i] = r;
                    if x.channels == 3 {
                        let (a, b) = (x.data[n + i], x.data[2 * n + i]);
                        y.data[n + i] = -a * r * r;
                        y.data[2 * n + i] = -b * r * r + 2.0 * a * a * r * r * r;
                    }
                }
                y
            }
            Op::Square(x) => {
                let x = v(*x);
                let mut y = Tensor::zeros(x.rows, x.cols, x.channels);
                let n = x.block();
                for i in 0..n {
                    let xv = x.data[i];
                    y.data[i] = xv * xv;
                    if x.channels == 3 {
                        let (a, b) = (x.data[n + i], x.data[2 * n + i]);
                        y.data[n + i] = 2.0 * xv * a;
                        y.data[2 * n + i] = 2.0 * xv * b + 2.0 * a * a;
                    }
                }
                y
            }
            Op::Scale(x, k) => {
                let x = v(*x);
                let mut y = x.clone();
                y.data.iter_mut().for_each(|e| *e *= k);
                y
            }
            Op::AddConst(x, k) => {
                let x = v(*x);
                let mut y = x.clone();
                y.chan_mut(0).iter_mut().for_each(|e| *e += k);
                y
            }
            Op::Channel(x, c) => {
                let x = v(*x);
                let mut y = Tensor::zeros(x.rows, x.cols, 1);
                if *c < x.channels {
                    y.data.copy_from_slice(x.chan(*c));
                }
                y
            }
            Op::Gather(x, idx) => {
                let x = v(*x);
                let mut y = Tensor::zeros(x.rows, idx.len(), x.channels);
                for c in 0..x.channels {
                    for r in 0..x.rows {
                        let src = x.row(c, r);
                        let dst = &mut y.chan_mut(c)[r * idx.len()..(r + 1) * idx.len()];
                        for (d, &i) in dst.iter_mut().zip(idx) {
                            *d = src[i];
                        }
                    }
                }
                y
            }
            Op::Concat(parts) => {
                let rows = v(parts[0]).rows;
                let cols: usize = parts.iter().map(|&p| v(p).cols).sum();
                let ch = parts.iter().map(|&p| v(p).channels).max().unwrap();
                let mut y = Tensor::zeros(rows, cols, ch);
                let mut start = 0;
                for &p in parts {
                    let t = v(p);
                    for c in 0..t.channels {
                        for r in 0..rows {
                            y.chan_mut(c)[r * cols + start..r * cols + start + t.cols]
                                .copy_from_slice(t.row(c, r));
                        }
                    }
                    start += t.cols;
                }
                y
            }
            Op::SumCols(x) => {
                let x = v(*x);
                let mut y = Tensor::zeros(x.rows, 1, x.channels);
                for c in 0..x.channels {
                    for r in 0..x.rows {
                        y.chan_mut(c)[r] = x.row(c, r).iter().sum();
                    }
                }
                y
            }
            Op::BatchMatMul { a, b, m, k, n } => {
                let (a, b) = (v(*a), v(*b));
                let rows = bdim(a.rows, b.rows).unwrap();
                let ch = a.channels.max(b.channels);
                let mut y = Tensor::zeros(rows, m * n, ch);
                for r in 0..rows {
                    let ra = if a.rows == 1 { 0 } else { r };
                    let rb = if b.rows == 1 { 0 } else { r };
                    // channel pairs (ca, cb, coefficient) contributing to output channel c
                    for c in 0..ch {
                        let terms: &[(usize, usize, f64)] = match c {
                            0 => &[(0, 0, 1.0)],
                            1 => &[(0, 1, 1.0), (1, 0, 1.0)],
                            _ => &[(0, 2, 1.0), (1, 1, 2.0), (2, 0, 1.0)],
                        };
                        let out = &mut y.chan_mut(c)[r * m * n..(r + 1) * m * n];
                        for &(ca, cb, coef) in terms {
                            if ca >= a.channels || cb >= b.channels {
                                continue;
                            }
                            let am = a.row(ca, ra);
                            let bm = b.row(cb, rb);
                            for i in 0..*m {
                                for l in 0..*k {
                                    let ail = coef * am[i * k + l];
                                    if ail == 0.0 {
                                        continue;
                                    }
                                    for j in 0..*n {
                                        out[i * n + j] += ail * bm[l * n + j];
                                    }
                                }
                            }
                        }
                    }
                }
                y
            }
            Op::SumSquares(x) => {
                let x = v(*x);
                Tensor::scalar(x.chan(0).iter().map(|e| e * e).sum())
            }
            Op::Sum(x) => Tensor::scalar(v(*x).chan(0).iter().sum()),
        }
    }

    /// Recomputes every node from the leaves using `params`.
    pub fn replay(&mut self, params: &'p [f64]) {
        self.params = params;
        for i in 0..self.nodes.len() {
            match self.nodes[i].op {
                Op::Const => {}
                Op::Param { offset } => {
                    let t = &mut self.nodes[i].value;
                    let len = t.data.len();
                    t.data.copy_from_slice(&params[offset..offset + len]);
                }
                _ => {
                    let op = self.nodes[i].op.clone();
                    self.nodes[i].value = self.compute(&op);
                }
            }
        }
    }

    // ---- reverse sweep ------------------------------------------------------

    /// Marks `loss` (a `1 × 1` node) as the output of this record.
    pub fn finalize(&mut self, loss: NodeId) -> Result<()> {
        let t = &self.nodes[loss].value;
        if t.rows != 1 || t.cols != 1 {
            return Err(Error::usage(format!(
                "loss node must be 1x1, got {}x{}",
                t.rows, t.cols
            )));
        }
        self.loss = Some(loss);
        Ok(())
    }

    pub fn loss(&self) -> Option<NodeId> {
        self.loss
    }

    /// Gradient of the finalized loss with respect to every parameter.
    pub fn gradient(&self) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_gradient(&mut grad)?;
        Ok(grad)
    }

    /// Adds the loss gradient into `grad`.
    pub fn accumulate_gradient(&self, grad: &mut [f64]) -> Result<()> {
        let loss = self
            .loss
            .ok_or_else(|| Error::usage("record has not been finalized with a loss node"))?;
        if grad.len() != self.params.len() {
            return Err(Error::usage("gradient buffer length differs from parameters"));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; loss + 1];
        let mut seed = Tensor::zeros(1, 1, 1);
        seed.data[0] = 1.0;
        adj[loss] = Some(seed);
        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.backward_node(id, &g, &mut adj, grad);
        }
        Ok(())
    }

    fn backward_node(&self, id: NodeId, g: &Tensor, adj: &mut [Option<Tensor>], grad: &mut [f64]) {
        let nodes = &self.nodes;
        let val = |i: NodeId| &nodes[i].value;
        fn slot<'a>(adj: &'a mut [Option<Tensor>], nodes: &[Node], i: NodeId) -> &'a mut Tensor {
            adj[i].get_or_insert_with(|| {
                let t = &nodes[i].value;
                Tensor::zeros(t.rows, t.cols, t.channels)
            })
        }
        match &nodes[id].op {
            Op::Const => {}
            Op::Param { offset } => {
                for (gi, a) in grad[*offset..*offset + g.block()].iter_mut().zip(g.chan(0)) {
                    *gi += a;
                }
            }
            Op::SeedTime(x) => {
                let ax = slot(adj, nodes, *x);
                for (d, s) in ax.chan_mut(0).iter_mut().zip(g.chan(0)) {
                    *d += s;
                }
            }
            Op::Linear { x, offset, out, inp } => {
                let xt = val(*x);
                let w = ArrayView2::from_shape(
                    (*out, *inp),
                    &self.params[*offset..*offset + out * inp],
                )
                .expect("weight slice");
                let gs = g.stacked();
                {
                    let mut gw = ArrayViewMut2::from_shape(
                        (*out, *inp),
                        &mut grad[*offset..*offset + out * inp],
                    )
                    .expect("weight grad slice");
                    general_mat_mul(1.0, &gs.t(), &xt.stacked(), 1.0, &mut gw);
                }
                let gb = &mut grad[offset + out * inp..offset + out * inp + out];
                for row in g.chan(0).chunks_exact(*out) {
                    for (b, r) in gb.iter_mut().zip(row) {
                        *b += r;
                    }
                }
                let ax = slot(adj, nodes, *x);
                general_mat_mul(1.0, &gs, &w, 1.0, &mut ax.stacked_mut());
            }
            Op::Tanh(x) => {
                let xt = val(*x);
                let y = &nodes[id].value;
                let n = xt.block();
                let ax = slot(adj, nodes, *x);
                if xt.channels == 1 {
                    for i in 0..n {
                        let t = y.data[i];
                        ax.data[i] += g.data[i] * (1.0 - t * t);
                    }
                } else {
                    for i in 0..n {
                        let t = y.data[i];
                        let s = 1.0 - t * t;
                        let (a, b) = (xt.data[n + i], xt.data[2 * n + i]);
                        let (gv, g1, g2) = (g.data[i], g.data[n + i], g.data[2 * n + i]);
                        let ds = -2.0 * t * s; // d s / d v
                        let dts = s * (1.0 - 3.0 * t * t); // d (t s) / d v
                        ax.data[i] += gv * s + g1 * a * ds + g2 * (b * ds - 2.0 * a * a * dts);
                        ax.data[n + i] += g1 * s - g2 * 4.0 * t * s * a;
                        ax.data[2 * n + i] += g2 * s;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[id].op, Op::Add(..)) { 1.0 } else { -1.0 };
                for (node, s) in [(*a, 1.0), (*b, sign)] {
                    let t = val(node);
                    let ax = slot(adj, nodes, node);
                    for c in 0..t.channels.min(g.channels) {
                        for r in 0..g.rows {
                            for j in 0..g.cols {
                                let dst = bidx(t, r, j);
                                ax.chan_mut(c)[dst] += s * g.chan(c)[r * g.cols + j];
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ch = g.channels;
                let bs = g.block();
                let mut ga = Tensor::zeros(ta.rows, ta.cols, ta.channels);
                let mut gb = Tensor::zeros(tb.rows, tb.cols, tb.channels);
                for r in 0..g.rows {
                    for j in 0..g.cols {
                        let (ia, ib) = (bidx(ta, r, j), bidx(tb, r, j));
                        let o = r * g.cols + j;
                        let gv = g.data[o];
                        let (g1, g2) = if ch == 3 {
                            (g.data[bs + o], g.data[2 * bs + o])
                        } else {
                            (0.0, 0.0)
                        };
                        let get = |t: &Tensor, c: usize, i: usize| {
                            if c < t.channels {
                                t.chan(c)[i]
                            } else {
                                0.0
                            }
                        };
                        let (av, a1, a2) = (get(ta, 0, ia), get(ta, 1, ia), get(ta, 2, ia));
                        let (bv, b1, b2) = (get(tb, 0, ib), get(tb, 1, ib), get(tb, 2, ib));
                        ga.chan_mut(0)[ia] += gv * bv + g1 * b1 + g2 * b2;
                        gb.chan_mut(0)[ib] += gv * av + g1 * a1 + g2 * a2;
                        if ta.channels == 3 {
                            ga.chan_mut(1)[ia] += g1 * bv + 2.0 * g2 * b1;
                            ga.chan_mut(2)[ia] += g2 * bv;
                        }
                        if tb.channels == 3 {
                            gb.chan_mut(1)[ib] += g1 * av + 2.0 * g2 * a1;
                            gb.chan_mut(2)[ib] += g2 * av;
                        }
                    }
                }
                add_into(slot(adj, nodes, *a), &ga);
                add_into(slot(adj, nodes, *b), &gb);
            }
            Op::Recip(x) => {
                let xt = val(*x);
                let n = xt.block();
                let ax = slot(adj, nodes, *x);
                for i in 0..n {
                    let r = 1.0 / xt.data[i];
                    let (r2, r3) = (r * r, r * r * r);
                    if xt.channels == 1 {
                        ax.data[i] += -g.data[i] * r2;
                    } else {
                        let (a, b) = (xt.data[n + i], xt.data[2 * n + i]);
                        let (gv, g1, g2) = (g.data[i], g.data[n + i], g.data[2 * n + i]);
                        ax.data[i] += -gv * r2
                            + g1 * 2.0 * a * r3
                            + g2 * (2.0 * b * r3 - 6.0 * a * a * r3 * r);
                        ax.data[n + i] += -g1 * r2 + g2 * 4.0 * a * r3;
                        ax.data[2 * n + i] += -g2 * r2;
                    }
                }
            }
            Op::Square(x) => {
                let xt = val(*x);
                let n = xt.block();
                let ax = slot(adj, nodes, *x);
                for i in 0..n {
                    let xv = xt.data[i];
                    if xt.channels == 1 {
                        ax.data[i] += 2.0 * xv * g.data[i];
                    } else {
                        let (a, b) = (xt.data[n + i], xt.data[2 * n + i]);
                        let (gv, g1, g2) = (g.data[i], g.data[n + i], g.data[2 * n + i]);
                        ax.data[i] += 2.0 * (xv * gv + a * g1 + b * g2);
                        ax.data[n + i] += 2.0 * xv * g1 + 4.0 * a * g2;
                        ax.data[2 * n + i] += 2.0 * xv * g2;
                    }
                }
            }
            Op::Scale(x, k) => {
                let ax = slot(adj, nodes, *x);
                for (d, s) in ax.data.iter_mut().zip(&g.data) {
                    *d += k * s;
                }
            }
            Op::AddConst(x, _) => add_into(slot(adj, nodes, *x), g),
            Op::Channel(x, c) => {
                let ax = slot(adj, nodes, *x);
                if *c < ax.channels {
                    for (d, s) in ax.chan_mut(*c).iter_mut().zip(g.chan(0)) {
                        *d += s;
                    }
                }
            }
            Op::Gather(x, idx) => {
                let ax = slot(adj, nodes, *x);
                let cols = ax.cols;
                for c in 0..g.channels {
                    for r in 0..g.rows {
                        let src = g.row(c, r);
                        let dst = &mut ax.chan_mut(c)[r * cols..(r + 1) * cols];
                        for (s, &i) in src.iter().zip(idx) {
                            dst[i] += s;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for &p in parts {
                    let ap = slot(adj, nodes, p);
                    let (pc, pch) = (ap.cols, ap.channels);
                    for c in 0..pch {
                        for r in 0..g.rows {
                            let src = &g.row(c, r)[start..start + pc];
                            for (d, s) in ap.chan_mut(c)[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    start += pc;
                }
            }
            Op::SumCols(x) => {
                let ax = slot(adj, nodes, *x);
                let cols = ax.cols;
                for c in 0..g.channels {
                    for r in 0..g.rows {
                        let s = g.chan(c)[r];
                        for d in &mut ax.chan_mut(c)[r * cols..(r + 1) * cols] {
                            *d += s;
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, m, k, n } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (*m, *k, *n);
                let mut ga = Tensor::zeros(ta.rows, ta.cols, ta.channels);
                let mut gb = Tensor::zeros(tb.rows, tb.cols, tb.channels);
                for r in 0..g.rows {
                    let ra = if ta.rows == 1 { 0 } else { r };
                    let rb = if tb.rows == 1 { 0 } else { r };
                    // y_c = Σ coef · A_ca B_cb ; dA_ca += coef · g_c B_cbᵀ, dB_cb += coef · A_caᵀ g_c
                    for c in 0..g.channels {
                        let terms: &[(usize, usize, f64)] = match c {
                            0 => &[(0, 0, 1.0)],
                            1 => &[(0, 1, 1.0), (1, 0, 1.0)],
                            _ => &[(0, 2, 1.0), (1, 1, 2.0), (2, 0, 1.0)],
                        };
                        let gm = g.row(c, r);
                        for &(ca, cb, coef) in terms {
                            if ca >= ta.channels || cb >= tb.channels {
                                continue;
                            }
                            let am = ta.row(ca, ra);
                            let bm = tb.row(cb, rb);
                            {
                                let gam = &mut ga.chan_mut(ca)[ra * m * k..(ra + 1) * m * k];
                                for i in 0..m {
                                    for l in 0..k {
                                        let mut s = 0.0;
                                        for j in 0..n {
                                            s += gm[i * n + j] * bm[l * n + j];
                                        }
                                        gam[i * k + l] += coef * s;
                                    }
                                }
                            }
                            let gbm = &mut gb.chan_mut(cb)[rb * k * n..(rb + 1) * k * n];
                            for l in 0..k {
                                for j in 0..n {
                                    let mut s = 0.0;
                                    for i in 0..m {
                                        s += am[i * k + l] * gm[i * n + j];
                                    }
                                    gbm[l * n + j] += coef * s;
                                }
                            }
                        }
                    }
                }
                add_into(slot(adj, nodes, *a), &ga);
                add_into(slot(adj, nodes, *b), &gb);
            }
            Op::SumSquares(x) => {
                let xt = val(*x);
                let s = g.data[0];
                let ax = slot(adj, nodes, *x);
                for (d, xv) in ax.chan_mut(0).iter_mut().zip(xt.chan(0)) {
                    *d += 2.0 * xv * s;
                }
            }
            Op::Sum(x) => {
                let s = g.data[0];
                let ax = slot(adj, nodes, *x);
                ax.chan_mut(0).iter_mut().for_each(|d| *d += s);
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for c in 0..dst.channels.min(src.channels) {
        for (d, s) in dst.chan_mut(c).iter_mut().zip(src.chan(c)) {
            *d += s;
        }
    }
}
