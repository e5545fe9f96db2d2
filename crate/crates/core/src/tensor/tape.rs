use std::sync::Arc;

use super::{gemm, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    /// matrix + broadcast row vector
    AddRow(Var, Var),
    /// matrix * broadcast row vector
    MulRow(Var, Var),
    /// matrix * broadcast column vector (one factor per row)
    MulCol(Var, Var),
    /// matrix / broadcast column vector
    DivCol(Var, Var),
    /// tensor * broadcast scalar tensor
    MulScalarVar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Relu(Var),
    Elu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentMean {
        x: Var,
        ids: Arc<[usize]>,
        counts: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    /// scalar function of `x` whose gradient was computed alongside its value
    External {
        x: Var,
        grad: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations and replays them backwards.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of the given shape if `v` did not influence
    /// the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

impl Tape {
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| f(*x, *y)).collect();
        Ok((
            Tensor {
                shape: ta.shape.clone(),
                data,
            },
            self.rg(a) || self.rg(b),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.elementwise("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let c = ta.cols();
        if tr.len() != c || tr.rows() != 1 {
            return Err(shape_err(name, ta, tr));
        }
        let mut data = ta.data.clone();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, r) in chunk.iter_mut().zip(&tr.data) {
                *x = f(*x, *r);
            }
        }
        Ok((
            Tensor {
                shape: ta.shape.clone(),
                data,
            },
            self.rg(a) || self.rg(row),
        ))
    }

    /// `a + row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (t, rg) = self.row_broadcast("add_row", a, row, |x, r| x + r)?;
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    /// `a * row`, broadcasting a `1 x c` row over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (t, rg) = self.row_broadcast("mul_row", a, row, |x, r| x * r)?;
        Ok(self.push(t, Op::MulRow(a, row), rg))
    }

    fn col_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        col: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        if tc.len() != ta.rows() {
            return Err(shape_err(name, ta, tc));
        }
        let c = ta.cols().max(1);
        let mut data = ta.data.clone();
        for (chunk, s) in data.chunks_mut(c).zip(&tc.data) {
            for x in chunk.iter_mut() {
                *x = f(*x, *s);
            }
        }
        Ok((
            Tensor {
                shape: ta.shape.clone(),
                data,
            },
            self.rg(a) || self.rg(col),
        ))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (t, rg) = self.col_broadcast("mul_col", a, col, |x, s| x * s)?;
        Ok(self.push(t, Op::MulCol(a, col), rg))
    }

    /// Divides row `i` of `a` by `col[i]`.
    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (t, rg) = self.col_broadcast("div_col", a, col, |x, s| x / s)?;
        Ok(self.push(t, Op::DivCol(a, col), rg))
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        if ts.len() != 1 {
            return Err(shape_err("mul_scalar", ta, ts));
        }
        let k = ts.data[0];
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * k).collect(),
        };
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::MulScalarVar(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x * k).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, k), rg)
    }

    /// `a + c` for a constant tensor `c` of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape != c.shape {
            return Err(shape_err("add_const", ta, c));
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().zip(&c.data).map(|(x, y)| x + y).collect(),
        };
        let rg = self.rg(a);
        Ok(self.push(t, Op::AddConst(a), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape.len() != 2 || tb.shape.len() != 2 || ta.shape[1] != tb.shape[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(&ta.data, false, &tb.data, false, m, k, n, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data: out,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if ta.shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                msg: format!("expected a matrix, got shape {:?}", ta.shape),
            });
        }
        let (r, c) = (ta.shape[0], ta.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = ta.data[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![c, r],
                data,
            },
            Op::Transpose(a),
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let rows = self.nodes[first.0].value.rows();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows || t.shape.len() != 2 {
                return Err(shape_err("concat", &self.nodes[first.0].value, t));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor {
                shape: vec![rows, total],
                data,
            },
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta.data.iter().map(|x| x.max(0.0)).collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let t = Tensor {
            shape: ta.shape.clone(),
            data: ta
                .data
                .iter()
                .map(|&x| if x > 0.0 { x } else { x.exp_m1() })
                .collect(),
        };
        let rg = self.rg(a);
        self.push(t, Op::Elu(a), rg)
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let c = ta.cols().max(1);
        let mut data = ta.data.clone();
        let mut inv_std = Vec::with_capacity(ta.rows());
        for row in data.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
            inv_std.push(inv);
        }
        let t = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(a);
        self.push(t, Op::LayerNorm { x: a, inv_std }, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        let (n, c) = (ta.rows(), ta.cols());
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row index {bad} out of range for {n} rows"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(&ta.data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), c],
                data,
            },
            Op::GatherRows(a, idx),
            rg,
        ))
    }

    fn segment_accumulate(
        &self,
        op: &'static str,
        a: Var,
        ids: &[usize],
        n_segments: usize,
    ) -> Result<Tensor> {
        let ta = &self.nodes[a.0].value;
        if ids.len() != ta.rows() {
            return Err(TensorError::Invalid {
                op,
                msg: format!("{} segment ids for {} rows", ids.len(), ta.rows()),
            });
        }
        let c = ta.cols();
        let mut out = vec![0.0; n_segments * c];
        // ascending input-row order keeps reductions bit-reproducible
        for (r, &s) in ids.iter().enumerate() {
            if s >= n_segments {
                return Err(TensorError::Invalid {
                    op,
                    msg: format!("segment id {s} out of range for {n_segments} segments"),
                });
            }
            add_into(&mut out[s * c..(s + 1) * c], &ta.data[r * c..(r + 1) * c]);
        }
        Ok(Tensor {
            shape: vec![n_segments, c],
            data: out,
        })
    }

    /// Row `s` of the output is the sum of all input rows whose id is `s`.
    pub fn segment_sum(&mut self, a: Var, ids: Arc<[usize]>, n_segments: usize) -> Result<Var> {
        let t = self.segment_accumulate("segment_sum", a, &ids, n_segments)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::SegmentSum(a, ids), rg))
    }

    /// Like [`Tape::segment_sum`] but averaged; empty segments yield zeros.
    pub fn segment_mean(&mut self, a: Var, ids: Arc<[usize]>, n_segments: usize) -> Result<Var> {
        let mut t = self.segment_accumulate("segment_mean", a, &ids, n_segments)?;
        let mut counts = vec![0usize; n_segments];
        for &s in ids.iter() {
            counts[s] += 1;
        }
        let c = t.cols();
        for (s, &n) in counts.iter().enumerate() {
            if n > 0 {
                let inv = 1.0 / n as f64;
                t.data[s * c..(s + 1) * c].iter_mut().for_each(|x| *x *= inv);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::SegmentMean { x: a, ids, counts }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let s = ta.data.iter().sum::<f64>() / ta.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column sums, as a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let c = ta.cols();
        let mut out = vec![0.0; c];
        for row in ta.data.chunks(c.max(1)) {
            add_into(&mut out, row);
        }
        let rg = self.rg(a);
        self.push(
            Tensor {
                shape: vec![1, c],
                data: out,
            },
            Op::SumRows(a),
            rg,
        )
    }

    /// Records a scalar function of `x` evaluated outside the tape, given its
    /// value and its gradient with respect to `x`.
    pub fn external_scalar(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        let tx = &self.nodes[x.0].value;
        if grad.shape != tx.shape {
            return Err(shape_err("external_scalar", tx, &grad));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::External { x, grad }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if lt.len() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&lt.shape, 1.0));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&self.nodes[v.0].value.shape));
            f(&mut slot.data);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|d| add_into(d, &g.data));
                acc(*b, &|d| add_into(d, &g.data));
            }
            Op::Sub(a, b) => {
                acc(*a, &|d| add_into(d, &g.data));
                acc(*b, &|d| d.iter_mut().zip(&g.data).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                acc(*a, &|d| {
                    for ((x, gi), bi) in d.iter_mut().zip(&g.data).zip(&tb.data) {
                        *x += gi * bi;
                    }
                });
                acc(*b, &|d| {
                    for ((x, gi), ai) in d.iter_mut().zip(&g.data).zip(&ta.data) {
                        *x += gi * ai;
                    }
                });
            }
            Op::AddRow(a, r) => {
                acc(*a, &|d| add_into(d, &g.data));
                let c = val(*r).len();
                acc(*r, &|d| {
                    for row in g.data.chunks(c.max(1)) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (val(*a), val(*r));
                let c = tr.len().max(1);
                acc(*a, &|d| {
                    for (drow, grow) in d.chunks_mut(c).zip(g.data.chunks(c)) {
                        for ((x, gi), ri) in drow.iter_mut().zip(grow).zip(&tr.data) {
                            *x += gi * ri;
                        }
                    }
                });
                acc(*r, &|d| {
                    for (grow, arow) in g.data.chunks(c).zip(ta.data.chunks(c)) {
                        for ((x, gi), ai) in d.iter_mut().zip(grow).zip(arow) {
                            *x += gi * ai;
                        }
                    }
                });
            }
            Op::MulCol(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let c = ta.cols().max(1);
                acc(*a, &|d| {
                    for ((drow, grow), si) in d.chunks_mut(c).zip(g.data.chunks(c)).zip(&ts.data) {
                        for (x, gi) in drow.iter_mut().zip(grow) {
                            *x += gi * si;
                        }
                    }
                });
                acc(*s, &|d| {
                    for ((x, grow), arow) in d.iter_mut().zip(g.data.chunks(c)).zip(ta.data.chunks(c)) {
                        *x += grow.iter().zip(arow).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            Op::DivCol(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let c = ta.cols().max(1);
                acc(*a, &|d| {
                    for ((drow, grow), si) in d.chunks_mut(c).zip(g.data.chunks(c)).zip(&ts.data) {
                        for (x, gi) in drow.iter_mut().zip(grow) {
                            *x += gi / si;
                        }
                    }
                });
                acc(*s, &|d| {
                    for (((x, grow), arow), si) in d
                        .iter_mut()
                        .zip(g.data.chunks(c))
                        .zip(ta.data.chunks(c))
                        .zip(&ts.data)
                    {
                        let dot: f64 = grow.iter().zip(arow).map(|(p, q)| p * q).sum();
                        *x -= dot / (si * si);
                    }
                });
            }
            Op::MulScalarVar(a, s) => {
                let (ta, ts) = (val(*a), val(*s));
                let k = ts.data[0];
                acc(*a, &|d| d.iter_mut().zip(&g.data).for_each(|(x, gi)| *x += gi * k));
                acc(*s, &|d| {
                    d[0] += g.data.iter().zip(&ta.data).map(|(p, q)| p * q).sum::<f64>();
                });
            }
            Op::Scale(a, k) => {
                acc(*a, &|d| d.iter_mut().zip(&g.data).for_each(|(x, gi)| *x += gi * k));
            }
            Op::AddConst(a) => acc(*a, &|d| add_into(d, &g.data)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // dA = G B^T, dB = A^T G
                acc(*a, &|d| gemm(&g.data, false, &tb.data, true, m, n, k, d, true));
                acc(*b, &|d| gemm(&ta.data, true, &g.data, false, k, m, n, d, true));
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape[0], val(*a).shape[1]);
                acc(*a, &|d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g.data[j * r + i];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| val(*p).cols()).collect();
                let total: usize = widths.iter().sum();
                let rows = node.value.rows();
                let mut offset = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    acc(*p, &|d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g.data[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Relu(a) => {
                let ta = val(*a);
                // derivative at exactly 0 is taken as 0
                acc(*a, &|d| {
                    for ((x, gi), ai) in d.iter_mut().zip(&g.data).zip(&ta.data) {
                        if *ai > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Elu(a) => {
                let ta = val(*a);
                acc(*a, &|d| {
                    for ((x, gi), ai) in d.iter_mut().zip(&g.data).zip(&ta.data) {
                        *x += if *ai > 0.0 { *gi } else { gi * ai.exp() };
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let c = y.cols().max(1);
                let cf = c as f64;
                acc(*x, &|d| {
                    for (((drow, grow), yrow), inv) in d
                        .chunks_mut(c)
                        .zip(g.data.chunks(c))
                        .zip(y.data.chunks(c))
                        .zip(inv_std)
                    {
                        let gm = grow.iter().sum::<f64>() / cf;
                        let gy = grow.iter().zip(yrow).map(|(p, q)| p * q).sum::<f64>() / cf;
                        for ((xd, gi), yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *xd += inv * (gi - gm - yi * gy);
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let c = val(*a).cols();
                acc(*a, &|d| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * c..(i + 1) * c], &g.data[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SegmentSum(a, ids) => {
                let c = val(*a).cols();
                acc(*a, &|d| {
                    for (r, &s) in ids.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g.data[s * c..(s + 1) * c]);
                    }
                });
            }
            Op::SegmentMean { x, ids, counts } => {
                let c = val(*x).cols();
                acc(*x, &|d| {
                    for (r, &s) in ids.iter().enumerate() {
                        let inv = 1.0 / counts[s] as f64;
                        for (xd, gi) in d[r * c..(r + 1) * c].iter_mut().zip(&g.data[s * c..(s + 1) * c]) {
                            *xd += gi * inv;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gs = g.data[0];
                acc(*a, &|d| d.iter_mut().for_each(|x| *x += gs));
            }
            Op::Mean(a) => {
                let gs = g.data[0] / val(*a).len().max(1) as f64;
                acc(*a, &|d| d.iter_mut().for_each(|x| *x += gs));
            }
            Op::SumRows(a) => {
                let c = val(*a).cols().max(1);
                acc(*a, &|d| {
                    for row in d.chunks_mut(c) {
                        add_into(row, &g.data);
                    }
                });
            }
            Op::External { x, grad } => {
                let gs = g.data[0];
                acc(*x, &|d| {
                    for (xd, gi) in d.iter_mut().zip(&grad.data) {
                        *xd += gs * gi;
                    }
                });
            }
        }
    }
}
