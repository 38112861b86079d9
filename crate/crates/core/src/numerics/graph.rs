//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.

use std::rc::Rc;

use super::tensor::{self, Mask, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm(Var),
    SoftmaxMasked(Var),
    Transpose(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Rc<Vec<Option<usize>>>),
    ColScale(Var, Var, usize),
    Sum(Var),
    CrossEntropy(Var, Rc<Vec<usize>>, Rc<Vec<bool>>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation graph. Single-threaded; build a fresh one per evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {op:?}")));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let n = self.needs(&[a, b]);
        self.push(v, Op::MatMul(a, b), n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let n = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), n)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let n = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), n)
    }

    fn row_broadcast(&self, a: Var, row: Var, what: &str) -> Result<()> {
        let (x, r) = (self.value(a), self.value(row));
        if x.shape().len() != 2 || r.len() != x.cols() {
            return Err(Error::dim(format!(
                "{what}: row of {} values for {:?}",
                r.len(),
                x.shape()
            )));
        }
        Ok(())
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row")?;
        let (x, r) = (self.value(a), self.value(row));
        let c = x.cols();
        let mut v = x.clone();
        for (k, o) in v.data_mut().iter_mut().enumerate() {
            *o += r.data()[k % c];
        }
        let n = self.needs(&[a, row]);
        self.push(v, Op::AddRow(a, row), n)
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row")?;
        let (x, r) = (self.value(a), self.value(row));
        let c = x.cols();
        let mut v = x.clone();
        for (k, o) in v.data_mut().iter_mut().enumerate() {
            *o *= r.data()[k % c];
        }
        let n = self.needs(&[a, row]);
        self.push(v, Op::MulRow(a, row), n)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).scale(s);
        let n = self.needs(&[a]);
        self.push(v, Op::Scale(a, s), n)
    }

    /// Multiply every entry of `a` by the single value held in `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by expects a one-element scalar"));
        }
        let k = self.value(s).item();
        let v = self.value(a).scale(k);
        let n = self.needs(&[a, s]);
        self.push(v, Op::ScaleBy(a, s), n)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        let n = self.needs(&[a]);
        self.push(v, Op::Tanh(a), n)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let v = tensor::gelu(self.value(a));
        let n = self.needs(&[a]);
        self.push(v, Op::Gelu(a), n)
    }

    /// Row standardization; compose with `mul_row`/`add_row` for the affine part.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let v = tensor::layer_norm(self.value(a))?;
        let n = self.needs(&[a]);
        self.push(v, Op::LayerNorm(a), n)
    }

    pub fn softmax_masked(&mut self, a: Var, mask: Rc<Mask>) -> Result<Var> {
        let v = tensor::softmax_masked(self.value(a), &mask)?;
        let n = self.needs(&[a]);
        self.push(v, Op::SoftmaxMasked(a), n)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        let n = self.needs(&[a]);
        self.push(v, Op::Transpose(a), n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, end)?;
        let n = self.needs(&[a]);
        self.push(v, Op::SliceCols(a, start, end), n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&ts)?;
        let n = self.needs(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), n)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&ts)?;
        let n = self.needs(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), n)
    }

    /// Embedding lookup. `None` produces a zero row.
    pub fn gather_rows(&mut self, table: Var, ids: Rc<Vec<Option<usize>>>) -> Result<Var> {
        let v = self.value(table).gather_rows(&ids)?;
        let n = self.needs(&[table]);
        self.push(v, Op::GatherRows(table, ids), n)
    }

    /// `a[i, :] * gates[i, col]`.
    pub fn col_scale(&mut self, a: Var, gates: Var, col: usize) -> Result<Var> {
        let (x, g) = (self.value(a), self.value(gates));
        if g.shape().len() != 2 || g.rows() != x.rows() || col >= g.cols() {
            return Err(Error::dim(format!(
                "col_scale: {:?} by column {col} of {:?}",
                x.shape(),
                g.shape()
            )));
        }
        let c = x.cols();
        let mut v = x.clone();
        for (k, o) in v.data_mut().iter_mut().enumerate() {
            *o *= g.get(k / c, col);
        }
        let n = self.needs(&[a, gates]);
        self.push(v, Op::ColScale(a, gates, col), n)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        let n = self.needs(&[a]);
        self.push(v, Op::Sum(a), n)
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let v = Tensor::scalar(tensor::cross_entropy(self.value(logits), targets, mask)?);
        let n = self.needs(&[logits]);
        self.push(
            v,
            Op::CrossEntropy(logits, Rc::new(targets.to_vec()), Rc::new(mask.to_vec())),
            n,
        )
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).len() != 1 {
            return Err(Error::dim("backward needs a scalar output"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(self.value(out).shape(), 1.0));

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].needs_grad {
                    let ga = g.matmul(&self.value(*b).transpose()?)?;
                    self.accumulate(grads, *a, ga)?;
                }
                if self.nodes[b.0].needs_grad {
                    let gb = self.value(*a).transpose()?.matmul(g)?;
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let ga = g.mul(self.value(*b))?;
                let gb = g.mul(self.value(*a))?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone())?;
                let r = self.value(*row);
                let c = r.len();
                let mut gr = Tensor::zeros(r.shape());
                for (k, v) in g.data().iter().enumerate() {
                    gr.data_mut()[k % c] += v;
                }
                self.accumulate(grads, *row, gr)?;
            }
            Op::MulRow(a, row) => {
                let (x, r) = (self.value(*a), self.value(*row));
                let c = r.len();
                let mut ga = g.clone();
                let mut gr = Tensor::zeros(r.shape());
                for (k, gv) in ga.data_mut().iter_mut().enumerate() {
                    gr.data_mut()[k % c] += *gv * x.data()[k];
                    *gv *= r.data()[k % c];
                }
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *row, gr)?;
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s))?,
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                self.accumulate(grads, *a, g.scale(k))?;
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                let gs = Tensor::full(self.value(*s).shape(), dot);
                self.accumulate(grads, *s, gs)?;
            }
            Op::Tanh(a) => {
                let ga = g.mul(&out.map(|t| 1.0 - t * t))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::Gelu(a) => {
                let ga = g.mul(&self.value(*a).map(tensor::gelu_grad_scalar))?;
                self.accumulate(grads, *a, ga)?;
            }
            Op::LayerNorm(a) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let mut ga = Tensor::zeros(x.shape());
                for i in 0..r {
                    let xr = x.row(i);
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let y = out.row(i);
                    let dy = g.row(i);
                    let mean_dy = dy.iter().sum::<f64>() / c as f64;
                    let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        ga.set(i, j, inv * (dy[j] - mean_dy - y[j] * mean_dyy));
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::SoftmaxMasked(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut ga = Tensor::zeros(out.shape());
                for i in 0..r {
                    let p = out.row(i);
                    let dy = g.row(i);
                    let dot: f64 = p.iter().zip(dy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        ga.set(i, j, p[j] * (dy[j] - dot));
                    }
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()?)?,
            Op::SliceCols(a, start, end) => {
                let x = self.value(*a);
                let (r, c) = (x.rows(), x.cols());
                let w = end - start;
                let mut ga = Tensor::zeros(x.shape());
                for i in 0..r {
                    ga.data_mut()[i * c + start..i * c + end]
                        .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *a, ga)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    self.accumulate(grads, *p, g.slice_cols(offset, offset + w)?)?;
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.value(*p).rows();
                    self.accumulate(grads, *p, g.slice_rows(offset, offset + h)?)?;
                    offset += h;
                }
            }
            Op::GatherRows(table, ids) => {
                let t = self.value(*table);
                let c = t.cols();
                let mut gt = Tensor::zeros(t.shape());
                for (row, id) in ids.iter().enumerate() {
                    if let Some(i) = id {
                        for j in 0..c {
                            gt.data_mut()[i * c + j] += g.get(row, j);
                        }
                    }
                }
                self.accumulate(grads, *table, gt)?;
            }
            Op::ColScale(a, gates, col) => {
                let (x, gt) = (self.value(*a), self.value(*gates));
                let c = x.cols();
                let mut ga = g.clone();
                let mut gg = Tensor::zeros(gt.shape());
                for (k, gv) in ga.data_mut().iter_mut().enumerate() {
                    let i = k / c;
                    let cur = gg.get(i, *col);
                    gg.set(i, *col, cur + *gv * x.data()[k]);
                    *gv *= gt.get(i, *col);
                }
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *gates, gg)?;
            }
            Op::Sum(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(x.shape(), g.item()))?;
            }
            Op::CrossEntropy(logits, targets, mask) => {
                let x = self.value(*logits);
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let lsm = tensor::log_softmax(x)?;
                let mut gl = Tensor::zeros(x.shape());
                let scale = g.item() / count;
                for i in 0..x.rows() {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..x.cols() {
                        let p = lsm.get(i, j).exp();
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        gl.set(i, j, (p - onehot) * scale);
                    }
                }
                self.accumulate(grads, *logits, gl)?;
            }
        }
        Ok(())
    }
}
