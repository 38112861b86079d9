use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Everything in the crate is rank 1 or rank 2. Slicing copies.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?} {:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a rank-2 tensor; a rank-1 tensor is one row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Self, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::dim(format!(
                "{what}: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn as_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(format!("{what}: expected a matrix, got {s:?}"))),
        }
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul lhs")?;
        let (k2, n) = other.as_matrix("matmul rhs")?;
        if k != k2 {
            return Err(Error::dim(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.as_matrix("slice_cols")?;
        if start >= end || end > c {
            return Err(Error::dim(format!("column slice {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Ok(Self {
            shape: vec![r, w],
            data: out,
        })
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.as_matrix("slice_rows")?;
        if start >= end || end > r {
            return Err(Error::dim(format!("row slice {start}..{end} of {r}")));
        }
        Ok(Self {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        })
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let c = parts
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?
            .cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.as_matrix("concat_rows")?;
            if pc != c {
                return Err(Error::dim(format!("concat_rows width {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: vec![rows, c],
            data,
        })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self> {
        let r = parts
            .first()
            .ok_or_else(|| Error::dim("concat of nothing"))?
            .rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = p.as_matrix("concat_cols")?;
            if pr != r {
                return Err(Error::dim(format!("concat_cols height {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data[i * w..(i + 1) * w]);
            }
        }
        Ok(Self {
            shape: vec![r, c],
            data,
        })
    }

    /// Row lookup; `None` yields a zero row.
    pub fn gather_rows(&self, ids: &[Option<usize>]) -> Result<Self> {
        let (r, c) = self.as_matrix("gather_rows")?;
        let mut data = Vec::with_capacity(ids.len() * c);
        for id in ids {
            match id {
                Some(i) if *i < r => data.extend_from_slice(&self.data[i * c..(i + 1) * c]),
                Some(i) => return Err(Error::dim(format!("row {i} out of {r}"))),
                None => data.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        Self::new(vec![ids.len(), c], data)
    }
}

/// Boolean attention-permission matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Result<Self> {
        if rows * cols != allow.len() {
            return Err(Error::dim(format!(
                "mask {rows}x{cols} with {} entries",
                allow.len()
            )));
        }
        Ok(Self { rows, cols, allow })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            allow: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allow = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, allow }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.allow[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.allow[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allow[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allow
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Softmax over the allowed entries of each row; masked entries are exactly 0.
pub fn softmax_masked(scores: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (r, c) = scores.as_matrix("softmax_masked")?;
    if mask.rows != r || mask.cols != c {
        return Err(Error::dim(format!(
            "softmax mask {}x{} for scores {r}x{c}",
            mask.rows, mask.cols
        )));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = scores.row(i);
        let allow = mask.row(i);
        let max = row
            .iter()
            .zip(allow)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Contract(format!(
                "softmax row {i} has no allowed key"
            )));
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut z = 0.0;
        for j in 0..c {
            if allow[j] {
                o[j] = (row[j] - max).exp();
                z += o[j];
            }
        }
        for v in o.iter_mut() {
            *v /= z;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Row-wise log-softmax (unmasked).
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let (r, c) = logits.as_matrix("log_softmax")?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|v| v - lse));
    }
    Tensor::new(vec![r, c], out)
}

/// Mean negative log-likelihood over positions where `loss_mask` is set.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], loss_mask: &[bool]) -> Result<f64> {
    let (t, v) = logits.as_matrix("cross_entropy")?;
    if targets.len() != t || loss_mask.len() != t {
        return Err(Error::dim(format!(
            "cross_entropy: {t} positions, {} targets, {} mask entries",
            targets.len(),
            loss_mask.len()
        )));
    }
    let count = loss_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Contract(
            "cross_entropy with every position masked".into(),
        ));
    }
    let lsm = log_softmax(logits)?;
    let mut total = 0.0;
    for i in 0..t {
        if !loss_mask[i] {
            continue;
        }
        if targets[i] >= v {
            return Err(Error::dim(format!(
                "target {} outside vocab {v}",
                targets[i]
            )));
        }
        total -= lsm.get(i, targets[i]);
    }
    Ok(total / count as f64)
}

/// Per-row standardization without affine terms.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let (r, c) = x.as_matrix("layer_norm")?;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * inv));
    }
    Tensor::new(vec![r, c], out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}
