//! Dense row-major tensors and the handful of numeric primitives every
//! attention mechanism in this crate is built from.
//!
//! All arithmetic is carried out in `f64`. Exported operations refuse to
//! hand back NaN or infinite values; a non-finite result is reported as
//! [`Error::NonFinite`] instead.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = Error;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.shape, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            shape: t.shape,
            data: t.data,
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![1, values.len()],
            data: values,
        }
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

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => shape_err(format!("{what}: expected a matrix, got shape {other:?}")),
        }
    }

    /// Row count of a matrix (panics on non-matrix tensors).
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on a non-matrix tensor");
        self.shape[0]
    }

    /// Column count of a matrix (panics on non-matrix tensors).
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on a non-matrix tensor");
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let c = self.cols();
        self.data[i * c + j] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Columns `[start, start + width)` of a matrix.
    pub fn column_slice(&self, start: usize, width: usize) -> Result<Self> {
        let (r, c) = self.expect_matrix("column_slice")?;
        if start + width > c {
            return shape_err(format!("columns {start}..{} out of {c}", start + width));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&self.data[i * c + start..i * c + start + width]);
        }
        Self::new(vec![r, width], data)
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_column_slice(&mut self, start: usize, block: &Tensor) -> Result<()> {
        let (r, c) = self.expect_matrix("set_column_slice")?;
        let (br, bc) = block.expect_matrix("set_column_slice")?;
        if br != r || start + bc > c {
            return shape_err("column block does not fit");
        }
        for i in 0..r {
            self.data[i * c + start..i * c + start + bc].copy_from_slice(block.row(i));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        if self.shape != other.shape {
            return shape_err(format!("add {:?} + {:?}", self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Self::new(self.shape.clone(), data)?.ensure_finite("add")
    }

    pub fn scale(&self, factor: f64) -> Result<Self> {
        let data = self.data.iter().map(|v| v * factor).collect();
        Self::new(self.shape.clone(), data)?.ensure_finite("scale")
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("diff {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_matrix("matmul lhs")?;
    let (k2, n) = b.expect_matrix("matmul rhs")?;
    if k != k2 {
        return shape_err(format!("matmul inner dims {k} vs {k2}"));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a.data[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)?.ensure_finite("matmul")
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stabilized softmax of a single row with an optional additive mask.
/// Positions whose mask is `-inf` receive exactly zero probability.
pub fn softmax_slice(x: &[f64], mask: Option<&[f64]>) -> Option<Vec<f64>> {
    let logits: Vec<f64> = match mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a + b).collect(),
        None => x.to_vec(),
    };
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return None;
    }
    let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Some(out)
}

/// Row-wise softmax with an optional additive mask (`-inf` excludes a position).
pub fn softmax_rows(x: &Tensor, additive_mask: Option<&Tensor>) -> Result<Tensor> {
    let (r, c) = x.expect_matrix("softmax_rows")?;
    if let Some(m) = additive_mask {
        if m.shape != x.shape {
            return shape_err(format!("mask {:?} vs input {:?}", m.shape, x.shape));
        }
    }
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row =
            softmax_slice(x.row(i), additive_mask.map(|m| m.row(i))).ok_or(Error::AllMasked(i))?;
        data.extend(row);
    }
    Tensor::new(vec![r, c], data)?.ensure_finite("softmax_rows")
}

/// Lower-triangular additive causal mask, optionally restricted to a window
/// of `w` most recent positions (including the diagonal).
pub fn causal_mask(n: usize, window: Option<usize>) -> Tensor {
    let mut m = Tensor::filled(&[n, n], f64::NEG_INFINITY);
    for t in 0..n {
        let start = window.map_or(0, |w| (t + 1).saturating_sub(w));
        for s in start..=t {
            m.data[t * n + s] = 0.0;
        }
    }
    m
}

/// `y_j = w_j * x_j / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f64], weight: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != weight.len() {
        return shape_err(format!(
            "rms_norm row {} vs weight {}",
            x.len(),
            weight.len()
        ));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let denom = (mean_sq + eps).sqrt();
    if denom == 0.0 {
        // eps = 0 on a zero row: the row carries no signal, keep it zero.
        return Ok(vec![0.0; x.len()]);
    }
    let out: Vec<f64> = x.iter().zip(weight).map(|(v, w)| w * v / denom).collect();
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::NonFinite("rms_norm"))
    }
}

pub fn rms_norm_rows(x: &Tensor, weight: &[f64], eps: f64) -> Result<Tensor> {
    let (r, c) = x.expect_matrix("rms_norm_rows")?;
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        data.extend(rms_norm(x.row(i), weight, eps)?);
    }
    Tensor::new(vec![r, c], data)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| silu_scalar(v)).collect(),
    }
}

/// Result of [`l2_normalize_rows`]: the normalized matrix plus the indices of
/// rows that were all-zero and therefore left at zero.
#[derive(Debug, Clone)]
pub struct L2Normalized {
    pub tensor: Tensor,
    pub zero_rows: Vec<usize>,
}

pub fn l2_normalize_rows(x: &Tensor) -> Result<L2Normalized> {
    let (r, _) = x.expect_matrix("l2_normalize_rows")?;
    let mut out = x.clone();
    let mut zero_rows = Vec::new();
    for i in 0..r {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            zero_rows.push(i);
            continue;
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    Ok(L2Normalized {
        tensor: out.ensure_finite("l2_normalize_rows")?,
        zero_rows,
    })
}

/// Indices of the `k` largest values, ties broken toward the lower index,
/// returned in ascending index order.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}
