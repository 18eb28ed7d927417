//! Dense row-major tensors and the forward kernels shared by the tape.
//!
//! Every kernel treats a tensor as a stack of rows along its last axis, so a
//! `[b, m, d]` tensor and an `[b*m, d]` tensor behave identically.

use crate::error::{Error, Result};

/// Norm below which `l2_normalize` leaves a slice untouched.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
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

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("from_rows", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
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

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor shape is never empty")
    }

    /// Number of last-axis slices.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
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

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(op, &self.shape, &[2]));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
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
        Tensor::new(vec![m, n], out)
    }

    /// `[m×k] · [n×k]ᵀ`, without materialising the transpose.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.as_matrix("matmul_nt")?;
        let (n, k2) = other.as_matrix("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = dot(a_row, b_row);
            }
        }
        Tensor::new(vec![m, n], out)
    }

    /// `[k×m]ᵀ · [k×n]`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.as_matrix("matmul_tn")?;
        let (k2, n) = other.as_matrix("matmul_tn")?;
        if k != k2 {
            return Err(Error::shape("matmul_tn", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cached statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalises every last-axis slice to zero mean and unit variance, then
/// applies `gain` and `bias`. `eps` sits inside the square root.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::DegenerateAxis {
            op: "layer_norm",
            extent: d,
        });
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let s = 1.0 / (var + eps).sqrt();
        // A zero-variance row with eps = 0 would divide by zero; its centred
        // values are all zero, so any finite scale gives the bias.
        let s = if s.is_finite() { s } else { 0.0 };
        inv_std.push(s);
        let nrow = normalized.row_mut(r);
        for (n, v) in nrow.iter_mut().zip(row) {
            *n = (v - mean) * s;
        }
        let orow = out.row_mut(r);
        for j in 0..d {
            orow[j] = normalized.data[r * d + j] * gain.data[j] + bias.data[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Row softmax with per-row max subtraction. Entries equal to `-inf` get
/// weight zero; a row made only of `-inf` is an error.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY || max.is_nan() {
            return Err(Error::AllMasked { row: r });
        }
        softmax_in_place(row, max);
    }
    Ok(out)
}

/// Softmax restricted to `allowed` entries. Disallowed entries get exactly
/// zero weight and a row without allowed entries comes back all zero; the
/// returned flags mark those empty rows.
pub fn masked_softmax_rows(x: &Tensor, allowed: &[bool]) -> Result<(Tensor, Vec<bool>)> {
    if allowed.len() != x.len() {
        return Err(Error::shape("masked_softmax", x.shape(), &[allowed.len()]));
    }
    let c = x.cols();
    let mut out = Tensor::zeros(x.shape());
    let mut empty = vec![false; x.rows()];
    for r in 0..x.rows() {
        let mask = &allowed[r * c..(r + 1) * c];
        let row = x.row(r);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            empty[r] = true;
            continue;
        }
        let orow = out.row_mut(r);
        let mut total = 0.0;
        for j in 0..c {
            if mask[j] {
                let e = (row[j] - max).exp();
                orow[j] = e;
                total += e;
            }
        }
        for v in orow.iter_mut() {
            *v /= total;
        }
    }
    Ok((out, empty))
}

fn softmax_in_place(row: &mut [f64], max: f64) {
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Scales each last-axis slice to unit norm. Slices with norm below
/// [`NORM_FLOOR`] pass through unchanged and are flagged.
pub fn l2_normalize(x: &Tensor) -> (Tensor, Vec<f64>, Vec<bool>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    let mut flagged = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        norms.push(norm);
        if norm < NORM_FLOOR {
            flagged.push(true);
            continue;
        }
        flagged.push(false);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    (out, norms, flagged)
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
