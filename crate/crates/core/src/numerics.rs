//! Dense row-major matrices and the scalar primitives the losses are built on.
//!
//! Samples are rows throughout: a view is `n × d_v`, a latent block `n × D_out`.

use std::fmt;

use crate::error::{HcnError, Result};

/// Clamp applied inside every logarithm of a probability.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, rejecting wrong lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HcnError::InvalidArgument(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(HcnError::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(HcnError::InvalidArgument(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> DenseMatrix {
        self.map(|v| v * factor)
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        self.add_scaled(other, 1.0)
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &DenseMatrix, factor: f64) -> Result<()> {
        same_shape("add", self, other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (s, v) in sums.iter_mut().zip(r) {
                *s += v;
            }
        }
        sums
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Gathers the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Horizontal concatenation `[m_1, m_2, ...]`.
    pub fn hconcat(blocks: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        for b in blocks {
            if b.rows != rows {
                return Err(HcnError::ShapeMismatch {
                    op: "hconcat",
                    left: (rows, blocks[0].cols),
                    right: b.shape(),
                });
            }
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for b in blocks {
                data.extend_from_slice(b.row(i));
            }
        }
        Ok(DenseMatrix { rows, cols, data })
    }
}

fn same_shape(op: &'static str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(HcnError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Operand layout for [`gemm`]: whether the stored matrix is used transposed.
#[derive(Clone, Copy)]
enum Layout {
    Plain,
    Transposed,
}

impl Layout {
    // (logical rows, logical cols, row stride, col stride)
    fn view(self, m: &DenseMatrix) -> (usize, usize, isize, isize) {
        match self {
            Layout::Plain => (m.rows, m.cols, m.cols as isize, 1),
            Layout::Transposed => (m.cols, m.rows, 1, m.cols as isize),
        }
    }
}

fn gemm(op: &'static str, a: &DenseMatrix, la: Layout, b: &DenseMatrix, lb: Layout) -> Result<DenseMatrix> {
    let (m, k, rsa, csa) = la.view(a);
    let (k2, n, rsb, csb) = lb.view(b);
    if k != k2 {
        return Err(HcnError::ShapeMismatch {
            op,
            left: (m, k),
            right: (k2, n),
        });
    }
    let mut out = DenseMatrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    // SAFETY: the pointers cover `m*k`, `k*n` and `m*n` elements laid out with
    // the given strides, which is exactly the extent of the three buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// `a · b`
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm("matmul", a, Layout::Plain, b, Layout::Plain)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm("matmul_tn", a, Layout::Transposed, b, Layout::Plain)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    gemm("matmul_nt", a, Layout::Plain, b, Layout::Transposed)
}

/// `tr(aᵀ b) = Σ_ij a_ij b_ij`
pub fn trace_product(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    same_shape("trace_product", a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &DenseMatrix) -> DenseMatrix {
    let mut out = z.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Pulls a gradient w.r.t. softmax outputs `y` back to the logits:
/// `dz = y ⊙ (dy − Σ_j dy_j y_j)` per row.
pub fn softmax_backward(y: &DenseMatrix, dy: &DenseMatrix) -> Result<DenseMatrix> {
    same_shape("softmax_backward", y, dy)?;
    let mut dz = DenseMatrix::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((out, &yv), &g) in dz.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *out = yv * (g - dot);
        }
    }
    Ok(dz)
}

/// `log(max(p, eps))`. Negative probabilities are rejected.
pub fn safe_log(p: f64, eps: f64) -> Result<f64> {
    if p.is_nan() || p < 0.0 {
        return Err(HcnError::InvalidArgument(format!(
            "safe_log of negative value {p}"
        )));
    }
    Ok(clamped_ln(p, eps))
}

/// Unchecked form of [`safe_log`] for hot loops over softmax outputs.
#[inline]
pub(crate) fn clamped_ln(p: f64, eps: f64) -> f64 {
    p.max(eps).ln()
}

/// `‖a − b‖²_F`
pub fn frobenius_sq_diff(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    same_shape("frobenius_sq_diff", a, b)?;
    Ok(a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

/// Scales each nonzero row to unit ℓ2 norm; zero rows pass through.
pub fn row_l2_normalize(z: &DenseMatrix) -> DenseMatrix {
    let mut out = z.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    out
}

/// Backward pass of [`row_l2_normalize`]: `dz = (du − u (u·du)) / ‖z‖` per row,
/// where `u` is the normalized row. Zero rows receive no gradient.
pub fn row_l2_normalize_backward(z: &DenseMatrix, du: &DenseMatrix) -> Result<DenseMatrix> {
    same_shape("row_l2_normalize_backward", z, du)?;
    let mut dz = DenseMatrix::zeros(z.rows, z.cols);
    for r in 0..z.rows {
        let zr = z.row(r);
        let norm = zr.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let dur = du.row(r);
        let dot: f64 = zr.iter().zip(dur).map(|(a, b)| a * b).sum::<f64>() / norm;
        for ((out, &zv), &g) in dz.row_mut(r).iter_mut().zip(zr).zip(dur) {
            *out = (g - zv / norm * dot) / norm;
        }
    }
    Ok(dz)
}
