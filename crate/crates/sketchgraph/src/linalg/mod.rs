//! Minimal dense/sparse/complex linear algebra used by the sketch pipeline.
//!
//! Everything is f64, row-major, and single-threaded: the point of the
//! artifact is that the matrices stay small (`c`-sized), not that the kernels
//! are clever. No BLAS.

mod csr;
mod fft;
pub mod io;

pub use csr::{dense_times_csr, spmm, CsrMatrix};
pub use fft::{fft_rows, fft_rows_complex, hadamard, ifft_rows, ifft_rows_complex, IfftResult};
pub use rustfft::num_complex::Complex64;

use crate::error::{SgError, SgResult};

/// Dense row-major f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds from row-major data, rejecting wrong lengths and non-finite
    /// entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> SgResult<Self> {
        if data.len() != rows * cols {
            return Err(SgError::shape(
                "DenseMatrix::from_vec",
                format!("{}x{} needs {} entries, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(SgError::NonFinite("DenseMatrix::from_vec".into()));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, f: f64) -> DenseMatrix {
        let data = self.data.iter().map(|v| v * f).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add(&self, other: &DenseMatrix) -> SgResult<DenseMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(SgError::shape(
                "DenseMatrix::add",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &DenseMatrix) -> SgResult<DenseMatrix> {
        Ok(self.add(&other.scale(-1.0))?)
    }

    /// Max |a - b| over entries; shapes must match.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Dense complex matrix, the output domain of row FFTs.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        ComplexMatrix { rows, cols, data: vec![Complex64::new(0.0, 0.0); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> SgResult<Self> {
        if data.len() != rows * cols {
            return Err(SgError::shape(
                "ComplexMatrix::from_vec",
                format!("{}x{} needs {} entries, got {}", rows, cols, rows * cols, data.len()),
            ));
        }
        Ok(ComplexMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [Complex64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.data[r * self.cols + c]
    }

    pub fn conj(&self) -> ComplexMatrix {
        let data = self.data.iter().map(|z| z.conj()).collect();
        ComplexMatrix { rows: self.rows, cols: self.cols, data }
    }
}

/// C = A·B. Plain triple loop, `ikj` order.
pub fn gemm(a: &DenseMatrix, b: &DenseMatrix) -> SgResult<DenseMatrix> {
    if a.cols != b.rows {
        return Err(SgError::shape("gemm", format!("{}x{} * {}x{}", a.rows, a.cols, b.rows, b.cols)));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// C = Aᵀ·B without materializing the transpose.
pub fn gemm_tn(a: &DenseMatrix, b: &DenseMatrix) -> SgResult<DenseMatrix> {
    if a.rows != b.rows {
        return Err(SgError::shape(
            "gemm_tn",
            format!("{}x{}ᵀ * {}x{}", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = &a.data[k * a.cols..(k + 1) * a.cols];
        let brow = &b.data[k * b.cols..(k + 1) * b.cols];
        for i in 0..a.cols {
            let aki = arow[i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for j in 0..b.cols {
                orow[j] += aki * brow[j];
            }
        }
    }
    Ok(out)
}

/// C = A·Bᵀ.
pub fn gemm_nt(a: &DenseMatrix, b: &DenseMatrix) -> SgResult<DenseMatrix> {
    if a.cols != b.cols {
        return Err(SgError::shape(
            "gemm_nt",
            format!("{}x{} * {}x{}ᵀ", a.rows, a.cols, b.rows, b.cols),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += arow[k] * brow[k];
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// Entrywise median across a slice of equally shaped matrices. Even counts
/// take the midpoint of the two central values.
pub fn elementwise_median(mats: &[DenseMatrix]) -> SgResult<DenseMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| SgError::BadInput("elementwise_median of empty list".into()))?;
    for m in mats {
        if m.rows != first.rows || m.cols != first.cols {
            return Err(SgError::shape(
                "elementwise_median",
                format!("{}x{} vs {}x{}", m.rows, m.cols, first.rows, first.cols),
            ));
        }
    }
    let mut out = DenseMatrix::zeros(first.rows, first.cols);
    let mut scratch = vec![0.0; mats.len()];
    for idx in 0..first.data.len() {
        for (s, m) in scratch.iter_mut().zip(mats) {
            *s = m.data[idx];
        }
        out.data[idx] = median_in_place(&mut scratch);
    }
    Ok(out)
}

/// Median of a scratch slice (sorted in place).
pub fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
