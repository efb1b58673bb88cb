//! Row-wise DFTs of exact length `c`.
//!
//! Forward transform is unnormalized; the inverse carries the 1/c factor, so
//! `ifft_rows(fft_rows(x))` returns `x`. Lengths need not be powers of two:
//! the planner falls back to mixed-radix/Bluestein for arbitrary (including
//! prime) `c`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{ComplexMatrix, DenseMatrix};

/// DFT of every row of a real matrix.
pub fn fft_rows(x: &DenseMatrix) -> ComplexMatrix {
    let mut out = ComplexMatrix::zeros(x.rows(), x.cols());
    if x.cols() == 0 {
        return out;
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(x.cols());
    let mut buf = vec![Complex64::new(0.0, 0.0); x.cols()];
    for r in 0..x.rows() {
        for (b, &v) in buf.iter_mut().zip(x.row(r)) {
            *b = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        out.row_mut(r).copy_from_slice(&buf);
    }
    out
}

/// DFT of every row of a complex matrix (used by adjoint rules).
pub fn fft_rows_complex(x: &ComplexMatrix) -> ComplexMatrix {
    let mut out = x.clone();
    if x.cols() == 0 {
        return out;
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(x.cols());
    for r in 0..x.rows() {
        fft.process(out.row_mut(r));
    }
    out
}

/// Inverse DFT (with 1/c) of every row, keeping complex output.
pub fn ifft_rows_complex(x: &ComplexMatrix) -> ComplexMatrix {
    let mut out = x.clone();
    if x.cols() == 0 {
        return out;
    }
    let mut planner = FftPlanner::new();
    let ifft = planner.plan_fft_inverse(x.cols());
    let scale = 1.0 / x.cols() as f64;
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        ifft.process(row);
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    out
}

/// Real part of the inverse DFT plus the largest imaginary residue seen.
/// Residues above 1e-6 indicate the input was not conjugate-symmetric, which
/// the pipeline treats as a numerical-health warning.
pub struct IfftResult {
    pub real: DenseMatrix,
    pub max_imag: f64,
}

impl IfftResult {
    pub fn is_healthy(&self) -> bool {
        self.max_imag <= 1e-6
    }
}

/// Inverse DFT of every row, returning the real part and flagging imaginary
/// residue.
pub fn ifft_rows(x: &ComplexMatrix) -> IfftResult {
    let full = ifft_rows_complex(x);
    let mut real = DenseMatrix::zeros(x.rows(), x.cols());
    let mut max_imag = 0.0f64;
    for (dst, src) in real.data_mut().iter_mut().zip(full.data()) {
        *dst = src.re;
        max_imag = max_imag.max(src.im.abs());
    }
    IfftResult { real, max_imag }
}

/// Entrywise complex product.
pub fn hadamard(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    assert_eq!(a.rows(), b.rows(), "hadamard row mismatch");
    assert_eq!(a.cols(), b.cols(), "hadamard col mismatch");
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    ComplexMatrix::from_vec(a.rows(), a.cols(), data).expect("shapes checked")
}
