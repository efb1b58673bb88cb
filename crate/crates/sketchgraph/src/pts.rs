//! Polynomial activation machinery: learnable per-layer coefficients, the
//! dense reference evaluation sketched layers are tested against, Taylor
//! initialization for sigmoid-like targets, and the L2 coefficient penalty.

use crate::error::{SgError, SgResult};
use crate::linalg::{gemm, DenseMatrix};

/// Coefficients of an elementwise polynomial Σ_{k=1}^r c_k z^k, plus an
/// optional constant term c₀.
///
/// The constant term is optional because a zero-degree term only makes
/// sense for activations with σ(0) ≠ 0 (sigmoid yes, ReLU no).
#[derive(Debug, Clone, PartialEq)]
pub struct PtsCoefficients {
    pub c0: Option<f64>,
    /// c_k for k = 1..=degree.
    pub ck: Vec<f64>,
}

impl PtsCoefficients {
    pub fn new(c0: Option<f64>, ck: Vec<f64>) -> SgResult<Self> {
        if ck.is_empty() {
            return Err(SgError::BadInput("polynomial needs at least degree 1".into()));
        }
        if ck.iter().chain(c0.iter()).any(|v| !v.is_finite()) {
            return Err(SgError::NonFinite("polynomial coefficients".into()));
        }
        Ok(PtsCoefficients { c0, ck })
    }

    /// Highest power with an explicit coefficient (r).
    pub fn degree(&self) -> usize {
        self.ck.len()
    }

    /// Linear polynomial z ↦ z of the given degree budget (padding zeros).
    pub fn linear(degree: usize) -> Self {
        let mut ck = vec![0.0; degree.max(1)];
        ck[0] = 1.0;
        PtsCoefficients { c0: None, ck }
    }

    /// σ̃(z) = c₀ + Σ_k c_k z^k, accumulated power by power.
    pub fn eval(&self, z: f64) -> f64 {
        let mut acc = self.c0.unwrap_or(0.0);
        let mut pow = 1.0;
        for &c in &self.ck {
            pow *= z;
            acc += c * pow;
        }
        acc
    }

    /// Applies the polynomial to every entry of a matrix.
    pub fn apply(&self, z: &DenseMatrix) -> DenseMatrix {
        let mut out = z.clone();
        for v in out.data_mut() {
            *v = self.eval(*v);
        }
        out
    }
}

/// Exact dense evaluation of the polynomial layer: the elementwise
/// polynomial of C·X·W. This is the oracle sketched layers approximate.
pub fn pts_dense_reference(
    cmat: &DenseMatrix,
    x: &DenseMatrix,
    w: &DenseMatrix,
    coeffs: &PtsCoefficients,
) -> SgResult<DenseMatrix> {
    let cx = gemm(cmat, x)?;
    let z = gemm(&cx, w)?;
    Ok(coeffs.apply(&z))
}

/// Taylor coefficients of the logistic sigmoid about 0, truncated to
/// degree r: σ(x) = 1/2 + x/4 − x³/48 + x⁵/480 − …
///
/// Computed from σ' = σ − σ², which for σ(x) = Σ a_m x^m gives
/// (m+1)·a_{m+1} = a_m − Σ_{i+j=m} a_i a_j with a₀ = 1/2; this yields the
/// series to any order without a hand-maintained table.
pub fn taylor_init_sigmoid(r: usize, bias: bool) -> SgResult<PtsCoefficients> {
    if r == 0 {
        return Err(SgError::BadInput("sigmoid Taylor init needs degree >= 1".into()));
    }
    let mut a = vec![0.5f64];
    for m in 0..r {
        let conv: f64 = (0..=m).map(|i| a[i] * a[m - i]).sum();
        a.push((a[m] - conv) / (m + 1) as f64);
    }
    PtsCoefficients::new(bias.then_some(a[0]), a[1..].to_vec())
}

/// λ·Σ c² over all coefficients (c₀ included when present), with its
/// gradient 2λc in the same layout.
pub fn l2_penalty(coeffs: &PtsCoefficients, lambda: f64) -> SgResult<(f64, PtsCoefficients)> {
    if lambda < 0.0 {
        return Err(SgError::BadInput(format!("negative penalty weight {lambda}")));
    }
    let mut value = 0.0;
    let grad_c0 = coeffs.c0.map(|c| {
        value += lambda * c * c;
        2.0 * lambda * c
    });
    let grad_ck: Vec<f64> = coeffs
        .ck
        .iter()
        .map(|&c| {
            value += lambda * c * c;
            2.0 * lambda * c
        })
        .collect();
    Ok((value, PtsCoefficients { c0: grad_c0, ck: grad_ck }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = seeds::rng(seed, "pts-test", &[rows as u64, cols as u64]);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    // Independent scalar oracle: Horner form instead of power accumulation.
    fn horner(coeffs: &PtsCoefficients, z: f64) -> f64 {
        let mut acc = 0.0;
        for &c in coeffs.ck.iter().rev() {
            acc = acc * z + c;
        }
        acc * z + coeffs.c0.unwrap_or(0.0)
    }

    #[test]
    fn linear_coeffs_return_cxw() {
        let cmat = random_matrix(4, 4, 1);
        let x = random_matrix(4, 3, 2);
        let w = random_matrix(3, 3, 3);
        let coeffs = PtsCoefficients::new(None, vec![1.0, 0.0, 0.0]).unwrap();
        let out = pts_dense_reference(&cmat, &x, &w, &coeffs).unwrap();
        let want = gemm(&gemm(&cmat, &x).unwrap(), &w).unwrap();
        assert!(out.max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn quadratic_coeffs_square_entries() {
        let cmat = DenseMatrix::identity(3);
        let x = random_matrix(3, 2, 4);
        let w = DenseMatrix::identity(2);
        let coeffs = PtsCoefficients::new(None, vec![0.0, 1.0]).unwrap();
        let out = pts_dense_reference(&cmat, &x, &w, &coeffs).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - v * v).abs() < 1e-15);
        }
    }

    #[test]
    fn reference_matches_horner_oracle() {
        let cmat = random_matrix(4, 4, 5);
        let x = random_matrix(4, 3, 6);
        let w = random_matrix(3, 3, 7);
        let coeffs = PtsCoefficients::new(Some(0.3), vec![0.5, -0.25, 0.125]).unwrap();
        let out = pts_dense_reference(&cmat, &x, &w, &coeffs).unwrap();
        let z = gemm(&gemm(&cmat, &x).unwrap(), &w).unwrap();
        for (o, v) in out.data().iter().zip(z.data()) {
            assert!((o - horner(&coeffs, *v)).abs() < 1e-12);
        }
    }

    #[test]
    fn reference_is_linear_in_coeffs() {
        let cmat = random_matrix(4, 4, 8);
        let x = random_matrix(4, 3, 9);
        let w = random_matrix(3, 3, 10);
        let ca = PtsCoefficients::new(Some(0.1), vec![0.4, -0.2, 0.05]).unwrap();
        let cb = PtsCoefficients::new(Some(-0.3), vec![0.0, 0.7, 0.25]).unwrap();
        let sum = PtsCoefficients::new(
            Some(0.1 - 0.3),
            ca.ck.iter().zip(&cb.ck).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let out_a = pts_dense_reference(&cmat, &x, &w, &ca).unwrap();
        let out_b = pts_dense_reference(&cmat, &x, &w, &cb).unwrap();
        let out_ab = out_a.add(&out_b).unwrap();
        let out_sum = pts_dense_reference(&cmat, &x, &w, &sum).unwrap();
        assert!(out_ab.max_abs_diff(&out_sum) < 1e-12);
    }

    #[test]
    fn sigmoid_taylor_table() {
        let coeffs = taylor_init_sigmoid(5, true).unwrap();
        assert_eq!(coeffs.c0, Some(0.5));
        let want = [0.25, 0.0, -1.0 / 48.0, 0.0, 1.0 / 480.0];
        for (got, want) in coeffs.ck.iter().zip(want) {
            assert!((got - want).abs() < 1e-15, "got {got}, want {want}");
        }
    }

    #[test]
    fn sigmoid_taylor_degree_one() {
        let coeffs = taylor_init_sigmoid(1, true).unwrap();
        assert_eq!(coeffs.c0, Some(0.5));
        assert_eq!(coeffs.ck, vec![0.25]);
    }

    #[test]
    fn degree_three_truncation_close_to_sigmoid() {
        let coeffs = taylor_init_sigmoid(3, true).unwrap();
        let x = 0.1f64;
        let sigma = 1.0 / (1.0 + (-x).exp());
        let approx = coeffs.eval(x);
        // 1/2 + 0.1/4 - 0.1^3/48 by hand.
        assert!((approx - 0.5249791666666667).abs() < 1e-12);
        assert!((approx - sigma).abs() < 1e-4);
    }

    #[test]
    fn bias_off_passes_through_origin() {
        let coeffs = taylor_init_sigmoid(5, false).unwrap();
        assert_eq!(coeffs.c0, None);
        assert_eq!(coeffs.eval(0.0), 0.0);
    }

    #[test]
    fn l2_penalty_hand_example() {
        let coeffs = PtsCoefficients::new(None, vec![1.0, 2.0]).unwrap();
        let (value, grad) = l2_penalty(&coeffs, 0.1).unwrap();
        assert!((value - 0.5).abs() < 1e-15);
        assert!((grad.ck[0] - 0.2).abs() < 1e-15);
        assert!((grad.ck[1] - 0.4).abs() < 1e-15);
        let (zero, zgrad) = l2_penalty(&coeffs, 0.0).unwrap();
        assert_eq!(zero, 0.0);
        assert!(zgrad.ck.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn l2_gradient_matches_finite_differences() {
        let coeffs = PtsCoefficients::new(Some(0.7), vec![0.3, -1.2, 0.4]).unwrap();
        let lambda = 0.05;
        let (_, grad) = l2_penalty(&coeffs, lambda).unwrap();
        let h = 1e-6;
        let fd = |bump: &dyn Fn(&mut PtsCoefficients, f64)| {
            let mut plus = coeffs.clone();
            bump(&mut plus, h);
            let mut minus = coeffs.clone();
            bump(&mut minus, -h);
            (l2_penalty(&plus, lambda).unwrap().0 - l2_penalty(&minus, lambda).unwrap().0)
                / (2.0 * h)
        };
        let g0 = fd(&|c, eps| *c.c0.as_mut().unwrap() += eps);
        assert!((g0 - grad.c0.unwrap()).abs() < 1e-8);
        for k in 0..3 {
            let gk = fd(&|c, eps| c.ck[k] += eps);
            assert!((gk - grad.ck[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn invalid_coefficients_rejected() {
        assert!(PtsCoefficients::new(None, vec![]).is_err());
        assert!(PtsCoefficients::new(None, vec![f64::NAN]).is_err());
        assert!(l2_penalty(&PtsCoefficients::linear(2), -0.1).is_err());
    }
}
