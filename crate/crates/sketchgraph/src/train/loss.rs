//! Classification losses evaluated on row subsets.

use crate::error::{SgError, SgResult};
use crate::linalg::DenseMatrix;

/// Mean softmax cross-entropy over the given logit rows, with the
/// gradient w.r.t. the logits. Stabilized by log-sum-exp shifting.
pub fn softmax_xent(logits: &DenseMatrix, labels: &[u32]) -> SgResult<(f64, DenseMatrix)> {
    if logits.rows() == 0 {
        return Err(SgError::BadInput("cross-entropy over an empty subset".into()));
    }
    if logits.rows() != labels.len() {
        return Err(SgError::shape(
            "softmax_xent",
            format!("{} logit rows vs {} labels", logits.rows(), labels.len()),
        ));
    }
    let classes = logits.cols();
    let m = logits.rows();
    let inv_m = 1.0 / m as f64;
    let mut grad = DenseMatrix::zeros(m, classes);
    let mut loss = 0.0;
    for i in 0..m {
        let label = labels[i] as usize;
        if label >= classes {
            return Err(SgError::BadInput(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = row.iter().map(|v| v - max).collect();
        let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
        loss += inv_m * (lse - shifted[label]);
        let grow = grad.row_mut(i);
        for (j, g) in grow.iter_mut().enumerate() {
            let p = (shifted[j] - lse).exp();
            *g = inv_m * (p - if j == label { 1.0 } else { 0.0 });
        }
    }
    Ok((loss, grad))
}

/// Fraction of rows whose argmax matches the label; ties to lowest index.
pub fn accuracy(logits: &DenseMatrix, labels: &[u32]) -> SgResult<f64> {
    if logits.rows() != labels.len() {
        return Err(SgError::shape(
            "accuracy",
            format!("{} logit rows vs {} labels", logits.rows(), labels.len()),
        ));
    }
    if logits.rows() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let argmax = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
            .unwrap();
        if argmax == labels[i] as usize {
            hits += 1;
        }
    }
    Ok(hits as f64 / logits.rows() as f64)
}
