//! Basis changes between hash tables.
//!
//! When a layer's table drifts (LSH updates) or two layers disagree, sketches
//! keyed by `from` are re-keyed to `to` by right-multiplying with T, where
//!
//!   T[i][j] = (1/|{a: from.h(a)=i}|) · sum_{a: from.h(a)=i, to.h(a)=j}
//!             from.s(a) · to.s(a)
//!
//! i.e. decode each source bucket as the mean of its members, then re-encode
//! under the target table. The row normalization makes identical tables give
//! exactly T = I on occupied buckets, so basis changes are free no-ops until
//! tables actually diverge.

use super::HashPair;
use crate::error::{SgError, SgResult};
use crate::linalg::CsrMatrix;

/// One row of the basis-change matrix, from the members of a single source
/// bucket. Used by both the full build and incremental rehash edits.
pub fn basis_change_row(from: &HashPair, to: &HashPair, members: &[u32]) -> Vec<(usize, f64)> {
    if members.is_empty() {
        return Vec::new();
    }
    let inv = 1.0 / members.len() as f64;
    let mut acc: Vec<(usize, f64)> = Vec::with_capacity(members.len().min(to.c()));
    for &a in members {
        let a = a as usize;
        let j = to.bucket(a);
        let v = from.sign(a) * to.sign(a) * inv;
        match acc.iter_mut().find(|(col, _)| *col == j) {
            Some((_, slot)) => *slot += v,
            None => acc.push((j, v)),
        }
    }
    acc.retain(|&(_, v)| v != 0.0);
    acc.sort_by_key(|e| e.0);
    acc
}

/// Full from.c() x to.c() basis-change matrix between two tables over the
/// same domain. The bucket counts may differ (used when re-keying into a
/// stacked-domain table with its own width).
pub fn basis_change_matrix(from: &HashPair, to: &HashPair) -> SgResult<CsrMatrix> {
    if from.n() != to.n() {
        return Err(SgError::BadInput(format!(
            "basis change across different domains: {} vs {}",
            from.n(),
            to.n()
        )));
    }
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); from.c()];
    for a in 0..from.n() {
        members[from.bucket(a)].push(a as u32);
    }
    let rows = members
        .iter()
        .map(|m| basis_change_row(from, to, m))
        .collect();
    CsrMatrix::from_rows(from.c(), to.c(), rows)
}
