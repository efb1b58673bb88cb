//! Attention-weighted convolution sketches, estimated from bucket means.
//!
//! The dense GAT convolution is a masked row softmax over attention scores
//! LeakyReLU([x_i W || x_j W] a). In sketch space every node is only known
//! through its bucket, so scores are computed between bucket means (the
//! feature-sketch columns divided by occupancy; valid because GAT families
//! are all-plus) and weighted by the pair-basis mask sketch, which counts the
//! A+I entries between each bucket pair. Blocks follow the two-sided layout:
//! columns are output-side buckets, rows neighbor-side, so the softmax runs
//! over the neighbor side for each output bucket and is scaled to that
//! bucket's occupancy; on singleton buckets this is exactly the transposed
//! dense convolution. The estimate is recomputed every forward pass and kept
//! off the tape: gradients flow through the feature path only, mirroring the
//! treatment of the other convolution sketches.

use crate::counters::Counters;
use crate::error::{SgError, SgResult};
use crate::linalg::{gemm, CsrMatrix, DenseMatrix};
use crate::sketch::TwoSidedConvSketches;

use super::LayerSketchState;

const LEAKY_SLOPE: f64 = 0.2;

fn leaky_relu(z: f64) -> f64 {
    if z < 0.0 {
        LEAKY_SLOPE * z
    } else {
        z
    }
}

/// Bucket means as rows: column b of the sketch over occupancy b.
fn bucket_means(s_x: &DenseMatrix, sizes: &[usize]) -> DenseMatrix {
    let (d, c) = (s_x.rows(), s_x.cols());
    let mut m = DenseMatrix::zeros(c, d);
    for b in 0..c {
        if sizes[b] == 0 {
            continue;
        }
        let inv = 1.0 / sizes[b] as f64;
        for f in 0..d {
            m.set(b, f, s_x.get(f, b) * inv);
        }
    }
    m
}

/// Estimates the layer's convolution sketches from its stored feature
/// sketches. Returns the r x r grid plus the empty buckets per pair (their
/// rows contribute zero). Cost is O(c^2 d) per block, independent of n.
pub fn estimate_gat_conv_sketches(
    state: &LayerSketchState,
    w: &DenseMatrix,
    attn: &[f64],
    bucket_sizes: &[Vec<usize>],
    counters: &mut Counters,
) -> SgResult<(TwoSidedConvSketches, Vec<(usize, usize)>)> {
    let r = state.r();
    let c = state.c();
    let d = state.feature_dim();
    let d_out = w.cols();
    let gs = state
        .gat
        .as_ref()
        .ok_or_else(|| SgError::BadInput("attention estimate on a state without masks".into()))?;
    if w.rows() != d {
        return Err(SgError::shape(
            "estimate_gat_conv_sketches",
            format!("weight is {}x{}, features have d={d}", w.rows(), w.cols()),
        ));
    }
    if attn.len() != 2 * d_out {
        return Err(SgError::BadInput(format!(
            "attention vector of length {}, expected {}",
            attn.len(),
            2 * d_out
        )));
    }
    if bucket_sizes.len() != r || bucket_sizes.iter().any(|s| s.len() != c) {
        return Err(SgError::BadInput("bucket sizes must cover every pair and bucket".into()));
    }

    let mut empty = Vec::new();
    for (k, sizes) in bucket_sizes.iter().enumerate() {
        for (b, &s) in sizes.iter().enumerate() {
            if s == 0 {
                empty.push((k, b));
            }
        }
    }

    // Per pair: scores decompose as u[b] + v[g] with u = means W a_top,
    // v = means W a_bot, so the pairwise table costs O(c^2) after O(c d^2).
    let (a_top, a_bot) = attn.split_at(d_out);
    let mut us = Vec::with_capacity(r);
    let mut vs = Vec::with_capacity(r);
    for k in 0..r {
        let means = bucket_means(&state.s_x[k], &bucket_sizes[k]);
        let zu = gemm(&means, w)?;
        let mut u = vec![0.0; c];
        let mut v = vec![0.0; c];
        for b in 0..c {
            let row = zu.row(b);
            u[b] = row.iter().zip(a_top).map(|(x, a)| x * a).sum();
            v[b] = row.iter().zip(a_bot).map(|(x, a)| x * a).sum();
        }
        us.push(u);
        vs.push(v);
    }

    let mut blocks = Vec::with_capacity(r);
    for k in 0..r {
        let mut row_blocks = Vec::with_capacity(r);
        for kp in 0..r {
            counters.gat_estimate_flops +=
                (c * d * d_out) as u64 + (2 * c * d_out) as u64 + (c * c) as u64;
            // mask[kp][k] rows are output-side (pair kp) buckets, columns
            // neighbor-side (pair k); the block wants that transposed
            let mask = &gs.mask[kp][k];
            let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(c);
            for o in 0..c {
                let size = bucket_sizes[kp][o];
                if size == 0 || mask.row_len(o) == 0 {
                    rows.push(Vec::new());
                    continue;
                }
                let entries: Vec<(usize, f64)> = mask.row_entries(o).collect();
                let mut zmax = f64::NEG_INFINITY;
                for &(g, _) in &entries {
                    zmax = zmax.max(leaky_relu(us[kp][o] + vs[k][g]));
                }
                let mut out_row = Vec::with_capacity(entries.len());
                let mut denom = 0.0;
                for &(g, m) in &entries {
                    let wgt = m * (leaky_relu(us[kp][o] + vs[k][g]) - zmax).exp();
                    denom += wgt;
                    out_row.push((g, wgt));
                }
                if denom == 0.0 {
                    rows.push(Vec::new());
                    continue;
                }
                let scale = size as f64 / denom;
                for e in &mut out_row {
                    e.1 *= scale;
                }
                rows.push(out_row);
            }
            row_blocks.push(CsrMatrix::from_rows(c, c, rows)?.transpose());
        }
        blocks.push(row_blocks);
    }
    Ok((TwoSidedConvSketches::from_blocks(blocks)?, empty))
}

/// The dense Table-style GAT convolution: masked row softmax over
/// LeakyReLU([x_i W || x_j W] a). Used for inference and as the oracle the
/// bucket-mean estimate degenerates to on singleton buckets.
pub fn gat_dense_conv(
    x: &DenseMatrix,
    w: &DenseMatrix,
    attn: &[f64],
    mask: &CsrMatrix,
) -> SgResult<CsrMatrix> {
    let n = x.rows();
    let d_out = w.cols();
    if attn.len() != 2 * d_out {
        return Err(SgError::BadInput(format!(
            "attention vector of length {}, expected {}",
            attn.len(),
            2 * d_out
        )));
    }
    if mask.rows() != n || mask.cols() != n {
        return Err(SgError::shape(
            "gat_dense_conv",
            format!("mask {}x{} for {n} nodes", mask.rows(), mask.cols()),
        ));
    }
    let xw = gemm(x, w)?;
    let (a_top, a_bot) = attn.split_at(d_out);
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    for i in 0..n {
        let row = xw.row(i);
        u[i] = row.iter().zip(a_top).map(|(x, a)| x * a).sum();
        v[i] = row.iter().zip(a_bot).map(|(x, a)| x * a).sum();
    }
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let entries: Vec<(usize, f64)> = mask.row_entries(i).collect();
        if entries.is_empty() {
            rows.push(Vec::new());
            continue;
        }
        let mut zmax = f64::NEG_INFINITY;
        for &(j, _) in &entries {
            zmax = zmax.max(leaky_relu(u[i] + v[j]));
        }
        let mut out_row = Vec::with_capacity(entries.len());
        let mut denom = 0.0;
        for &(j, m) in &entries {
            let wgt = m * (leaky_relu(u[i] + v[j]) - zmax).exp();
            denom += wgt;
            out_row.push((j, wgt));
        }
        for e in &mut out_row {
            e.1 /= denom;
        }
        rows.push(out_row);
    }
    CsrMatrix::from_rows(n, n, rows)
}
