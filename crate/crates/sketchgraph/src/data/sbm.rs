//! Stochastic block model generator for synthetic benchmarks.
//!
//! Nodes are split into equally sized blocks; an edge between u and v is
//! drawn independently with probability `p_in` (same block) or `p_out`
//! (different blocks). Features are a one-hot block indicator plus
//! Gaussian noise, so a linear classifier can recover the block but not
//! trivially. Labels are block ids.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{GraphDataset, Splits};
use crate::error::{SgError, SgResult};
use crate::linalg::DenseMatrix;
use crate::seeds;

#[derive(Debug, Clone)]
pub struct SbmParams {
    pub n: usize,
    pub blocks: usize,
    /// Within-block edge probability.
    pub p_in: f64,
    /// Cross-block edge probability.
    pub p_out: f64,
    /// Feature dimension; must be >= blocks.
    pub dim: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
}

impl SbmParams {
    /// Expected number of undirected edges under these parameters.
    pub fn expected_edges(&self) -> f64 {
        let n = self.n as f64;
        let b = self.blocks as f64;
        let per_block = n / b;
        let within_pairs = b * per_block * (per_block - 1.0) / 2.0;
        let cross_pairs = n * (n - 1.0) / 2.0 - within_pairs;
        within_pairs * self.p_in + cross_pairs * self.p_out
    }
}

/// Samples a graph, features, labels, and a 60/20/20 per-block split.
pub fn sbm_generate(params: &SbmParams, seed: u64) -> SgResult<GraphDataset> {
    let SbmParams { n, blocks, p_in, p_out, dim, noise } = *params;
    if blocks == 0 || n < blocks {
        return Err(SgError::BadInput(format!("{blocks} blocks for {n} nodes")));
    }
    if dim < blocks {
        return Err(SgError::BadInput(format!("dim {dim} < blocks {blocks}")));
    }
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(SgError::BadInput(format!("{name} = {p} outside [0, 1]")));
        }
    }

    let labels: Vec<u32> = (0..n).map(|i| (i % blocks) as u32).collect();

    let mut edge_rng = seeds::rng(seed, "sbm-edges", &[]);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if edge_rng.gen::<f64>() < p {
                edges.push((u as u32, v as u32));
            }
        }
    }

    let mut feat_rng = seeds::rng(seed, "sbm-features", &[]);
    let normal = Normal::new(0.0, noise).map_err(|e| SgError::BadInput(format!("noise: {e}")))?;
    let mut data = vec![0.0f64; n * dim];
    for i in 0..n {
        data[i * dim + labels[i] as usize] = 1.0;
        for j in 0..dim {
            data[i * dim + j] += normal.sample(&mut feat_rng);
        }
    }
    let features = DenseMatrix::from_vec(n, dim, data)?;

    // Per-block 60/20/20 split keeps class balance in every part.
    let mut splits = Splits::default();
    let mut by_block: Vec<Vec<u32>> = vec![Vec::new(); blocks];
    for i in 0..n {
        by_block[labels[i] as usize].push(i as u32);
    }
    for members in by_block {
        let m = members.len();
        let train_end = (m * 6) / 10;
        let val_end = (m * 8) / 10;
        splits.train.extend_from_slice(&members[..train_end]);
        splits.val.extend_from_slice(&members[train_end..val_end]);
        splits.test.extend_from_slice(&members[val_end..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();

    GraphDataset::new(n, edges, features, labels, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_params() -> SbmParams {
        SbmParams { n: 100, blocks: 4, p_in: 0.2, p_out: 0.02, dim: 8, noise: 0.1 }
    }

    #[test]
    fn edge_count_tracks_expectation() {
        let params = base_params();
        let expect = params.expected_edges();
        let mut total = 0usize;
        let trials = 20;
        for seed in 0..trials {
            total += sbm_generate(&params, seed).unwrap().edges.len();
        }
        let mean = total as f64 / trials as f64;
        // 20 trials of ~320 Bernoulli successes: mean within 5% w.h.p.
        assert!(
            (mean - expect).abs() / expect < 0.05,
            "mean edges {mean}, expected {expect}"
        );
    }

    #[test]
    fn labels_cycle_through_blocks() {
        let ds = sbm_generate(&base_params(), 7).unwrap();
        assert_eq!(ds.labels[0], 0);
        assert_eq!(ds.labels[1], 1);
        assert_eq!(ds.labels[5], 1);
        assert_eq!(ds.num_classes, 4);
    }

    #[test]
    fn splits_cover_all_nodes() {
        let ds = sbm_generate(&base_params(), 3).unwrap();
        let total = ds.splits.train.len() + ds.splits.val.len() + ds.splits.test.len();
        assert_eq!(total, ds.n);
        assert_eq!(ds.splits.train.len(), 60);
        assert_eq!(ds.splits.val.len(), 20);
    }

    #[test]
    fn features_peak_at_block_coordinate() {
        let params = SbmParams { noise: 0.05, ..base_params() };
        let ds = sbm_generate(&params, 11).unwrap();
        let mut hits = 0;
        for i in 0..ds.n {
            let row = ds.features.row(i);
            let argmax = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            if argmax == ds.labels[i] as usize {
                hits += 1;
            }
        }
        assert!(hits > 95, "only {hits}/100 rows peak at their block");
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = sbm_generate(&base_params(), 42).unwrap();
        let b = sbm_generate(&base_params(), 42).unwrap();
        let c = sbm_generate(&base_params(), 43).unwrap();
        assert_eq!(a.edges, b.edges);
        assert!(a.features.max_abs_diff(&b.features) == 0.0);
        assert_ne!(a.edges, c.edges);
    }

    #[test]
    fn bad_params_rejected() {
        assert!(sbm_generate(&SbmParams { p_in: 1.5, ..base_params() }, 0).is_err());
        assert!(sbm_generate(&SbmParams { dim: 2, ..base_params() }, 0).is_err());
        assert!(sbm_generate(&SbmParams { blocks: 0, ..base_params() }, 0).is_err());
    }
}
