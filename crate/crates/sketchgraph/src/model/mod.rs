//! Sketched GNN layers and the state they run on.
//!
//! A model is `ModelParams` (weights, per-layer polynomial activation
//! coefficients, per-table SimHash projections) plus one `LayerSketchState`
//! per layer. The state owns everything that depends on the hash tables: the
//! feature sketches S_X, the two-sided convolution sketches S_C, the LSH
//! bucket directories, and the basis-change link to the next layer's tables.
//! Training never touches the graph directly; it reads S_C and edits the
//! tables incrementally (`rehash_subset`).
//!
//! `GnnVariant` picks how the convolution enters: a fixed matrix (GCN), a
//! stacked self/neighbor pair (GraphSAGE, which widens the sketch domain to
//! 2n), or attention re-estimated from bucket means every forward pass (GAT).

mod gat;
mod layers;
mod rehash;

pub use gat::{estimate_gat_conv_sketches, gat_dense_conv};
pub use layers::{
    coeff_leaves, forward_sketched, sketch_gcn_layer, sketch_sage_layer, ForwardPass,
    LayerCoeffIds,
};
pub use rehash::{rehash_subset, RehashOutcome};

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{SgError, SgResult};
use crate::linalg::{gemm, io, spmm, CsrMatrix, DenseMatrix};
use crate::lsh::{LshDirectory, SimHashProjection};
use crate::pts::PtsCoefficients;
use crate::seeds;
use crate::sketch::{
    basis_change_matrix, count_sketch_rows, count_sketch_sparse, two_sided_sketch_conv, HashPair,
    Side, SketchFamily,
};

/// Row-major sparse matrix that supports entry edits and row replacement,
/// with a cached CSR snapshot for the tape ops. Incremental rehash edits land
/// here; forwards call `snapshot()` and reuse the cache until the next edit.
#[derive(Debug, Clone)]
pub struct EditableSparse {
    nrows: usize,
    ncols: usize,
    rows: Vec<BTreeMap<u32, f64>>,
    cache: Option<Arc<CsrMatrix>>,
}

impl EditableSparse {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self { nrows, ncols, rows: vec![BTreeMap::new(); nrows], cache: None }
    }

    pub fn from_csr(m: &CsrMatrix) -> Self {
        let mut rows = vec![BTreeMap::new(); m.rows()];
        for r in 0..m.rows() {
            for (c, v) in m.row_entries(r) {
                rows[r].insert(c as u32, v);
            }
        }
        Self { nrows: m.rows(), ncols: m.cols(), rows, cache: None }
    }

    pub fn rows(&self) -> usize {
        self.nrows
    }

    pub fn cols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.rows[r].get(&(c as u32)).copied().unwrap_or(0.0)
    }

    /// Adds `delta` to entry (r, c); exact zeros are dropped so nnz stays
    /// honest after a clean remove/re-add cycle.
    pub fn add_at(&mut self, r: usize, c: usize, delta: f64) {
        debug_assert!(r < self.nrows && c < self.ncols);
        self.cache = None;
        let slot = self.rows[r].entry(c as u32).or_insert(0.0);
        *slot += delta;
        if *slot == 0.0 {
            self.rows[r].remove(&(c as u32));
        }
    }

    pub fn set_row(&mut self, r: usize, entries: &[(usize, f64)]) {
        self.cache = None;
        let row = &mut self.rows[r];
        row.clear();
        for &(c, v) in entries {
            debug_assert!(c < self.ncols);
            if v != 0.0 {
                row.insert(c as u32, v);
            }
        }
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows[r].iter().map(|(&c, &v)| (c as usize, v))
    }

    /// Scales every stored entry of a row in place; returns how many.
    pub fn scale_row(&mut self, r: usize, factor: f64) -> usize {
        let row = &mut self.rows[r];
        for v in row.values_mut() {
            *v *= factor;
        }
        let touched = row.len();
        if touched > 0 {
            self.cache = None;
        }
        touched
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.rows[r].len()
    }

    pub fn to_csr(&self) -> CsrMatrix {
        let rows = self
            .rows
            .iter()
            .map(|r| r.iter().map(|(&c, &v)| (c as usize, v)).collect())
            .collect();
        CsrMatrix::from_rows(self.nrows, self.ncols, rows).expect("editable rows are in range")
    }

    pub fn snapshot(&mut self) -> Arc<CsrMatrix> {
        if self.cache.is_none() {
            self.cache = Some(Arc::new(self.to_csr()));
        }
        self.cache.as_ref().expect("just filled").clone()
    }

    pub fn heap_bytes(&self) -> usize {
        // BTreeMap node overhead is amortized to ~3x the payload.
        self.nnz() * (4 + 8) * 3
    }
}

/// Which generalized convolution the layers apply.
#[derive(Debug, Clone)]
pub enum GnnVariant {
    /// Fixed convolution matrix (passed alongside, e.g. sym-normalized A+I).
    Gcn,
    /// Self term plus row-normalized neighbor term, each with its own weight
    /// matrix; sketched over the stacked [self | neigh] domain of width 2n.
    GraphSage { self_conv: Arc<CsrMatrix>, neigh_conv: Arc<CsrMatrix> },
    /// Attention over masked pairs, re-estimated from bucket means every
    /// forward pass. `attn[l]` has length 2*d_{l+1}; `mask` is A+I.
    Gat { attn: Vec<Vec<f64>>, mask: Arc<CsrMatrix> },
}

impl GnnVariant {
    pub fn kind(&self) -> &'static str {
        match self {
            GnnVariant::Gcn => "gcn",
            GnnVariant::GraphSage { .. } => "sage",
            GnnVariant::Gat { .. } => "gat",
        }
    }

    /// Weight matrices per layer.
    pub fn supports(&self) -> usize {
        match self {
            GnnVariant::GraphSage { .. } => 2,
            _ => 1,
        }
    }
}

/// Trainable parameters: weights per layer (one per convolution support),
/// polynomial activation coefficients per layer, and the SimHash projections
/// that define each layer's hash tables.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub weights: Vec<Vec<DenseMatrix>>,
    pub pts: Vec<PtsCoefficients>,
    pub projections: Vec<Vec<SimHashProjection>>,
}

impl ModelParams {
    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    /// Feature width entering each layer plus the final output width.
    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.weights.iter().map(|ws| ws[0].rows()).collect();
        if let Some(last) = self.weights.last() {
            d.push(last[0].cols());
        }
        d
    }

    pub fn validate(&self) -> SgResult<()> {
        let l = self.weights.len();
        if l == 0 {
            return Err(SgError::BadInput("model needs at least one layer".into()));
        }
        if self.pts.len() != l || self.projections.len() != l {
            return Err(SgError::BadInput(format!(
                "layer count mismatch: {} weights vs {} pts vs {} projection sets",
                l,
                self.pts.len(),
                self.projections.len()
            )));
        }
        for (i, ws) in self.weights.iter().enumerate() {
            if ws.is_empty() {
                return Err(SgError::BadInput(format!("layer {i} has no weights")));
            }
            let (r0, c0) = (ws[0].rows(), ws[0].cols());
            if ws.iter().any(|w| w.rows() != r0 || w.cols() != c0) {
                return Err(SgError::shape("ModelParams", format!("layer {i} weight shapes differ")));
            }
            if i + 1 < l && self.weights[i + 1][0].rows() != c0 {
                return Err(SgError::shape(
                    "ModelParams",
                    format!("layer {i} outputs {c0}, layer {} expects {}", i + 1, self.weights[i + 1][0].rows()),
                ));
            }
            for p in &self.projections[i] {
                if p.d() != r0 {
                    return Err(SgError::shape(
                        "ModelParams",
                        format!("layer {i} projection over d={} but features have d={r0}", p.d()),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Glorot-normal weights, sigmoid-series coefficients on hidden layers,
    /// linear coefficients on the output layer (logits stay unsquashed), and
    /// fresh projections per (layer, sketch index).
    pub fn random(dims: &[usize], supports: usize, r: usize, c: usize, seed: u64) -> SgResult<Self> {
        if dims.len() < 2 {
            return Err(SgError::BadInput("need at least input and output dims".into()));
        }
        if supports == 0 || r == 0 {
            return Err(SgError::BadInput("supports and r must be >= 1".into()));
        }
        let l = dims.len() - 1;
        let mut weights = Vec::with_capacity(l);
        let mut pts = Vec::with_capacity(l);
        let mut projections = Vec::with_capacity(l);
        for li in 0..l {
            let (din, dout) = (dims[li], dims[li + 1]);
            let std = (2.0 / (din + dout) as f64).sqrt();
            let mut ws = Vec::with_capacity(supports);
            for q in 0..supports {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds::substream(
                    seed,
                    "model-weights",
                    &[li as u64, q as u64],
                ));
                let dist = Normal::new(0.0, std).map_err(|e| SgError::BadInput(e.to_string()))?;
                let data: Vec<f64> = (0..din * dout).map(|_| dist.sample(&mut rng)).collect();
                ws.push(DenseMatrix::from_vec(din, dout, data)?);
            }
            weights.push(ws);
            pts.push(if li + 1 == l {
                PtsCoefficients::linear(r)
            } else {
                crate::pts::taylor_init_sigmoid(r, true)?
            });
            let mut projs = Vec::with_capacity(r);
            for k in 0..r {
                projs.push(SimHashProjection::random(c, din, seed, &[li as u64, k as u64])?);
            }
            projections.push(projs);
        }
        let out = Self { weights, pts, projections };
        out.validate()?;
        Ok(out)
    }
}

/// GraphSAGE widens the sketch domain: the layer's tensor sketches run over
/// the stacked [self | neighbor] direction of width 2n, with its own family.
/// The halves of each stacked pair restricted to [0, n) give tables over the
/// node domain; `to_left` / `to_right` re-key the layer's feature sketches
/// into those halves when exact half-sketches are not stored.
#[derive(Debug, Clone)]
pub struct SageSide {
    pub stacked_fam: SketchFamily,
    /// Exact count sketches of the features under the stacked pairs' halves;
    /// empty on hidden layers (derived through the links instead).
    pub s_x_left: Vec<DenseMatrix>,
    pub s_x_right: Vec<DenseMatrix>,
    pub to_left: Vec<EditableSparse>,
    pub to_right: Vec<EditableSparse>,
}

/// GAT keeps pair-basis sketches of the (A+I) mask: mask[k][k'][b, g] sums
/// mask entries between bucket b of pair k and bucket g of pair k'. Requires
/// all-plus families so that bucket sums are bucket totals.
#[derive(Debug, Clone)]
pub struct GatSide {
    pub mask: Vec<Vec<EditableSparse>>,
}

/// Everything a layer's sketched compute needs, keyed by its hash tables.
#[derive(Debug, Clone)]
pub struct LayerSketchState {
    /// Tables over the node domain; the layer's outputs and feature sketches
    /// live in these buckets.
    pub fam: SketchFamily,
    /// r feature sketches, each d_l x c: S_X[k] = CS^(k)(X^T).
    pub s_x: Vec<DenseMatrix>,
    /// r x r grid: s_c[k][k'] = CS^(k')(TS_{k+1}(conv)^T).
    pub s_c: Vec<Vec<EditableSparse>>,
    /// The matrix the grid sketches: the convolution (GCN), the stacked
    /// [self | neigh] matrix (GraphSAGE, n x 2n), or the A+I mask (GAT).
    pub conv: Arc<CsrMatrix>,
    /// Bucket membership per pair of `fam`.
    pub dirs: Vec<LshDirectory>,
    /// Basis-change matrices to the next layer's tables, one per pair index.
    pub t_next: Option<Vec<EditableSparse>>,
    pub sage: Option<SageSide>,
    pub gat: Option<GatSide>,
}

/// Restricts one stacked-domain pair (over 2n) to its halves over n.
pub fn split_stacked_pair(sp: &HashPair, n: usize) -> SgResult<(HashPair, HashPair)> {
    if sp.n() != 2 * n {
        return Err(SgError::BadInput(format!(
            "stacked pair covers {} slots, expected {}",
            sp.n(),
            2 * n
        )));
    }
    let h = sp.buckets();
    let s = sp.signs();
    let left = HashPair::new(sp.c(), h[..n].to_vec(), s[..n].to_vec())?;
    let right = HashPair::new(sp.c(), h[n..].to_vec(), s[n..].to_vec())?;
    Ok((left, right))
}

/// Horizontal concatenation [a | b] as CSR (the GraphSAGE stacked form).
pub fn stack_convs(a: &CsrMatrix, b: &CsrMatrix) -> SgResult<CsrMatrix> {
    if a.rows() != b.rows() {
        return Err(SgError::shape(
            "stack_convs",
            format!("{} rows vs {}", a.rows(), b.rows()),
        ));
    }
    let shift = a.cols();
    let rows = (0..a.rows())
        .map(|r| {
            a.row_entries(r)
                .chain(b.row_entries(r).map(|(c, v)| (c + shift, v)))
                .collect()
        })
        .collect();
    CsrMatrix::from_rows(a.rows(), a.cols() + b.cols(), rows)
}

impl LayerSketchState {
    /// Builds a layer state. `features` (n x d) fills exact feature sketches;
    /// hidden layers pass None and start from zero sketches that the first
    /// forward pass snapshots over. For GraphSAGE, `stacked_fam` must cover
    /// 2n; for GAT (`gat_mask`), the family must be all-plus.
    pub fn build(
        features: Option<&DenseMatrix>,
        d: usize,
        conv: Arc<CsrMatrix>,
        fam: SketchFamily,
        stacked_fam: Option<SketchFamily>,
        gat_mask: bool,
    ) -> SgResult<Self> {
        let n = fam.n();
        let r = fam.r();
        let c = fam.c();
        if conv.rows() != n {
            return Err(SgError::shape(
                "LayerSketchState::build",
                format!("conv has {} rows, family covers {}", conv.rows(), n),
            ));
        }
        if let Some(x) = features {
            if x.rows() != n || x.cols() != d {
                return Err(SgError::shape(
                    "LayerSketchState::build",
                    format!("features {}x{}, expected {}x{}", x.rows(), x.cols(), n, d),
                ));
            }
        }
        if gat_mask && stacked_fam.is_some() {
            return Err(SgError::BadInput("a state is GAT or GraphSAGE, not both".into()));
        }

        let xt = features.map(|x| x.transpose());
        let mut s_x = Vec::with_capacity(r);
        for k in 0..r {
            s_x.push(match &xt {
                Some(xt) => count_sketch_rows(xt, fam.pair(k))?,
                None => DenseMatrix::zeros(d, c),
            });
        }

        let (ts_fam, sage) = match stacked_fam {
            Some(sf) => {
                if sf.n() != 2 * n {
                    return Err(SgError::BadInput(format!(
                        "stacked family covers {}, expected {}",
                        sf.n(),
                        2 * n
                    )));
                }
                if sf.r() != r {
                    return Err(SgError::BadInput(format!(
                        "stacked family r={} vs layer r={r}",
                        sf.r()
                    )));
                }
                let mut s_x_left = Vec::new();
                let mut s_x_right = Vec::new();
                let mut to_left = Vec::with_capacity(r);
                let mut to_right = Vec::with_capacity(r);
                for p in 0..r {
                    let (lp, rp) = split_stacked_pair(sf.pair(p), n)?;
                    if let Some(xt) = &xt {
                        s_x_left.push(count_sketch_rows(xt, &lp)?);
                        s_x_right.push(count_sketch_rows(xt, &rp)?);
                    }
                    to_left.push(EditableSparse::from_csr(&basis_change_matrix(fam.pair(p), &lp)?));
                    to_right.push(EditableSparse::from_csr(&basis_change_matrix(fam.pair(p), &rp)?));
                }
                let side = SageSide { stacked_fam: sf, s_x_left, s_x_right, to_left, to_right };
                (None, Some(side))
            }
            None => (Some(&fam), None),
        };

        if conv.cols() != if sage.is_some() { 2 * n } else { n } {
            return Err(SgError::shape(
                "LayerSketchState::build",
                format!("conv has {} cols for domain {}", conv.cols(), n),
            ));
        }

        let grid = match &sage {
            Some(side) => two_sided_sketch_conv(&conv, &side.stacked_fam, &fam)?,
            None => two_sided_sketch_conv(&conv, ts_fam.expect("non-sage"), &fam)?,
        };
        let mut s_c = Vec::with_capacity(r);
        for k in 1..=r {
            let mut row = Vec::with_capacity(r);
            for kp in 1..=r {
                row.push(EditableSparse::from_csr(grid.block(k, kp)));
            }
            s_c.push(row);
        }

        let gat = if gat_mask {
            if fam.pairs().iter().any(|p| p.signs().iter().any(|&s| s != 1)) {
                return Err(SgError::BadInput(
                    "GAT estimation needs all-plus families (bucket sums must be totals)".into(),
                ));
            }
            let mut mask = Vec::with_capacity(r);
            for k in 0..r {
                let by_rows = count_sketch_sparse(&conv, fam.pair(k), Side::Rows)?;
                let mut row = Vec::with_capacity(r);
                for kp in 0..r {
                    let block = count_sketch_sparse(&by_rows, fam.pair(kp), Side::Cols)?;
                    row.push(EditableSparse::from_csr(&block));
                }
                mask.push(row);
            }
            Some(GatSide { mask })
        } else {
            None
        };

        let dirs = fam.pairs().iter().map(LshDirectory::from_hash_pair).collect();
        Ok(Self { fam, s_x, s_c, conv, dirs, t_next: None, sage, gat })
    }

    /// Builds the basis-change link re-keying this layer's buckets into the
    /// next layer's tables (pairwise by sketch index).
    pub fn link_to(&mut self, next: &SketchFamily) -> SgResult<()> {
        if next.r() != self.fam.r() || next.n() != self.fam.n() {
            return Err(SgError::BadInput(format!(
                "link across mismatched families: r {} vs {}, n {} vs {}",
                self.fam.r(),
                next.r(),
                self.fam.n(),
                next.n()
            )));
        }
        let mut t = Vec::with_capacity(self.fam.r());
        for k in 0..self.fam.r() {
            t.push(EditableSparse::from_csr(&basis_change_matrix(
                self.fam.pair(k),
                next.pair(k),
            )?));
        }
        self.t_next = Some(t);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.fam.n()
    }

    pub fn c(&self) -> usize {
        self.fam.c()
    }

    pub fn r(&self) -> usize {
        self.fam.r()
    }

    pub fn feature_dim(&self) -> usize {
        self.s_x[0].rows()
    }

    /// Bucket occupancy per pair, read off the directories.
    pub fn bucket_sizes(&self) -> Vec<Vec<usize>> {
        self.dirs
            .iter()
            .map(|d| (0..d.c()).map(|b| d.bucket_len(b)).collect())
            .collect()
    }

    pub fn snapshot_s_c(&mut self) -> Vec<Vec<Arc<CsrMatrix>>> {
        self.s_c
            .iter_mut()
            .map(|row| row.iter_mut().map(|b| b.snapshot()).collect())
            .collect()
    }

    /// Bytes of the sketch-sized training state: feature sketches, the
    /// convolution sketch grid, basis-change links, and the GraphSAGE/GAT
    /// payloads. Everything counted is O(c)-shaped; hash tables, bucket
    /// directories, and the raw convolution (O(n) and O(m)) are excluded,
    /// since those belong to the preprocessing side of the accounting.
    pub fn sketch_state_bytes(&self) -> u64 {
        const F: u64 = 8; // f64 value
        const E: u64 = 12; // sparse entry: u32 column + f64 value
        let dense = |m: &DenseMatrix| (m.rows() * m.cols()) as u64 * F;
        let sparse = |m: &EditableSparse| m.nnz() as u64 * E;
        let mut total = 0;
        total += self.s_x.iter().map(&dense).sum::<u64>();
        total += self.s_c.iter().flatten().map(&sparse).sum::<u64>();
        if let Some(ts) = &self.t_next {
            total += ts.iter().map(&sparse).sum::<u64>();
        }
        if let Some(sage) = &self.sage {
            total += sage.s_x_left.iter().map(&dense).sum::<u64>();
            total += sage.s_x_right.iter().map(&dense).sum::<u64>();
            total += sage.to_left.iter().map(&sparse).sum::<u64>();
            total += sage.to_right.iter().map(&sparse).sum::<u64>();
        }
        if let Some(gat) = &self.gat {
            total += gat.mask.iter().flatten().map(&sparse).sum::<u64>();
        }
        total
    }

    /// Replaces the stored feature sketches (the per-epoch snapshot of a
    /// hidden layer's computed sketches).
    pub fn snapshot_features(&mut self, sketches: &[DenseMatrix]) -> SgResult<()> {
        if sketches.len() != self.r() {
            return Err(SgError::BadInput(format!(
                "{} sketches for r={}",
                sketches.len(),
                self.r()
            )));
        }
        for (dst, src) in self.s_x.iter_mut().zip(sketches) {
            if src.rows() != dst.rows() || src.cols() != dst.cols() {
                return Err(SgError::shape(
                    "snapshot_features",
                    format!("{}x{} vs {}x{}", src.rows(), src.cols(), dst.rows(), dst.cols()),
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    /// Rebuilds every derived structure from scratch and compares. Catches
    /// drift between incremental edits and the definitions.
    pub fn audit(&self, tol: f64) -> SgResult<()> {
        for (k, (pair, dir)) in self.fam.pairs().iter().zip(&self.dirs).enumerate() {
            dir.audit()?;
            for i in 0..pair.n() {
                if dir.bucket_of(i) as usize != pair.bucket(i) {
                    return Err(SgError::BadInput(format!(
                        "directory {k} disagrees with table at node {i}"
                    )));
                }
            }
        }
        let grid = match &self.sage {
            Some(side) => two_sided_sketch_conv(&self.conv, &side.stacked_fam, &self.fam)?,
            None => two_sided_sketch_conv(&self.conv, &self.fam, &self.fam)?,
        };
        for k in 0..self.r() {
            for kp in 0..self.r() {
                let want = grid.block(k + 1, kp + 1).densify();
                let got = self.s_c[k][kp].to_csr().densify();
                let diff = want.max_abs_diff(&got);
                if diff > tol {
                    return Err(SgError::BadInput(format!(
                        "S_C block ({k},{kp}) drifted from re-sketch by {diff:.3e}"
                    )));
                }
            }
        }
        if let Some(side) = &self.sage {
            for p in 0..self.r() {
                let (lp, rp) = split_stacked_pair(side.stacked_fam.pair(p), self.n())?;
                let wl = basis_change_matrix(self.fam.pair(p), &lp)?.densify();
                let wr = basis_change_matrix(self.fam.pair(p), &rp)?.densify();
                if wl.max_abs_diff(&side.to_left[p].to_csr().densify()) > tol
                    || wr.max_abs_diff(&side.to_right[p].to_csr().densify()) > tol
                {
                    return Err(SgError::BadInput(format!("stacked link {p} drifted")));
                }
            }
        }
        if let Some(gs) = &self.gat {
            for k in 0..self.r() {
                let by_rows = count_sketch_sparse(&self.conv, self.fam.pair(k), Side::Rows)?;
                for kp in 0..self.r() {
                    let want = count_sketch_sparse(&by_rows, self.fam.pair(kp), Side::Cols)?.densify();
                    let got = gs.mask[k][kp].to_csr().densify();
                    if want.max_abs_diff(&got) > tol {
                        return Err(SgError::BadInput(format!("mask block ({k},{kp}) drifted")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn heap_bytes(&self) -> usize {
        let mut total = self.fam.heap_bytes();
        total += self.s_x.iter().map(|m| m.data().len() * 8).sum::<usize>();
        total += self.s_c.iter().flatten().map(|b| b.heap_bytes()).sum::<usize>();
        if let Some(t) = &self.t_next {
            total += t.iter().map(|b| b.heap_bytes()).sum::<usize>();
        }
        if let Some(side) = &self.sage {
            total += side.stacked_fam.heap_bytes();
            total += side.s_x_left.iter().map(|m| m.data().len() * 8).sum::<usize>();
            total += side.s_x_right.iter().map(|m| m.data().len() * 8).sum::<usize>();
            total += side.to_left.iter().map(|b| b.heap_bytes()).sum::<usize>();
            total += side.to_right.iter().map(|b| b.heap_bytes()).sum::<usize>();
        }
        if let Some(gs) = &self.gat {
            total += gs.mask.iter().flatten().map(|b| b.heap_bytes()).sum::<usize>();
        }
        total
    }
}

/// Builds all L layer states for a model and links them. `families[l]` keys
/// layer l's tables; `stacked` supplies the 2n-domain families for GraphSAGE.
pub fn build_layer_states(
    x: &DenseMatrix,
    dims: &[usize],
    variant: &GnnVariant,
    cmat: &Arc<CsrMatrix>,
    families: Vec<SketchFamily>,
    stacked: Option<Vec<SketchFamily>>,
) -> SgResult<Vec<LayerSketchState>> {
    if dims.len() < 2 {
        return Err(SgError::BadInput("need at least input and output dims".into()));
    }
    let l = dims.len() - 1;
    if families.len() != l {
        return Err(SgError::BadInput(format!("{} families for {l} layers", families.len())));
    }
    if x.cols() != dims[0] {
        return Err(SgError::shape(
            "build_layer_states",
            format!("features are {} wide, dims[0]={}", x.cols(), dims[0]),
        ));
    }
    let conv: Arc<CsrMatrix> = match variant {
        GnnVariant::Gcn => cmat.clone(),
        GnnVariant::GraphSage { self_conv, neigh_conv } => {
            Arc::new(stack_convs(self_conv, neigh_conv)?)
        }
        GnnVariant::Gat { mask, .. } => mask.clone(),
    };
    let stacked = match (variant, stacked) {
        (GnnVariant::GraphSage { .. }, Some(s)) => {
            if s.len() != l {
                return Err(SgError::BadInput(format!("{} stacked families for {l} layers", s.len())));
            }
            s.into_iter().map(Some).collect::<Vec<_>>()
        }
        (GnnVariant::GraphSage { .. }, None) => {
            return Err(SgError::BadInput("GraphSAGE needs stacked families".into()))
        }
        (_, Some(_)) => {
            return Err(SgError::BadInput("stacked families are GraphSAGE-only".into()))
        }
        (_, None) => vec![None; l],
    };
    let gat_mask = matches!(variant, GnnVariant::Gat { .. });

    let mut states = Vec::with_capacity(l);
    for (li, (fam, sf)) in families.into_iter().zip(stacked).enumerate() {
        let features = (li == 0).then_some(x);
        states.push(LayerSketchState::build(features, dims[li], conv.clone(), fam, sf, gat_mask)?);
    }
    for li in 0..l.saturating_sub(1) {
        let next = states[li + 1].fam.clone();
        states[li].link_to(&next)?;
    }
    Ok(states)
}

/// How the dense forward squashes each layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationMode {
    /// The learned per-layer polynomial coefficients (matches training).
    LearnedPolynomial,
    /// Logistic sigmoid on hidden layers, identity on the output layer.
    Standard,
}

fn sigmoid_in_place(m: &mut DenseMatrix) {
    for v in m.data_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
}

/// Full dense forward on the real graph: O(m + n d^2) per layer, no sketches.
/// For Gcn the convolution is `cmat`; GraphSAGE and GAT read their payloads
/// (GAT recomputes attention from the current layer features).
pub fn dense_gcn_inference(
    params: &ModelParams,
    cmat: &CsrMatrix,
    x: &DenseMatrix,
    variant: &GnnVariant,
    activation: ActivationMode,
) -> SgResult<DenseMatrix> {
    params.validate()?;
    let l = params.layer_count();
    let mut h = x.clone();
    for li in 0..l {
        let pre = match variant {
            GnnVariant::Gcn => spmm(cmat, &gemm(&h, &params.weights[li][0])?)?,
            GnnVariant::GraphSage { self_conv, neigh_conv } => {
                let a = spmm(self_conv, &gemm(&h, &params.weights[li][0])?)?;
                let b = spmm(neigh_conv, &gemm(&h, &params.weights[li][1])?)?;
                a.add(&b)?
            }
            GnnVariant::Gat { attn, mask } => {
                let conv = gat_dense_conv(&h, &params.weights[li][0], &attn[li], mask)?;
                spmm(&conv, &gemm(&h, &params.weights[li][0])?)?
            }
        };
        h = match activation {
            ActivationMode::LearnedPolynomial => params.pts[li].apply(&pre),
            ActivationMode::Standard => {
                let mut out = pre;
                if li + 1 < l {
                    sigmoid_in_place(&mut out);
                }
                out
            }
        };
    }
    Ok(h)
}

// ---- checkpoint io ----------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct PtsManifest {
    c0: Option<f64>,
    ck: Vec<f64>,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ModelManifest {
    format: String,
    variant: String,
    layers: usize,
    dims: Vec<usize>,
    supports: usize,
    sketch_r: usize,
    sim_c: usize,
    pts: Vec<PtsManifest>,
    attn: Option<Vec<Vec<f64>>>,
}

const MODEL_FORMAT: &str = "sketchgnn-model-v1";

/// Writes manifest.json plus one binary blob per weight/projection matrix
/// (and the variant's conv matrices) into `dir`.
pub fn save_model(dir: &Path, params: &ModelParams, variant: &GnnVariant) -> SgResult<()> {
    params.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| SgError::io(dir.display().to_string(), e))?;
    let l = params.layer_count();
    let manifest = ModelManifest {
        format: MODEL_FORMAT.to_string(),
        variant: variant.kind().to_string(),
        layers: l,
        dims: params.dims(),
        supports: variant.supports(),
        sketch_r: params.projections[0].len(),
        sim_c: params.projections[0][0].c(),
        pts: params
            .pts
            .iter()
            .map(|p| PtsManifest { c0: p.c0, ck: p.ck.clone() })
            .collect(),
        attn: match variant {
            GnnVariant::Gat { attn, .. } => Some(attn.clone()),
            _ => None,
        },
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| SgError::BadInput(format!("manifest encode: {e}")))?;
    std::fs::write(dir.join("manifest.json"), text)
        .map_err(|e| SgError::io(dir.join("manifest.json").display().to_string(), e))?;
    for (li, ws) in params.weights.iter().enumerate() {
        for (q, w) in ws.iter().enumerate() {
            io::save_dense(&dir.join(format!("w{li}_{q}.sgb")), w)?;
        }
    }
    for (li, projs) in params.projections.iter().enumerate() {
        for (k, p) in projs.iter().enumerate() {
            io::save_dense(&dir.join(format!("proj{li}_{k}.sgb")), p.matrix())?;
        }
    }
    match variant {
        GnnVariant::Gcn => {}
        GnnVariant::GraphSage { self_conv, neigh_conv } => {
            io::save_csr(&dir.join("conv_self.sgb"), self_conv)?;
            io::save_csr(&dir.join("conv_neigh.sgb"), neigh_conv)?;
        }
        GnnVariant::Gat { mask, .. } => io::save_csr(&dir.join("mask.sgb"), mask)?,
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> SgResult<(ModelParams, GnnVariant)> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| SgError::io(dir.join("manifest.json").display().to_string(), e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)
        .map_err(|e| SgError::Incompatible(format!("model manifest: {e}")))?;
    if manifest.format != MODEL_FORMAT {
        return Err(SgError::Incompatible(format!(
            "model format {:?}, expected {MODEL_FORMAT:?}",
            manifest.format
        )));
    }
    let l = manifest.layers;
    if manifest.dims.len() != l + 1 || manifest.pts.len() != l {
        return Err(SgError::Incompatible("manifest layer counts disagree".into()));
    }
    let mut weights = Vec::with_capacity(l);
    let mut projections = Vec::with_capacity(l);
    for li in 0..l {
        let mut ws = Vec::with_capacity(manifest.supports);
        for q in 0..manifest.supports {
            ws.push(io::load_dense(&dir.join(format!("w{li}_{q}.sgb")))?);
        }
        weights.push(ws);
        let mut projs = Vec::with_capacity(manifest.sketch_r);
        for k in 0..manifest.sketch_r {
            projs.push(SimHashProjection::new(io::load_dense(
                &dir.join(format!("proj{li}_{k}.sgb")),
            )?)?);
        }
        projections.push(projs);
    }
    let pts = manifest
        .pts
        .into_iter()
        .map(|p| {
            PtsCoefficients::new(p.c0, p.ck)
        })
        .collect::<SgResult<Vec<_>>>()?;
    let params = ModelParams { weights, pts, projections };
    params.validate()?;
    if params.dims() != manifest.dims {
        return Err(SgError::Incompatible("blob shapes disagree with manifest dims".into()));
    }
    let variant = match manifest.variant.as_str() {
        "gcn" => GnnVariant::Gcn,
        "sage" => GnnVariant::GraphSage {
            self_conv: Arc::new(io::load_csr(&dir.join("conv_self.sgb"))?),
            neigh_conv: Arc::new(io::load_csr(&dir.join("conv_neigh.sgb"))?),
        },
        "gat" => GnnVariant::Gat {
            attn: manifest
                .attn
                .ok_or_else(|| SgError::Incompatible("gat manifest without attention".into()))?,
            mask: Arc::new(io::load_csr(&dir.join("mask.sgb"))?),
        },
        other => return Err(SgError::Incompatible(format!("unknown variant {other:?}"))),
    };
    Ok((params, variant))
}
