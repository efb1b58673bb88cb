//! Count sketches, tensor sketches, and the two-sided convolution sketches
//! that carry graph convolutions into sketch space.
//!
//! A hash pair (h, s) with h: [n] -> [c] and Rademacher signs s defines the
//! count sketch CS(u)_b = sum_{j: h(j)=b} s(j) u_j, a linear map with one
//! nonzero per source index. Order-k tensor sketches combine k hash pairs:
//!
//!   TS_k(z)_i = sum over tuples (j_1..j_k) with (h1(j_1)+..+hk(j_k)) mod c = i
//!              of s1(j_1)..sk(j_k) z_{j_1}..z_{j_k}
//!
//! computed here as the inverse DFT of the pointwise product of the DFTs of
//! the k count sketches (circular-convolution route). The inner product of
//! two order-k sketches estimates the k-th power of the inner product of the
//! originals, which is what lets a learned polynomial of a matrix product be
//! evaluated entirely in sketch space.

mod basis;

pub use basis::{basis_change_matrix, basis_change_row};

use crate::counters::Counters;
use crate::error::{SgError, SgResult};
use crate::linalg::{
    elementwise_median, fft_rows, hadamard, ifft_rows, median_in_place, CsrMatrix, DenseMatrix,
};
use crate::seeds;
use rand::Rng;

/// One hash table: bucket map `h` into `[c]` plus signs `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashPair {
    c: usize,
    h: Vec<u32>,
    s: Vec<i8>,
}

impl HashPair {
    pub fn new(c: usize, h: Vec<u32>, s: Vec<i8>) -> SgResult<Self> {
        if c == 0 {
            return Err(SgError::BadInput("hash pair with c = 0".into()));
        }
        if h.len() != s.len() {
            return Err(SgError::BadInput(format!(
                "hash/sign length mismatch: {} vs {}",
                h.len(),
                s.len()
            )));
        }
        if let Some(&bad) = h.iter().find(|&&b| b as usize >= c) {
            return Err(SgError::BadInput(format!("bucket {bad} outside [0, {c})")));
        }
        if s.iter().any(|&v| v != 1 && v != -1) {
            return Err(SgError::BadInput("signs must be +1 or -1".into()));
        }
        Ok(HashPair { c, h, s })
    }

    /// Uniform random buckets and signs from named substreams of `seed`.
    pub fn random(n: usize, c: usize, seed: u64, plus_signs: bool) -> Self {
        let mut hr = seeds::rng(seed, "hash-buckets", &[]);
        let mut sr = seeds::rng(seed, "hash-signs", &[]);
        let h = (0..n).map(|_| hr.gen_range(0..c) as u32).collect();
        let s = (0..n)
            .map(|_| if plus_signs || sr.gen::<bool>() { 1i8 } else { -1i8 })
            .collect();
        HashPair { c, h, s }
    }

    /// The lossless pair: c = n, h = id, s = +1.
    pub fn identity(n: usize) -> Self {
        HashPair { c: n, h: (0..n as u32).collect(), s: vec![1; n] }
    }

    /// Concatenation over a stacked index domain `[n_a + n_b]`; both halves
    /// must share the sketch dimension.
    pub fn stacked(a: &HashPair, b: &HashPair) -> SgResult<Self> {
        if a.c != b.c {
            return Err(SgError::BadInput(format!(
                "stacked hash pairs need equal c: {} vs {}",
                a.c, b.c
            )));
        }
        let mut h = a.h.clone();
        h.extend_from_slice(&b.h);
        let mut s = a.s.clone();
        s.extend_from_slice(&b.s);
        Ok(HashPair { c: a.c, h, s })
    }

    pub fn n(&self) -> usize {
        self.h.len()
    }

    pub fn c(&self) -> usize {
        self.c
    }

    #[inline]
    pub fn bucket(&self, j: usize) -> usize {
        self.h[j] as usize
    }

    #[inline]
    pub fn sign(&self, j: usize) -> f64 {
        self.s[j] as f64
    }

    pub fn buckets(&self) -> &[u32] {
        &self.h
    }

    pub fn signs(&self) -> &[i8] {
        &self.s
    }

    /// Moves node `j` to `bucket`; callers (rehash) own the contribution
    /// edits in dependent sketches.
    pub fn set_bucket(&mut self, j: usize, bucket: usize) {
        debug_assert!(bucket < self.c);
        self.h[j] = bucket as u32;
    }

    pub fn heap_bytes(&self) -> usize {
        self.h.len() * 4 + self.s.len()
    }
}

/// `r` hash pairs over the same index domain, one per tensor-sketch order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SketchFamily {
    pairs: Vec<HashPair>,
}

impl SketchFamily {
    pub fn new(pairs: Vec<HashPair>) -> SgResult<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| SgError::BadInput("sketch family needs at least one pair".into()))?;
        let (n, c) = (first.n(), first.c());
        for p in &pairs {
            if p.n() != n || p.c() != c {
                return Err(SgError::BadInput("sketch family pairs disagree on n or c".into()));
            }
        }
        Ok(SketchFamily { pairs })
    }

    pub fn random(n: usize, c: usize, r: usize, seed: u64, plus_signs: bool) -> SgResult<Self> {
        if r == 0 {
            return Err(SgError::BadInput("sketch family needs r >= 1".into()));
        }
        let pairs = (0..r)
            .map(|k| HashPair::random(n, c, seeds::substream(seed, "family-pair", &[k as u64]), plus_signs))
            .collect();
        SketchFamily::new(pairs)
    }

    pub fn identity(n: usize, r: usize) -> SgResult<Self> {
        if r == 0 {
            return Err(SgError::BadInput("sketch family needs r >= 1".into()));
        }
        SketchFamily::new(vec![HashPair::identity(n); r])
    }

    pub fn n(&self) -> usize {
        self.pairs[0].n()
    }

    pub fn c(&self) -> usize {
        self.pairs[0].c()
    }

    pub fn r(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair(&self, k: usize) -> &HashPair {
        &self.pairs[k]
    }

    pub fn pair_mut(&mut self, k: usize) -> &mut HashPair {
        &mut self.pairs[k]
    }

    pub fn pairs(&self) -> &[HashPair] {
        &self.pairs
    }

    pub fn heap_bytes(&self) -> usize {
        self.pairs.iter().map(|p| p.heap_bytes()).sum()
    }
}

/// Count-sketches every row of `u` (d x n) into d x c:
/// `out[i][b] = sum_{j: h(j)=b} s(j) * u[i][j]`.
pub fn count_sketch_rows(u: &DenseMatrix, hp: &HashPair) -> SgResult<DenseMatrix> {
    if u.cols() != hp.n() {
        return Err(SgError::shape(
            "count_sketch_rows",
            format!("input has {} columns, hash pair covers {}", u.cols(), hp.n()),
        ));
    }
    let mut out = DenseMatrix::zeros(u.rows(), hp.c());
    for i in 0..u.rows() {
        let src = u.row(i);
        let dst = out.row_mut(i);
        for j in 0..src.len() {
            dst[hp.bucket(j)] += hp.sign(j) * src[j];
        }
    }
    Ok(out)
}

/// Which index of a CSR matrix a sparse count sketch hashes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Hash the row index: out (c x cols), `out[h(i)][j] += s(i)·u[i][j]`.
    Rows,
    /// Hash the column index: out (rows x c), same map as
    /// `count_sketch_rows` applied to each sparse row.
    Cols,
}

/// Sparse count sketch along the chosen side.
pub fn count_sketch_sparse(u: &CsrMatrix, hp: &HashPair, side: Side) -> SgResult<CsrMatrix> {
    let hashed_dim = match side {
        Side::Rows => u.rows(),
        Side::Cols => u.cols(),
    };
    if hashed_dim != hp.n() {
        return Err(SgError::shape(
            "count_sketch_sparse",
            format!("hashed dimension {} vs hash pair domain {}", hashed_dim, hp.n()),
        ));
    }
    match side {
        Side::Cols => {
            let c = hp.c();
            let mut rows_out = Vec::with_capacity(u.rows());
            let mut scratch = vec![0.0f64; c];
            let mut touched: Vec<usize> = Vec::new();
            for r in 0..u.rows() {
                for (j, v) in u.row_entries(r) {
                    let b = hp.bucket(j);
                    if scratch[b] == 0.0 && !touched.contains(&b) {
                        touched.push(b);
                    }
                    scratch[b] += hp.sign(j) * v;
                }
                let mut entries: Vec<(usize, f64)> = touched.iter().map(|&b| (b, scratch[b])).collect();
                entries.sort_by_key(|e| e.0);
                for &b in &touched {
                    scratch[b] = 0.0;
                }
                touched.clear();
                rows_out.push(entries);
            }
            CsrMatrix::from_rows(u.rows(), c, rows_out)
        }
        Side::Rows => {
            let mut triplets = Vec::with_capacity(u.nnz());
            for r in 0..u.rows() {
                let b = hp.bucket(r);
                let sg = hp.sign(r);
                for (j, v) in u.row_entries(r) {
                    triplets.push((b, j, sg * v));
                }
            }
            CsrMatrix::from_triplets(hp.c(), u.cols(), &triplets)
        }
    }
}

/// Order-k tensor sketch of every row of `u` (d x n), FFT route. Pairs
/// `1..k` of the family are used; `k = 1` degenerates to the count sketch of
/// pair 1 and is returned directly.
pub fn tensor_sketch_rows(u: &DenseMatrix, fam: &SketchFamily, k: usize) -> SgResult<DenseMatrix> {
    if k == 0 || k > fam.r() {
        return Err(SgError::BadInput(format!("tensor sketch order {k} outside [1, {}]", fam.r())));
    }
    let first = count_sketch_rows(u, fam.pair(0))?;
    if k == 1 {
        return Ok(first);
    }
    let mut freq = fft_rows(&first);
    for p in 1..k {
        let csp = count_sketch_rows(u, fam.pair(p))?;
        freq = hadamard(&freq, &fft_rows(&csp));
    }
    Ok(ifft_rows(&freq).real)
}

/// Order-k tensor sketch of every sparse row, by repeated sparse circular
/// convolution of the per-pair count sketches. Exact (no FFT roundoff),
/// cost per row is O(prod of row-sketch sizes), independent of n.
pub fn tensor_sketch_sparse_rows(
    u: &CsrMatrix,
    fam: &SketchFamily,
    k: usize,
) -> SgResult<CsrMatrix> {
    if k == 0 || k > fam.r() {
        return Err(SgError::BadInput(format!("tensor sketch order {k} outside [1, {}]", fam.r())));
    }
    if u.cols() != fam.n() {
        return Err(SgError::shape(
            "tensor_sketch_sparse_rows",
            format!("input has {} columns, family covers {}", u.cols(), fam.n()),
        ));
    }
    let c = fam.c();
    let mut rows_out = Vec::with_capacity(u.rows());
    let mut scratch = vec![0.0f64; c];
    for r in 0..u.rows() {
        let entries: Vec<(usize, f64)> = u.row_entries(r).collect();
        rows_out.push(tensor_sketch_sparse_row(&entries, fam, k, &mut scratch));
    }
    CsrMatrix::from_rows(u.rows(), c, rows_out)
}

/// Order-k tensor sketch of a single sparse row, as sorted (bucket, value)
/// pairs. `scratch` must be a zeroed slice of length c and is returned
/// zeroed.
pub fn tensor_sketch_sparse_row(
    entries: &[(usize, f64)],
    fam: &SketchFamily,
    k: usize,
    scratch: &mut [f64],
) -> Vec<(usize, f64)> {
    let c = fam.c();
    debug_assert_eq!(scratch.len(), c);
    let sketch_one = |pair: &HashPair, scratch: &mut [f64]| -> Vec<(usize, f64)> {
        let mut touched: Vec<usize> = Vec::new();
        for &(j, v) in entries {
            let b = pair.bucket(j);
            if scratch[b] == 0.0 && !touched.contains(&b) {
                touched.push(b);
            }
            scratch[b] += pair.sign(j) * v;
        }
        touched.sort_unstable();
        let out: Vec<(usize, f64)> = touched.iter().map(|&b| (b, scratch[b])).collect();
        for &b in &touched {
            scratch[b] = 0.0;
        }
        out
    };
    let mut acc = sketch_one(fam.pair(0), scratch);
    for p in 1..k {
        let next = sketch_one(fam.pair(p), scratch);
        // Circular convolution acc ⊛ next via scatter-accumulate.
        let mut touched: Vec<usize> = Vec::new();
        for &(b1, v1) in &acc {
            for &(b2, v2) in &next {
                let b = (b1 + b2) % c;
                if scratch[b] == 0.0 && !touched.contains(&b) {
                    touched.push(b);
                }
                scratch[b] += v1 * v2;
            }
        }
        touched.sort_unstable();
        acc = touched.iter().map(|&b| (b, scratch[b])).collect();
        for &b in &touched {
            scratch[b] = 0.0;
        }
    }
    acc
}

/// The r x r grid of two-sided convolution sketches
/// `blocks[k-1][k'-1] = CS^(k')(TS_k(C)ᵀ)`, all c x c and sparse. These are
/// the only objects through which the graph itself enters a training epoch.
#[derive(Debug, Clone)]
pub struct TwoSidedConvSketches {
    r: usize,
    blocks: Vec<Vec<CsrMatrix>>,
}

impl TwoSidedConvSketches {
    /// Assembles a grid from externally built blocks (e.g. attention-weighted
    /// estimates). Requires a square r x r grid with uniform block dims.
    pub fn from_blocks(blocks: Vec<Vec<CsrMatrix>>) -> SgResult<Self> {
        let r = blocks.len();
        if r == 0 || blocks.iter().any(|row| row.len() != r) {
            return Err(SgError::BadInput("conv sketch grid must be square and nonempty".into()));
        }
        let (br, bc) = (blocks[0][0].rows(), blocks[0][0].cols());
        for row in &blocks {
            for b in row {
                if b.rows() != br || b.cols() != bc {
                    return Err(SgError::shape(
                        "TwoSidedConvSketches::from_blocks",
                        format!("block {}x{} vs {}x{}", b.rows(), b.cols(), br, bc),
                    ));
                }
            }
        }
        Ok(Self { r, blocks })
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn block(&self, k: usize, kp: usize) -> &CsrMatrix {
        &self.blocks[k - 1][kp - 1]
    }

    pub fn block_mut(&mut self, k: usize, kp: usize) -> &mut CsrMatrix {
        &mut self.blocks[k - 1][kp - 1]
    }

    pub fn heap_bytes(&self) -> usize {
        self.blocks.iter().flatten().map(|b| b.heap_bytes()).sum()
    }

    pub fn total_nnz(&self) -> usize {
        self.blocks.iter().flatten().map(|b| b.nnz()).sum()
    }
}

/// Builds the full grid for a square convolution matrix whose rows and
/// columns are both indexed by nodes of `ts_family`'s domain; `cs_family`
/// hashes the output-row side. For the common single-table case pass the
/// same family twice.
pub fn two_sided_sketch_conv(
    cmat: &CsrMatrix,
    ts_family: &SketchFamily,
    cs_family: &SketchFamily,
) -> SgResult<TwoSidedConvSketches> {
    if cmat.cols() != ts_family.n() {
        return Err(SgError::shape(
            "two_sided_sketch_conv",
            format!("cmat has {} columns, ts family covers {}", cmat.cols(), ts_family.n()),
        ));
    }
    if cmat.rows() != cs_family.n() {
        return Err(SgError::shape(
            "two_sided_sketch_conv",
            format!("cmat has {} rows, cs family covers {}", cmat.rows(), cs_family.n()),
        ));
    }
    // Sketch widths may differ: blocks come out ts.c() x cs.c().
    let r = ts_family.r().min(cs_family.r());
    let mut blocks = Vec::with_capacity(r);
    for k in 1..=r {
        let ts = tensor_sketch_sparse_rows(cmat, ts_family, k)?;
        let mut row = Vec::with_capacity(r);
        for kp in 1..=r {
            // CS^(k') hashes the node-indexed rows of TS_k(C); the block is
            // the transpose of that row-side sketch.
            let sketched = count_sketch_sparse(&ts, cs_family.pair(kp - 1), Side::Rows)?;
            row.push(sketched.transpose());
        }
        blocks.push(row);
    }
    Ok(TwoSidedConvSketches { r, blocks })
}

/// Per-pair sketch of the all-ones direction: `xi_b = sum_{j: h(j)=b} s(j)`.
/// The layer bias term c0·J unsketches correctly when added as
/// `c0 · ones_row ⊗ xi`.
pub fn ones_sketch(hp: &HashPair) -> Vec<f64> {
    let mut xi = vec![0.0; hp.c()];
    for j in 0..hp.n() {
        xi[hp.bucket(j)] += hp.sign(j);
    }
    xi
}

/// Recovers an n x d estimate from r feature sketches (each d x c): row i is
/// the entrywise median over k of `s_k(i) · sketches[k][:, h_k(i)]`.
pub fn unsketch_median(sketches: &[DenseMatrix], fam: &SketchFamily) -> SgResult<DenseMatrix> {
    if sketches.len() != fam.r() {
        return Err(SgError::BadInput(format!(
            "{} sketches for family of r = {}",
            sketches.len(),
            fam.r()
        )));
    }
    let d = sketches
        .first()
        .ok_or_else(|| SgError::BadInput("unsketch of empty sketch list".into()))?
        .rows();
    for s in sketches {
        if s.rows() != d || s.cols() != fam.c() {
            return Err(SgError::shape(
                "unsketch_median",
                format!("sketch {}x{} vs expected {}x{}", s.rows(), s.cols(), d, fam.c()),
            ));
        }
    }
    let n = fam.n();
    let estimates: Vec<DenseMatrix> = (0..fam.r())
        .map(|k| {
            let pair = fam.pair(k);
            let mut est = DenseMatrix::zeros(n, d);
            for i in 0..n {
                let b = pair.bucket(i);
                let sg = pair.sign(i);
                let dst = est.row_mut(i);
                for (f, slot) in dst.iter_mut().enumerate() {
                    *slot = sg * sketches[k].get(f, b);
                }
            }
            est
        })
        .collect();
    elementwise_median(&estimates)
}

/// Decodes one node (r column reads, counted).
pub fn unsketch_node(
    i: usize,
    sketches: &[DenseMatrix],
    fam: &SketchFamily,
    counters: &mut Counters,
) -> SgResult<Vec<f64>> {
    if sketches.len() != fam.r() {
        return Err(SgError::BadInput(format!(
            "{} sketches for family of r = {}",
            sketches.len(),
            fam.r()
        )));
    }
    if i >= fam.n() {
        return Err(SgError::BadInput(format!("node {i} outside domain {}", fam.n())));
    }
    let d = sketches[0].rows();
    let mut scratch = vec![0.0f64; fam.r()];
    let mut out = vec![0.0f64; d];
    for (f, slot) in out.iter_mut().enumerate() {
        for k in 0..fam.r() {
            let pair = fam.pair(k);
            scratch[k] = pair.sign(i) * sketches[k].get(f, pair.bucket(i));
        }
        *slot = median_in_place(&mut scratch);
    }
    counters.decode_column_reads += fam.r() as u64;
    counters.decodes += 1;
    Ok(out)
}

/// Reference tensor sketch straight from the defining sum over k-tuples.
/// Exponential in k; exists to pin the FFT route on small cases.
pub fn tensor_sketch_brute_force(z: &[f64], fam: &SketchFamily, k: usize) -> SgResult<Vec<f64>> {
    if k == 0 || k > fam.r() {
        return Err(SgError::BadInput(format!("tensor sketch order {k} outside [1, {}]", fam.r())));
    }
    if z.len() != fam.n() {
        return Err(SgError::BadInput("vector length vs family domain".into()));
    }
    let n = z.len();
    let c = fam.c();
    let mut out = vec![0.0; c];
    let mut tuple = vec![0usize; k];
    loop {
        let mut bucket = 0usize;
        let mut val = 1.0f64;
        for (p, &j) in tuple.iter().enumerate() {
            let pair = fam.pair(p);
            bucket += pair.bucket(j);
            val *= pair.sign(j) * z[j];
        }
        out[bucket % c] += val;
        // Next tuple in odometer order.
        let mut pos = 0;
        loop {
            tuple[pos] += 1;
            if tuple[pos] < n {
                break;
            }
            tuple[pos] = 0;
            pos += 1;
            if pos == k {
                return Ok(out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn gaussian_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        use rand_distr::{Distribution, StandardNormal};
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn count_sketch_worked_example() {
        // n=4, c=2, h=[0,1,0,1], s=[+,-,+,-], row [1,2,3,4] -> [4, -6].
        let hp = HashPair::new(2, vec![0, 1, 0, 1], vec![1, -1, 1, -1]).unwrap();
        let u = DenseMatrix::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = count_sketch_rows(&u, &hp).unwrap();
        assert_eq!(s.data(), &[4.0, -6.0]);
    }

    #[test]
    fn identity_pair_is_lossless() {
        let hp = HashPair::identity(5);
        let u = DenseMatrix::from_vec(2, 5, (0..10).map(|v| v as f64 - 3.0).collect()).unwrap();
        let s = count_sketch_rows(&u, &hp).unwrap();
        assert_eq!(s, u);
    }

    #[test]
    fn count_sketch_is_linear() {
        let mut rng = seeds::rng(11, "cs-linear", &[]);
        let hp = HashPair::random(40, 7, 5, false);
        let u = gaussian_vec(&mut rng, 40);
        let v = gaussian_vec(&mut rng, 40);
        let (a, b) = (1.7, -0.3);
        let mixed: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let su = count_sketch_rows(&DenseMatrix::from_vec(1, 40, u).unwrap(), &hp).unwrap();
        let sv = count_sketch_rows(&DenseMatrix::from_vec(1, 40, v).unwrap(), &hp).unwrap();
        let sm = count_sketch_rows(&DenseMatrix::from_vec(1, 40, mixed).unwrap(), &hp).unwrap();
        let lin = su.scale(a).add(&sv.scale(b)).unwrap();
        assert!(sm.max_abs_diff(&lin) < 1e-12);
    }

    #[test]
    fn count_sketch_inner_product_unbiased_within_3se() {
        // 10k independent sketches of fixed u, v (n=100, c=10); the mean of
        // <CS(u), CS(v)> must sit within 3 standard errors of <u, v>.
        let n = 100;
        let c = 10;
        let trials = 10_000;
        let mut data_rng = seeds::rng(2024, "cs-unbiased-data", &[]);
        let u = gaussian_vec(&mut data_rng, n);
        let v = gaussian_vec(&mut data_rng, n);
        let truth = dot(&u, &v);
        let ud = DenseMatrix::from_vec(1, n, u).unwrap();
        let vd = DenseMatrix::from_vec(1, n, v).unwrap();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..trials {
            let hp = HashPair::random(n, c, seeds::substream(55, "cs-unbiased", &[t]), false);
            let su = count_sketch_rows(&ud, &hp).unwrap();
            let sv = count_sketch_rows(&vd, &hp).unwrap();
            let est = dot(su.data(), sv.data());
            sum += est;
            sumsq += est * est;
        }
        let mean = sum / trials as f64;
        let var = (sumsq / trials as f64 - mean * mean).max(0.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - truth).abs() <= 3.0 * se,
            "mean {mean} vs truth {truth}, 3se {}",
            3.0 * se
        );
    }

    #[test]
    fn tensor_sketch_order2_inner_product_unbiased_within_3se() {
        // E<TS_2(u), TS_2(v)> = <u, v>^2 over independent families.
        let n = 50;
        let c = 25;
        let trials = 10_000;
        let mut data_rng = seeds::rng(77, "ts2-data", &[]);
        let u = gaussian_vec(&mut data_rng, n);
        let v = gaussian_vec(&mut data_rng, n);
        let truth = dot(&u, &v).powi(2);
        let ud = DenseMatrix::from_vec(1, n, u).unwrap();
        let vd = DenseMatrix::from_vec(1, n, v).unwrap();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..trials {
            let fam =
                SketchFamily::random(n, c, 2, seeds::substream(90, "ts2-fam", &[t]), false).unwrap();
            let su = tensor_sketch_rows(&ud, &fam, 2).unwrap();
            let sv = tensor_sketch_rows(&vd, &fam, 2).unwrap();
            let est = dot(su.data(), sv.data());
            sum += est;
            sumsq += est * est;
        }
        let mean = sum / trials as f64;
        let var = (sumsq / trials as f64 - mean * mean).max(0.0);
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - truth).abs() <= 3.0 * se,
            "mean {mean} vs truth {truth}, 3se {}",
            3.0 * se
        );
    }

    #[test]
    fn fft_route_matches_defining_sum_on_all_small_cases() {
        // Every n <= 5, c <= 4, k <= 3 against the brute-force tuple sum.
        for n in 1..=5usize {
            for c in 1..=4usize {
                for k in 1..=3usize {
                    let seed = seeds::substream(7, "eq2", &[n as u64, c as u64, k as u64]);
                    let fam = SketchFamily::random(n, c, k, seed, false).unwrap();
                    let mut rng = seeds::rng(seed, "z", &[]);
                    let z = gaussian_vec(&mut rng, n);
                    let brute = tensor_sketch_brute_force(&z, &fam, k).unwrap();
                    let fftr = tensor_sketch_rows(
                        &DenseMatrix::from_vec(1, n, z.clone()).unwrap(),
                        &fam,
                        k,
                    )
                    .unwrap();
                    for b in 0..c {
                        assert!(
                            (brute[b] - fftr.get(0, b)).abs() < 1e-10,
                            "n={n} c={c} k={k} bucket {b}: {} vs {}",
                            brute[b],
                            fftr.get(0, b)
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn tensor_sketch_order1_equals_count_sketch() {
        let fam = SketchFamily::random(30, 8, 3, 5, false).unwrap();
        let u = DenseMatrix::from_vec(
            2,
            30,
            (0..60).map(|i| ((i * 13 % 7) as f64) - 3.0).collect(),
        )
        .unwrap();
        let ts1 = tensor_sketch_rows(&u, &fam, 1).unwrap();
        let cs = count_sketch_rows(&u, fam.pair(0)).unwrap();
        assert_eq!(ts1, cs);
    }

    #[test]
    fn sparse_tensor_sketch_matches_dense_route() {
        let n = 24;
        let c = 9;
        let fam = SketchFamily::random(n, c, 3, 99, false).unwrap();
        // A sparse matrix with varied row sparsity, including an empty row.
        let mut triplets = Vec::new();
        for i in 0..10usize {
            if i == 4 {
                continue;
            }
            for j in 0..n {
                if (i * 7 + j * 3) % 11 == 0 {
                    triplets.push((i, j, (i + j) as f64 * 0.25 - 1.0));
                }
            }
        }
        let sp = CsrMatrix::from_triplets(10, n, &triplets).unwrap();
        let dn = sp.densify();
        for k in 1..=3 {
            let got = tensor_sketch_sparse_rows(&sp, &fam, k).unwrap().densify();
            let want = tensor_sketch_rows(&dn, &fam, k).unwrap();
            assert!(got.max_abs_diff(&want) < 1e-9, "k = {k}");
        }
    }

    #[test]
    fn count_sketch_sparse_sides_match_dense() {
        let hp = HashPair::random(12, 5, 3, false);
        let sp = CsrMatrix::from_triplets(
            12,
            12,
            &[(0, 3, 1.0), (2, 7, -2.0), (5, 0, 0.5), (11, 11, 3.0), (2, 3, 1.5)],
        )
        .unwrap();
        let dn = sp.densify();
        let cols = count_sketch_sparse(&sp, &hp, Side::Cols).unwrap().densify();
        let want_cols = count_sketch_rows(&dn, &hp).unwrap();
        assert!(cols.max_abs_diff(&want_cols) < 1e-12);
        let rows = count_sketch_sparse(&sp, &hp, Side::Rows).unwrap().densify();
        let want_rows = count_sketch_rows(&dn.transpose(), &hp).unwrap().transpose();
        assert!(rows.max_abs_diff(&want_rows) < 1e-12);
    }

    #[test]
    fn two_sided_blocks_match_dense_oracle() {
        let n = 14;
        let c = 6;
        let fam = SketchFamily::random(n, c, 3, 1234, false).unwrap();
        // Normalized adjacency of a path graph.
        let edges = crate::data::path_graph_edges(n);
        let cmat =
            crate::data::normalize_adjacency(n, &edges, crate::data::ConvKind::GcnSym).unwrap();
        let two = two_sided_sketch_conv(&cmat, &fam, &fam).unwrap();
        let dense_c = cmat.densify();
        for k in 1..=3usize {
            let ts = tensor_sketch_rows(&dense_c, &fam, k).unwrap();
            for kp in 1..=3usize {
                let want = count_sketch_rows(&ts.transpose(), fam.pair(kp - 1)).unwrap();
                let got = two.block(k, kp).densify();
                assert!(
                    got.max_abs_diff(&want) < 1e-9,
                    "block ({k},{kp}) off by {}",
                    got.max_abs_diff(&want)
                );
            }
        }
    }

    #[test]
    fn two_sided_path_graph_stays_sparse() {
        let n = 100;
        let c = 10;
        let fam = SketchFamily::random(n, c, 3, 4321, false).unwrap();
        let edges = crate::data::path_graph_edges(n);
        let cmat =
            crate::data::normalize_adjacency(n, &edges, crate::data::ConvKind::GcnSym).unwrap();
        let two = two_sided_sketch_conv(&cmat, &fam, &fam).unwrap();
        for k in 1..=3 {
            for kp in 1..=3 {
                assert!(
                    two.block(k, kp).nnz() <= cmat.nnz(),
                    "block ({k},{kp}) nnz {} exceeds cmat nnz {}",
                    two.block(k, kp).nnz(),
                    cmat.nnz()
                );
            }
        }
    }

    #[test]
    fn unsketch_median_identity_family_recovers_exactly() {
        let n = 9;
        let d = 4;
        let fam = SketchFamily::identity(n, 3).unwrap();
        let x = DenseMatrix::from_vec(n, d, (0..n * d).map(|v| (v as f64).cos()).collect()).unwrap();
        let xt = x.transpose();
        let sketches: Vec<DenseMatrix> = (0..3)
            .map(|k| count_sketch_rows(&xt, fam.pair(k)).unwrap())
            .collect();
        let back = unsketch_median(&sketches, &fam).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn decode_error_monotone_in_sketch_ratio() {
        // Mean decode error averaged over 100 seeds must be nonincreasing
        // across c/n in {0.1, 0.25, 0.5, 1.0}.
        let n = 200;
        let d = 8;
        let ratios = [0.1, 0.25, 0.5, 1.0];
        let mut errs = Vec::new();
        for &ratio in &ratios {
            let c = ((n as f64 * ratio) as usize).max(1);
            let mut total = 0.0;
            for t in 0..100u64 {
                let seed = seeds::substream(31, "decode-mono", &[t]);
                let mut rng = seeds::rng(seed, "x", &[]);
                let x = DenseMatrix::from_vec(n, d, gaussian_vec(&mut rng, n * d)).unwrap();
                let fam = SketchFamily::random(n, c, 3, seed, false).unwrap();
                let xt = x.transpose();
                let sketches: Vec<DenseMatrix> = (0..3)
                    .map(|k| count_sketch_rows(&xt, fam.pair(k)).unwrap())
                    .collect();
                let back = unsketch_median(&sketches, &fam).unwrap();
                total += back.sub(&x).unwrap().frob_norm() / x.frob_norm();
            }
            errs.push(total / 100.0);
        }
        for w in errs.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "errors not monotone: {errs:?}");
        }
    }

    #[test]
    fn median_of_three_concentrates_better_than_single() {
        // Per-entry |error| median over 1000 seeds, c = n/2: r=3 beats r=1.
        let n = 40;
        let c = 20;
        let mut errs_r3 = Vec::new();
        let mut errs_r1 = Vec::new();
        for t in 0..1000u64 {
            let seed = seeds::substream(13, "median-conc", &[t]);
            let mut rng = seeds::rng(seed, "x", &[]);
            let x = DenseMatrix::from_vec(n, 1, gaussian_vec(&mut rng, n)).unwrap();
            let xt = x.transpose();
            let fam = SketchFamily::random(n, c, 3, seed, false).unwrap();
            let sketches: Vec<DenseMatrix> = (0..3)
                .map(|k| count_sketch_rows(&xt, fam.pair(k)).unwrap())
                .collect();
            let back3 = unsketch_median(&sketches, &fam).unwrap();
            let fam1 = SketchFamily::new(vec![fam.pair(0).clone()]).unwrap();
            let back1 = unsketch_median(&sketches[..1], &fam1).unwrap();
            errs_r3.push(back3.sub(&x).unwrap().data()[n / 2].abs());
            errs_r1.push(back1.sub(&x).unwrap().data()[n / 2].abs());
        }
        let med3 = median_in_place(&mut errs_r3);
        let med1 = median_in_place(&mut errs_r1);
        assert!(med3 < med1, "median |err| r3 {med3} vs r1 {med1}");
    }

    #[test]
    fn unsketch_node_matches_full_unsketch_and_counts_reads() {
        let n = 25;
        let fam = SketchFamily::random(n, 7, 3, 3, false).unwrap();
        let x = DenseMatrix::from_vec(n, 5, (0..125).map(|v| (v as f64).sin()).collect()).unwrap();
        let xt = x.transpose();
        let sketches: Vec<DenseMatrix> = (0..3)
            .map(|k| count_sketch_rows(&xt, fam.pair(k)).unwrap())
            .collect();
        let full = unsketch_median(&sketches, &fam).unwrap();
        let mut counters = Counters::new();
        for i in [0usize, 7, 24] {
            let row = unsketch_node(i, &sketches, &fam, &mut counters).unwrap();
            for f in 0..5 {
                assert!((row[f] - full.get(i, f)).abs() < 1e-12);
            }
        }
        assert_eq!(counters.decodes, 3);
        assert_eq!(counters.decode_column_reads, 9);
    }

    #[test]
    fn ones_sketch_is_signed_bucket_count() {
        let hp = HashPair::new(3, vec![0, 0, 2, 1], vec![1, -1, 1, 1]).unwrap();
        assert_eq!(ones_sketch(&hp), vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn stacked_pair_concatenates_domains() {
        let a = HashPair::new(4, vec![0, 1], vec![1, 1]).unwrap();
        let b = HashPair::new(4, vec![2, 3], vec![-1, 1]).unwrap();
        let st = HashPair::stacked(&a, &b).unwrap();
        assert_eq!(st.n(), 4);
        assert_eq!(st.buckets(), &[0, 1, 2, 3]);
        assert_eq!(st.signs(), &[1, 1, -1, 1]);
    }

    #[test]
    fn invalid_pairs_rejected() {
        assert!(HashPair::new(2, vec![0, 2], vec![1, 1]).is_err()); // bucket oob
        assert!(HashPair::new(2, vec![0, 1], vec![1, 0]).is_err()); // bad sign
        assert!(HashPair::new(0, vec![], vec![]).is_err()); // c = 0
        assert!(SketchFamily::new(vec![]).is_err());
    }
}
