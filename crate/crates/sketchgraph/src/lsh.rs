//! Learnable locality-sensitive hashing.
//!
//! SimHash codes node representations into sketch buckets; the projection
//! is trained with a sampled triplet loss so that similar nodes keep
//! colliding as representations drift. Gradient-ranked bucket selection
//! picks the stale nodes worth rehashing, and per-class hash tables find
//! poorly predicted nodes without touching the whole training set.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::counters::Counters;
use crate::error::{SgError, SgResult};
use crate::linalg::DenseMatrix;
use crate::seeds;
use crate::sketch::{HashPair, SketchFamily};

/// SimHash projection: codes are argmax over the score vector [Pu ∥ −Pu],
/// so a c-bucket table needs c/2 projection rows.
#[derive(Debug, Clone)]
pub struct SimHashProjection {
    p: DenseMatrix,
}

impl SimHashProjection {
    pub fn new(p: DenseMatrix) -> SgResult<Self> {
        if p.rows() == 0 || p.cols() == 0 {
            return Err(SgError::BadInput("empty SimHash projection".into()));
        }
        Ok(SimHashProjection { p })
    }

    /// Gaussian projection for a c-bucket table over d-dimensional inputs.
    pub fn random(c: usize, d: usize, seed: u64, parts: &[u64]) -> SgResult<Self> {
        if c < 2 || c % 2 != 0 {
            return Err(SgError::BadInput(format!("bucket count {c} must be even and >= 2")));
        }
        let mut rng = seeds::rng(seed, "simhash-proj", parts);
        let normal = rand_distr::StandardNormal;
        let data: Vec<f64> =
            (0..(c / 2) * d).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
        Ok(SimHashProjection { p: DenseMatrix::from_vec(c / 2, d, data)? })
    }

    pub fn c(&self) -> usize {
        2 * self.p.rows()
    }

    pub fn d(&self) -> usize {
        self.p.cols()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.p
    }

    pub fn matrix_mut(&mut self) -> &mut DenseMatrix {
        &mut self.p
    }

    /// Pu, the first half of the soft code (the second half is its
    /// negation, so this is all downstream math ever needs).
    pub fn half_scores(&self, u: &[f64]) -> SgResult<Vec<f64>> {
        if u.len() != self.d() {
            return Err(SgError::shape(
                "simhash",
                format!("input length {} vs projection dim {}", u.len(), self.d()),
            ));
        }
        let half = self.p.rows();
        let mut q = vec![0.0; half];
        for (i, qi) in q.iter_mut().enumerate() {
            let row = self.p.row(i);
            *qi = row.iter().zip(u).map(|(a, b)| a * b).sum();
        }
        Ok(q)
    }

    /// Bucket index: argmax over [Pu ∥ −Pu], ties to the lowest index.
    pub fn simhash(&self, u: &[f64], counters: &mut Counters) -> SgResult<usize> {
        let q = self.half_scores(u)?;
        counters.simhash_matvecs += 1;
        let half = q.len();
        let mut best = 0usize;
        let mut best_score = q[0];
        for (i, &qi) in q.iter().enumerate() {
            if qi > best_score {
                best = i;
                best_score = qi;
            }
        }
        for (i, &qi) in q.iter().enumerate() {
            if -qi > best_score {
                best = half + i;
                best_score = -qi;
            }
        }
        Ok(best)
    }
}

/// Hashes every row of `x`; signs are drawn from `sign_seed`, or all +1
/// when `plus_signs` is set (attention-style sketches need nonnegativity).
pub fn build_hash_pair(
    proj: &SimHashProjection,
    x: &DenseMatrix,
    sign_seed: u64,
    plus_signs: bool,
    counters: &mut Counters,
) -> SgResult<HashPair> {
    if x.cols() != proj.d() {
        return Err(SgError::shape(
            "build_hash_pair",
            format!("features are {} wide, projection expects {}", x.cols(), proj.d()),
        ));
    }
    let n = x.rows();
    let mut h = Vec::with_capacity(n);
    for i in 0..n {
        h.push(proj.simhash(x.row(i), counters)? as u32);
    }
    let s = if plus_signs {
        vec![1i8; n]
    } else {
        let mut rng = seeds::rng(sign_seed, "lsh-signs", &[]);
        (0..n).map(|_| if rng.gen::<bool>() { 1i8 } else { -1 }).collect()
    };
    HashPair::new(proj.c(), h, s)
}

/// Bucket -> member lists plus the inverse map, kept mutually consistent.
#[derive(Debug, Clone)]
pub struct LshDirectory {
    buckets: Vec<Vec<u32>>,
    code: Vec<u32>,
}

impl LshDirectory {
    pub fn from_codes(c: usize, codes: &[u32]) -> SgResult<Self> {
        let mut buckets = vec![Vec::new(); c];
        for (i, &b) in codes.iter().enumerate() {
            if b as usize >= c {
                return Err(SgError::BadInput(format!("code {b} out of range [0, {c})")));
            }
            buckets[b as usize].push(i as u32);
        }
        Ok(LshDirectory { buckets, code: codes.to_vec() })
    }

    pub fn from_hash_pair(hp: &HashPair) -> Self {
        // HashPair validated its codes already.
        Self::from_codes(hp.c(), hp.buckets()).expect("validated codes")
    }

    pub fn c(&self) -> usize {
        self.buckets.len()
    }

    pub fn n(&self) -> usize {
        self.code.len()
    }

    pub fn bucket_of(&self, i: usize) -> u32 {
        self.code[i]
    }

    pub fn members(&self, bucket: usize, counters: &mut Counters) -> &[u32] {
        counters.bucket_lookups += 1;
        &self.buckets[bucket]
    }

    /// Bucket occupancy without a membership read; sizes are O(c) metadata.
    pub fn bucket_len(&self, bucket: usize) -> usize {
        self.buckets[bucket].len()
    }

    /// Moves node `i` to `new_bucket`; no-op when already there.
    pub fn move_node(&mut self, i: usize, new_bucket: u32) -> SgResult<()> {
        if new_bucket as usize >= self.c() {
            return Err(SgError::BadInput(format!(
                "bucket {new_bucket} out of range [0, {})",
                self.c()
            )));
        }
        let old = self.code[i];
        if old == new_bucket {
            return Ok(());
        }
        let list = &mut self.buckets[old as usize];
        let pos = list
            .iter()
            .position(|&m| m == i as u32)
            .ok_or_else(|| SgError::Runtime(format!("directory desync at node {i}")))?;
        list.swap_remove(pos);
        self.buckets[new_bucket as usize].push(i as u32);
        self.code[i] = new_bucket;
        Ok(())
    }

    /// Full consistency check: every node in exactly the member list of
    /// its code.
    pub fn audit(&self) -> SgResult<()> {
        let mut seen = vec![false; self.n()];
        for (b, members) in self.buckets.iter().enumerate() {
            for &m in members {
                let m = m as usize;
                if seen[m] {
                    return Err(SgError::Runtime(format!("node {m} listed twice")));
                }
                seen[m] = true;
                if self.code[m] as usize != b {
                    return Err(SgError::Runtime(format!(
                        "node {m} listed in bucket {b} but coded {}",
                        self.code[m]
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(SgError::Runtime(format!("node {missing} in no bucket")));
        }
        Ok(())
    }
}

/// Union of the members of the top ⌈beta·c⌉ buckets per sketch index,
/// ranked by the L2 norm of the gradient column; ties break to the lowest
/// bucket index.
pub fn select_update_set(
    sketch_grads: &[DenseMatrix],
    fam: &SketchFamily,
    beta: f64,
) -> SgResult<BTreeSet<u32>> {
    if sketch_grads.is_empty() {
        return Err(SgError::BadInput("no sketch gradients supplied".into()));
    }
    if !(0.0 < beta && beta <= 1.0) {
        return Err(SgError::BadInput(format!("beta {beta} outside (0, 1]")));
    }
    if sketch_grads.len() != fam.r() {
        return Err(SgError::shape(
            "select_update_set",
            format!("{} gradients for {} sketch pairs", sketch_grads.len(), fam.r()),
        ));
    }
    let c = fam.c();
    let take = (beta * c as f64).ceil() as usize;
    let mut selected = BTreeSet::new();
    for (k, grad) in sketch_grads.iter().enumerate() {
        if grad.cols() != c {
            return Err(SgError::shape(
                "select_update_set",
                format!("gradient {k} has {} columns, sketch width is {c}", grad.cols()),
            ));
        }
        let mut norms: Vec<(f64, usize)> = (0..c)
            .map(|j| {
                let sq: f64 = grad.column(j).iter().map(|v| v * v).sum();
                (sq, j)
            })
            .collect();
        // Descending norm, ascending index on ties.
        norms.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let chosen: BTreeSet<usize> = norms.iter().take(take).map(|&(_, j)| j).collect();
        let pair = fam.pair(k);
        for (node, &bucket) in pair.buckets().iter().enumerate() {
            if chosen.contains(&(bucket as usize)) {
                selected.insert(node as u32);
            }
        }
    }
    Ok(selected)
}

/// Triplet-loss output: hinge value plus the gradient w.r.t. the
/// projection matrix.
#[derive(Debug, Clone)]
pub struct TripletResult {
    pub loss: f64,
    pub grad: DenseMatrix,
    pub positives: usize,
    pub negatives: usize,
}

/// Sampled triplet loss over candidate rows.
///
/// Pairs with inner product above `t_plus` are positives, below `t_minus`
/// negatives; each set is filled up to `pair_cap` from a deterministic
/// shuffle. The loss is max{0, Σ_neg cos − Σ_pos cos + alpha} on the soft
/// codes [Pu ∥ −Pu]; since cos([a∥−a],[b∥−b]) = cos(a,b) the half scores
/// Pu carry all of it. Pairs whose half score vanishes are skipped.
pub fn triplet_loss(
    proj: &SimHashProjection,
    xb: &DenseMatrix,
    t_plus: f64,
    t_minus: f64,
    alpha: f64,
    pair_cap: usize,
    seed: u64,
) -> SgResult<TripletResult> {
    if t_plus <= t_minus {
        return Err(SgError::BadInput(format!("t_plus {t_plus} <= t_minus {t_minus}")));
    }
    if alpha <= 0.0 {
        return Err(SgError::BadInput(format!("alpha {alpha} must be positive")));
    }
    if xb.cols() != proj.d() {
        return Err(SgError::shape(
            "triplet_loss",
            format!("rows are {} wide, projection expects {}", xb.cols(), proj.d()),
        ));
    }
    let m = xb.rows();
    let zero_grad = || DenseMatrix::zeros(proj.matrix().rows(), proj.d());
    if m < 2 || pair_cap == 0 {
        return Ok(TripletResult { loss: 0.0, grad: zero_grad(), positives: 0, negatives: 0 });
    }

    let mut pairs: Vec<(usize, usize)> =
        (0..m).flat_map(|i| ((i + 1)..m).map(move |j| (i, j))).collect();
    let mut rng = seeds::rng(seed, "triplet-pairs", &[m as u64]);
    pairs.shuffle(&mut rng);

    let mut positives: Vec<(usize, usize)> = Vec::new();
    let mut negatives: Vec<(usize, usize)> = Vec::new();
    for &(i, j) in &pairs {
        if positives.len() >= pair_cap && negatives.len() >= pair_cap {
            break;
        }
        let dot: f64 = xb.row(i).iter().zip(xb.row(j)).map(|(a, b)| a * b).sum();
        if dot > t_plus && positives.len() < pair_cap {
            positives.push((i, j));
        } else if dot < t_minus && negatives.len() < pair_cap {
            negatives.push((i, j));
        }
    }
    if positives.is_empty() && negatives.is_empty() {
        return Ok(TripletResult { loss: 0.0, grad: zero_grad(), positives: 0, negatives: 0 });
    }

    // Half scores q_i = P x_i and their norms, shared by value and grad.
    let mut q = Vec::with_capacity(m);
    for i in 0..m {
        q.push(proj.half_scores(xb.row(i))?);
    }
    let norms: Vec<f64> =
        q.iter().map(|qi| qi.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let cos = |i: usize, j: usize| -> Option<f64> {
        if norms[i] == 0.0 || norms[j] == 0.0 {
            return None;
        }
        let dot: f64 = q[i].iter().zip(&q[j]).map(|(a, b)| a * b).sum();
        Some(dot / (norms[i] * norms[j]))
    };

    let mut raw = alpha;
    for &(i, j) in &negatives {
        if let Some(c) = cos(i, j) {
            raw += c;
        }
    }
    for &(i, j) in &positives {
        if let Some(c) = cos(i, j) {
            raw -= c;
        }
    }
    if raw <= 0.0 {
        return Ok(TripletResult {
            loss: 0.0,
            grad: zero_grad(),
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }

    // d cos(q_i, q_j) / d q_i = q_j/(|q_i||q_j|) - cos * q_i/|q_i|^2,
    // then d q_i / dP contributes outer(·, x_i).
    let mut grad = zero_grad();
    let half = proj.matrix().rows();
    let accumulate = |i: usize, j: usize, sign: f64, grad: &mut DenseMatrix| {
        let c = match cos(i, j) {
            Some(c) => c,
            None => return,
        };
        for (a, b) in [(i, j), (j, i)] {
            let scale_b = 1.0 / (norms[a] * norms[b]);
            let scale_a = c / (norms[a] * norms[a]);
            for rowi in 0..half {
                let dq = sign * (q[b][rowi] * scale_b - q[a][rowi] * scale_a);
                if dq == 0.0 {
                    continue;
                }
                let grow = grad.row_mut(rowi);
                for (g, xv) in grow.iter_mut().zip(xb.row(a)) {
                    *g += dq * xv;
                }
            }
        }
    };
    for &(i, j) in &negatives {
        accumulate(i, j, 1.0, &mut grad);
    }
    for &(i, j) in &positives {
        accumulate(i, j, -1.0, &mut grad);
    }
    Ok(TripletResult { loss: raw, grad, positives: positives.len(), negatives: negatives.len() })
}

/// Data-driven thresholds when the config leaves them unset: the 70th and
/// 30th percentiles of sampled pairwise inner products.
pub fn suggest_thresholds(rows: &DenseMatrix, max_pairs: usize, seed: u64) -> SgResult<(f64, f64)> {
    let m = rows.rows();
    if m < 2 {
        return Err(SgError::BadInput("need at least two rows to pick thresholds".into()));
    }
    let mut rng = seeds::rng(seed, "threshold-pairs", &[]);
    let total = m * (m - 1) / 2;
    let mut dots: Vec<f64> = Vec::new();
    if total <= max_pairs {
        for i in 0..m {
            for j in (i + 1)..m {
                let d: f64 = rows.row(i).iter().zip(rows.row(j)).map(|(a, b)| a * b).sum();
                dots.push(d);
            }
        }
    } else {
        while dots.len() < max_pairs {
            let i = rng.gen_range(0..m);
            let j = rng.gen_range(0..m);
            if i == j {
                continue;
            }
            let d: f64 = rows.row(i).iter().zip(rows.row(j)).map(|(a, b)| a * b).sum();
            dots.push(d);
        }
    }
    dots.sort_by(|a, b| a.total_cmp(b));
    let pick = |frac: f64| dots[((dots.len() - 1) as f64 * frac).round() as usize];
    let (t_minus, t_plus) = (pick(0.3), pick(0.7));
    if t_plus <= t_minus {
        // Degenerate spread (e.g. identical rows): widen symmetrically.
        let mid = 0.5 * (t_plus + t_minus);
        return Ok((mid + 1e-6, mid - 1e-6));
    }
    Ok((t_plus, t_minus))
}

/// Per-class hash tables over labeled training nodes, used to find poorly
/// predicted nodes at sublinear cost.
///
/// Each node stores the code of its last decoded prediction (initially
/// the code of its one-hot label, i.e. the class prototype). A node is
/// "poor" when its stored code disagrees with its class prototype; those
/// live outside the prototype bucket, so collecting them needs bucket
/// lookups only.
#[derive(Debug, Clone)]
pub struct ClassLossTables {
    proj: SimHashProjection,
    prototype: Vec<u32>,
    tables: Vec<LshDirectory>,
    /// Per training-node position: class id and current stored code.
    train_nodes: Vec<u32>,
    labels: Vec<u32>,
    /// Position of each train node inside its class table.
    class_pos: Vec<u32>,
    /// Per class: table position -> global node id.
    class_nodes: Vec<Vec<u32>>,
    refresh_cursor: usize,
}

impl ClassLossTables {
    pub fn build(
        proj: SimHashProjection,
        train_nodes: &[u32],
        labels_all: &[u32],
        num_classes: usize,
        counters: &mut Counters,
    ) -> SgResult<Self> {
        if train_nodes.is_empty() {
            return Err(SgError::BadInput("no labeled training nodes".into()));
        }
        if proj.d() != num_classes {
            return Err(SgError::shape(
                "class_tables",
                format!("projection dim {} vs {num_classes} classes", proj.d()),
            ));
        }
        let mut prototype = Vec::with_capacity(num_classes);
        for class in 0..num_classes {
            let mut onehot = vec![0.0; num_classes];
            onehot[class] = 1.0;
            prototype.push(proj.simhash(&onehot, counters)? as u32);
        }
        let labels: Vec<u32> = train_nodes.iter().map(|&i| labels_all[i as usize]).collect();
        let mut per_class_codes: Vec<Vec<u32>> = vec![Vec::new(); num_classes];
        let mut class_nodes: Vec<Vec<u32>> = vec![Vec::new(); num_classes];
        let mut class_pos = Vec::with_capacity(train_nodes.len());
        for (&node, &label) in train_nodes.iter().zip(&labels) {
            let class = label as usize;
            class_pos.push(per_class_codes[class].len() as u32);
            per_class_codes[class].push(prototype[class]);
            class_nodes[class].push(node);
        }
        let tables = per_class_codes
            .iter()
            .map(|codes| LshDirectory::from_codes(proj.c(), codes))
            .collect::<SgResult<Vec<_>>>()?;
        Ok(ClassLossTables {
            proj,
            prototype,
            tables,
            train_nodes: train_nodes.to_vec(),
            labels,
            class_pos,
            class_nodes,
            refresh_cursor: 0,
        })
    }

    pub fn prototype_codes(&self) -> &[u32] {
        &self.prototype
    }

    /// Nodes whose stored prediction codes disagree with their class
    /// prototype: everything outside the prototype bucket of each table.
    fn stored_disagreeing(&self, counters: &mut Counters) -> Vec<u32> {
        let mut out = Vec::new();
        for (class, table) in self.tables.iter().enumerate() {
            let proto = self.prototype[class] as usize;
            for b in 0..table.c() {
                if b == proto {
                    continue;
                }
                for &pos in table.members(b, counters) {
                    out.push(self.class_nodes[class][pos as usize]);
                }
            }
        }
        out
    }

    /// Refreshes up to `budget` stored codes round-robin using `decode`,
    /// then returns up to `budget` disagreeing nodes, topped up uniformly
    /// at random. Cost: bucket lookups + `budget` decodes, independent of
    /// the graph size.
    pub fn select_loss_nodes(
        &mut self,
        decode: &mut dyn FnMut(u32) -> SgResult<Vec<f64>>,
        budget: usize,
        seed: u64,
        counters: &mut Counters,
    ) -> SgResult<Vec<u32>> {
        if budget == 0 {
            return Err(SgError::BadInput("selection budget must be >= 1".into()));
        }
        let m = self.train_nodes.len();
        for _ in 0..budget.min(m) {
            let pos = self.refresh_cursor % m;
            self.refresh_cursor = (self.refresh_cursor + 1) % m;
            let node = self.train_nodes[pos];
            let pred = decode(node)?;
            let code = self.proj.simhash(&pred, counters)? as u32;
            let class = self.labels[pos] as usize;
            self.tables[class].move_node(self.class_pos[pos] as usize, code)?;
        }

        let mut selected: Vec<u32> = self.stored_disagreeing(counters);
        let mut rng = seeds::rng(seed, "loss-node-topup", &[]);
        selected.sort_unstable();
        selected.dedup();
        if selected.len() > budget {
            selected.shuffle(&mut rng);
            selected.truncate(budget);
            selected.sort_unstable();
            return Ok(selected);
        }
        if selected.len() < budget {
            let chosen: BTreeSet<u32> = selected.iter().copied().collect();
            let mut pool: Vec<u32> =
                self.train_nodes.iter().copied().filter(|i| !chosen.contains(i)).collect();
            pool.shuffle(&mut rng);
            let need = (budget - selected.len()).min(pool.len());
            selected.extend(pool.into_iter().take(need));
            selected.sort_unstable();
        }
        Ok(selected)
    }

    pub fn audit(&self) -> SgResult<()> {
        for table in &self.tables {
            table.audit()?;
        }
        let mut counts = vec![0usize; self.tables.len()];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        for (class, table) in self.tables.iter().enumerate() {
            if table.n() != counts[class] {
                return Err(SgError::Runtime(format!(
                    "class {class} table holds {} nodes, expected {}",
                    table.n(),
                    counts[class]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;
    use rand::Rng;

    fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = seeds::rng(seed, "lsh-test", &[rows as u64, cols as u64]);
        let normal = rand_distr::StandardNormal;
        let data: Vec<f64> =
            (0..rows * cols).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn identity_projection_hashes_basis_vector_to_first_bucket() {
        let proj = SimHashProjection::new(DenseMatrix::identity(3)).unwrap();
        let mut counters = Counters::new();
        assert_eq!(proj.simhash(&[1.0, 0.0, 0.0], &mut counters).unwrap(), 0);
        assert_eq!(proj.simhash(&[0.0, -2.0, 0.0], &mut counters).unwrap(), 4); // -(-2) wins at half+1
        assert_eq!(counters.simhash_matvecs, 2);
    }

    #[test]
    fn negation_shifts_code_by_half() {
        let proj = SimHashProjection::random(8, 5, 99, &[]).unwrap();
        let mut counters = Counters::new();
        let mut rng = seeds::rng(1, "neg-test", &[]);
        for _ in 0..50 {
            let u: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let neg: Vec<f64> = u.iter().map(|v| -v).collect();
            let a = proj.simhash(&u, &mut counters).unwrap();
            let b = proj.simhash(&neg, &mut counters).unwrap();
            assert_eq!(b, (a + 4) % 8);
        }
    }

    #[test]
    fn simhash_is_scale_invariant() {
        let proj = SimHashProjection::random(16, 6, 3, &[]).unwrap();
        let mut counters = Counters::new();
        let mut rng = seeds::rng(2, "scale-test", &[]);
        for _ in 0..50 {
            let u: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = u.iter().map(|v| 7.5 * v).collect();
            assert_eq!(
                proj.simhash(&u, &mut counters).unwrap(),
                proj.simhash(&scaled, &mut counters).unwrap()
            );
        }
    }

    #[test]
    fn collision_rate_grows_with_cosine_similarity() {
        let d = 8;
        let proj = SimHashProjection::random(16, d, 7, &[]).unwrap();
        let mut counters = Counters::new();
        let mut rng = seeds::rng(4, "locality-test", &[]);
        let normal = rand_distr::StandardNormal;
        let deciles = 10;
        let mut collisions = vec![0usize; deciles];
        let mut totals = vec![0usize; deciles];
        for trial in 0..10_000 {
            // Plant cos(u, v) = cos(theta) exactly via an orthogonal pair.
            let bin = trial % deciles;
            let target = (bin as f64 + 0.5) / deciles as f64; // cosine in (0,1)
            let u: Vec<f64> =
                (0..d).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
            let mut w: Vec<f64> =
                (0..d).map(|_| rand_distr::Distribution::sample(&normal, &mut rng)).collect();
            let un = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let uw: f64 = u.iter().zip(&w).map(|(a, b)| a * b).sum();
            for (wi, ui) in w.iter_mut().zip(&u) {
                *wi -= uw / (un * un) * ui;
            }
            let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sin = (1.0 - target * target).sqrt();
            let v: Vec<f64> = u
                .iter()
                .zip(&w)
                .map(|(ui, wi)| target * ui / un + sin * wi / wn)
                .collect();
            totals[bin] += 1;
            if proj.simhash(&u, &mut counters).unwrap() == proj.simhash(&v, &mut counters).unwrap()
            {
                collisions[bin] += 1;
            }
        }
        let rates: Vec<f64> =
            collisions.iter().zip(&totals).map(|(&c, &t)| c as f64 / t as f64).collect();
        for pair in rates.windows(2) {
            assert!(
                pair[1] >= pair[0] - 0.03,
                "collision rate dropped across deciles: {rates:?}"
            );
        }
        assert!(rates[deciles - 1] > rates[0] + 0.2, "locality too weak: {rates:?}");
    }

    #[test]
    fn build_hash_pair_hashes_duplicates_identically_and_counts_matvecs() {
        let proj = SimHashProjection::random(8, 4, 11, &[]).unwrap();
        let mut x = gaussian_matrix(10, 4, 12);
        for j in 0..4 {
            let v = x.get(3, j);
            x.set(7, j, v);
        }
        let mut counters = Counters::new();
        let hp = build_hash_pair(&proj, &x, 5, false, &mut counters).unwrap();
        assert_eq!(hp.bucket(3), hp.bucket(7));
        assert_eq!(counters.simhash_matvecs, 10);
        let plus = build_hash_pair(&proj, &x, 5, true, &mut counters).unwrap();
        assert!(plus.signs().iter().all(|&s| s == 1));
    }

    #[test]
    fn bucket_loads_stay_balanced_on_gaussian_features() {
        let proj = SimHashProjection::random(64, 16, 21, &[]).unwrap();
        let x = gaussian_matrix(1000, 16, 22);
        let mut counters = Counters::new();
        let hp = build_hash_pair(&proj, &x, 5, false, &mut counters).unwrap();
        let mut loads = vec![0usize; 64];
        for &b in hp.buckets() {
            loads[b as usize] += 1;
        }
        let max = *loads.iter().max().unwrap();
        let mean = 1000.0 / 64.0;
        assert!((max as f64) < 10.0 * mean, "max load {max} vs mean {mean}");
    }

    #[test]
    fn directory_moves_and_audit() {
        let mut dir = LshDirectory::from_codes(4, &[0, 0, 1, 3]).unwrap();
        dir.audit().unwrap();
        let mut counters = Counters::new();
        assert_eq!(dir.members(0, &mut counters), &[0, 1]);
        dir.move_node(1, 2).unwrap();
        dir.audit().unwrap();
        assert_eq!(dir.bucket_of(1), 2);
        assert_eq!(dir.members(0, &mut counters), &[0]);
        assert_eq!(dir.members(2, &mut counters), &[1]);
        dir.move_node(1, 2).unwrap(); // no-op move keeps consistency
        dir.audit().unwrap();
        assert!(dir.move_node(0, 9).is_err());
        assert_eq!(counters.bucket_lookups, 3);
    }

    #[test]
    fn update_set_zero_gradients_tie_break_to_low_buckets() {
        let fam = SketchFamily::random(30, 10, 2, 31, false).unwrap();
        let grads = vec![DenseMatrix::zeros(4, 10), DenseMatrix::zeros(4, 10)];
        let set = select_update_set(&grads, &fam, 0.2).unwrap();
        // ceil(0.2*10)=2 buckets per pair: exactly buckets {0,1} of each.
        let mut want = BTreeSet::new();
        for k in 0..2 {
            for (node, &b) in fam.pair(k).buckets().iter().enumerate() {
                if b < 2 {
                    want.insert(node as u32);
                }
            }
        }
        assert_eq!(set, want);
    }

    #[test]
    fn update_set_forced_by_single_hot_column() {
        let fam = SketchFamily::random(40, 8, 3, 33, false).unwrap();
        let mut grads =
            vec![DenseMatrix::zeros(4, 8), DenseMatrix::zeros(4, 8), DenseMatrix::zeros(4, 8)];
        grads[1].set(2, 5, 3.0);
        let set = select_update_set(&grads, &fam, 0.125).unwrap(); // 1 bucket per pair
        for (node, &b) in fam.pair(1).buckets().iter().enumerate() {
            if b == 5 {
                assert!(set.contains(&(node as u32)), "bucket-5 member {node} missing");
            }
        }
    }

    #[test]
    fn update_set_matches_brute_force_ranking() {
        let fam = SketchFamily::random(25, 6, 2, 35, false).unwrap();
        let grads = vec![gaussian_matrix(3, 6, 36), gaussian_matrix(3, 6, 37)];
        let beta = 0.34; // ceil -> 3 buckets
        let got = select_update_set(&grads, &fam, beta).unwrap();
        // Independent ranking: sort bucket ids by norm with stable order.
        let mut want = BTreeSet::new();
        for k in 0..2 {
            let mut by_norm: Vec<(usize, f64)> = (0..6)
                .map(|j| {
                    let col = grads[k].column(j);
                    (j, col.iter().map(|v| v * v).sum::<f64>().sqrt())
                })
                .collect();
            by_norm.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            for &(j, _) in by_norm.iter().take(3) {
                for node in 0..25 {
                    if fam.pair(k).bucket(node) == j {
                        want.insert(node as u32);
                    }
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn triplet_hinge_inactive_gives_zero_loss_and_gradient() {
        // Two tight clusters far apart: positives very aligned, negatives
        // anti-aligned, so sum_neg - sum_pos + alpha is deeply negative.
        let mut data = Vec::new();
        for i in 0..6 {
            let sign = if i < 3 { 1.0 } else { -1.0 };
            data.extend_from_slice(&[sign * 10.0, sign * 10.0 + 0.01 * i as f64]);
        }
        let xb = DenseMatrix::from_vec(6, 2, data).unwrap();
        let proj = SimHashProjection::new(DenseMatrix::identity(2)).unwrap();
        let out = triplet_loss(&proj, &xb, 50.0, -50.0, 0.1, 1000, 1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.data().iter().all(|&g| g == 0.0));
        assert!(out.positives > 0 && out.negatives > 0);
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let xb = gaussian_matrix(6, 4, 41);
        let proj = SimHashProjection::random(6, 4, 42, &[]).unwrap();
        let (t_plus, t_minus) = suggest_thresholds(&xb, 1000, 43).unwrap();
        // Large margin keeps the hinge active at a random init.
        let out = triplet_loss(&proj, &xb, t_plus, t_minus, 50.0, 1000, 44).unwrap();
        assert!(out.loss > 0.0, "need an active hinge for the FD check");
        let h = 1e-6;
        for row in 0..3 {
            for col in 0..4 {
                let mut plus = proj.clone();
                let v = plus.matrix().get(row, col);
                plus.matrix_mut().set(row, col, v + h);
                let mut minus = proj.clone();
                minus.matrix_mut().set(row, col, v - h);
                let lp = triplet_loss(&plus, &xb, t_plus, t_minus, 50.0, 1000, 44).unwrap().loss;
                let lm = triplet_loss(&minus, &xb, t_plus, t_minus, 50.0, 1000, 44).unwrap().loss;
                let fd = (lp - lm) / (2.0 * h);
                let an = out.grad.get(row, col);
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-4,
                    "grad[{row}][{col}]: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn triplet_descent_step_reduces_loss_on_planted_clusters() {
        // Two clusters; positive pairs inside clusters, negatives across.
        let mut data = Vec::new();
        let mut rng = seeds::rng(51, "planted", &[]);
        for i in 0..8 {
            let center: [f64; 3] = if i < 4 { [2.0, 0.0, 0.3] } else { [-1.8, 0.4, -0.2] };
            for c in center {
                data.push(c + rng.gen_range(-0.05..0.05));
            }
        }
        let xb = DenseMatrix::from_vec(8, 3, data).unwrap();
        let proj = SimHashProjection::random(4, 3, 52, &[]).unwrap();
        let (t_plus, t_minus) = suggest_thresholds(&xb, 1000, 53).unwrap();
        let before = triplet_loss(&proj, &xb, t_plus, t_minus, 20.0, 1000, 54).unwrap();
        assert!(before.loss > 0.0);
        let mut stepped = proj.clone();
        let lr = 1e-2;
        for row in 0..stepped.matrix().rows() {
            for col in 0..stepped.matrix().cols() {
                let v = stepped.matrix().get(row, col) - lr * before.grad.get(row, col);
                stepped.matrix_mut().set(row, col, v);
            }
        }
        let after = triplet_loss(&stepped, &xb, t_plus, t_minus, 20.0, 1000, 54).unwrap();
        assert!(after.loss < before.loss, "{} -> {}", before.loss, after.loss);
    }

    #[test]
    fn triplet_no_pairs_is_silent_zero() {
        let xb = DenseMatrix::zeros(4, 3); // all dots 0: neither side triggers
        let proj = SimHashProjection::random(4, 3, 61, &[]).unwrap();
        let out = triplet_loss(&proj, &xb, 0.5, -0.5, 0.1, 1000, 62).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!((out.positives, out.negatives), (0, 0));
    }

    #[test]
    fn threshold_suggestion_orders_quantiles() {
        let rows = gaussian_matrix(30, 5, 71);
        let (t_plus, t_minus) = suggest_thresholds(&rows, 200, 72).unwrap();
        assert!(t_plus > t_minus);
    }

    fn one_hot(class: usize, num_classes: usize) -> Vec<f64> {
        let mut v = vec![0.0; num_classes];
        v[class] = 1.0;
        v
    }

    #[test]
    fn perfect_predictor_falls_back_to_random_topup() {
        let num_classes = 3;
        let proj = SimHashProjection::random(8, num_classes, 81, &[]).unwrap();
        let labels: Vec<u32> = (0..30).map(|i| i % 3).collect();
        let train: Vec<u32> = (0..30).collect();
        let mut counters = Counters::new();
        let mut tables =
            ClassLossTables::build(proj, &train, &labels, num_classes, &mut counters).unwrap();
        tables.audit().unwrap();
        let mut decode =
            |node: u32| -> SgResult<Vec<f64>> { Ok(one_hot((node % 3) as usize, num_classes)) };
        let picked = tables.select_loss_nodes(&mut decode, 8, 82, &mut counters).unwrap();
        assert_eq!(picked.len(), 8, "random top-up fills the budget exactly");
        tables.audit().unwrap();
    }

    #[test]
    fn adversarial_predictor_selects_only_disagreeing_nodes() {
        let num_classes = 4;
        let proj = SimHashProjection::random(16, num_classes, 91, &[]).unwrap();
        let mut counters = Counters::new();
        // Find two classes with distinct prototype codes.
        let labels: Vec<u32> = (0..20).map(|i| i % 2).collect();
        let train: Vec<u32> = (0..20).collect();
        let mut tables =
            ClassLossTables::build(proj, &train, &labels, num_classes, &mut counters).unwrap();
        let protos = tables.prototype_codes().to_vec();
        assert_ne!(protos[0], protos[1], "pick another seed if prototypes collide");
        // Predict the *other* class's prototype direction.
        let mut decode = |node: u32| -> SgResult<Vec<f64>> {
            let wrong = 1 - (node % 2) as usize;
            let mut v = vec![0.0; num_classes];
            v[wrong] = 1.0;
            Ok(v)
        };
        let picked = tables.select_loss_nodes(&mut decode, 20, 92, &mut counters).unwrap();
        assert_eq!(picked.len(), 20);
        // After a full refresh every stored code disagrees; audit holds.
        tables.audit().unwrap();
        let picked2 = tables.select_loss_nodes(&mut decode, 6, 93, &mut counters).unwrap();
        assert_eq!(picked2.len(), 6);
    }

    #[test]
    fn selection_cost_tracks_budget_not_population() {
        let num_classes = 2;
        let proj = SimHashProjection::random(8, num_classes, 95, &[]).unwrap();
        let labels: Vec<u32> = (0..400).map(|i| i % 2).collect();
        let train: Vec<u32> = (0..400).collect();
        let mut counters = Counters::new();
        let mut tables =
            ClassLossTables::build(proj, &train, &labels, num_classes, &mut counters).unwrap();
        counters.reset();
        let mut decodes = 0u64;
        let mut decode = |node: u32| -> SgResult<Vec<f64>> {
            decodes += 1;
            let mut v = vec![0.0; num_classes];
            v[(node % 2) as usize] = 1.0;
            Ok(v)
        };
        let budget = 10;
        tables.select_loss_nodes(&mut decode, budget, 96, &mut counters).unwrap();
        assert_eq!(decodes, budget as u64);
        // Bucket lookups: scan of c buckets per class table, no more.
        assert!(counters.bucket_lookups <= (num_classes * 8) as u64);
    }
}
