//! Reverse-mode autodiff over the fixed op set the sketched layers need:
//! dense/sparse matrix products, row FFTs with their adjoints, complex
//! Hadamard products, scalar-weighted sums, median decoding of sketch
//! columns, and subset cross-entropy.
//!
//! Values are recorded in topological order by construction (an op can
//! only reference earlier ids), so the reverse sweep is a single backward
//! pass over the node list.

use std::sync::Arc;

use crate::counters::Counters;
use crate::error::{SgError, SgResult};
use crate::linalg::{
    dense_times_csr, fft_rows, fft_rows_complex, gemm, gemm_nt, gemm_tn, hadamard,
    ifft_rows, ifft_rows_complex, spmm, Complex64, ComplexMatrix, CsrMatrix, DenseMatrix,
};
use crate::sketch::SketchFamily;
use crate::train::loss::softmax_xent;

/// Index of a recorded value.
pub type ValueId = usize;

#[derive(Debug, Clone)]
enum Payload {
    Dense(DenseMatrix),
    Complex(ComplexMatrix),
    Scalar(f64),
}

/// Per-entry median provenance: the sketch indices whose columns carried
/// the decoded value (two entries for even r, duplicated for odd).
#[derive(Debug, Clone, Copy)]
struct MedianPick {
    k_low: u8,
    k_high: u8,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// op(a) * op(b) with optional transposes.
    Gemm { a: ValueId, b: ValueId, ta: bool, tb: bool },
    /// m * b, sparse constant on the left.
    SpmmLeft { m: Arc<CsrMatrix>, b: ValueId },
    /// a * m, sparse constant on the right.
    DenseTimesCsr { a: ValueId, m: Arc<CsrMatrix> },
    Add { a: ValueId, b: ValueId },
    AddScalars { a: ValueId, b: ValueId },
    /// scalar parameter times matrix.
    ScaleByParam { factor: ValueId, a: ValueId },
    ScaleConst { a: ValueId, factor: f64 },
    /// a + factor * k for a constant matrix k (bias terms).
    AddConstScaled { a: ValueId, k: Arc<DenseMatrix>, factor: ValueId },
    FftRows { a: ValueId },
    /// Real part of the row-wise inverse FFT.
    IfftRowsReal { a: ValueId },
    HadamardComplex { a: ValueId, b: ValueId },
    Relu { a: ValueId },
    /// Median decode of selected nodes out of r sketch values.
    MedianDecode {
        sketches: Vec<ValueId>,
        /// Per node, per k: (column, sign).
        node_cols: Vec<Vec<(usize, f64)>>,
        /// Row-major per (node, feature).
        picks: Vec<MedianPick>,
    },
    /// Mean cross-entropy of the logit rows; cached softmax gradient.
    SoftmaxXent { logits: ValueId, grad: DenseMatrix },
    SquaredFrobNorm { a: ValueId },
}

struct Node {
    op: Op,
    value: Payload,
}

/// Gradients from a backward sweep, indexed by value id.
pub struct Gradients {
    slots: Vec<Option<Payload>>,
}

impl Gradients {
    pub fn dense(&self, v: ValueId) -> Option<&DenseMatrix> {
        match self.slots.get(v)? {
            Some(Payload::Dense(m)) => Some(m),
            _ => None,
        }
    }

    pub fn scalar(&self, v: ValueId) -> Option<f64> {
        match self.slots.get(v)? {
            Some(Payload::Scalar(s)) => Some(*s),
            _ => None,
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Payload) -> ValueId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, m: DenseMatrix) -> ValueId {
        self.push(Op::Leaf, Payload::Dense(m))
    }

    pub fn leaf_scalar(&mut self, s: f64) -> ValueId {
        self.push(Op::Leaf, Payload::Scalar(s))
    }

    pub fn dense(&self, v: ValueId) -> SgResult<&DenseMatrix> {
        match &self.node(v)?.value {
            Payload::Dense(m) => Ok(m),
            _ => Err(SgError::shape("tape", format!("value {v} is not a dense matrix"))),
        }
    }

    pub fn complex(&self, v: ValueId) -> SgResult<&ComplexMatrix> {
        match &self.node(v)?.value {
            Payload::Complex(m) => Ok(m),
            _ => Err(SgError::shape("tape", format!("value {v} is not complex"))),
        }
    }

    pub fn scalar(&self, v: ValueId) -> SgResult<f64> {
        match &self.node(v)?.value {
            Payload::Scalar(s) => Ok(*s),
            _ => Err(SgError::shape("tape", format!("value {v} is not a scalar"))),
        }
    }

    fn node(&self, v: ValueId) -> SgResult<&Node> {
        self.nodes.get(v).ok_or_else(|| SgError::Runtime(format!("value id {v} off the tape")))
    }

    pub fn gemm(&mut self, a: ValueId, ta: bool, b: ValueId, tb: bool) -> SgResult<ValueId> {
        let am = self.dense(a)?;
        let bm = self.dense(b)?;
        let out = match (ta, tb) {
            (false, false) => gemm(am, bm)?,
            (true, false) => gemm_tn(am, bm)?,
            (false, true) => gemm_nt(am, bm)?,
            (true, true) => gemm_tn(am, &bm.transpose())?,
        };
        Ok(self.push(Op::Gemm { a, b, ta, tb }, Payload::Dense(out)))
    }

    pub fn spmm_left(&mut self, m: Arc<CsrMatrix>, b: ValueId) -> SgResult<ValueId> {
        let out = spmm(&m, self.dense(b)?)?;
        Ok(self.push(Op::SpmmLeft { m, b }, Payload::Dense(out)))
    }

    pub fn dense_times_csr(&mut self, a: ValueId, m: Arc<CsrMatrix>) -> SgResult<ValueId> {
        let out = dense_times_csr(self.dense(a)?, &m)?;
        Ok(self.push(Op::DenseTimesCsr { a, m }, Payload::Dense(out)))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> SgResult<ValueId> {
        let out = self.dense(a)?.add(self.dense(b)?)?;
        Ok(self.push(Op::Add { a, b }, Payload::Dense(out)))
    }

    pub fn add_scalars(&mut self, a: ValueId, b: ValueId) -> SgResult<ValueId> {
        let out = self.scalar(a)? + self.scalar(b)?;
        Ok(self.push(Op::AddScalars { a, b }, Payload::Scalar(out)))
    }

    pub fn scale_by_param(&mut self, factor: ValueId, a: ValueId) -> SgResult<ValueId> {
        let f = self.scalar(factor)?;
        let out = self.dense(a)?.scale(f);
        Ok(self.push(Op::ScaleByParam { factor, a }, Payload::Dense(out)))
    }

    pub fn scale_const(&mut self, a: ValueId, factor: f64) -> SgResult<ValueId> {
        let out = self.dense(a)?.scale(factor);
        Ok(self.push(Op::ScaleConst { a, factor }, Payload::Dense(out)))
    }

    pub fn add_const_scaled(
        &mut self,
        a: ValueId,
        k: Arc<DenseMatrix>,
        factor: ValueId,
    ) -> SgResult<ValueId> {
        let f = self.scalar(factor)?;
        let am = self.dense(a)?;
        if am.rows() != k.rows() || am.cols() != k.cols() {
            return Err(SgError::shape(
                "add_const_scaled",
                format!("{}x{} plus {}x{}", am.rows(), am.cols(), k.rows(), k.cols()),
            ));
        }
        let mut out = am.clone();
        for (o, kv) in out.data_mut().iter_mut().zip(k.data()) {
            *o += f * kv;
        }
        Ok(self.push(Op::AddConstScaled { a, k, factor }, Payload::Dense(out)))
    }

    pub fn fft_rows(&mut self, a: ValueId) -> SgResult<ValueId> {
        let out = fft_rows(self.dense(a)?);
        Ok(self.push(Op::FftRows { a }, Payload::Complex(out)))
    }

    pub fn ifft_rows_real(&mut self, a: ValueId) -> SgResult<ValueId> {
        let out = ifft_rows(self.complex(a)?);
        Ok(self.push(Op::IfftRowsReal { a }, Payload::Dense(out.real)))
    }

    pub fn hadamard_complex(&mut self, a: ValueId, b: ValueId) -> SgResult<ValueId> {
        let am = self.complex(a)?;
        let bm = self.complex(b)?;
        if am.rows() != bm.rows() || am.cols() != bm.cols() {
            return Err(SgError::shape(
                "hadamard_complex",
                format!("{}x{} vs {}x{}", am.rows(), am.cols(), bm.rows(), bm.cols()),
            ));
        }
        let out = hadamard(am, bm);
        Ok(self.push(Op::HadamardComplex { a, b }, Payload::Complex(out)))
    }

    pub fn relu(&mut self, a: ValueId) -> SgResult<ValueId> {
        let mut out = self.dense(a)?.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        Ok(self.push(Op::Relu { a }, Payload::Dense(out)))
    }

    /// Decodes the rows of `nodes` out of r sketch values by signed
    /// column medians; gradients flow back into the winning columns.
    pub fn median_decode(
        &mut self,
        sketches: &[ValueId],
        fam: &SketchFamily,
        nodes: &[u32],
        counters: &mut Counters,
    ) -> SgResult<ValueId> {
        if sketches.len() != fam.r() {
            return Err(SgError::BadInput(format!(
                "{} sketch values for family of r = {}",
                sketches.len(),
                fam.r()
            )));
        }
        let d = self.dense(sketches[0])?.rows();
        for &s in sketches {
            let m = self.dense(s)?;
            if m.rows() != d || m.cols() != fam.c() {
                return Err(SgError::shape(
                    "median_decode",
                    format!("sketch value is {}x{}, want {d}x{}", m.rows(), m.cols(), fam.c()),
                ));
            }
        }
        let r = fam.r();
        let mut out = DenseMatrix::zeros(nodes.len(), d);
        let mut node_cols = Vec::with_capacity(nodes.len());
        let mut picks = Vec::with_capacity(nodes.len() * d);
        let mut cand: Vec<(f64, u8)> = Vec::with_capacity(r);
        for (row, &node) in nodes.iter().enumerate() {
            let i = node as usize;
            if i >= fam.n() {
                return Err(SgError::BadInput(format!("node {i} outside domain {}", fam.n())));
            }
            let cols: Vec<(usize, f64)> =
                (0..r).map(|k| (fam.pair(k).bucket(i), fam.pair(k).sign(i))).collect();
            for f in 0..d {
                cand.clear();
                for (k, &(col, sign)) in cols.iter().enumerate() {
                    cand.push((sign * self.dense(sketches[k])?.get(f, col), k as u8));
                }
                cand.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                let (value, pick) = if r % 2 == 1 {
                    let mid = &cand[r / 2];
                    (mid.0, MedianPick { k_low: mid.1, k_high: mid.1 })
                } else {
                    let lo = &cand[r / 2 - 1];
                    let hi = &cand[r / 2];
                    (0.5 * (lo.0 + hi.0), MedianPick { k_low: lo.1, k_high: hi.1 })
                };
                out.set(row, f, value);
                picks.push(pick);
            }
            node_cols.push(cols);
            counters.decode_column_reads += r as u64;
            counters.decodes += 1;
        }
        Ok(self.push(
            Op::MedianDecode { sketches: sketches.to_vec(), node_cols, picks },
            Payload::Dense(out),
        ))
    }

    /// Mean cross-entropy over the logit rows; the softmax gradient is
    /// computed here and cached for the backward sweep.
    pub fn softmax_xent_subset(&mut self, logits: ValueId, labels: &[u32]) -> SgResult<ValueId> {
        let (loss, grad) = softmax_xent(self.dense(logits)?, labels)?;
        Ok(self.push(Op::SoftmaxXent { logits, grad }, Payload::Scalar(loss)))
    }

    pub fn squared_frob_norm(&mut self, a: ValueId) -> SgResult<ValueId> {
        let m = self.dense(a)?;
        let out: f64 = m.data().iter().map(|v| v * v).sum();
        Ok(self.push(Op::SquaredFrobNorm { a }, Payload::Scalar(out)))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient slot per
    /// value id; untouched values have no entry.
    pub fn backward(&mut self, loss: ValueId) -> SgResult<Gradients> {
        match &self.node(loss)?.value {
            Payload::Scalar(_) => {}
            _ => return Err(SgError::BadInput("backward needs a scalar loss".into())),
        }
        let mut grads: Vec<Option<Payload>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Payload::Scalar(1.0));
        for v in (0..=loss).rev() {
            let gv = match grads[v].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_one(v, &gv, &mut grads)?;
            grads[v] = Some(gv);
        }
        Ok(Gradients { slots: grads })
    }

    fn backprop_one(
        &self,
        v: ValueId,
        gv: &Payload,
        grads: &mut [Option<Payload>],
    ) -> SgResult<()> {
        match (&self.nodes[v].op, gv) {
            (Op::Leaf, _) => {}
            (Op::Gemm { a, b, ta, tb }, Payload::Dense(g)) => {
                let am = self.dense(*a)?;
                let bm = self.dense(*b)?;
                let (ga, gb) = match (ta, tb) {
                    (false, false) => (gemm_nt(g, bm)?, gemm_tn(am, g)?),
                    (true, false) => (gemm_nt(bm, g)?, gemm(am, g)?),
                    (false, true) => (gemm(g, bm)?, gemm_tn(g, am)?),
                    (true, true) => (gemm_tn(bm, &g.transpose())?, gemm(am, g)?.transpose()),
                };
                accumulate_dense(grads, *a, ga)?;
                accumulate_dense(grads, *b, gb)?;
            }
            (Op::SpmmLeft { m, b }, Payload::Dense(g)) => {
                accumulate_dense(grads, *b, spmm(&m.transpose(), g)?)?;
            }
            (Op::DenseTimesCsr { a, m }, Payload::Dense(g)) => {
                accumulate_dense(grads, *a, dense_times_csr(g, &m.transpose())?)?;
            }
            (Op::Add { a, b }, Payload::Dense(g)) => {
                accumulate_dense(grads, *a, g.clone())?;
                accumulate_dense(grads, *b, g.clone())?;
            }
            (Op::AddScalars { a, b }, Payload::Scalar(g)) => {
                accumulate_scalar(grads, *a, *g)?;
                accumulate_scalar(grads, *b, *g)?;
            }
            (Op::ScaleByParam { factor, a }, Payload::Dense(g)) => {
                let am = self.dense(*a)?;
                let f = self.scalar(*factor)?;
                let df: f64 = g.data().iter().zip(am.data()).map(|(gi, ai)| gi * ai).sum();
                accumulate_scalar(grads, *factor, df)?;
                accumulate_dense(grads, *a, g.scale(f))?;
            }
            (Op::ScaleConst { a, factor }, Payload::Dense(g)) => {
                accumulate_dense(grads, *a, g.scale(*factor))?;
            }
            (Op::AddConstScaled { a, k, factor }, Payload::Dense(g)) => {
                accumulate_dense(grads, *a, g.clone())?;
                let df: f64 = g.data().iter().zip(k.data()).map(|(gi, ki)| gi * ki).sum();
                accumulate_scalar(grads, *factor, df)?;
            }
            // y = fft(x) row-wise: the adjoint of the unnormalized DFT is
            // its conjugate transpose, i.e. x_bar = Re(c * ifft(g)).
            (Op::FftRows { a }, Payload::Complex(g)) => {
                let c = g.cols() as f64;
                let inv = ifft_rows_complex(g);
                let mut ga = DenseMatrix::zeros(g.rows(), g.cols());
                for (slot, z) in ga.data_mut().iter_mut().zip(inv.data()) {
                    *slot = c * z.re;
                }
                accumulate_dense(grads, *a, ga)?;
            }
            // y = Re(ifft(z)): z_bar = (1/c) * fft(g) with g real.
            (Op::IfftRowsReal { a }, Payload::Dense(g)) => {
                let c = g.cols() as f64;
                let as_complex = ComplexMatrix::from_vec(
                    g.rows(),
                    g.cols(),
                    g.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
                )?;
                let mut gz = fft_rows_complex(&as_complex);
                for z in gz.data_mut() {
                    *z /= c;
                }
                accumulate_complex(grads, *a, gz)?;
            }
            // y = a .* b elementwise complex: a_bar = conj(b) .* g.
            (Op::HadamardComplex { a, b }, Payload::Complex(g)) => {
                let am = self.complex(*a)?;
                let bm = self.complex(*b)?;
                let mut ga = ComplexMatrix::zeros(g.rows(), g.cols());
                let mut gb = ComplexMatrix::zeros(g.rows(), g.cols());
                for i in 0..g.data().len() {
                    ga.data_mut()[i] = bm.data()[i].conj() * g.data()[i];
                    gb.data_mut()[i] = am.data()[i].conj() * g.data()[i];
                }
                accumulate_complex(grads, *a, ga)?;
                accumulate_complex(grads, *b, gb)?;
            }
            (Op::Relu { a }, Payload::Dense(g)) => {
                let am = self.dense(*a)?;
                let mut ga = g.clone();
                for (gi, ai) in ga.data_mut().iter_mut().zip(am.data()) {
                    if *ai <= 0.0 {
                        *gi = 0.0;
                    }
                }
                accumulate_dense(grads, *a, ga)?;
            }
            (Op::MedianDecode { sketches, node_cols, picks }, Payload::Dense(g)) => {
                let d = g.cols();
                let mut per_sketch: Vec<DenseMatrix> = sketches
                    .iter()
                    .map(|&s| {
                        let m = self.dense(s)?;
                        Ok(DenseMatrix::zeros(m.rows(), m.cols()))
                    })
                    .collect::<SgResult<_>>()?;
                for (row, cols) in node_cols.iter().enumerate() {
                    for f in 0..d {
                        let pick = picks[row * d + f];
                        let gout = g.get(row, f);
                        if gout == 0.0 {
                            continue;
                        }
                        let route = |k: u8, w: f64, per: &mut [DenseMatrix]| {
                            let (col, sign) = cols[k as usize];
                            let cur = per[k as usize].get(f, col);
                            per[k as usize].set(f, col, cur + w * sign * gout);
                        };
                        if pick.k_low == pick.k_high {
                            route(pick.k_low, 1.0, &mut per_sketch);
                        } else {
                            route(pick.k_low, 0.5, &mut per_sketch);
                            route(pick.k_high, 0.5, &mut per_sketch);
                        }
                    }
                }
                for (&s, gs) in sketches.iter().zip(per_sketch) {
                    accumulate_dense(grads, s, gs)?;
                }
            }
            (Op::SoftmaxXent { logits, grad }, Payload::Scalar(g)) => {
                accumulate_dense(grads, *logits, grad.scale(*g))?;
            }
            (Op::SquaredFrobNorm { a }, Payload::Scalar(g)) => {
                accumulate_dense(grads, *a, self.dense(*a)?.scale(2.0 * *g))?;
            }
            (op, _) => {
                return Err(SgError::Runtime(format!(
                    "gradient kind mismatch at value {v}: {op:?}"
                )))
            }
        }
        Ok(())
    }
}

fn accumulate_dense(grads: &mut [Option<Payload>], v: ValueId, g: DenseMatrix) -> SgResult<()> {
    match &mut grads[v] {
        None => grads[v] = Some(Payload::Dense(g)),
        Some(Payload::Dense(existing)) => {
            for (e, n) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += n;
            }
        }
        Some(_) => return Err(SgError::Runtime(format!("mixed gradient kinds at value {v}"))),
    }
    Ok(())
}

fn accumulate_complex(grads: &mut [Option<Payload>], v: ValueId, g: ComplexMatrix) -> SgResult<()> {
    match &mut grads[v] {
        None => grads[v] = Some(Payload::Complex(g)),
        Some(Payload::Complex(existing)) => {
            for (e, n) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += n;
            }
        }
        Some(_) => return Err(SgError::Runtime(format!("mixed gradient kinds at value {v}"))),
    }
    Ok(())
}

fn accumulate_scalar(grads: &mut [Option<Payload>], v: ValueId, g: f64) -> SgResult<()> {
    match &mut grads[v] {
        None => grads[v] = Some(Payload::Scalar(g)),
        Some(Payload::Scalar(existing)) => *existing += g,
        Some(_) => return Err(SgError::Runtime(format!("mixed gradient kinds at value {v}"))),
    }
    Ok(())
}
