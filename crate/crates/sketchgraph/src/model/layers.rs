//! Tape builders for the sketched layer update and the multi-layer forward.
//!
//! One layer, for every output table k':
//!
//!   S^(l+1,k') = sum_k c_k * ifft( prod_{p<=k} fft(W^T S_X^(l,p)) ) * S_C^(l,k,k')
//!              + c_0 * ones_bias(k')      [when the coefficients carry c_0]
//!
//! where the k=1 term skips the FFT round-trip entirely (a single count
//! sketch), and ones_bias(k') is the rank-one sketch of the all-ones
//! direction: every feature row equals the signed bucket counts of table k'.
//! The output lives in the layer's own tables; `forward_sketched` re-keys it
//! into the next layer's tables through the stored basis-change link and adds
//! the skip connection (unit gain, only when widths match) before doing so.

use std::sync::Arc;

use crate::counters::Counters;
use crate::error::{SgError, SgResult};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::pts::PtsCoefficients;
use crate::sketch::{ones_sketch, SketchFamily};
use crate::train::tape::{Tape, ValueId};

use super::{estimate_gat_conv_sketches, GnnVariant, LayerSketchState, ModelParams};

/// Tape ids of one layer's activation coefficients.
#[derive(Debug, Clone)]
pub struct LayerCoeffIds {
    pub c0: Option<ValueId>,
    pub ck: Vec<ValueId>,
}

/// Registers the coefficients as scalar leaves so they receive gradients.
pub fn coeff_leaves(tape: &mut Tape, coeffs: &PtsCoefficients) -> LayerCoeffIds {
    LayerCoeffIds {
        c0: coeffs.c0.map(|v| tape.leaf_scalar(v)),
        ck: coeffs.ck.iter().map(|&v| tape.leaf_scalar(v)).collect(),
    }
}

/// The rank-one bias sketch for table `kp`: d_out rows, each the signed
/// bucket counts of the table (the count sketch of the all-ones direction).
pub fn ones_bias_matrix(fam: &SketchFamily, kp: usize, d_out: usize) -> DenseMatrix {
    let xi = ones_sketch(fam.pair(kp));
    let c = xi.len();
    let mut m = DenseMatrix::zeros(d_out, c);
    for f in 0..d_out {
        m.row_mut(f).copy_from_slice(&xi);
    }
    m
}

/// The shared core: transformed per-pair sketches in, per-table outputs out.
fn pts_conv_update(
    tape: &mut Tape,
    ys: &[ValueId],
    blocks: &[Vec<Arc<CsrMatrix>>],
    coeffs: &LayerCoeffIds,
    bias: &[Arc<DenseMatrix>],
) -> SgResult<Vec<ValueId>> {
    let r = ys.len();
    if coeffs.ck.len() != r || blocks.len() != r || blocks.iter().any(|row| row.len() != r) {
        return Err(SgError::BadInput(format!(
            "r of state and coeffs differ: {} sketches, {} coefficients, {}x{} conv grid",
            r,
            coeffs.ck.len(),
            blocks.len(),
            blocks.first().map_or(0, |b| b.len())
        )));
    }
    // terms[k] approximates TS_{k+1}((X W)^T); the cumulative frequency-domain
    // product shares the first k factors between consecutive orders.
    let mut terms = Vec::with_capacity(r);
    terms.push(ys[0]);
    if r > 1 {
        let mut h = tape.fft_rows(ys[0])?;
        for k in 1..r {
            let f = tape.fft_rows(ys[k])?;
            h = tape.hadamard_complex(h, f)?;
            terms.push(tape.ifft_rows_real(h)?);
        }
    }
    let mut out = Vec::with_capacity(r);
    for kp in 0..r {
        let mut acc: Option<ValueId> = None;
        for k in 0..r {
            let prod = tape.dense_times_csr(terms[k], blocks[k][kp].clone())?;
            let scaled = tape.scale_by_param(coeffs.ck[k], prod)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
        let mut v = acc.expect("r >= 1");
        if let Some(c0) = coeffs.c0 {
            v = tape.add_const_scaled(v, bias[kp].clone(), c0)?;
        }
        out.push(v);
    }
    Ok(out)
}

fn bias_mats(fam: &SketchFamily, d_out: usize) -> Vec<Arc<DenseMatrix>> {
    (0..fam.r()).map(|kp| Arc::new(ones_bias_matrix(fam, kp, d_out))).collect()
}

/// One sketched convolution layer over the state's own tables. `sx` are the
/// layer's input feature sketches on the tape (one per pair); the result is
/// pre-basis-change and pre-skip.
pub fn sketch_gcn_layer(
    tape: &mut Tape,
    state: &mut LayerSketchState,
    sx: &[ValueId],
    w: ValueId,
    coeffs: &LayerCoeffIds,
) -> SgResult<Vec<ValueId>> {
    let r = state.r();
    if sx.len() != r {
        return Err(SgError::BadInput(format!("{} input sketches for r={r}", sx.len())));
    }
    let d_out = tape.dense(w)?.cols();
    let mut ys = Vec::with_capacity(r);
    for &s in sx {
        ys.push(tape.gemm(w, true, s, false)?);
    }
    let blocks = state.snapshot_s_c();
    let bias = bias_mats(&state.fam, d_out);
    pts_conv_update(tape, &ys, &blocks, coeffs, &bias)
}

/// The GraphSAGE layer: same machinery over the stacked 2n-wide domain, with
/// the transformed sketches W1^T S_left + W2^T S_right standing in for the
/// stacked features [X W1 ; X W2].
pub fn sketch_sage_layer(
    tape: &mut Tape,
    state: &mut LayerSketchState,
    sx_left: &[ValueId],
    sx_right: &[ValueId],
    w1: ValueId,
    w2: ValueId,
    coeffs: &LayerCoeffIds,
) -> SgResult<Vec<ValueId>> {
    let r = state.r();
    if state.sage.is_none() {
        return Err(SgError::BadInput("sage layer on a state without a stacked side".into()));
    }
    if sx_left.len() != r || sx_right.len() != r {
        return Err(SgError::BadInput(format!(
            "{}+{} half sketches for r={r}",
            sx_left.len(),
            sx_right.len()
        )));
    }
    let (w1m, w2m) = (tape.dense(w1)?, tape.dense(w2)?);
    if w1m.rows() != w2m.rows() || w1m.cols() != w2m.cols() {
        return Err(SgError::shape(
            "sketch_sage_layer",
            format!("{}x{} vs {}x{}", w1m.rows(), w1m.cols(), w2m.rows(), w2m.cols()),
        ));
    }
    let d_out = w1m.cols();
    let mut ys = Vec::with_capacity(r);
    for p in 0..r {
        let a = tape.gemm(w1, true, sx_left[p], false)?;
        let b = tape.gemm(w2, true, sx_right[p], false)?;
        ys.push(tape.add(a, b)?);
    }
    let blocks = state.snapshot_s_c();
    let bias = bias_mats(&state.fam, d_out);
    pts_conv_update(tape, &ys, &blocks, coeffs, &bias)
}

/// Everything the trainer needs back from a forward build.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Input sketches per layer (layer 0 = leaves; deeper = the re-keyed
    /// previous output). Gradients at these drive update-set selection.
    pub layer_inputs: Vec<Vec<ValueId>>,
    /// Final-layer outputs, in the last layer's own tables.
    pub output: Vec<ValueId>,
    pub weight_ids: Vec<Vec<ValueId>>,
    pub coeff_ids: Vec<LayerCoeffIds>,
}

/// Builds the L-layer sketched forward on the tape. Skip connections add the
/// layer input when widths match; the basis-change link re-keys each output
/// into the next layer's tables. GAT re-estimates its convolution sketches
/// from the state's stored feature snapshots (detached from the tape).
pub fn forward_sketched(
    tape: &mut Tape,
    params: &ModelParams,
    states: &mut [LayerSketchState],
    variant: &GnnVariant,
    skip: bool,
    counters: &mut Counters,
) -> SgResult<ForwardPass> {
    params.validate()?;
    let l = params.layer_count();
    if states.len() != l {
        return Err(SgError::BadInput(format!("{} states for {l} layers", states.len())));
    }
    if params.weights.iter().any(|ws| ws.len() != variant.supports()) {
        return Err(SgError::BadInput(format!(
            "variant {} expects {} weight(s) per layer",
            variant.kind(),
            variant.supports()
        )));
    }

    let mut layer_inputs = Vec::with_capacity(l);
    let mut weight_ids = Vec::with_capacity(l);
    let mut coeff_ids = Vec::with_capacity(l);

    let mut current: Vec<ValueId> =
        states[0].s_x.iter().map(|m| tape.leaf(m.clone())).collect();
    layer_inputs.push(current.clone());

    let mut output = Vec::new();
    for li in 0..l {
        let ws: Vec<ValueId> =
            params.weights[li].iter().map(|w| tape.leaf(w.clone())).collect();
        let cs = coeff_leaves(tape, &params.pts[li]);
        let d_in = params.weights[li][0].rows();
        let d_out = params.weights[li][0].cols();

        let out = match variant {
            GnnVariant::Gcn => {
                sketch_gcn_layer(tape, &mut states[li], &current, ws[0], &cs)?
            }
            GnnVariant::GraphSage { .. } => {
                let (sxl, sxr) = sage_half_ids(tape, &mut states[li], &current)?;
                sketch_sage_layer(tape, &mut states[li], &sxl, &sxr, ws[0], ws[1], &cs)?
            }
            GnnVariant::Gat { attn, .. } => {
                let sizes = states[li].bucket_sizes();
                let (est, _empty) = estimate_gat_conv_sketches(
                    &states[li],
                    &params.weights[li][0],
                    &attn[li],
                    &sizes,
                    counters,
                )?;
                let r = states[li].r();
                let blocks: Vec<Vec<Arc<CsrMatrix>>> = (1..=r)
                    .map(|k| (1..=r).map(|kp| Arc::new(est.block(k, kp).clone())).collect())
                    .collect();
                let mut ys = Vec::with_capacity(r);
                for &s in &current {
                    ys.push(tape.gemm(ws[0], true, s, false)?);
                }
                let bias = bias_mats(&states[li].fam, d_out);
                pts_conv_update(tape, &ys, &blocks, &cs, &bias)?
            }
        };

        let mut out = out;
        if skip && d_in == d_out {
            for (o, &s) in out.iter_mut().zip(&current) {
                *o = tape.add(*o, s)?;
            }
        }

        weight_ids.push(ws);
        coeff_ids.push(cs);

        if li + 1 < l {
            let link = states[li]
                .t_next
                .as_mut()
                .ok_or_else(|| SgError::BadInput(format!("layer {li} missing its link")))?;
            let mut next = Vec::with_capacity(out.len());
            for (kp, &o) in out.iter().enumerate() {
                next.push(tape.dense_times_csr(o, link[kp].snapshot())?);
            }
            current = next;
            layer_inputs.push(current.clone());
        } else {
            output = out;
        }
    }

    Ok(ForwardPass { layer_inputs, output, weight_ids, coeff_ids })
}

/// Half-domain sketches for a SAGE layer: exact stored halves when present
/// (input layer), otherwise the layer input re-keyed through the half links.
fn sage_half_ids(
    tape: &mut Tape,
    state: &mut LayerSketchState,
    current: &[ValueId],
) -> SgResult<(Vec<ValueId>, Vec<ValueId>)> {
    let r = state.r();
    let side = state
        .sage
        .as_mut()
        .ok_or_else(|| SgError::BadInput("sage halves on a non-sage state".into()))?;
    if !side.s_x_left.is_empty() {
        let l = side.s_x_left.iter().map(|m| tape.leaf(m.clone())).collect();
        let rgt = side.s_x_right.iter().map(|m| tape.leaf(m.clone())).collect();
        return Ok((l, rgt));
    }
    let mut sxl = Vec::with_capacity(r);
    let mut sxr = Vec::with_capacity(r);
    for p in 0..r {
        sxl.push(tape.dense_times_csr(current[p], side.to_left[p].snapshot())?);
        sxr.push(tape.dense_times_csr(current[p], side.to_right[p].snapshot())?);
    }
    Ok((sxl, sxr))
}
