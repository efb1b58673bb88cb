//! Training: reverse-mode differentiation over the fixed op set, Adam,
//! subset cross-entropy, and the end-to-end loop.
//!
//! [`train_run`] is the sketched loop: every epoch builds the forward on the
//! tape from O(c) sketch state, picks a loss subset through the class tables,
//! backpropagates a subset cross-entropy, steps Adam, and (on scheduled
//! epochs) refines the hash tables of the hidden layers with a triplet loss
//! over decoded representations followed by an incremental rehash. The graph
//! itself is only touched at preprocessing and evaluation time.
//! [`train_dense_run`] is the exact full-graph baseline used for quality
//! comparisons.

pub mod adam;
pub mod loss;
pub mod tape;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::counters::Counters;
use crate::data::preprocess::{self, PreprocessConfig, VariantKind};
use crate::data::{normalize_adjacency, ConvKind, GraphDataset};
use crate::error::{SgError, SgResult};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::lsh::{select_update_set, suggest_thresholds, triplet_loss, ClassLossTables, SimHashProjection};
use crate::model::{
    dense_gcn_inference, forward_sketched, rehash_subset, ActivationMode, GnnVariant,
    LayerSketchState, ModelParams,
};
use crate::seeds;
use crate::sketch::unsketch_node;
use adam::{AdamParams, AdamSlot};
use tape::Tape;

/// Schedule and hyperparameters of the online hash-table refinement.
#[derive(Debug, Clone)]
pub struct LshUpdateConfig {
    pub enabled: bool,
    /// Update every epoch while `epoch <= warmup`.
    pub warmup: usize,
    /// After warmup, update every `period` epochs.
    pub period: usize,
    /// Fraction of buckets (per sketch) whose members form the update set.
    pub beta: f64,
    /// Triplet margin.
    pub alpha: f64,
    /// Positive/negative pairs sampled per triplet evaluation.
    pub pair_cap: usize,
    /// Fixed (t_plus, t_minus); None derives them from the decoded batch.
    pub thresholds: Option<(f64, f64)>,
    /// Adam learning rate for the projections.
    pub lr: f64,
}

impl Default for LshUpdateConfig {
    fn default() -> Self {
        LshUpdateConfig {
            enabled: true,
            warmup: 5,
            period: 10,
            beta: 0.01,
            alpha: 0.1,
            pair_cap: 1000,
            thresholds: None,
            lr: 0.001,
        }
    }
}

impl LshUpdateConfig {
    /// True when the table refinement runs this epoch (1-based).
    pub fn due(&self, epoch: usize) -> bool {
        if !self.enabled {
            return false;
        }
        if epoch <= self.warmup {
            return true;
        }
        self.period > 0 && (epoch - self.warmup) % self.period == 0
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub pre: PreprocessConfig,
    pub epochs: usize,
    /// Adam learning rate for weights and activation coefficients.
    pub lr: f64,
    /// L2 penalty weight on the polynomial coefficients c_1..c_r (never c_0).
    pub pts_lambda: f64,
    /// Add the layer input to the output when widths match.
    pub skip: bool,
    /// Nodes whose loss is evaluated per epoch; 0 picks max(256, 4*classes).
    pub loss_budget: usize,
    /// Bucket count of the class tables that drive loss-subset selection.
    pub loss_table_c: usize,
    /// Dense-graph evaluation every this many epochs (0 disables).
    pub eval_period: usize,
    /// Abort when the epoch loss exceeds this or stops being finite.
    pub max_loss: f64,
    /// Activation used by the dense evaluation forward.
    pub activation: ActivationMode,
    /// Force the polynomial bias term on or off at init; `None` keeps the
    /// per-layer default (on for sigmoid-seeded hidden layers, off for the
    /// linear output layer).
    pub pts_bias: Option<bool>,
    pub lsh: LshUpdateConfig,
    /// Reuse (or build) a preprocessing cache here instead of in memory.
    pub cache_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(pre: PreprocessConfig) -> Self {
        TrainConfig {
            pre,
            epochs: 200,
            lr: 0.001,
            pts_lambda: 0.05,
            skip: true,
            loss_budget: 0,
            loss_table_c: 16,
            eval_period: 10,
            max_loss: 1e6,
            activation: ActivationMode::LearnedPolynomial,
            pts_bias: None,
            lsh: LshUpdateConfig::default(),
            cache_dir: None,
        }
    }

    fn budget(&self, num_classes: usize) -> usize {
        if self.loss_budget > 0 {
            self.loss_budget
        } else {
            (4 * num_classes).max(256)
        }
    }
}

/// One JSONL record per epoch. `sketch_bytes` is the full training-resident
/// footprint: sketch state plus parameters plus optimizer moments, none of
/// which scales with the node count.
#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_acc: Option<f64>,
    /// Nodes the loss subset actually contained.
    pub selected: usize,
    /// Fraction of (node, table) slots rebucketed this epoch.
    pub hash_change: f64,
    pub wall_ms: f64,
    pub decode_count: u64,
    pub sketch_bytes: u64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub variant: GnnVariant,
    /// Final per-layer sketch state (empty for the dense baseline).
    pub states: Vec<LayerSketchState>,
    pub metrics: Vec<EpochMetrics>,
    pub peak_sketch_bytes: u64,
    pub counters: Counters,
}

/// Fraction of `idx` whose argmax logit matches the label; None when empty.
pub fn split_accuracy(logits: &DenseMatrix, labels: &[u32], idx: &[u32]) -> Option<f64> {
    if idx.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    for &i in idx {
        let row = i as usize;
        let mut best = 0usize;
        for c in 1..logits.cols() {
            if logits.get(row, c) > logits.get(row, best) {
                best = c;
            }
        }
        if best == labels[row] as usize {
            hits += 1;
        }
    }
    Some(hits as f64 / idx.len() as f64)
}

fn model_bytes(params: &ModelParams) -> u64 {
    let mut floats = 0usize;
    for ws in &params.weights {
        floats += ws.iter().map(|w| w.rows() * w.cols()).sum::<usize>();
    }
    for p in &params.pts {
        floats += p.ck.len() + usize::from(p.c0.is_some());
    }
    for ps in &params.projections {
        floats += ps.iter().map(|p| p.matrix().rows() * p.matrix().cols()).sum::<usize>();
    }
    floats as u64 * 8
}

fn resident_bytes(states: &[LayerSketchState], params: &ModelParams, moment_floats: u64) -> u64 {
    let sketches: u64 = states.iter().map(|s| s.sketch_state_bytes()).sum();
    sketches + model_bytes(params) + moment_floats * 8
}

fn emit(sink: &mut Option<&mut dyn Write>, rec: &EpochMetrics) -> SgResult<()> {
    if let Some(w) = sink {
        let line = serde_json::to_string(rec)
            .map_err(|e| SgError::Runtime(format!("serialize metrics: {e}")))?;
        writeln!(w, "{line}").map_err(|e| SgError::io("metrics sink", e))?;
    }
    Ok(())
}

/// Per-tensor Adam state for everything the sketched loop trains.
struct Slots {
    weights: Vec<Vec<AdamSlot>>,
    coeffs: Vec<AdamSlot>,
    projections: Vec<Vec<AdamSlot>>,
}

impl Slots {
    fn new(params: &ModelParams) -> Self {
        let weights = params
            .weights
            .iter()
            .map(|ws| ws.iter().map(|w| AdamSlot::new(w.rows() * w.cols())).collect())
            .collect();
        let coeffs = params
            .pts
            .iter()
            .map(|p| AdamSlot::new(p.ck.len() + usize::from(p.c0.is_some())))
            .collect();
        let projections = params
            .projections
            .iter()
            .map(|ps| {
                ps.iter()
                    .map(|p| AdamSlot::new(p.matrix().rows() * p.matrix().cols()))
                    .collect()
            })
            .collect();
        Slots { weights, coeffs, projections }
    }

    fn moment_floats(&self) -> u64 {
        let count = |s: &AdamSlot| 2 * s.len() as u64;
        self.weights.iter().flatten().map(&count).sum::<u64>()
            + self.coeffs.iter().map(&count).sum::<u64>()
            + self.projections.iter().flatten().map(&count).sum::<u64>()
    }
}

// epochs == 0 is allowed: the loop body never runs and the caller gets the
// freshly initialized parameters with an empty metrics list.
fn check_train_inputs(ds: &GraphDataset, cfg: &TrainConfig) -> SgResult<()> {
    if *cfg.pre.dims.last().unwrap_or(&0) != ds.num_classes {
        return Err(SgError::BadInput(format!(
            "output width {} must equal the {} classes",
            cfg.pre.dims.last().unwrap_or(&0),
            ds.num_classes
        )));
    }
    if ds.splits.train.is_empty() {
        return Err(SgError::BadInput("no training nodes in the split".into()));
    }
    if cfg.loss_table_c < 2 || cfg.loss_table_c % 2 != 0 {
        return Err(SgError::BadInput(format!(
            "loss_table_c {} must be even and >= 2",
            cfg.loss_table_c
        )));
    }
    if !(cfg.pts_lambda >= 0.0 && cfg.pts_lambda.is_finite()) {
        return Err(SgError::BadInput(format!("pts_lambda {} must be finite >= 0", cfg.pts_lambda)));
    }
    Ok(())
}

/// The sketched training loop.
///
/// Per epoch: sketched forward on the tape, loss-subset selection through the
/// class tables (decoding only the candidates), subset softmax cross-entropy
/// plus an L2 penalty on the activation coefficients, backward, Adam on
/// weights and coefficients. On scheduled epochs the hidden layers' hash
/// tables are refined: the update set is the union of the highest-gradient
/// buckets, its members are decoded, the SimHash projections take a triplet
/// step, and the tables plus every dependent sketch are rehashed in place.
/// Layer 0 hashes the raw input features and its tables stay fixed.
///
/// Every epoch appends one [`EpochMetrics`]; `sink`, when given, receives the
/// same records as JSON lines. A non-finite or exploding loss aborts with
/// [`SgError::Diverged`].
pub fn train_run(
    ds: &GraphDataset,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> SgResult<TrainOutcome> {
    check_train_inputs(ds, cfg)?;
    let mut counters = Counters::new();

    let (variant, mut states) = match &cfg.cache_dir {
        Some(dir) => {
            preprocess::preprocess(ds, &cfg.pre, dir, &mut counters)?;
            let loaded = preprocess::load_cache(dir, ds)?;
            (loaded.variant, loaded.states)
        }
        None => preprocess::build_states(ds, &cfg.pre, &mut counters)?,
    };

    let mut params = ModelParams::random(
        &cfg.pre.dims,
        cfg.pre.variant.supports(),
        cfg.pre.r,
        cfg.pre.c,
        cfg.pre.seed,
    )?;
    if let Some(bias) = cfg.pts_bias {
        for p in params.pts.iter_mut() {
            p.c0 = if bias { Some(p.c0.unwrap_or(0.0)) } else { None };
        }
    }
    let mut slots = Slots::new(&params);
    let hp = AdamParams::with_lr(cfg.lr);
    let hp_proj = AdamParams::with_lr(cfg.lsh.lr);

    let classes = ds.num_classes;
    let budget = cfg.budget(classes);
    let mut tables = ClassLossTables::build(
        SimHashProjection::random(
            cfg.loss_table_c,
            classes,
            seeds::substream(cfg.pre.seed, "loss-tables", &[]),
            &[],
        )?,
        &ds.splits.train,
        &ds.labels,
        classes,
        &mut counters,
    )?;

    // Dense evaluation operates on the real graph; GCN needs the normalized
    // adjacency, the other variants carry their payloads in `variant`.
    let eval_conv = normalize_adjacency(ds.n, &ds.edges, ConvKind::GcnSym)?;

    let layers = params.layer_count();
    let n = ds.n;
    let r = cfg.pre.r;
    // Slots that the refinement can actually rebucket: layer 0 is fixed.
    let movable_slots = n as u64 * r as u64 * layers.saturating_sub(1) as u64;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut peak = 0u64;

    for epoch in 1..=cfg.epochs {
        let tick = Instant::now();
        let decodes_before = counters.decodes;

        // Forward over sketch state only.
        let mut tape = Tape::new();
        let fp = forward_sketched(&mut tape, &params, &mut states, &variant, cfg.skip, &mut counters)?;

        // Snapshot the hidden layers' input sketches: the refinement decodes
        // and rehashes against exactly what this forward consumed.
        for li in 1..layers {
            let vals: Vec<DenseMatrix> = fp.layer_inputs[li]
                .iter()
                .map(|&v| tape.dense(v).cloned())
                .collect::<SgResult<_>>()?;
            states[li].snapshot_features(&vals)?;
        }

        // Loss subset: candidates whose stored class-table code disagrees
        // with their label's bucket, refreshed by decoding budget-many nodes.
        let out_values: Vec<DenseMatrix> = fp
            .output
            .iter()
            .map(|&v| tape.dense(v).cloned())
            .collect::<SgResult<_>>()?;
        let out_fam = &states[layers - 1].fam;
        let mut scoped = Counters::new();
        let selected = {
            let mut decode =
                |i: u32| unsketch_node(i as usize, &out_values, out_fam, &mut scoped);
            tables.select_loss_nodes(
                &mut decode,
                budget,
                seeds::substream(cfg.pre.seed, "loss-select", &[epoch as u64]),
                &mut counters,
            )?
        };
        counters.absorb(&scoped);

        let labels_sel: Vec<u32> = selected.iter().map(|&i| ds.labels[i as usize]).collect();
        let logits_sel = tape.median_decode(&fp.output, out_fam, &selected, &mut counters)?;
        let data_loss = tape.softmax_xent_subset(logits_sel, &labels_sel)?;

        // Coefficient penalty lambda * sum c_k^2 enters the reported loss and
        // the c_k gradients analytically; c_0 stays unregularized.
        let penalty: f64 = cfg.pts_lambda
            * params.pts.iter().flat_map(|p| &p.ck).map(|c| c * c).sum::<f64>();
        let loss = tape.scalar(data_loss)? + penalty;
        if !loss.is_finite() || loss > cfg.max_loss {
            return Err(SgError::Diverged { epoch, loss });
        }

        let grads = tape.backward(data_loss)?;

        // Adam on weights and activation coefficients.
        for li in 0..layers {
            for (q, &wid) in fp.weight_ids[li].iter().enumerate() {
                let g = grads
                    .dense(wid)
                    .ok_or_else(|| SgError::Runtime(format!("weight {li}/{q} missing gradient")))?;
                slots.weights[li][q].step(params.weights[li][q].data_mut(), g.data(), &hp)?;
            }
            let ids = &fp.coeff_ids[li];
            let pts = &mut params.pts[li];
            let mut vals = Vec::with_capacity(pts.ck.len() + 1);
            let mut gs = Vec::with_capacity(pts.ck.len() + 1);
            if let (Some(c0), Some(id)) = (pts.c0, ids.c0) {
                vals.push(c0);
                gs.push(grads.scalar(id).unwrap_or(0.0));
            }
            for (k, &id) in ids.ck.iter().enumerate() {
                vals.push(pts.ck[k]);
                gs.push(grads.scalar(id).unwrap_or(0.0) + 2.0 * cfg.pts_lambda * pts.ck[k]);
            }
            slots.coeffs[li].step(&mut vals, &gs, &hp)?;
            let mut it = vals.into_iter();
            if pts.c0.is_some() {
                pts.c0 = it.next();
            }
            for c in pts.ck.iter_mut() {
                *c = it.next().unwrap_or(*c);
            }
        }

        // Hash-table refinement on the hidden layers.
        let mut moved = 0u64;
        if cfg.lsh.due(epoch) {
            for li in 1..layers {
                let d_l = states[li].feature_dim();
                let grad_mats: Vec<DenseMatrix> = fp.layer_inputs[li]
                    .iter()
                    .map(|&v| {
                        grads
                            .dense(v)
                            .cloned()
                            .unwrap_or_else(|| DenseMatrix::zeros(d_l, cfg.pre.c))
                    })
                    .collect();
                let b_set = select_update_set(&grad_mats, &states[li].fam, cfg.lsh.beta)?;

                let mut decoded: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
                for &i in &b_set {
                    let row =
                        unsketch_node(i as usize, &states[li].s_x, &states[li].fam, &mut counters)?;
                    if row.iter().all(|v| v.is_finite()) {
                        decoded.insert(i, row);
                    }
                }
                if decoded.len() < 2 {
                    continue;
                }
                let mut xb = DenseMatrix::zeros(decoded.len(), d_l);
                for (ri, row) in decoded.values().enumerate() {
                    for (ci, &v) in row.iter().enumerate() {
                        xb.set(ri, ci, v);
                    }
                }
                let (t_plus, t_minus) = match cfg.lsh.thresholds {
                    Some(t) => t,
                    None => suggest_thresholds(
                        &xb,
                        2 * cfg.lsh.pair_cap,
                        seeds::substream(cfg.pre.seed, "lsh-thresholds", &[epoch as u64, li as u64]),
                    )?,
                };
                for k in 0..r {
                    let trip = triplet_loss(
                        &params.projections[li][k],
                        &xb,
                        t_plus,
                        t_minus,
                        cfg.lsh.alpha,
                        cfg.lsh.pair_cap,
                        seeds::substream(
                            cfg.pre.seed,
                            "lsh-triplet",
                            &[epoch as u64, li as u64, k as u64],
                        ),
                    )?;
                    slots.projections[li][k].step(
                        params.projections[li][k].matrix_mut().data_mut(),
                        trip.grad.data(),
                        &hp_proj,
                    )?;
                    let outcome = rehash_subset(
                        &mut states,
                        li,
                        k,
                        &params.projections[li][k],
                        &decoded,
                        &b_set,
                        &mut counters,
                    )?;
                    moved += outcome.moved.len() as u64;
                }
            }
        }
        let hash_change =
            if movable_slots == 0 { 0.0 } else { moved as f64 / movable_slots as f64 };

        // Periodic dense evaluation on the real graph.
        let (mut train_acc, mut val_acc) = (None, None);
        if cfg.eval_period > 0 && (epoch % cfg.eval_period == 0 || epoch == cfg.epochs) {
            let logits =
                dense_gcn_inference(&params, &eval_conv, &ds.features, &variant, cfg.activation)?;
            train_acc = split_accuracy(&logits, &ds.labels, &ds.splits.train);
            val_acc = split_accuracy(&logits, &ds.labels, &ds.splits.val);
        }

        let sketch_bytes = resident_bytes(&states, &params, slots.moment_floats());
        peak = peak.max(sketch_bytes);
        let rec = EpochMetrics {
            epoch,
            loss,
            train_acc,
            val_acc,
            selected: selected.len(),
            hash_change,
            wall_ms: tick.elapsed().as_secs_f64() * 1e3,
            decode_count: counters.decodes - decodes_before,
            sketch_bytes,
        };
        emit(&mut sink, &rec)?;
        metrics.push(rec);
    }

    Ok(TrainOutcome { params, variant, states, metrics, peak_sketch_bytes: peak, counters })
}

/// Full-graph GCN baseline: same parameter shapes and optimizer, but exact
/// spmm convolutions over all n nodes, ReLU hidden activations, and the
/// cross-entropy taken over the whole training split. No sketches anywhere;
/// this is the quality reference the sketched loop is compared against.
pub fn train_dense_run(
    ds: &GraphDataset,
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> SgResult<TrainOutcome> {
    check_train_inputs(ds, cfg)?;
    if cfg.pre.variant != VariantKind::Gcn {
        return Err(SgError::BadInput(format!(
            "dense baseline supports gcn only, got {}",
            cfg.pre.variant.as_str()
        )));
    }
    let counters = Counters::new();
    let variant = GnnVariant::Gcn;
    let conv = Arc::new(normalize_adjacency(ds.n, &ds.edges, ConvKind::GcnSym)?);

    let mut params = ModelParams::random(
        &cfg.pre.dims,
        variant.supports(),
        cfg.pre.r,
        cfg.pre.c,
        cfg.pre.seed,
    )?;
    let layers = params.layer_count();
    let mut slots: Vec<AdamSlot> = params
        .weights
        .iter()
        .map(|ws| AdamSlot::new(ws[0].rows() * ws[0].cols()))
        .collect();
    let hp = AdamParams::with_lr(cfg.lr);

    // Selection matrix: train-split rows of the final representation.
    let train_idx = &ds.splits.train;
    let sel_rows: Vec<Vec<(usize, f64)>> =
        train_idx.iter().map(|&i| vec![(i as usize, 1.0)]).collect();
    let sel = Arc::new(CsrMatrix::from_rows(train_idx.len(), ds.n, sel_rows)?);
    let labels_sel: Vec<u32> = train_idx.iter().map(|&i| ds.labels[i as usize]).collect();

    let resident = model_bytes(&params)
        + slots.iter().map(|s| 2 * s.len() as u64 * 8).sum::<u64>();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut peak = 0u64;

    for epoch in 1..=cfg.epochs {
        let tick = Instant::now();
        let mut tape = Tape::new();
        let x = tape.leaf(ds.features.clone());
        let wids: Vec<_> =
            params.weights.iter().map(|ws| tape.leaf(ws[0].clone())).collect();

        let mut h = x;
        for li in 0..layers {
            let z = tape.gemm(h, false, wids[li], false)?;
            h = tape.spmm_left(conv.clone(), z)?;
            if li + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        let picked = tape.spmm_left(sel.clone(), h)?;
        let loss_id = tape.softmax_xent_subset(picked, &labels_sel)?;
        let loss = tape.scalar(loss_id)?;
        if !loss.is_finite() || loss > cfg.max_loss {
            return Err(SgError::Diverged { epoch, loss });
        }

        let logits = tape.dense(h)?.clone();
        let grads = tape.backward(loss_id)?;
        for li in 0..layers {
            let g = grads
                .dense(wids[li])
                .ok_or_else(|| SgError::Runtime(format!("weight {li} missing gradient")))?;
            slots[li].step(params.weights[li][0].data_mut(), g.data(), &hp)?;
        }

        let (mut train_acc, mut val_acc) = (None, None);
        if cfg.eval_period > 0 && (epoch % cfg.eval_period == 0 || epoch == cfg.epochs) {
            train_acc = split_accuracy(&logits, &ds.labels, &ds.splits.train);
            val_acc = split_accuracy(&logits, &ds.labels, &ds.splits.val);
        }

        peak = peak.max(resident);
        let rec = EpochMetrics {
            epoch,
            loss,
            train_acc,
            val_acc,
            selected: train_idx.len(),
            hash_change: 0.0,
            wall_ms: tick.elapsed().as_secs_f64() * 1e3,
            decode_count: 0,
            sketch_bytes: resident,
        };
        emit(&mut sink, &rec)?;
        metrics.push(rec);
    }

    Ok(TrainOutcome { params, variant, states: Vec::new(), metrics, peak_sketch_bytes: peak, counters })
}
