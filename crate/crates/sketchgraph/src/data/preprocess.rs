//! One-time preprocessing: hash the input features into per-sketch tables,
//! sketch the convolution and the features, and persist the results in a
//! cache directory so training never repeats the O(n·c·d) setup work.
//!
//! Layout (`*.sgb` files use the versioned binary matrix format):
//! - `manifest.json`: shape, widths, seeds, flags, input checksums
//! - `tables.json`: bucket/sign tables for the node family (plus the stacked
//!   family for GraphSAGE). Every layer starts from the same tables, so one
//!   copy is stored and the loader replicates it per layer; the basis-change
//!   links and bucket directories are cheap integer passes re-derived at load.
//! - `sx_k*.sgb`: layer-0 feature sketches, d x c
//! - `sc_k*_*.sgb`: two-sided convolution sketch blocks, c x c
//! - `ones_k*.sgb`: count sketches of the all-ones direction (bias terms)
//! - GraphSAGE `sxl_/sxr_k*.sgb`: exact half-domain feature sketches
//! - GAT `mask_k*_*.sgb`: pair-basis bucket totals of A+I
//!
//! Writers hold an exclusive `.lock` file and write the manifest last, so a
//! readable manifest implies a complete cache. Reruns against a matching
//! manifest are no-ops; a manifest built from different inputs or settings is
//! rejected rather than silently overwritten.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::counters::Counters;
use crate::error::{SgError, SgResult};
use crate::linalg::{io as mat_io, CsrMatrix, DenseMatrix};
use crate::lsh::{build_hash_pair, LshDirectory, SimHashProjection};
use crate::model::{
    build_layer_states, split_stacked_pair, stack_convs, EditableSparse, GatSide, GnnVariant,
    LayerSketchState, SageSide,
};
use crate::seeds;
use crate::sketch::{basis_change_matrix, ones_sketch, HashPair, SketchFamily};

use super::{normalize_adjacency, ConvKind, GraphDataset};

pub const CACHE_FORMAT: &str = "sketchgnn-cache-v1";

/// Model flavor, without the per-dataset convolution payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariantKind {
    Gcn,
    Sage,
    Gat,
}

impl VariantKind {
    pub fn as_str(self) -> &'static str {
        match self {
            VariantKind::Gcn => "gcn",
            VariantKind::Sage => "sage",
            VariantKind::Gat => "gat",
        }
    }

    pub fn parse(s: &str) -> SgResult<Self> {
        match s {
            "gcn" => Ok(VariantKind::Gcn),
            "sage" => Ok(VariantKind::Sage),
            "gat" => Ok(VariantKind::Gat),
            other => Err(SgError::BadInput(format!(
                "unknown variant {other:?} (expected gcn, sage, or gat)"
            ))),
        }
    }

    /// Weight matrices per layer.
    pub fn supports(self) -> usize {
        match self {
            VariantKind::Sage => 2,
            _ => 1,
        }
    }
}

/// Everything that determines the cache contents for a given dataset.
#[derive(Debug, Clone)]
pub struct PreprocessConfig {
    pub variant: VariantKind,
    /// Feature width entering each layer plus the final output width.
    pub dims: Vec<usize>,
    pub c: usize,
    pub r: usize,
    pub seed: u64,
    /// Hash nodes by SimHash of their features; `false` draws seeded-random
    /// tables instead (the fixed-table ablation).
    pub lsh_tables: bool,
    /// Recorded so a cache built over transformed features is not reused on
    /// raw ones; the caller applies the transform before preprocessing.
    pub normalized_features: bool,
}

/// Identifies a cache: settings plus checksums of the inputs it was built
/// from. Any mismatch invalidates the cache.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub format: String,
    pub variant: String,
    pub n: usize,
    pub m: usize,
    pub dims: Vec<usize>,
    pub c: usize,
    pub r: usize,
    pub seed: u64,
    pub lsh_tables: bool,
    pub normalized_features: bool,
    pub features_fnv: u64,
    pub edges_fnv: u64,
}

#[derive(Debug, Clone)]
pub struct PreprocessReport {
    /// False when a matching cache was already present.
    pub rebuilt: bool,
    pub n: usize,
    pub m: usize,
    pub c: usize,
    pub r: usize,
    /// Bytes of sketch blobs: bounded by the sketch width, not the graph.
    pub sketch_bytes: u64,
    /// Bytes of the bucket/sign tables: one entry per node.
    pub table_bytes: u64,
    pub wall_ms: f64,
}

/// A cache pulled back into memory, ready for training.
pub struct LoadedCache {
    pub manifest: CacheManifest,
    pub variant: GnnVariant,
    pub states: Vec<LayerSketchState>,
}

// FNV-1a, enough to tell stale inputs apart.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
}

fn checksum_features(x: &DenseMatrix) -> u64 {
    let mut h = Fnv::new();
    h.write(&(x.rows() as u64).to_le_bytes());
    h.write(&(x.cols() as u64).to_le_bytes());
    for v in x.data() {
        h.write(&v.to_bits().to_le_bytes());
    }
    h.0
}

fn checksum_edges(n: usize, edges: &[(u32, u32)]) -> u64 {
    let mut h = Fnv::new();
    h.write(&(n as u64).to_le_bytes());
    for &(u, v) in edges {
        h.write(&u.to_le_bytes());
        h.write(&v.to_le_bytes());
    }
    h.0
}

/// The manifest a build of `ds` under `cfg` would produce.
pub fn cache_manifest(ds: &GraphDataset, cfg: &PreprocessConfig) -> SgResult<CacheManifest> {
    validate(ds, cfg)?;
    Ok(CacheManifest {
        format: CACHE_FORMAT.to_string(),
        variant: cfg.variant.as_str().to_string(),
        n: ds.n,
        m: ds.edges.len(),
        dims: cfg.dims.clone(),
        c: cfg.c,
        r: cfg.r,
        seed: cfg.seed,
        lsh_tables: cfg.lsh_tables,
        normalized_features: cfg.normalized_features,
        features_fnv: checksum_features(&ds.features),
        edges_fnv: checksum_edges(ds.n, &ds.edges),
    })
}

fn validate(ds: &GraphDataset, cfg: &PreprocessConfig) -> SgResult<()> {
    if cfg.dims.len() < 2 {
        return Err(SgError::BadInput("need at least input and output dims".into()));
    }
    if cfg.dims[0] != ds.feature_dim() {
        return Err(SgError::BadInput(format!(
            "dims[0]={} but the dataset features are {} wide",
            cfg.dims[0],
            ds.feature_dim()
        )));
    }
    if cfg.r == 0 {
        return Err(SgError::BadInput("r must be >= 1".into()));
    }
    if cfg.c < 2 || cfg.c % 2 != 0 {
        return Err(SgError::BadInput(format!("sketch width {} must be even and >= 2", cfg.c)));
    }
    if ds.n < cfg.c {
        return Err(SgError::BadInput(format!(
            "sketch width {} exceeds the graph size {}; sketching would not compress",
            cfg.c, ds.n
        )));
    }
    Ok(())
}

/// Same products as [`preprocess`] + [`load_cache`], built in memory with no
/// cache directory. Training uses this when no cache path is configured.
pub fn build_states(
    ds: &GraphDataset,
    cfg: &PreprocessConfig,
    counters: &mut Counters,
) -> SgResult<(GnnVariant, Vec<LayerSketchState>)> {
    validate(ds, cfg)?;
    let built = build_fresh(ds, cfg, counters)?;
    Ok((built.variant, built.states))
}

/// Builds the convolution payload for a variant. GAT attention vectors are
/// seeded here and stay fixed between checkpoints, so preprocessing and
/// training derive the identical variant from (kind, edges, dims, seed).
pub fn build_variant(
    kind: VariantKind,
    n: usize,
    edges: &[(u32, u32)],
    dims: &[usize],
    seed: u64,
) -> SgResult<GnnVariant> {
    Ok(match kind {
        VariantKind::Gcn => GnnVariant::Gcn,
        VariantKind::Sage => GnnVariant::GraphSage {
            self_conv: Arc::new(CsrMatrix::identity(n)),
            neigh_conv: Arc::new(normalize_adjacency(n, edges, ConvKind::RowNorm)?),
        },
        VariantKind::Gat => {
            let mask = Arc::new(normalize_adjacency(n, edges, ConvKind::Mask)?);
            let mut attn = Vec::with_capacity(dims.len() - 1);
            for li in 0..dims.len() - 1 {
                let dout = dims[li + 1];
                let std = (1.0 / (2 * dout) as f64).sqrt();
                let dist = Normal::new(0.0, std).map_err(|e| SgError::BadInput(e.to_string()))?;
                let mut rng = seeds::rng(seed, "gat-attn", &[li as u64]);
                attn.push((0..2 * dout).map(|_| dist.sample(&mut rng)).collect());
            }
            GnnVariant::Gat { attn, mask }
        }
    })
}

/// The matrix the layer states sketch (n wide, except GraphSAGE's stacked
/// n x 2n form).
fn state_conv(variant: &GnnVariant, n: usize, edges: &[(u32, u32)]) -> SgResult<Arc<CsrMatrix>> {
    Ok(match variant {
        GnnVariant::Gcn => Arc::new(normalize_adjacency(n, edges, ConvKind::GcnSym)?),
        GnnVariant::GraphSage { self_conv, neigh_conv } => {
            Arc::new(stack_convs(self_conv, neigh_conv)?)
        }
        GnnVariant::Gat { mask, .. } => mask.clone(),
    })
}

struct BuiltCache {
    fam: SketchFamily,
    stacked: Option<SketchFamily>,
    variant: GnnVariant,
    states: Vec<LayerSketchState>,
}

fn build_fresh(ds: &GraphDataset, cfg: &PreprocessConfig, counters: &mut Counters) -> SgResult<BuiltCache> {
    let n = ds.n;
    // Attention sketches read bucket totals, so those tables must be all-plus.
    let plus = cfg.variant == VariantKind::Gat;
    let mut pairs = Vec::with_capacity(cfg.r);
    for k in 0..cfg.r {
        pairs.push(if cfg.lsh_tables {
            // Same substream as the model's layer-0 projections: training and
            // preprocessing must agree on what hashed these buckets.
            let proj = SimHashProjection::random(cfg.c, cfg.dims[0], cfg.seed, &[0, k as u64])?;
            let sign_seed = seeds::substream(cfg.seed, "table-signs", &[k as u64]);
            build_hash_pair(&proj, &ds.features, sign_seed, plus, counters)?
        } else {
            HashPair::random(n, cfg.c, seeds::substream(cfg.seed, "table", &[k as u64]), plus)
        });
    }
    let fam = SketchFamily::new(pairs)?;

    // The stacked [self | neigh] domain keeps static random tables; the
    // learnable structure lives in the node-domain family.
    let stacked = if cfg.variant == VariantKind::Sage {
        let mut sp = Vec::with_capacity(cfg.r);
        for k in 0..cfg.r {
            let seed = seeds::substream(cfg.seed, "stacked-table", &[k as u64]);
            sp.push(HashPair::random(2 * n, cfg.c, seed, false));
        }
        Some(SketchFamily::new(sp)?)
    } else {
        None
    };

    let variant = build_variant(cfg.variant, n, &ds.edges, &cfg.dims, cfg.seed)?;
    let cmat = match &variant {
        GnnVariant::Gcn => state_conv(&variant, n, &ds.edges)?,
        // build_layer_states takes its convolutions from the variant here.
        GnnVariant::GraphSage { .. } => Arc::new(CsrMatrix::identity(n)),
        GnnVariant::Gat { mask, .. } => mask.clone(),
    };
    let layers = cfg.dims.len() - 1;
    let states = build_layer_states(
        &ds.features,
        &cfg.dims,
        &variant,
        &cmat,
        vec![fam.clone(); layers],
        stacked.clone().map(|s| vec![s; layers]),
    )?;
    Ok(BuiltCache { fam, stacked, variant, states })
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    h: Vec<u32>,
    s: Vec<i8>,
}

impl PairRecord {
    fn from_pair(p: &HashPair) -> Self {
        PairRecord { h: p.buckets().to_vec(), s: p.signs().to_vec() }
    }

    fn into_pair(self, c: usize) -> SgResult<HashPair> {
        HashPair::new(c, self.h, self.s)
    }
}

#[derive(Serialize, Deserialize)]
struct TablesFile {
    node: Vec<PairRecord>,
    stacked: Option<Vec<PairRecord>>,
}

fn blob_names(man: &CacheManifest) -> Vec<String> {
    let r = man.r;
    let mut names = Vec::new();
    for k in 0..r {
        names.push(format!("sx_k{k}.sgb"));
    }
    for k in 0..r {
        for kp in 0..r {
            names.push(format!("sc_k{k}_{kp}.sgb"));
        }
    }
    for k in 0..r {
        names.push(format!("ones_k{k}.sgb"));
    }
    if man.variant == "sage" {
        for k in 0..r {
            names.push(format!("sxl_k{k}.sgb"));
            names.push(format!("sxr_k{k}.sgb"));
        }
    }
    if man.variant == "gat" {
        for k in 0..r {
            for kp in 0..r {
                names.push(format!("mask_k{k}_{kp}.sgb"));
            }
        }
    }
    names
}

fn cache_complete(dir: &Path, man: &CacheManifest) -> bool {
    dir.join("tables.json").is_file() && blob_names(man).iter().all(|f| dir.join(f).is_file())
}

fn measure(dir: &Path, man: &CacheManifest) -> SgResult<(u64, u64)> {
    let len = |name: &str| -> SgResult<u64> {
        let path = dir.join(name);
        Ok(fs::metadata(&path).map_err(|e| SgError::io(path.display().to_string(), e))?.len())
    };
    let mut sketch = 0;
    for name in blob_names(man) {
        sketch += len(&name)?;
    }
    Ok((sketch, len("tables.json")?))
}

/// Held while writing; the file disappears when the guard drops. A leftover
/// lock from a killed process must be removed by hand.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> SgResult<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SgError::Runtime(
                format!("cache directory {} is locked by another writer (stale? remove {})",
                    dir.display(),
                    path.display()),
            )),
            Err(e) => Err(SgError::io(path.display().to_string(), e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> SgResult<()> {
    let body = serde_json::to_string_pretty(value)
        .map_err(|e| SgError::Runtime(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, body + "\n").map_err(|e| SgError::io(path.display().to_string(), e))
}

fn read_json<T: for<'a> Deserialize<'a>>(path: &Path) -> SgResult<T> {
    let body =
        fs::read_to_string(path).map_err(|e| SgError::io(path.display().to_string(), e))?;
    serde_json::from_str(&body)
        .map_err(|e| SgError::Incompatible(format!("{} is not readable: {e}", path.display())))
}

/// Builds the sketch cache for `ds` under `dir`. Rerunning against a matching
/// manifest is a no-op; a mismatched manifest in the directory is an error.
pub fn preprocess(
    ds: &GraphDataset,
    cfg: &PreprocessConfig,
    dir: &Path,
    counters: &mut Counters,
) -> SgResult<PreprocessReport> {
    let t0 = Instant::now();
    let man = cache_manifest(ds, cfg)?;
    let report = |rebuilt: bool, sketch: u64, table: u64, wall: f64| PreprocessReport {
        rebuilt,
        n: man.n,
        m: man.m,
        c: man.c,
        r: man.r,
        sketch_bytes: sketch,
        table_bytes: table,
        wall_ms: wall,
    };

    let manifest_path = dir.join("manifest.json");
    if manifest_path.is_file() {
        let existing: CacheManifest = read_json(&manifest_path)?;
        if existing != man {
            return Err(SgError::Incompatible(format!(
                "cache at {} was built from different inputs or settings; \
                 use another directory or remove it",
                dir.display()
            )));
        }
        // A manifest is written last, so matching means complete; rebuild
        // anyway if blobs were deleted out from under it.
        if cache_complete(dir, &man) {
            let (sketch, table) = measure(dir, &man)?;
            return Ok(report(false, sketch, table, t0.elapsed().as_secs_f64() * 1e3));
        }
    }

    let built = build_fresh(ds, cfg, counters)?;
    fs::create_dir_all(dir).map_err(|e| SgError::io(dir.display().to_string(), e))?;
    let _lock = DirLock::acquire(dir)?;

    let first = &built.states[0];
    for k in 0..man.r {
        mat_io::save_dense(&dir.join(format!("sx_k{k}.sgb")), &first.s_x[k])?;
        for kp in 0..man.r {
            mat_io::save_csr(&dir.join(format!("sc_k{k}_{kp}.sgb")), &first.s_c[k][kp].to_csr())?;
        }
        let ones = ones_sketch(built.fam.pair(k));
        let c = ones.len();
        mat_io::save_dense(&dir.join(format!("ones_k{k}.sgb")), &DenseMatrix::from_vec(1, c, ones)?)?;
    }
    if let Some(side) = &first.sage {
        for k in 0..man.r {
            mat_io::save_dense(&dir.join(format!("sxl_k{k}.sgb")), &side.s_x_left[k])?;
            mat_io::save_dense(&dir.join(format!("sxr_k{k}.sgb")), &side.s_x_right[k])?;
        }
    }
    if let Some(gs) = &first.gat {
        for k in 0..man.r {
            for kp in 0..man.r {
                mat_io::save_csr(
                    &dir.join(format!("mask_k{k}_{kp}.sgb")),
                    &gs.mask[k][kp].to_csr(),
                )?;
            }
        }
    }
    let tables = TablesFile {
        node: built.fam.pairs().iter().map(PairRecord::from_pair).collect(),
        stacked: built
            .stacked
            .as_ref()
            .map(|s| s.pairs().iter().map(PairRecord::from_pair).collect()),
    };
    write_json(&dir.join("tables.json"), &tables)?;
    write_json(&manifest_path, &man)?;

    let (sketch, table) = measure(dir, &man)?;
    Ok(report(true, sketch, table, t0.elapsed().as_secs_f64() * 1e3))
}

/// Reads a cache back, checking it still matches the dataset. O(n·c·d)
/// hashing and convolution sketching are skipped; only integer directories,
/// basis links, and the convolution itself are re-derived.
pub fn load_cache(dir: &Path, ds: &GraphDataset) -> SgResult<LoadedCache> {
    let man: CacheManifest = read_json(&dir.join("manifest.json"))?;
    if man.format != CACHE_FORMAT {
        return Err(SgError::Incompatible(format!(
            "cache format {} (expected {CACHE_FORMAT})",
            man.format
        )));
    }
    if man.n != ds.n
        || man.features_fnv != checksum_features(&ds.features)
        || man.edges_fnv != checksum_edges(ds.n, &ds.edges)
    {
        return Err(SgError::Incompatible(format!(
            "cache at {} is stale for this dataset (inputs changed since it was built)",
            dir.display()
        )));
    }
    if !cache_complete(dir, &man) {
        return Err(SgError::Incompatible(format!("cache at {} is missing blobs", dir.display())));
    }

    let tables: TablesFile = read_json(&dir.join("tables.json"))?;
    if tables.node.len() != man.r {
        return Err(SgError::Incompatible(format!(
            "{} node tables for r={}",
            tables.node.len(),
            man.r
        )));
    }
    let fam = SketchFamily::new(
        tables.node.into_iter().map(|p| p.into_pair(man.c)).collect::<SgResult<_>>()?,
    )?;
    if fam.n() != ds.n {
        return Err(SgError::Incompatible(format!(
            "cached tables cover {} nodes, dataset has {}",
            fam.n(),
            ds.n
        )));
    }
    let stacked = match tables.stacked {
        Some(sp) => Some(SketchFamily::new(
            sp.into_iter().map(|p| p.into_pair(man.c)).collect::<SgResult<_>>()?,
        )?),
        None => None,
    };

    let kind = VariantKind::parse(&man.variant)?;
    if (kind == VariantKind::Sage) != stacked.is_some() {
        return Err(SgError::Incompatible("stacked tables do not match the variant".into()));
    }
    let variant = build_variant(kind, ds.n, &ds.edges, &man.dims, man.seed)?;
    let conv = state_conv(&variant, ds.n, &ds.edges)?;

    let load_dense_as = |name: String, rows: usize, cols: usize| -> SgResult<DenseMatrix> {
        let m = mat_io::load_dense(&dir.join(&name))?;
        if m.rows() != rows || m.cols() != cols {
            return Err(SgError::Incompatible(format!(
                "{name} is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    };
    let load_csr_as = |name: String, rows: usize, cols: usize| -> SgResult<CsrMatrix> {
        let m = mat_io::load_csr(&dir.join(&name))?;
        if m.rows() != rows || m.cols() != cols {
            return Err(SgError::Incompatible(format!(
                "{name} is {}x{}, expected {rows}x{cols}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    };

    let (c, r) = (man.c, man.r);
    let mut sx0 = Vec::with_capacity(r);
    let mut grid = Vec::with_capacity(r);
    for k in 0..r {
        sx0.push(load_dense_as(format!("sx_k{k}.sgb"), man.dims[0], c)?);
        let mut row = Vec::with_capacity(r);
        for kp in 0..r {
            row.push(load_csr_as(format!("sc_k{k}_{kp}.sgb"), c, c)?);
        }
        grid.push(row);
    }
    let mut half_sketches = Vec::new();
    if kind == VariantKind::Sage {
        for k in 0..r {
            half_sketches.push((
                load_dense_as(format!("sxl_k{k}.sgb"), man.dims[0], c)?,
                load_dense_as(format!("sxr_k{k}.sgb"), man.dims[0], c)?,
            ));
        }
    }
    let mut masks = Vec::new();
    if kind == VariantKind::Gat {
        for k in 0..r {
            let mut row = Vec::with_capacity(r);
            for kp in 0..r {
                row.push(load_csr_as(format!("mask_k{k}_{kp}.sgb"), c, c)?);
            }
            masks.push(row);
        }
    }

    let layers = man.dims.len() - 1;
    let mut states = Vec::with_capacity(layers);
    for li in 0..layers {
        let s_x = if li == 0 {
            sx0.clone()
        } else {
            (0..r).map(|_| DenseMatrix::zeros(man.dims[li], c)).collect()
        };
        let sage = match &stacked {
            Some(sfam) => {
                let mut to_left = Vec::with_capacity(r);
                let mut to_right = Vec::with_capacity(r);
                for p in 0..r {
                    let (lp, rp) = split_stacked_pair(sfam.pair(p), ds.n)?;
                    to_left.push(EditableSparse::from_csr(&basis_change_matrix(fam.pair(p), &lp)?));
                    to_right.push(EditableSparse::from_csr(&basis_change_matrix(fam.pair(p), &rp)?));
                }
                let (s_x_left, s_x_right) = if li == 0 {
                    (
                        half_sketches.iter().map(|(l, _)| l.clone()).collect(),
                        half_sketches.iter().map(|(_, r)| r.clone()).collect(),
                    )
                } else {
                    (Vec::new(), Vec::new())
                };
                Some(SageSide { stacked_fam: sfam.clone(), s_x_left, s_x_right, to_left, to_right })
            }
            None => None,
        };
        let gat = (kind == VariantKind::Gat).then(|| GatSide {
            mask: masks.iter().map(|row| row.iter().map(EditableSparse::from_csr).collect()).collect(),
        });
        let mut st = LayerSketchState {
            fam: fam.clone(),
            s_x,
            s_c: grid
                .iter()
                .map(|row| row.iter().map(EditableSparse::from_csr).collect())
                .collect(),
            conv: conv.clone(),
            dirs: fam.pairs().iter().map(LshDirectory::from_hash_pair).collect(),
            t_next: None,
            sage,
            gat,
        };
        if li + 1 < layers {
            // All layers share one family at preprocessing time.
            st.link_to(&fam)?;
        }
        states.push(st);
    }

    Ok(LoadedCache { manifest: man, variant, states })
}
