//! Datasets: on-disk directory format, adjacency normalization, synthetic
//! stochastic block models, and the citation-file converter.
//!
//! Directory layout (all plain text except splits):
//! - `edges.tsv`: one undirected edge per line, `u<TAB>v`, listed once
//! - `features.csv`: one node per line, comma-separated f64
//! - `labels.csv`: one class id per line
//! - `splits.json`: `{"train": [...], "val": [...], "test": [...]}`
//!
//! A directory containing `cora.content`/`cora.cites` is converted on the
//! fly instead, so the citation benchmarks run straight from raw files.

mod cora;
pub mod preprocess;
mod sbm;

pub use cora::convert_citation_files;
pub use preprocess::{
    build_states, build_variant, cache_manifest, load_cache, CacheManifest, LoadedCache,
    PreprocessConfig, PreprocessReport, VariantKind, CACHE_FORMAT,
};
pub use sbm::{sbm_generate, SbmParams};

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{SgError, SgResult};
use crate::linalg::{CsrMatrix, DenseMatrix};

/// Train/val/test node index lists; pairwise disjoint.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// An attributed, labeled, undirected graph held in memory.
#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub n: usize,
    /// Undirected edges, each stored once with u < v, no self loops.
    pub edges: Vec<(u32, u32)>,
    pub features: DenseMatrix,
    pub labels: Vec<u32>,
    pub num_classes: usize,
    pub splits: Splits,
}

impl GraphDataset {
    pub fn new(
        n: usize,
        mut edges: Vec<(u32, u32)>,
        features: DenseMatrix,
        labels: Vec<u32>,
        splits: Splits,
    ) -> SgResult<Self> {
        if features.rows() != n {
            return Err(SgError::BadInput(format!(
                "{} feature rows for {} nodes",
                features.rows(),
                n
            )));
        }
        if labels.len() != n {
            return Err(SgError::BadInput(format!("{} labels for {} nodes", labels.len(), n)));
        }
        for e in edges.iter_mut() {
            if e.0 as usize >= n || e.1 as usize >= n {
                return Err(SgError::BadInput(format!("edge ({}, {}) outside [0, {n})", e.0, e.1)));
            }
            if e.0 > e.1 {
                *e = (e.1, e.0);
            }
        }
        edges.retain(|e| e.0 != e.1);
        edges.sort_unstable();
        edges.dedup();
        let num_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let ds = GraphDataset { n, edges, features, labels, num_classes, splits };
        ds.validate_splits()?;
        Ok(ds)
    }

    fn validate_splits(&self) -> SgResult<()> {
        let mut seen = BTreeSet::new();
        for (name, part) in [
            ("train", &self.splits.train),
            ("val", &self.splits.val),
            ("test", &self.splits.test),
        ] {
            for &i in part {
                if i as usize >= self.n {
                    return Err(SgError::BadInput(format!("{name} index {i} outside [0, {})", self.n)));
                }
                if !seen.insert(i) {
                    return Err(SgError::BadInput(format!("node {i} appears in two splits")));
                }
            }
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n];
        for &(u, v) in &self.edges {
            deg[u as usize] += 1;
            deg[v as usize] += 1;
        }
        deg
    }
}

/// Which convolution matrix a variant uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvKind {
    /// Symmetric normalization with self loops: D̃^{-1/2} (A+I) D̃^{-1/2}.
    GcnSym,
    /// Random-walk normalization without self loops: D^{-1} A. Isolated
    /// nodes get an all-zero row.
    RowNorm,
    /// The binary mask A + I (attention support).
    Mask,
}

/// Sparse convolution matrix for an undirected edge list.
pub fn normalize_adjacency(n: usize, edges: &[(u32, u32)], kind: ConvKind) -> SgResult<CsrMatrix> {
    let mut deg = vec![0usize; n];
    for &(u, v) in edges {
        if u as usize >= n || v as usize >= n {
            return Err(SgError::BadInput(format!("edge ({u}, {v}) outside [0, {n})")));
        }
        if u == v {
            return Err(SgError::BadInput(format!("self loop at node {u}")));
        }
        deg[u as usize] += 1;
        deg[v as usize] += 1;
    }
    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(2 * edges.len() + n);
    match kind {
        ConvKind::GcnSym => {
            let inv_sqrt: Vec<f64> = deg.iter().map(|&d| 1.0 / ((d + 1) as f64).sqrt()).collect();
            for i in 0..n {
                triplets.push((i, i, inv_sqrt[i] * inv_sqrt[i]));
            }
            for &(u, v) in edges {
                let (u, v) = (u as usize, v as usize);
                let w = inv_sqrt[u] * inv_sqrt[v];
                triplets.push((u, v, w));
                triplets.push((v, u, w));
            }
        }
        ConvKind::RowNorm => {
            for &(u, v) in edges {
                let (u, v) = (u as usize, v as usize);
                triplets.push((u, v, 1.0 / deg[u] as f64));
                triplets.push((v, u, 1.0 / deg[v] as f64));
            }
        }
        ConvKind::Mask => {
            for i in 0..n {
                triplets.push((i, i, 1.0));
            }
            for &(u, v) in edges {
                triplets.push((u as usize, v as usize, 1.0));
                triplets.push((v as usize, u as usize, 1.0));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Edges of an n-node path graph, a handy sparse fixture.
pub fn path_graph_edges(n: usize) -> Vec<(u32, u32)> {
    (1..n as u32).map(|i| (i - 1, i)).collect()
}

/// Scales every feature row to unit L2 norm; zero rows stay zero.
pub fn row_normalize(features: &mut DenseMatrix) {
    for i in 0..features.rows() {
        let row = features.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in row.iter_mut() {
                *v /= norm;
            }
        }
    }
}

pub fn save_dataset(dir: &Path, ds: &GraphDataset) -> SgResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| SgError::io(dir.display().to_string(), e))?;
    let write = |name: &str, body: String| -> SgResult<()> {
        let path = dir.join(name);
        let mut f =
            std::fs::File::create(&path).map_err(|e| SgError::io(path.display().to_string(), e))?;
        f.write_all(body.as_bytes())
            .map_err(|e| SgError::io(path.display().to_string(), e))
    };
    let mut edges = String::new();
    for &(u, v) in &ds.edges {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    write("edges.tsv", edges)?;
    let mut feats = String::new();
    for i in 0..ds.n {
        let row: Vec<String> = ds.features.row(i).iter().map(|v| format!("{v}")).collect();
        feats.push_str(&row.join(","));
        feats.push('\n');
    }
    write("features.csv", feats)?;
    let mut labels = String::new();
    for &l in &ds.labels {
        labels.push_str(&format!("{l}\n"));
    }
    write("labels.csv", labels)?;
    let splits = serde_json::to_string_pretty(&ds.splits)
        .map_err(|e| SgError::Runtime(format!("splits serialization: {e}")))?;
    write("splits.json", splits)
}

/// Loads a dataset directory; citation raw files take precedence when
/// present.
pub fn load_dataset(dir: &Path) -> SgResult<GraphDataset> {
    let content = dir.join("cora.content");
    let cites = dir.join("cora.cites");
    if content.is_file() && cites.is_file() {
        return convert_citation_files(&content, &cites);
    }
    load_native_dataset(dir)
}

fn load_native_dataset(dir: &Path) -> SgResult<GraphDataset> {
    let open = |name: &str| -> SgResult<std::io::BufReader<std::fs::File>> {
        let path = dir.join(name);
        std::fs::File::open(&path)
            .map(std::io::BufReader::new)
            .map_err(|e| SgError::io(path.display().to_string(), e))
    };

    let mut features_data: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;
    let mut n = 0usize;
    for (lineno, line) in open("features.csv")?.lines().enumerate() {
        let line = line.map_err(|e| SgError::io("features.csv", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    SgError::BadInput(format!("features.csv line {}: bad float {tok:?}", lineno + 1))
                })
            })
            .collect::<SgResult<_>>()?;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(SgError::BadInput(format!(
                    "features.csv line {}: {} columns, expected {d}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        features_data.extend_from_slice(&row);
        n += 1;
    }
    let dim = dim.ok_or_else(|| SgError::BadInput("features.csv is empty".into()))?;
    let features = DenseMatrix::from_vec(n, dim, features_data)?;

    let mut labels = Vec::with_capacity(n);
    for (lineno, line) in open("labels.csv")?.lines().enumerate() {
        let line = line.map_err(|e| SgError::io("labels.csv", e))?;
        let tok = line.trim();
        if tok.is_empty() {
            continue;
        }
        labels.push(tok.parse::<u32>().map_err(|_| {
            SgError::BadInput(format!("labels.csv line {}: bad label {tok:?}", lineno + 1))
        })?);
    }

    let mut edges = Vec::new();
    for (lineno, line) in open("edges.tsv")?.lines().enumerate() {
        let line = line.map_err(|e| SgError::io("edges.tsv", e))?;
        let tok = line.trim();
        if tok.is_empty() {
            continue;
        }
        let mut parts = tok.split_whitespace();
        let parse = |p: Option<&str>| -> SgResult<u32> {
            p.and_then(|t| t.parse::<u32>().ok()).ok_or_else(|| {
                SgError::BadInput(format!("edges.tsv line {}: expected two node ids", lineno + 1))
            })
        };
        let u = parse(parts.next())?;
        let v = parse(parts.next())?;
        edges.push((u, v));
    }

    let splits_path = dir.join("splits.json");
    let splits_text = std::fs::read_to_string(&splits_path)
        .map_err(|e| SgError::io(splits_path.display().to_string(), e))?;
    let splits: Splits = serde_json::from_str(&splits_text)
        .map_err(|e| SgError::BadInput(format!("splits.json: {e}")))?;

    GraphDataset::new(n, edges, features, labels, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset() -> GraphDataset {
        let features = DenseMatrix::from_vec(
            4,
            3,
            vec![1.0, 0.5, -0.25, 0.0, 2.0, 1.0, -1.5, 0.0, 0.125, 3.0, -2.0, 0.75],
        )
        .unwrap();
        GraphDataset::new(
            4,
            vec![(0, 1), (1, 2), (3, 2)],
            features,
            vec![0, 1, 1, 0],
            Splits { train: vec![0, 1], val: vec![2], test: vec![3] },
        )
        .unwrap()
    }

    #[test]
    fn gcn_norm_two_nodes_one_edge() {
        let c = normalize_adjacency(2, &[(0, 1)], ConvKind::GcnSym).unwrap();
        let d = c.densify();
        for v in d.data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn gcn_norm_isolated_node_keeps_unit_self_loop() {
        let c = normalize_adjacency(1, &[], ConvKind::GcnSym).unwrap();
        assert_eq!(c.densify().data(), &[1.0]);
    }

    #[test]
    fn gcn_norm_matches_entry_formula() {
        let edges = path_graph_edges(7);
        let c = normalize_adjacency(7, &edges, ConvKind::GcnSym).unwrap();
        let deg = |i: usize| if i == 0 || i == 6 { 1.0f64 } else { 2.0 };
        for r in 0..7 {
            assert!((c.get(r, r) - 1.0 / (deg(r) + 1.0)).abs() < 1e-12);
        }
        for &(u, v) in &edges {
            let (u, v) = (u as usize, v as usize);
            let want = 1.0 / ((deg(u) + 1.0) * (deg(v) + 1.0)).sqrt();
            assert!((c.get(u, v) - want).abs() < 1e-12);
            assert!((c.get(v, u) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn row_norm_rows_sum_to_one_or_zero() {
        let c = normalize_adjacency(4, &[(0, 1), (1, 2)], ConvKind::RowNorm).unwrap();
        let sums: Vec<f64> = (0..4).map(|r| c.row_entries(r).map(|(_, v)| v).sum()).collect();
        assert!((sums[0] - 1.0).abs() < 1e-12);
        assert!((sums[1] - 1.0).abs() < 1e-12);
        assert!((sums[2] - 1.0).abs() < 1e-12);
        assert_eq!(sums[3], 0.0); // isolated
    }

    #[test]
    fn mask_has_unit_diagonal_and_symmetry() {
        let c = normalize_adjacency(3, &[(0, 2)], ConvKind::Mask).unwrap();
        let d = c.densify();
        assert_eq!(d.get(0, 0), 1.0);
        assert_eq!(d.get(0, 2), 1.0);
        assert_eq!(d.get(2, 0), 1.0);
        assert_eq!(d.get(0, 1), 0.0);
    }

    #[test]
    fn self_loops_rejected() {
        assert!(normalize_adjacency(2, &[(1, 1)], ConvKind::GcnSym).is_err());
    }

    #[test]
    fn dataset_roundtrip_through_directory() {
        let ds = toy_dataset();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.n, ds.n);
        assert_eq!(back.edges, ds.edges);
        assert_eq!(back.labels, ds.labels);
        assert_eq!(back.splits, ds.splits);
        assert!(back.features.max_abs_diff(&ds.features) < 1e-15);
    }

    #[test]
    fn edges_deduped_and_canonicalized() {
        let ds = GraphDataset::new(
            3,
            vec![(1, 0), (0, 1), (2, 1)],
            DenseMatrix::zeros(3, 1),
            vec![0, 0, 0],
            Splits::default(),
        )
        .unwrap();
        assert_eq!(ds.edges, vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn overlapping_splits_rejected() {
        let res = GraphDataset::new(
            2,
            vec![],
            DenseMatrix::zeros(2, 1),
            vec![0, 1],
            Splits { train: vec![0], val: vec![0], test: vec![] },
        );
        assert!(res.is_err());
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let res = GraphDataset::new(
            2,
            vec![(0, 5)],
            DenseMatrix::zeros(2, 1),
            vec![0, 0],
            Splits::default(),
        );
        assert!(res.is_err());
    }

    #[test]
    fn malformed_features_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &toy_dataset()).unwrap();
        std::fs::write(dir.path().join("features.csv"), "1.0,2.0\n3.0,oops\n").unwrap();
        match load_dataset(dir.path()) {
            Err(SgError::BadInput(msg)) => assert!(msg.contains("bad float")),
            other => panic!("want BadInput, got {other:?}"),
        }
    }
}
