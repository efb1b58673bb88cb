//! Converter for the raw citation-network files (`cora.content`,
//! `cora.cites`) into [`GraphDataset`].
//!
//! `cora.content` lines: `<paper_id> <w_1> ... <w_k> <class_name>`,
//! whitespace separated, binary word indicators. `cora.cites` lines:
//! `<cited> <citing>`. Node order follows the content file; class ids
//! are assigned alphabetically; the split is the standard planetoid-style
//! one used by the reference GCN implementations: train = nodes 0..140,
//! val = 200..500, test = 500..1500, all in content-file order.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use super::{GraphDataset, Splits};
use crate::error::{SgError, SgResult};
use crate::linalg::DenseMatrix;

pub fn convert_citation_files(content: &Path, cites: &Path) -> SgResult<GraphDataset> {
    let open = |path: &Path| -> SgResult<std::io::BufReader<std::fs::File>> {
        std::fs::File::open(path)
            .map(std::io::BufReader::new)
            .map_err(|e| SgError::io(path.display().to_string(), e))
    };

    let mut id_to_index: HashMap<String, u32> = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut class_names: Vec<String> = Vec::new();
    let mut dim: Option<usize> = None;
    for (lineno, line) in open(content)?.lines().enumerate() {
        let line = line.map_err(|e| SgError::io(content.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(SgError::BadInput(format!(
                "content line {}: expected id, features, class",
                lineno + 1
            )));
        }
        let id = fields[0].to_string();
        let class = fields[fields.len() - 1].to_string();
        let feats: Vec<f64> = fields[1..fields.len() - 1]
            .iter()
            .map(|tok| {
                tok.parse::<f64>().map_err(|_| {
                    SgError::BadInput(format!("content line {}: bad feature {tok:?}", lineno + 1))
                })
            })
            .collect::<SgResult<_>>()?;
        match dim {
            None => dim = Some(feats.len()),
            Some(d) if d != feats.len() => {
                return Err(SgError::BadInput(format!(
                    "content line {}: {} features, expected {d}",
                    lineno + 1,
                    feats.len()
                )))
            }
            _ => {}
        }
        let index = rows.len() as u32;
        if id_to_index.insert(id.clone(), index).is_some() {
            return Err(SgError::BadInput(format!("duplicate paper id {id:?}")));
        }
        rows.push(feats);
        class_names.push(class);
    }
    let n = rows.len();
    let dim = dim.ok_or_else(|| SgError::BadInput("content file is empty".into()))?;

    let mut classes: Vec<String> = class_names.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    classes.sort();
    let class_id: HashMap<&str, u32> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i as u32)).collect();
    let labels: Vec<u32> = class_names.iter().map(|c| class_id[c.as_str()]).collect();

    let mut data = Vec::with_capacity(n * dim);
    for row in &rows {
        data.extend_from_slice(row);
    }
    let features = DenseMatrix::from_vec(n, dim, data)?;

    let mut edges = Vec::new();
    for (lineno, line) in open(cites)?.lines().enumerate() {
        let line = line.map_err(|e| SgError::io(cites.display().to_string(), e))?;
        let tok = line.trim();
        if tok.is_empty() {
            continue;
        }
        let mut parts = tok.split_whitespace();
        let lookup = |p: Option<&str>| -> SgResult<u32> {
            let id = p.ok_or_else(|| {
                SgError::BadInput(format!("cites line {}: expected two ids", lineno + 1))
            })?;
            id_to_index.get(id).copied().ok_or_else(|| {
                SgError::BadInput(format!("cites line {}: unknown paper id {id:?}", lineno + 1))
            })
        };
        let a = lookup(parts.next())?;
        let b = lookup(parts.next())?;
        if a != b {
            edges.push((a, b));
        }
    }

    let clamp = |hi: usize| hi.min(n) as u32;
    let splits = Splits {
        train: (0..clamp(140)).collect(),
        val: (clamp(200)..clamp(500)).collect(),
        test: (clamp(500)..clamp(1500)).collect(),
    };

    GraphDataset::new(n, edges, features, labels, splits)
}
