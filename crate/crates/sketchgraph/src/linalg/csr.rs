use super::DenseMatrix;
use crate::error::{SgError, SgResult};

/// Compressed sparse row matrix. Column indices are strictly increasing
/// within each row; explicit zeros are allowed (sketch edits may cancel).
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CsrMatrix {
            rows,
            cols,
            row_offsets: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            rows: n,
            cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> SgResult<Self> {
        for &(r, c, v) in triplets {
            if r >= rows || c >= cols {
                return Err(SgError::shape(
                    "CsrMatrix::from_triplets",
                    format!("entry ({r},{c}) outside {rows}x{cols}"),
                ));
            }
            if !v.is_finite() {
                return Err(SgError::NonFinite("CsrMatrix::from_triplets".into()));
            }
        }
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = Vec::with_capacity(rows + 1);
        row_offsets.push(0usize);
        let mut col_indices: Vec<usize> = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut cur_row = 0usize;
        for (r, c, v) in sorted {
            while cur_row < r {
                row_offsets.push(col_indices.len());
                cur_row += 1;
            }
            if col_indices.len() > *row_offsets.last().unwrap() && *col_indices.last().unwrap() == c
            {
                *values.last_mut().unwrap() += v;
            } else {
                col_indices.push(c);
                values.push(v);
            }
        }
        while cur_row < rows {
            row_offsets.push(col_indices.len());
            cur_row += 1;
        }
        Ok(CsrMatrix { rows, cols, row_offsets, col_indices, values })
    }

    /// Builds from per-row (col, value) lists; columns within a row may be
    /// unsorted but must be unique.
    pub fn from_rows(rows: usize, cols: usize, row_entries: Vec<Vec<(usize, f64)>>) -> SgResult<Self> {
        if row_entries.len() != rows {
            return Err(SgError::shape(
                "CsrMatrix::from_rows",
                format!("{} row lists for {} rows", row_entries.len(), rows),
            ));
        }
        let mut row_offsets = Vec::with_capacity(rows + 1);
        row_offsets.push(0usize);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for mut entries in row_entries {
            entries.sort_by_key(|e| e.0);
            for w in entries.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(SgError::BadInput(format!(
                        "duplicate column {} in CsrMatrix::from_rows",
                        w[0].0
                    )));
                }
            }
            for (c, v) in entries {
                if c >= cols {
                    return Err(SgError::shape(
                        "CsrMatrix::from_rows",
                        format!("column {c} outside width {cols}"),
                    ));
                }
                if !v.is_finite() {
                    return Err(SgError::NonFinite("CsrMatrix::from_rows".into()));
                }
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(CsrMatrix { rows, cols, row_offsets, col_indices, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// (column, value) pairs of one row.
    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        self.col_indices[lo..hi].iter().copied().zip(self.values[lo..hi].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let lo = self.row_offsets[r];
        let hi = self.row_offsets[r + 1];
        match self.col_indices[lo..hi].binary_search(&c) {
            Ok(pos) => self.values[lo + pos],
            Err(_) => 0.0,
        }
    }

    pub fn densify(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn from_dense(m: &DenseMatrix, drop_tol: f64) -> CsrMatrix {
        let rows = (0..m.rows())
            .map(|r| {
                m.row(r)
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| v.abs() > drop_tol)
                    .map(|(c, &v)| (c, v))
                    .collect::<Vec<_>>()
            })
            .collect();
        CsrMatrix::from_rows(m.rows(), m.cols(), rows).expect("dense source is valid")
    }

    pub fn transpose(&self) -> CsrMatrix {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for i in 0..self.cols {
            counts[i + 1] += counts[i];
        }
        let row_offsets = counts.clone();
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        let mut cursor = counts;
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                let dst = cursor[c];
                col_indices[dst] = r;
                values[dst] = v;
                cursor[c] += 1;
            }
        }
        CsrMatrix { rows: self.cols, cols: self.rows, row_offsets, col_indices, values }
    }

    /// Structural validation: monotone offsets, sorted unique columns, finite
    /// values.
    pub fn validate(&self) -> SgResult<()> {
        if self.row_offsets.len() != self.rows + 1 || self.row_offsets[0] != 0 {
            return Err(SgError::BadInput("csr: bad row offsets".into()));
        }
        if *self.row_offsets.last().unwrap() != self.values.len()
            || self.col_indices.len() != self.values.len()
        {
            return Err(SgError::BadInput("csr: offset/payload length mismatch".into()));
        }
        for r in 0..self.rows {
            let lo = self.row_offsets[r];
            let hi = self.row_offsets[r + 1];
            if lo > hi {
                return Err(SgError::BadInput("csr: non-monotone offsets".into()));
            }
            for i in lo..hi {
                if self.col_indices[i] >= self.cols {
                    return Err(SgError::BadInput("csr: column out of range".into()));
                }
                if i > lo && self.col_indices[i] <= self.col_indices[i - 1] {
                    return Err(SgError::BadInput("csr: unsorted or duplicate columns".into()));
                }
                if !self.values[i].is_finite() {
                    return Err(SgError::NonFinite("csr value".into()));
                }
            }
        }
        Ok(())
    }

    pub fn max_row_nnz(&self) -> usize {
        (0..self.rows)
            .map(|r| self.row_offsets[r + 1] - self.row_offsets[r])
            .max()
            .unwrap_or(0)
    }

    pub fn max_col_nnz(&self) -> usize {
        let mut counts = vec![0usize; self.cols];
        for &c in &self.col_indices {
            counts[c] += 1;
        }
        counts.into_iter().max().unwrap_or(0)
    }

    /// Approximate heap bytes of the CSR payload.
    pub fn heap_bytes(&self) -> usize {
        self.row_offsets.len() * 8 + self.col_indices.len() * 8 + self.values.len() * 8
    }
}

/// C = A_sparse · B_dense.
pub fn spmm(a: &CsrMatrix, b: &DenseMatrix) -> SgResult<DenseMatrix> {
    if a.cols != b.rows() {
        return Err(SgError::shape(
            "spmm",
            format!("{}x{} * {}x{}", a.rows, a.cols, b.rows(), b.cols()),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols());
    for r in 0..a.rows {
        for (k, v) in a.row_entries(r) {
            let brow = b.row(k);
            let orow = out.row_mut(r);
            for j in 0..brow.len() {
                orow[j] += v * brow[j];
            }
        }
    }
    Ok(out)
}

/// C = A_dense · B_sparse.
pub fn dense_times_csr(a: &DenseMatrix, b: &CsrMatrix) -> SgResult<DenseMatrix> {
    if a.cols() != b.rows {
        return Err(SgError::shape(
            "dense_times_csr",
            format!("{}x{} * {}x{}", a.rows(), a.cols(), b.rows, b.cols),
        ));
    }
    let mut out = DenseMatrix::zeros(a.rows(), b.cols);
    for i in 0..a.rows() {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (j, v) in b.row_entries(k) {
                orow[j] += av * v;
            }
        }
    }
    Ok(out)
}
