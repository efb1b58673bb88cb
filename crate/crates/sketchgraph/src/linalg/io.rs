//! Versioned little-endian binary serialization for matrices.
//!
//! Layout: 4 magic bytes `SGB1`, a format version byte, a kind byte
//! (1 = dense, 2 = csr), then u64 dimensions and the raw payload. Readers
//! reject wrong magic and unknown versions so stale caches surface as
//! incompatible-artifact errors, not garbage numerics.

use std::io::{Read, Write};
use std::path::Path;

use super::{CsrMatrix, DenseMatrix};
use crate::error::{SgError, SgResult};

const MAGIC: &[u8; 4] = b"SGB1";
const VERSION: u8 = 1;
const KIND_DENSE: u8 = 1;
const KIND_CSR: u8 = 2;

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn write_f64_slice(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(vs.len() * 8);
    for v in vs {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)
}

fn read_f64_vec(r: &mut impl Read, len: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_u64_slice(w: &mut impl Write, vs: &[usize]) -> std::io::Result<()> {
    let mut bytes = Vec::with_capacity(vs.len() * 8);
    for &v in vs {
        bytes.extend_from_slice(&(v as u64).to_le_bytes());
    }
    w.write_all(&bytes)
}

fn read_usize_vec(r: &mut impl Read, len: usize) -> SgResult<Vec<usize>> {
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes).map_err(|e| SgError::io("<stream>", e))?;
    bytes
        .chunks_exact(8)
        .map(|c| {
            let v = u64::from_le_bytes(c.try_into().unwrap());
            usize::try_from(v).map_err(|_| SgError::Incompatible("index exceeds usize".into()))
        })
        .collect()
}

fn check_header(r: &mut impl Read, expect_kind: u8) -> SgResult<()> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| SgError::io("<stream>", e))?;
    if &magic != MAGIC {
        return Err(SgError::Incompatible(format!("bad magic {magic:?}, want {MAGIC:?}")));
    }
    let mut vk = [0u8; 2];
    r.read_exact(&mut vk).map_err(|e| SgError::io("<stream>", e))?;
    if vk[0] != VERSION {
        return Err(SgError::Incompatible(format!("format version {} unsupported", vk[0])));
    }
    if vk[1] != expect_kind {
        return Err(SgError::Incompatible(format!("kind {} where {} expected", vk[1], expect_kind)));
    }
    Ok(())
}

pub fn write_dense(w: &mut impl Write, m: &DenseMatrix) -> SgResult<()> {
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, KIND_DENSE])?;
        write_u64(w, m.rows() as u64)?;
        write_u64(w, m.cols() as u64)?;
        write_f64_slice(w, m.data())
    })()
    .map_err(|e| SgError::io("<stream>", e))
}

pub fn read_dense(r: &mut impl Read) -> SgResult<DenseMatrix> {
    check_header(r, KIND_DENSE)?;
    let rows = read_u64(r).map_err(|e| SgError::io("<stream>", e))? as usize;
    let cols = read_u64(r).map_err(|e| SgError::io("<stream>", e))? as usize;
    let data = read_f64_vec(r, rows.checked_mul(cols).ok_or_else(|| {
        SgError::Incompatible("dense dims overflow".into())
    })?)
    .map_err(|e| SgError::io("<stream>", e))?;
    DenseMatrix::from_vec(rows, cols, data)
}

pub fn write_csr(w: &mut impl Write, m: &CsrMatrix) -> SgResult<()> {
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, KIND_CSR])?;
        write_u64(w, m.rows() as u64)?;
        write_u64(w, m.cols() as u64)?;
        write_u64(w, m.nnz() as u64)?;
        write_u64_slice(w, m.row_offsets())?;
        write_u64_slice(w, m.col_indices())?;
        write_f64_slice(w, m.values())
    })()
    .map_err(|e| SgError::io("<stream>", e))
}

pub fn read_csr(r: &mut impl Read) -> SgResult<CsrMatrix> {
    check_header(r, KIND_CSR)?;
    let rows = read_u64(r).map_err(|e| SgError::io("<stream>", e))? as usize;
    let cols = read_u64(r).map_err(|e| SgError::io("<stream>", e))? as usize;
    let nnz = read_u64(r).map_err(|e| SgError::io("<stream>", e))? as usize;
    let row_offsets = read_usize_vec(r, rows + 1)?;
    let col_indices = read_usize_vec(r, nnz)?;
    let values = read_f64_vec(r, nnz).map_err(|e| SgError::io("<stream>", e))?;
    let mut triplets = Vec::with_capacity(nnz);
    for row in 0..rows {
        let (lo, hi) = (row_offsets[row], row_offsets[row + 1]);
        if lo > hi || hi > nnz {
            return Err(SgError::Incompatible("csr payload offsets invalid".into()));
        }
        for i in lo..hi {
            triplets.push((row, col_indices[i], values[i]));
        }
    }
    let m = CsrMatrix::from_triplets(rows, cols, &triplets)?;
    m.validate()?;
    Ok(m)
}

pub fn save_dense(path: &Path, m: &DenseMatrix) -> SgResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| SgError::io(path.display().to_string(), e))?;
    write_dense(&mut f, m)
}

pub fn load_dense(path: &Path) -> SgResult<DenseMatrix> {
    let mut f = std::fs::File::open(path).map_err(|e| SgError::io(path.display().to_string(), e))?;
    read_dense(&mut f)
}

pub fn save_csr(path: &Path, m: &CsrMatrix) -> SgResult<()> {
    let mut f = std::fs::File::create(path).map_err(|e| SgError::io(path.display().to_string(), e))?;
    write_csr(&mut f, m)
}

pub fn load_csr(path: &Path) -> SgResult<CsrMatrix> {
    let mut f = std::fs::File::open(path).map_err(|e| SgError::io(path.display().to_string(), e))?;
    read_csr(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_roundtrip_bit_exact() {
        let m = DenseMatrix::from_vec(3, 2, vec![1.0, -2.5, 3.25, 0.0, 1e-300, 7.0]).unwrap();
        let mut buf = Vec::new();
        write_dense(&mut buf, &m).unwrap();
        let back = read_dense(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn csr_roundtrip_bit_exact() {
        let m = CsrMatrix::from_triplets(3, 3, &[(0, 2, 1.5), (2, 0, -0.5), (2, 2, 2.0)]).unwrap();
        let mut buf = Vec::new();
        write_csr(&mut buf, &m).unwrap();
        let back = read_csr(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn wrong_magic_rejected_as_incompatible() {
        let mut buf = Vec::new();
        write_dense(&mut buf, &DenseMatrix::zeros(1, 1)).unwrap();
        buf[0] = b'X';
        match read_dense(&mut buf.as_slice()) {
            Err(SgError::Incompatible(_)) => {}
            other => panic!("want Incompatible, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected_as_incompatible() {
        let mut buf = Vec::new();
        write_dense(&mut buf, &DenseMatrix::zeros(1, 1)).unwrap();
        buf[4] = 99;
        match read_dense(&mut buf.as_slice()) {
            Err(SgError::Incompatible(_)) => {}
            other => panic!("want Incompatible, got {other:?}"),
        }
    }

    #[test]
    fn kind_mismatch_rejected() {
        let mut buf = Vec::new();
        write_dense(&mut buf, &DenseMatrix::zeros(1, 1)).unwrap();
        assert!(matches!(read_csr(&mut buf.as_slice()), Err(SgError::Incompatible(_))));
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let mut buf = Vec::new();
        write_dense(&mut buf, &DenseMatrix::from_vec(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(read_dense(&mut buf.as_slice()).is_err());
    }
}
