//! Dense row-major `f64` matrix and its binary file format.
//!
//! File layout (little-endian throughout):
//!
//! ```text
//! b"MMBT" | u32 version = 1 | u64 rows | u64 cols | rows * cols f64 values
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{validation, Error, Result};

pub const MAGIC: &[u8; 4] = b"MMBT";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 4 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixF64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl MatrixF64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        MatrixF64 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        MatrixF64 {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(validation(format!(
                "matrix data length {} != {rows} x {cols}",
                data.len()
            )));
        }
        Ok(MatrixF64 { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(validation(format!("row {i} has {} entries, expected {cols}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(MatrixF64 { rows: n, cols, data })
    }

    pub fn row_vector(v: &[f64]) -> Self {
        MatrixF64 {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        MatrixF64 { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> MatrixF64 {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        MatrixF64 {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> MatrixF64 {
        MatrixF64::from_fn(self.rows, idx.len(), |r, j| self.get(r, idx[j]))
    }

    pub fn row_range(&self, start: usize, end: usize) -> MatrixF64 {
        MatrixF64 {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn transpose(&self) -> MatrixF64 {
        MatrixF64::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &MatrixF64) -> MatrixF64 {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = MatrixF64::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &MatrixF64) -> MatrixF64 {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let mut out = MatrixF64::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        out
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &MatrixF64) -> MatrixF64 {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = MatrixF64::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &MatrixF64) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Column means.
    pub fn col_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, v) in m.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        let n = self.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn vstack(parts: &[&MatrixF64]) -> Result<MatrixF64> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return Err(validation("vstack column mismatch"));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(MatrixF64 { rows, cols, data })
    }

    pub(crate) fn require_nonempty(&self, what: &str) -> Result<()> {
        if self.is_empty() {
            return Err(validation(format!("{what} is an empty matrix")));
        }
        Ok(())
    }

    pub(crate) fn require_finite(&self, what: &str) -> Result<()> {
        if !self.is_finite() {
            return Err(validation(format!("{what} contains NaN or Inf")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.require_finite("matrix")?;
        let mut buf = Vec::with_capacity(HEADER_BYTES + 8 * self.data.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(self.cols as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("dimension overflow".into()))?;
        let body = &bytes[HEADER_BYTES..];
        if body.len() != n * 8 {
            return Err(Error::Format(format!(
                "payload has {} bytes, expected {} for {rows} x {cols}",
                body.len(),
                n * 8
            )));
        }
        let data = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(MatrixF64 { rows, cols, data })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Neumaier-compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

pub fn write_matrix(m: &MatrixF64, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = m.to_bytes()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<MatrixF64> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    MatrixF64::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_by_two_file_is_56_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mmbt");
        let m = MatrixF64::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        write_matrix(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 56);
        assert_eq!(&bytes[0..4], b"MMBT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(f64::from_le_bytes(bytes[48..56].try_into().unwrap()), 4.0);
        assert_eq!(read_matrix(&p).unwrap(), m);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let m = MatrixF64::from_rows(&[vec![1.0]]).unwrap();
        let mut bytes = m.to_bytes().unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(MatrixF64::from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_payload_is_format_error() {
        let m = MatrixF64::zeros(3, 3);
        let bytes = m.to_bytes().unwrap();
        assert!(matches!(
            MatrixF64::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn non_finite_rejected_on_write() {
        let m = MatrixF64::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(m.to_bytes(), Err(Error::Validation(_))));
        let dir = tempfile::tempdir().unwrap();
        let m = MatrixF64::from_rows(&[vec![f64::INFINITY]]).unwrap();
        assert!(write_matrix(&m, dir.path().join("x")).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_matrix("/nonexistent/dir/m.mmbt").unwrap_err();
        assert_eq!(err.exit_code(), 5);
    }

    #[test]
    fn products_agree() {
        let a = MatrixF64::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let b = MatrixF64::from_fn(4, 2, |i, j| (i as f64) * 0.5 - j as f64);
        let ab = a.matmul(&b);
        assert_eq!(ab, a.matmul_t(&b.transpose()));
        assert_eq!(ab, a.transpose().t_matmul(&b));
    }

    proptest! {
        #[test]
        fn file_round_trip_is_bit_exact(
            rows in 1usize..6,
            cols in 1usize..6,
            seed in proptest::collection::vec(-1e300f64..1e300, 36),
        ) {
            let m = MatrixF64::from_fn(rows, cols, |i, j| seed[i * 6 + j]);
            let back = MatrixF64::from_bytes(&m.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.as_slice().iter().zip(m.as_slice()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
