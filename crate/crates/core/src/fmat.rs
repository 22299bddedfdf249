//! FMAT binary matrices: an ASCII header line `FMAT v1 <rows> <cols>\n`
//! followed by `rows * cols` little-endian f32 values, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &str = "FMAT";
const VERSION: &str = "v1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("shape checked at construction")
    }

    /// Narrowing conversion; values outside f32 range become infinite and are rejected.
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::new(
            m.rows(),
            m.cols(),
            m.as_slice().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC} {VERSION} {} {}\n", self.rows, self.cols).into_bytes();
        out.reserve(self.values.len() * 4);
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..newline])
            .map_err(|_| Error::Format("header is not ASCII".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != MAGIC || fields[1] != VERSION {
            return Err(Error::Format(format!("bad header {header:?}")));
        }
        let rows: usize = fields[2]
            .parse()
            .map_err(|_| Error::Format(format!("bad row count {:?}", fields[2])))?;
        let cols: usize = fields[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad column count {:?}", fields[3])))?;
        let body = &bytes[newline + 1..];
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
        if body.len() != expected {
            return Err(Error::Format(format!(
                "{rows}x{cols} needs {expected} payload bytes, found {} ({})",
                body.len(),
                if body.len() < expected { "truncated" } else { "trailing data" }
            )));
        }
        let values: Vec<f32> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "FMAT payload at row {}, column {}",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(FeatureMatrix { rows, cols, values })
    }
}

pub fn read(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::decode(&bytes)
}

pub fn write(path: &Path, m: &FeatureMatrix) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&m.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    Ok(read(path)?.to_matrix())
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write(path, &FeatureMatrix::from_matrix(m)?)
}
