//! SFMX binary matrices, atomic file writes and JSON config loading.
//!
//! SFMX layout: magic `SFMX`, version `u16`, dtype `u8` (0 = f64,
//! 1 = complex128 as interleaved re/im), ndims `u8`, then one `u64` per
//! dimension and the row-major payload. All integers and floats are
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;

use crate::error::{Error, Result};
use crate::C64;

pub const MAGIC: &[u8; 4] = b"SFMX";
pub const VERSION: u16 = 1;
const HEADER_FIXED: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64 = 0,
    Complex128 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::Complex128 => 16,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F64),
            1 => Some(Dtype::Complex128),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Matrix {
    Real(DMatrix<f64>),
    Complex(DMatrix<C64>),
}

impl Matrix {
    pub fn dtype(&self) -> Dtype {
        match self {
            Matrix::Real(_) => Dtype::F64,
            Matrix::Complex(_) => Dtype::Complex128,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Matrix::Real(m) => m.shape(),
            Matrix::Complex(m) => m.shape(),
        }
    }
}

/// Serializes a matrix to SFMX bytes.
pub fn encode(matrix: &Matrix) -> Vec<u8> {
    let (rows, cols) = matrix.shape();
    let dtype = matrix.dtype();
    let mut out = Vec::with_capacity(HEADER_FIXED + 16 + rows * cols * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype as u8);
    out.push(2);
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(cols as u64).to_le_bytes());
    match matrix {
        Matrix::Real(m) => {
            for i in 0..rows {
                for j in 0..cols {
                    out.extend_from_slice(&m[(i, j)].to_le_bytes());
                }
            }
        }
        Matrix::Complex(m) => {
            for i in 0..rows {
                for j in 0..cols {
                    out.extend_from_slice(&m[(i, j)].re.to_le_bytes());
                    out.extend_from_slice(&m[(i, j)].im.to_le_bytes());
                }
            }
        }
    }
    out
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(format_err(self.pos, format!("truncated {what}: need {n} bytes, have {}", self.bytes.len() - self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "payload")?.try_into().unwrap()))
    }
}

/// Parses SFMX bytes. One- and two-dimensional arrays are accepted; a 1-D
/// array becomes a column vector.
pub fn decode(bytes: &[u8]) -> Result<Matrix> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic")? != MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let code = c.take(1, "dtype")?[0];
    let dtype = Dtype::from_code(code).ok_or_else(|| format_err(6, format!("unknown dtype code {code}")))?;
    let ndims = c.take(1, "ndims")?[0];
    let (rows, cols) = match ndims {
        1 => (c.u64("dims")?, 1),
        2 => (c.u64("dims")?, c.u64("dims")?),
        n => return Err(format_err(7, format!("unsupported ndims {n}"))),
    };
    let payload_start = c.pos;
    let count = usize::try_from(rows)
        .ok()
        .zip(usize::try_from(cols).ok())
        .and_then(|(r, c)| r.checked_mul(c))
        .and_then(|n| n.checked_mul(dtype.size()).map(|b| (n, b)));
    let Some((count, payload)) = count else {
        return Err(format_err(8, format!("dims {rows}x{cols} overflow")));
    };
    let remaining = bytes.len() - payload_start;
    if remaining < payload {
        return Err(format_err(bytes.len(), format!("truncated payload: expected {payload} bytes, found {remaining}")));
    }
    if remaining > payload {
        return Err(format_err(payload_start + payload, format!("{} trailing bytes", remaining - payload)));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    debug_assert_eq!(count, rows * cols);
    Ok(match dtype {
        Dtype::F64 => {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                v.push(c.f64()?);
            }
            Matrix::Real(DMatrix::from_row_slice(rows, cols, &v))
        }
        Dtype::Complex128 => {
            let mut v = Vec::with_capacity(count);
            for _ in 0..count {
                let re = c.f64()?;
                v.push(C64::new(re, c.f64()?));
            }
            Matrix::Complex(DMatrix::from_row_slice(rows, cols, &v))
        }
    })
}

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let perms = std::fs::Permissions::from_mode(0o644);
        tmp.as_file().set_permissions(perms).map_err(|e| Error::io(tmp.path(), e))?;
    }
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_matrix(path: &Path, matrix: &Matrix) -> Result<()> {
    write_atomic(path, &encode(matrix))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_complex(path: &Path) -> Result<DMatrix<C64>> {
    match read_matrix(path)? {
        Matrix::Complex(m) => Ok(m),
        Matrix::Real(_) => Err(format_err(6, "dtype mismatch: expected complex128, found float64")),
    }
}

pub fn read_real(path: &Path) -> Result<DMatrix<f64>> {
    match read_matrix(path)? {
        Matrix::Real(m) => Ok(m),
        Matrix::Complex(_) => Err(format_err(6, "dtype mismatch: expected float64, found complex128")),
    }
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_round_trip() {
        let m = Matrix::Real(DMatrix::identity(2, 2));
        let bytes = encode(&m);
        assert_eq!(bytes.len(), 8 + 16 + 4 * 8);
        assert_eq!(decode(&bytes).unwrap(), m);
    }

    #[test]
    fn header_layout() {
        let m = Matrix::Complex(DMatrix::from_row_slice(1, 2, &[C64::new(1.0, 2.0), C64::new(3.0, 4.0)]));
        let b = encode(&m);
        assert_eq!(&b[..4], b"SFMX");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 2);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 2);
        let vals: Vec<f64> = b[24..].chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn payload_size_of_dictionary() {
        let m = Matrix::Complex(DMatrix::zeros(96, 642));
        assert_eq!(encode(&m).len() - 24, 96 * 642 * 16);
    }

    #[test]
    fn malformed_inputs() {
        let mut b = encode(&Matrix::Real(DMatrix::identity(3, 3)));
        let err = |b: &[u8]| match decode(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected format error, got {other:?}"),
        };
        assert_eq!(err(&b[..b.len() - 3]), (b.len() - 3) as u64);
        assert_eq!(err(&b[..10]), 8);
        let mut extra = b.clone();
        extra.push(0);
        assert_eq!(err(&extra), (b.len()) as u64);
        b[6] = 9;
        assert_eq!(err(&b), 6);
        b[0..4].copy_from_slice(b"XXXX");
        assert_eq!(err(&b), 0);
    }

    #[test]
    fn file_round_trip_and_dtype_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sfmx");
        let m = DMatrix::from_fn(3, 4, |i, j| C64::new(i as f64, -(j as f64)));
        write_matrix(&p, &Matrix::Complex(m.clone())).unwrap();
        assert_eq!(read_complex(&p).unwrap(), m);
        assert!(matches!(read_real(&p), Err(Error::Format { offset: 6, .. })));
        assert!(matches!(read_matrix(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn one_dimensional_is_column() {
        let mut b = Vec::new();
        b.extend_from_slice(b"SFMX");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&[0, 1]);
        b.extend_from_slice(&2u64.to_le_bytes());
        b.extend_from_slice(&1.5f64.to_le_bytes());
        b.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(decode(&b).unwrap(), Matrix::Real(DMatrix::from_column_slice(2, 1, &[1.5, -2.0])));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn bit_exact(rows in 0usize..12, cols in 0usize..12, bits in proptest::collection::vec(any::<u64>(), 288)) {
            let f = |k: usize| f64::from_bits(bits[k % bits.len()]);
            let m = DMatrix::from_fn(rows, cols, |i, j| C64::new(f(2 * (i * cols + j)), f(2 * (i * cols + j) + 1)));
            let Matrix::Complex(back) = decode(&encode(&Matrix::Complex(m.clone()))).unwrap() else { panic!() };
            prop_assert_eq!(back.shape(), m.shape());
            for (a, b) in back.iter().zip(m.iter()) {
                prop_assert_eq!(a.re.to_bits(), b.re.to_bits());
                prop_assert_eq!(a.im.to_bits(), b.im.to_bits());
            }
        }
    }
}
