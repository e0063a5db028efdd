//! Binary container for matrices and label vectors.
//!
//! Layout: magic `VRPM`, format version (u16 LE), dtype code (u8: 1 = f32,
//! 2 = f64, 3 = u32), rank (u8), one u64 LE extent per axis, then the
//! row-major little-endian payload.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VRPM";
pub const VERSION: u16 = 1;
const HEADER_FIXED: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum Matrix {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl Matrix {
    pub fn labels(labels: &[usize]) -> Result<Self> {
        let data = labels
            .iter()
            .map(|&l| u32::try_from(l).map_err(|_| Error::Input(format!("label {l} exceeds u32"))))
            .collect::<Result<Vec<u32>>>()?;
        Ok(Matrix::U32 { shape: vec![data.len()], data })
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Matrix::F32(t) => t.shape(),
            Matrix::F64(t) => t.shape(),
            Matrix::U32 { shape, .. } => shape,
        }
    }

    fn dtype(&self) -> (u8, usize) {
        match self {
            Matrix::F32(_) => (1, 4),
            Matrix::F64(_) => (2, 8),
            Matrix::U32 { .. } => (3, 4),
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            Matrix::F32(_) => "f32",
            Matrix::F64(_) => "f64",
            Matrix::U32 { .. } => "u32",
        }
    }

    /// Floating-point contents widened to f64.
    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            Matrix::F64(t) => Ok(t),
            Matrix::F32(t) => Ok(t.cast()),
            Matrix::U32 { .. } => Err(Error::Input("expected a float matrix, found u32 labels".into())),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            Matrix::F32(t) => Ok(t),
            Matrix::F64(t) => Ok(t.cast()),
            Matrix::U32 { .. } => Err(Error::Input("expected a float matrix, found u32 labels".into())),
        }
    }

    pub fn into_labels(self) -> Result<Vec<usize>> {
        match self {
            Matrix::U32 { shape, data } if shape.len() == 1 => {
                Ok(data.into_iter().map(|v| v as usize).collect())
            }
            other => Err(Error::Input(format!(
                "expected a rank-1 u32 label vector, found {} {:?}",
                other.dtype_name(),
                other.shape()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let shape = self.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| Error::Input(format!("rank {} exceeds 255", shape.len())))?;
        let (code, size) = self.dtype();
        let count: usize = shape.iter().product();
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * shape.len() + size * count);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(code);
        out.push(rank);
        for &e in shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        match self {
            Matrix::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Matrix::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Matrix::U32 { data, .. } => data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    /// Parses a container; `origin` names the source in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fail = |offset: u64, msg: String| Error::format(origin, offset, msg);
        if bytes.len() < HEADER_FIXED {
            return Err(fail(
                0,
                format!("header needs {HEADER_FIXED} bytes, file has {}", bytes.len()),
            ));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail(0, format!("bad magic {:?}, expected \"VRPM\"", &bytes[0..4])));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}, expected {VERSION}")));
        }
        let code = bytes[6];
        let size = match code {
            1 | 3 => 4,
            2 => 8,
            _ => return Err(fail(6, format!("unknown dtype code {code}"))),
        };
        let rank = bytes[7] as usize;
        let header = HEADER_FIXED + 8 * rank;
        if bytes.len() < header {
            return Err(fail(
                HEADER_FIXED as u64,
                format!("{rank} extents need {header} header bytes, file has {}", bytes.len()),
            ));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count: u128 = 1;
        for a in 0..rank {
            let at = HEADER_FIXED + 8 * a;
            let e = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            count *= e as u128;
            shape.push(
                usize::try_from(e).map_err(|_| fail(at as u64, format!("extent {e} too large")))?,
            );
        }
        let expected = count * size as u128;
        let actual = (bytes.len() - header) as u128;
        if expected != actual {
            return Err(fail(
                header as u64,
                format!("payload should be {expected} bytes, found {actual}"),
            ));
        }
        let payload = &bytes[header..];
        Ok(match code {
            1 => {
                let data = payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Matrix::F32(Tensor::new(shape, data)?)
            }
            2 => {
                let data = payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Matrix::F64(Tensor::new(shape, data)?)
            }
            _ => Matrix::U32 {
                shape,
                data: payload
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            },
        })
    }
}

/// Writes atomically: the bytes go to a temporary file in the destination
/// directory, which is then renamed over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    write_atomic(path.as_ref(), &m.to_bytes()?)
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Matrix::from_bytes(&bytes, path)
}
