//! The OODT binary tensor format and its CSV fallback.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OODT" | u32 version = 1 | u32 ndim | ndim x u64 dims | prod(dims) x f32 payload (row-major)
//! ```
//!
//! Tensors are stored as 32-bit floats; every statistic downstream
//! accumulates in 64 bits via [`TensorF32::to_matrix`].

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OODT";
pub const FORMAT_VERSION: u32 = 1;

/// A finite 1-D or 2-D float tensor in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorF32 {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl TensorF32 {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 2 {
            return Err(Error::InvalidShape(format!(
                "ndim must be 1 or 2, got {}",
                dims.len()
            )));
        }
        let expected = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape("dims overflow".into()))?;
        if expected != data.len() {
            return Err(Error::InvalidShape(format!(
                "dims {:?} need {} values, got {}",
                dims,
                expected,
                data.len()
            )));
        }
        if let Some(offset) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { offset });
        }
        Ok(Self { dims, data })
    }

    pub fn vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Rounds an f64 matrix to f32 storage. Values that overflow f32 are
    /// rejected as non-finite.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let (r, c) = m.shape();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(m[(i, j)] as f32);
            }
        }
        Self::matrix(r, c, data)
    }

    pub fn from_slice_f64(v: &[f64]) -> Result<Self> {
        Self::vector(v.iter().map(|&x| x as f32).collect())
    }

    /// Labels are stored as f32 holding exact small integers.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        Self::vector(labels.iter().map(|&l| l as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Column count; a 1-D tensor is treated as a single column.
    pub fn cols(&self) -> usize {
        if self.dims.len() == 2 {
            self.dims[1]
        } else {
            1
        }
    }

    /// Widens to an f64 matrix (1-D tensors become `N x 1`).
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let (r, c) = (self.rows(), self.cols());
        DMatrix::from_row_iterator(r, c, self.data.iter().map(|&v| f64::from(v)))
    }

    pub fn to_vec_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn to_labels(&self) -> Result<Vec<usize>> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::InvalidShape(format!(
                        "label at offset {i} is not a non-negative integer: {v}"
                    )))
                }
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::MagicMismatch { offset: 0 });
        }
        let version_at = r.pos;
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::MalformedHeader {
                offset: version_at,
                reason: format!("unsupported version {version}"),
            });
        }
        let ndim_at = r.pos;
        let ndim = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
        if ndim == 0 || ndim > 2 {
            return Err(Error::MalformedHeader {
                offset: ndim_at,
                reason: format!("ndim must be 1 or 2, got {ndim}"),
            });
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let at = r.pos;
            let d = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
            let d = usize::try_from(d).map_err(|_| Error::MalformedHeader {
                offset: at,
                reason: format!("dimension {d} too large"),
            })?;
            dims.push(d);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(Error::MalformedHeader {
                offset: ndim_at,
                reason: "element count overflows".into(),
            })?;
        let payload_at = r.pos;
        let payload = r.take(count * 4)?;
        if r.pos != bytes.len() {
            return Err(Error::MalformedHeader {
                offset: r.pos,
                reason: format!("{} trailing bytes after payload", bytes.len() - r.pos),
            });
        }
        let mut data = Vec::with_capacity(count);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                // Report the byte offset of the bad element within the file.
                return Err(Error::NonFiniteValue {
                    offset: payload_at + 4 * i,
                });
            }
            data.push(v);
        }
        Ok(Self { dims, data })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n);
        match end {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::TruncatedPayload {
                offset: self.pos,
                expected: n,
                found: self.bytes.len() - self.pos,
            }),
        }
    }
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<TensorF32> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorF32::from_bytes(&bytes)
}

pub fn save_tensor(t: &TensorF32, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &t.to_bytes())
}

/// Writes `contents` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// CSV fallback: header `dim0,dim1,...`, one sample per row.
pub fn tensor_to_csv(t: &TensorF32) -> String {
    let cols = t.cols();
    let mut s = (0..cols)
        .map(|j| format!("dim{j}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for row in t.data().chunks(cols.max(1)) {
        let line = row
            .iter()
            .map(|v| format!("{v:?}"))
            .collect::<Vec<_>>()
            .join(",");
        s.push_str(&line);
        s.push('\n');
    }
    s
}

pub fn tensor_from_csv(text: &str) -> Result<TensorF32> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(Error::CsvParse {
        line: 1,
        reason: "missing header".into(),
    })?;
    let cols = header.split(',').count();
    for (j, name) in header.split(',').enumerate() {
        if name.trim() != format!("dim{j}") {
            return Err(Error::CsvParse {
                line: 1,
                reason: format!("expected header column dim{j}, found {name:?}"),
            });
        }
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(Error::CsvParse {
                line: i + 1,
                reason: format!("expected {cols} fields, found {}", fields.len()),
            });
        }
        for f in fields {
            let v: f32 = f.trim().parse().map_err(|_| Error::CsvParse {
                line: i + 1,
                reason: format!("not a number: {f:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    TensorF32::matrix(rows, cols, data)
}

pub fn save_csv(t: &TensorF32, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), tensor_to_csv(t).as_bytes())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<TensorF32> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    tensor_from_csv(&text)
}

/// Loads by extension: `.csv` uses the CSV fallback, anything else OODT.
pub fn load_any(path: impl AsRef<Path>) -> Result<TensorF32> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => load_csv(path),
        _ => load_tensor(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_by_one_zero() {
        let t = TensorF32::matrix(1, 1, vec![0.0]).unwrap();
        let back = TensorF32::from_bytes(&t.to_bytes()).unwrap();
        assert_eq!(back.dims(), &[1, 1]);
        assert_eq!(back.data(), &[0.0]);
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let t = TensorF32::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[0..4], b"OODT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[20..28], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&b[28..32], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 28 + 6 * 4);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = TensorF32::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = t.to_bytes();
        let err = TensorF32::from_bytes(&b[..b.len() - 3]).unwrap_err();
        assert!(
            matches!(err, Error::TruncatedPayload { offset: 28, .. }),
            "{err}"
        );
    }

    #[test]
    fn magic_mismatch_is_rejected() {
        let mut b = TensorF32::vector(vec![1.0]).unwrap().to_bytes();
        b[0] = b'X';
        assert!(matches!(
            TensorF32::from_bytes(&b),
            Err(Error::MagicMismatch { offset: 0 })
        ));
    }

    #[test]
    fn non_finite_payload_names_byte_offset() {
        let mut b = TensorF32::vector(vec![1.0, 2.0]).unwrap().to_bytes();
        let at = b.len() - 4;
        b[at..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            TensorF32::from_bytes(&b),
            Err(Error::NonFiniteValue { offset }) if offset == at
        ));
    }

    #[test]
    fn nan_is_rejected_before_any_write() {
        assert!(matches!(
            TensorF32::vector(vec![1.0, f32::NAN]),
            Err(Error::NonFiniteValue { offset: 1 })
        ));
        let m = DMatrix::from_row_slice(1, 2, &[1.0, 1e300]);
        assert!(matches!(
            TensorF32::from_matrix(&m),
            Err(Error::NonFiniteValue { offset: 1 })
        ));
    }

    #[test]
    fn save_load_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.oodt");
        let t = TensorF32::matrix(2, 3, vec![0.5, -1.25, 3.0, 1e-7, 42.0, -0.0]).unwrap();
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        assert_eq!(back, t);
        let bits: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits, want);
    }

    #[test]
    fn save_into_missing_directory_is_io_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("no/such/dir/m.oodt");
        let t = TensorF32::vector(vec![1.0]).unwrap();
        assert!(matches!(
            save_tensor(&t, &path),
            Err(Error::IoFailure { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let t = TensorF32::matrix(2, 2, vec![0.1, 2.0, -3.5, 4.25]).unwrap();
        let text = tensor_to_csv(&t);
        assert!(text.starts_with("dim0,dim1\n"));
        assert_eq!(tensor_from_csv(&text).unwrap(), t);
    }

    #[test]
    fn labels_round_trip() {
        let t = TensorF32::from_labels(&[0, 2, 1]).unwrap();
        assert_eq!(t.to_labels().unwrap(), vec![0, 2, 1]);
        assert!(TensorF32::vector(vec![0.5]).unwrap().to_labels().is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(rows in 0usize..6, cols in 1usize..6, seed in any::<u64>()) {
            let mut rng = crate::rng::stream(seed, 0);
            let data: Vec<f32> = crate::rng::normals(&mut rng, rows * cols)
                .into_iter().map(|v| (v * 1e3) as f32).collect();
            let t = TensorF32::matrix(rows, cols, data).unwrap();
            prop_assert_eq!(TensorF32::from_bytes(&t.to_bytes()).unwrap(), t);
        }
    }
}
