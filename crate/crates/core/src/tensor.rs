//! Dense real-valued tensors with labelled axes and the `OCETNSR1` container.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! [8]  magic "OCETNSR1"
//! [8]  u64 header length in bytes
//! [n]  UTF-8 JSON header {"dtype":"f32","shape":[..],"axes":[..],"meta":{..}}
//! [..] payload: product(shape) little-endian f32 values, row-major in axis order
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"OCETNSR1";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: bad magic bytes, not an OCETNSR1 container")]
    BadMagic { path: PathBuf },
    #[error("{path}: truncated file ({detail})")]
    TruncatedFile { path: PathBuf, detail: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: malformed header: {detail}")]
    BadHeader { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Axis label. A tensor's axes are an ordered subset of `c, y, z, t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    C,
    Y,
    Z,
    T,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::C => "c",
            Axis::Y => "y",
            Axis::Z => "z",
            Axis::T => "t",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    axes: Vec<Axis>,
    data: Vec<f32>,
    meta: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    axes: Vec<Axis>,
    #[serde(default)]
    meta: Map<String, Value>,
}

fn check_layout(shape: &[usize], axes: &[Axis], len: usize) -> Result<(), TensorError> {
    if shape.len() != axes.len() {
        return Err(TensorError::ShapeMismatch(format!(
            "{} extents for {} axes",
            shape.len(),
            axes.len()
        )));
    }
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::ShapeMismatch(format!(
            "zero extent in shape {shape:?}"
        )));
    }
    for (i, a) in axes.iter().enumerate() {
        if axes[..i].contains(a) {
            return Err(TensorError::ShapeMismatch(format!("duplicate axis {a}")));
        }
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(TensorError::ShapeMismatch(format!(
            "shape {shape:?} holds {n} values, data has {len}"
        )));
    }
    Ok(())
}

impl Tensor {
    pub fn new(shape: Vec<usize>, axes: Vec<Axis>, data: Vec<f32>) -> Result<Self, TensorError> {
        check_layout(&shape, &axes, data.len())?;
        Ok(Self {
            shape,
            axes,
            data,
            meta: Map::new(),
        })
    }

    pub fn zeros(shape: Vec<usize>, axes: Vec<Axis>) -> Result<Self, TensorError> {
        let n = shape.iter().product();
        Self::new(shape, axes, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn meta(&self) -> &Map<String, Value> {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.meta
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(Value::as_f64)
    }

    /// Extent of a labelled axis.
    pub fn extent(&self, axis: Axis) -> Option<usize> {
        self.axes
            .iter()
            .position(|&a| a == axis)
            .map(|i| self.shape[i])
    }

    /// Errors unless the axes are exactly `expected`, in order.
    pub fn expect_axes(&self, expected: &[Axis]) -> Result<(), TensorError> {
        if self.axes != expected {
            return Err(TensorError::ShapeMismatch(format!(
                "expected axes {:?}, found {:?}",
                expected, self.axes
            )));
        }
        Ok(())
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &n)| {
                debug_assert!(i < n);
                acc * n + i
            })
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f32) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        check_layout(&self.shape, &self.axes, self.data.len())?;
        let header = Header {
            dtype: "f32".into(),
            shape: self.shape.clone(),
            axes: self.axes.clone(),
            meta: self.meta.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Parses a container held in memory; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TensorError> {
        let truncated = |detail: String| TensorError::TruncatedFile {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 8 {
            if MAGIC.starts_with(bytes) {
                return Err(truncated(format!("{} bytes, no header", bytes.len())));
            }
            return Err(TensorError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(TensorError::BadMagic {
                path: path.to_path_buf(),
            });
        }
        if bytes.len() < 16 {
            return Err(truncated("header length missing".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(truncated(format!(
                "header needs {hlen} bytes, {} present",
                body.len()
            )));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| TensorError::BadHeader {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
        if header.dtype != "f32" {
            return Err(TensorError::BadHeader {
                path: path.to_path_buf(),
                detail: format!("unsupported dtype {:?}", header.dtype),
            });
        }
        let n: usize = header.shape.iter().product();
        let payload = &body[hlen..];
        if payload.len() < n * 4 {
            return Err(truncated(format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                n * 4
            )));
        }
        if payload.len() > n * 4 {
            return Err(TensorError::ShapeMismatch(format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                n * 4
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut t = Tensor::new(header.shape, header.axes, data)?;
        t.meta = header.meta;
        Ok(t)
    }
}

pub fn write_tensor(t: &Tensor, path: &Path) -> Result<(), TensorError> {
    let bytes = t.to_bytes()?;
    let io = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io)?;
        }
    }
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Tensor::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn yzt(y: usize, z: usize, t: usize) -> Tensor {
        let data = (0..y * z * t).map(|i| i as f32).collect();
        Tensor::new(vec![y, z, t], vec![Axis::Y, Axis::Z, Axis::T], data).unwrap()
    }

    #[test]
    fn flat_index_follows_axis_order() {
        let (y, z, t) = (3, 4, 5);
        let v = yzt(y, z, t);
        for iy in 0..y {
            for iz in 0..z {
                for it in 0..t {
                    let flat = (iy * z + iz) * t + it;
                    assert_eq!(v.offset(&[iy, iz, it]), flat);
                    assert_eq!(v.get(&[iy, iz, it]), flat as f32);
                }
            }
        }
    }

    #[test]
    fn roundtrip_small() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.oct");
        let t = yzt(2, 3, 4).with_meta("pixel_pitch_m", 9.375e-5);
        write_tensor(&t, &p).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), t);
    }

    #[test]
    fn zero_extent_rejected() {
        let t = Tensor {
            shape: vec![2, 0, 4],
            axes: vec![Axis::Y, Axis::Z, Axis::T],
            data: vec![],
            meta: Map::new(),
        };
        assert!(matches!(t.to_bytes(), Err(TensorError::ShapeMismatch(_))));
        assert!(matches!(
            Tensor::zeros(vec![0], vec![Axis::T]),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn duplicate_axes_rejected() {
        assert!(Tensor::zeros(vec![2, 2], vec![Axis::Y, Axis::Y]).is_err());
    }

    #[test]
    fn truncated_payload() {
        let bytes = yzt(2, 3, 4).to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 1];
        let err = Tensor::from_bytes(cut, Path::new("x")).unwrap_err();
        assert!(matches!(err, TensorError::TruncatedFile { .. }), "{err}");
    }

    #[test]
    fn truncated_header() {
        let bytes = yzt(2, 3, 4).to_bytes().unwrap();
        let err = Tensor::from_bytes(&bytes[..20], Path::new("x")).unwrap_err();
        assert!(matches!(err, TensorError::TruncatedFile { .. }));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = yzt(1, 1, 2).to_bytes().unwrap();
        bytes[0] = b'X';
        let err = Tensor::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, TensorError::BadMagic { .. }));
    }

    #[test]
    fn trailing_bytes_are_a_shape_mismatch() {
        let mut bytes = yzt(1, 1, 2).to_bytes().unwrap();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let err = Tensor::from_bytes(&bytes, Path::new("x")).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch(_)));
    }

    #[test]
    fn header_is_little_endian_json() {
        let bytes = yzt(1, 1, 1).to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let v: Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        assert_eq!(v["dtype"], "f32");
        assert_eq!(v["axes"], serde_json::json!(["y", "z", "t"]));
        assert_eq!(bytes.len(), 16 + hlen + 4);
    }
}
