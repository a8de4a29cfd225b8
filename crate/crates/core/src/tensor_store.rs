//! Named-tensor parameter sets and the single-file `SOUPCKPT` checkpoint format.
//!
//! A checkpoint is laid out as:
//!
//! ```text
//! [0..8)        magic  b"SOUPCKPT"
//! [8..12)       header length H, u32 little-endian
//! [12..12+H)    UTF-8 JSON manifest {format_version, tensors, metadata}
//! [12+H..)      data section: row-major little-endian f32 blobs
//! ```
//!
//! Tensor offsets are relative to the start of the data section and are
//! 8-byte aligned. The writer pads the JSON header with trailing spaces so the
//! data section itself also starts on an 8-byte boundary.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"SOUPCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: &str = "f32";
const ALIGN: usize = 8;

/// Free-form checkpoint metadata. Ordered so serialization is deterministic.
pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a SOUPCKPT file)")]
    BadMagic,
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("tensor {name:?}: unsupported dtype {dtype:?}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("tensor {name:?}: shape {shape:?} needs {expected} bytes but record declares {declared}")]
    ShapeLength {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        declared: usize,
    },
    #[error("tensor {name:?}: bad layout ({reason})")]
    Layout { name: String, reason: String },
    #[error("tensor {name:?}: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error(transparent)]
    Invalid(#[from] TensorError),
}

/// Violations of the [`ParameterSet`] invariants or of schema agreement
/// between two sets.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: shape {shape:?} has {expected} elements but data has {actual}")]
    ShapeMismatch {
        name: String,
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("tensor {name:?}: zero-sized dimension in shape {shape:?}")]
    ZeroDim { name: String, shape: Vec<usize> },
    #[error("tensor {name:?}: non-finite value at flat index {index}")]
    NonFinite { name: String, index: usize },
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("cannot average an empty list of parameter sets")]
    EmptyPool,
}

/// One named tensor: a shape and its row-major f32 data.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let name = name.into();
        if name.is_empty() {
            return Err(TensorError::EmptyName);
        }
        if shape.contains(&0) {
            return Err(TensorError::ZeroDim { name, shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch {
                name,
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { name, index });
        }
        Ok(Self { name, shape, data })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// The weights of one model: an ordered, immutable list of named tensors.
///
/// Names are unique, every shape matches its data length and every value is
/// finite. All arithmetic returns a fresh set.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self, TensorError> {
        let mut seen = HashSet::with_capacity(tensors.len());
        for t in &tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(TensorError::DuplicateName(t.name.clone()));
            }
        }
        Ok(Self { tensors })
    }

    /// Convenience constructor from `(name, shape, data)` triples.
    pub fn from_entries<I, S>(entries: I) -> Result<Self, TensorError>
    where
        I: IntoIterator<Item = (S, Vec<usize>, Vec<f32>)>,
        S: Into<String>,
    {
        let tensors = entries
            .into_iter()
            .map(|(n, s, d)| Tensor::new(n, s, d))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn names(&self) -> Vec<&str> {
        self.tensors.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Checks that `other` has the same names, shapes and order.
    pub fn check_same_schema(&self, other: &ParameterSet) -> Result<(), TensorError> {
        if self.tensors.len() != other.tensors.len() {
            return Err(TensorError::Schema(format!(
                "tensor count {} vs {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (i, (a, b)) in self.tensors.iter().zip(&other.tensors).enumerate() {
            if a.name != b.name {
                return Err(TensorError::Schema(format!(
                    "position {i}: name {:?} vs {:?}",
                    a.name, b.name
                )));
            }
            if a.shape != b.shape {
                return Err(TensorError::Schema(format!(
                    "tensor {:?}: shape {:?} vs {:?}",
                    a.name, a.shape, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Builds a new set with the same schema, computing each value from the
    /// tensor index and the flat element index. Accumulation happens in f64
    /// and is rounded once to f32 on store.
    pub(crate) fn map_with_schema<F>(&self, mut f: F) -> Result<ParameterSet, TensorError>
    where
        F: FnMut(usize, usize) -> f64,
    {
        let mut tensors = Vec::with_capacity(self.tensors.len());
        for (ti, t) in self.tensors.iter().enumerate() {
            let data: Vec<f32> = (0..t.data.len()).map(|ei| f(ti, ei) as f32).collect();
            tensors.push(Tensor::new(t.name.clone(), t.shape.clone(), data)?);
        }
        Ok(ParameterSet { tensors })
    }

    /// SHA-256 over names, shapes and the little-endian value bytes.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// `a·x + b·y`, elementwise for every tensor.
pub fn lincomb(
    a: f64,
    x: &ParameterSet,
    b: f64,
    y: &ParameterSet,
) -> Result<ParameterSet, TensorError> {
    x.check_same_schema(y)?;
    x.map_with_schema(|ti, ei| {
        a * f64::from(x.tensors[ti].data[ei]) + b * f64::from(y.tensors[ti].data[ei])
    })
}

/// Elementwise arithmetic mean of a non-empty pool.
pub fn mean(pool: &[&ParameterSet]) -> Result<ParameterSet, TensorError> {
    let (first, rest) = pool.split_first().ok_or(TensorError::EmptyPool)?;
    for p in rest {
        first.check_same_schema(p)?;
    }
    let n = pool.len() as f64;
    first.map_with_schema(|ti, ei| {
        let sum: f64 = pool
            .iter()
            .map(|p| f64::from(p.tensors[ti].data[ei]))
            .sum();
        sum / n
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

/// The JSON header of a checkpoint file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorRecord>,
    #[serde(default)]
    pub metadata: Metadata,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serializes a parameter set and metadata to checkpoint bytes.
pub fn to_bytes(ps: &ParameterSet, metadata: &Metadata) -> Vec<u8> {
    let mut records = Vec::with_capacity(ps.len());
    let mut offset = 0usize;
    for t in ps.tensors() {
        let nbytes = t.len() * 4;
        records.push(TensorRecord {
            name: t.name.clone(),
            shape: t.shape.clone(),
            dtype: DTYPE_F32.to_string(),
            offset,
            nbytes,
        });
        offset = align_up(offset + nbytes);
    }
    let manifest = CheckpointManifest {
        format_version: FORMAT_VERSION,
        tensors: records,
        metadata: metadata.clone(),
    };
    let mut header = serde_json::to_vec(&manifest).expect("manifest serializes");
    let pad = align_up(12 + header.len()) - (12 + header.len());
    header.extend(std::iter::repeat_n(b' ', pad));

    let mut out = Vec::with_capacity(12 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let data_start = out.len();
    for (t, r) in ps.tensors().iter().zip(&manifest.tensors) {
        out.resize(data_start + r.offset, 0);
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.resize(data_start + offset, 0);
    out
}

/// Parses checkpoint bytes, enforcing every format and value invariant.
pub fn from_bytes(bytes: &[u8]) -> Result<(ParameterSet, Metadata), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::CorruptHeader(
            "file ends before header length".into(),
        ));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header = bytes.get(12..12 + hlen).ok_or_else(|| {
        CheckpointError::CorruptHeader(format!(
            "header length {hlen} exceeds file size {}",
            bytes.len()
        ))
    })?;
    // Peek at the version first so a future layout is reported as such rather
    // than as a parse failure.
    let raw: serde_json::Value = serde_json::from_slice(header)
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| CheckpointError::CorruptHeader("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(CheckpointError::UnsupportedVersion(version as u32));
    }
    let manifest: CheckpointManifest = serde_json::from_value(raw)
        .map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;

    let data = &bytes[12 + hlen..];
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let mut prev_end = 0usize;
    for r in &manifest.tensors {
        if r.dtype != DTYPE_F32 {
            return Err(CheckpointError::UnsupportedDtype {
                name: r.name.clone(),
                dtype: r.dtype.clone(),
            });
        }
        let expected = r
            .shape
            .iter()
            .try_fold(4usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Layout {
                name: r.name.clone(),
                reason: "shape overflows".into(),
            })?;
        if expected != r.nbytes {
            return Err(CheckpointError::ShapeLength {
                name: r.name.clone(),
                shape: r.shape.clone(),
                expected,
                declared: r.nbytes,
            });
        }
        if r.offset % ALIGN != 0 {
            return Err(CheckpointError::Layout {
                name: r.name.clone(),
                reason: format!("offset {} not {ALIGN}-byte aligned", r.offset),
            });
        }
        if r.offset < prev_end {
            return Err(CheckpointError::Layout {
                name: r.name.clone(),
                reason: format!(
                    "offset {} overlaps previous tensor ending at {prev_end}",
                    r.offset
                ),
            });
        }
        let end = r.offset + r.nbytes;
        let blob = data.get(r.offset..end).ok_or_else(|| CheckpointError::Layout {
            name: r.name.clone(),
            reason: format!("range {}..{end} beyond data section of {} bytes", r.offset, data.len()),
        })?;
        prev_end = end;
        let values: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CheckpointError::NonFinite {
                name: r.name.clone(),
                index,
            });
        }
        tensors.push(Tensor::new(r.name.clone(), r.shape.clone(), values)?);
    }
    Ok((ParameterSet::new(tensors)?, manifest.metadata))
}

pub fn load(path: impl AsRef<Path>) -> Result<(ParameterSet, Metadata), CheckpointError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}

pub fn save(
    ps: &ParameterSet,
    metadata: &Metadata,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    fs::write(path, to_bytes(ps, metadata))?;
    Ok(())
}
