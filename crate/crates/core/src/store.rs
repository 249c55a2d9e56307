//! Descriptor sets and the LMKE binary container.
//!
//! Layout (little-endian):
//!
//! | offset | size      | field                                         |
//! |--------|-----------|-----------------------------------------------|
//! | 0      | 4         | magic `LMKE`                                  |
//! | 4      | 4         | version `u32 = 1`                             |
//! | 8      | 1         | flags: bit0 normalized, bit1 labels present   |
//! | 9      | 4         | `d: u32`                                      |
//! | 13     | 8         | `n: u64`                                      |
//! | 21     | `4·n·d`   | row-major `f32` payload                       |
//! | ..     | variable  | `n` newline-terminated UTF-8 ids              |
//! | ..     | `8·n`     | `i64` labels (only when bit1 is set)          |

use std::collections::HashSet;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LMKE";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;
pub const DEFAULT_DIM: usize = 512;

const FLAG_NORMALIZED: u8 = 0b01;
const FLAG_LABELS: u8 = 0b10;

/// Rows whose norm lies within this distance of 1.0 count as unit vectors.
pub const NORM_TOLERANCE: f64 = 1e-5;
/// Rows with a smaller norm are rejected by [`l2_normalize`].
pub const ZERO_NORM: f64 = 1e-12;

/// Landmark class identifier; `-1` marks a non-landmark image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LandmarkLabel(i64);

impl LandmarkLabel {
    pub const NON_LANDMARK: LandmarkLabel = LandmarkLabel(-1);

    pub fn new(value: i64) -> Result<Self> {
        if value < -1 {
            return Err(Error::Param(format!("landmark label {value} is below -1")));
        }
        Ok(LandmarkLabel(value))
    }

    pub fn value(self) -> i64 {
        self.0
    }

    pub fn is_landmark(self) -> bool {
        self.0 != -1
    }
}

impl fmt::Display for LandmarkLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// An `n × d` matrix of image descriptors keyed by unique image ids.
///
/// Immutable once built; share it across threads by reference.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    ids: Vec<String>,
    labels: Option<Vec<LandmarkLabel>>,
    data: Vec<f32>,
    dim: usize,
    normalized: bool,
}

impl DescriptorSet {
    /// Builds an unnormalized set from a row-major matrix.
    pub fn new(
        ids: Vec<String>,
        labels: Option<Vec<LandmarkLabel>>,
        data: Vec<f32>,
        dim: usize,
    ) -> Result<Self> {
        let set = DescriptorSet {
            ids,
            labels,
            data,
            dim,
            normalized: false,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn from_rows(
        ids: Vec<String>,
        labels: Option<Vec<LandmarkLabel>>,
        rows: &[Vec<f32>],
    ) -> Result<Self> {
        let dim = rows.first().map_or(DEFAULT_DIM, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Param("rows have differing lengths".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(ids, labels, data, dim)
    }

    /// Marks the set as normalized after checking every row is a unit vector.
    pub fn into_normalized(mut self) -> Result<Self> {
        self.check_unit_rows()?;
        self.normalized = true;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Param("descriptor dimension must be at least 1".into()));
        }
        if self.data.len() != self.ids.len() * self.dim {
            return Err(Error::Integrity(format!(
                "matrix holds {} values, expected {} rows x {} dims",
                self.data.len(),
                self.ids.len(),
                self.dim
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.ids.len() {
                return Err(Error::Integrity(format!(
                    "{} labels for {} ids",
                    labels.len(),
                    self.ids.len()
                )));
            }
        }
        let mut seen = HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if id.contains('\n') {
                return Err(Error::Integrity(format!("id {id:?} contains a newline")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Integrity(format!("duplicate id {id}")));
            }
        }
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!(
                "non-finite value in row {}",
                self.ids[pos / self.dim]
            )));
        }
        Ok(())
    }

    fn check_unit_rows(&self) -> Result<()> {
        for (i, row) in self.rows().enumerate() {
            let norm = row_norm(row);
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Norm(format!(
                    "row {} has norm {norm}",
                    self.ids[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> Option<&[LandmarkLabel]> {
        self.labels.as_deref()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Row-major matrix of all descriptors.
    pub fn matrix(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Returns a new set holding the given rows in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut ids = Vec::with_capacity(indices.len());
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = self.labels.as_ref().map(|_| Vec::with_capacity(indices.len()));
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index {
                    index: i,
                    len: self.len(),
                });
            }
            ids.push(self.ids[i].clone());
            data.extend_from_slice(self.row(i));
            if let (Some(out), Some(src)) = (labels.as_mut(), self.labels.as_ref()) {
                out.push(src[i]);
            }
        }
        let set = DescriptorSet {
            ids,
            labels,
            data,
            dim: self.dim,
            normalized: self.normalized,
        };
        set.validate()?;
        Ok(set)
    }

    /// Fails with [`Error::Norm`] unless the set carries the normalized flag.
    pub fn require_normalized(&self, role: &str) -> Result<()> {
        if self.normalized {
            Ok(())
        } else {
            Err(Error::Norm(format!("{role} descriptor set is not normalized")))
        }
    }

    /// Exact size in bytes of the LMKE encoding of this set.
    pub fn encoded_len(&self) -> usize {
        let ids: usize = self.ids.iter().map(|id| id.len() + 1).sum();
        let labels = if self.labels.is_some() { 8 * self.len() } else { 0 };
        HEADER_LEN + 4 * self.data.len() + ids + labels
    }

    /// Encodes the set in LMKE format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let mut flags = 0u8;
        if self.normalized {
            flags |= FLAG_NORMALIZED;
        }
        if self.labels.is_some() {
            flags |= FLAG_LABELS;
        }
        buf.push(flags);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            buf.extend_from_slice(id.as_bytes());
            buf.push(b'\n');
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                buf.extend_from_slice(&l.value().to_le_bytes());
            }
        }
        buf
    }

    /// Decodes an LMKE byte buffer.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            if bytes.len() >= 4 && &bytes[..4] != MAGIC {
                return Err(Error::Format("bad magic".into()));
            }
            return Err(Error::Truncation {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncation {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let flags = bytes[8];
        if flags & !(FLAG_NORMALIZED | FLAG_LABELS) != 0 {
            return Err(Error::Format(format!("unknown flag bits {flags:#04x}")));
        }
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let n = u64::from_le_bytes(bytes[13..21].try_into().unwrap());
        if dim == 0 {
            return Err(Error::Format("dimension is zero".into()));
        }
        if n == 0 {
            return Err(Error::EmptySet);
        }

        let payload_len = n
            .checked_mul(dim as u64)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        let payload_end = (HEADER_LEN as u64)
            .checked_add(payload_len)
            .ok_or_else(|| Error::Format("header dimensions overflow".into()))?;
        if (bytes.len() as u64) < payload_end {
            return Err(Error::Truncation {
                expected: payload_end,
                found: bytes.len() as u64,
            });
        }
        let n = n as usize;
        let payload_end = payload_end as usize;
        let data: Vec<f32> = bytes[HEADER_LEN..payload_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let mut ids = Vec::with_capacity(n);
        let mut cursor = payload_end;
        for _ in 0..n {
            let rest = &bytes[cursor..];
            let nl = rest.iter().position(|&b| b == b'\n').ok_or(Error::Truncation {
                expected: (cursor + 1) as u64,
                found: bytes.len() as u64,
            })?;
            let id = std::str::from_utf8(&rest[..nl])
                .map_err(|e| Error::Format(format!("id is not UTF-8: {e}")))?;
            ids.push(id.to_owned());
            cursor += nl + 1;
        }

        let labels = if flags & FLAG_LABELS != 0 {
            let end = cursor + 8 * n;
            if bytes.len() < end {
                return Err(Error::Truncation {
                    expected: end as u64,
                    found: bytes.len() as u64,
                });
            }
            let labels = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| {
                    let v = i64::from_le_bytes(c.try_into().unwrap());
                    LandmarkLabel::new(v).map_err(|_| Error::Format(format!("invalid label {v}")))
                })
                .collect::<Result<Vec<_>>>()?;
            cursor = end;
            Some(labels)
        } else {
            None
        };
        if cursor != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after sidecars",
                bytes.len() - cursor
            )));
        }

        let set = DescriptorSet::new(ids, labels, data, dim)?;
        if flags & FLAG_NORMALIZED != 0 {
            set.into_normalized()
        } else {
            Ok(set)
        }
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// Reads an LMKE file.
pub fn load_descriptors(path: impl AsRef<Path>) -> Result<DescriptorSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    DescriptorSet::from_bytes(&bytes)
}

/// Writes an LMKE file atomically: the bytes land in a temporary file next to
/// `path` which is then renamed over it.
pub fn save_descriptors(set: &DescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    set.validate()?;
    if set.normalized {
        set.check_unit_rows()?;
    }
    write_atomic(path, &set.to_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Scales every row to unit L2 norm.
///
/// Norms are accumulated in `f64`; a row whose norm does not exceed
/// [`ZERO_NORM`] is rejected with the offending id.
pub fn l2_normalize(set: &DescriptorSet) -> Result<DescriptorSet> {
    let mut data = Vec::with_capacity(set.data.len());
    for (i, row) in set.rows().enumerate() {
        let norm = row_norm(row);
        if norm <= ZERO_NORM {
            return Err(Error::ZeroVector {
                id: set.ids[i].clone(),
            });
        }
        data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
    }
    Ok(DescriptorSet {
        ids: set.ids.clone(),
        labels: set.labels.clone(),
        data,
        dim: set.dim,
        normalized: true,
    })
}
