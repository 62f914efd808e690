//! Checkpoint container: a JSON manifest describing raw little-endian,
//! row-major tensor buffers.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes   b"QFCKPT\0\x01"
//! len     u64 LE    manifest byte length
//! json    len bytes manifest (entries: name, dtype, shape, offset, nbytes)
//! payload           concatenated tensor buffers, offsets relative to here
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NumericsError, Result};
use crate::real::{DType, Real};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 8] = b"QFCKPT\0\x01";

/// Upper bound on a manifest, to reject absurd length prefixes early.
const MAX_MANIFEST: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_real<T: Real>(t: Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested element type (exact when types agree).
    pub fn to_real<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub payload_bytes: u64,
    pub tensors: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, AnyTensor)>,
    pub meta: serde_json::Value,
}

fn err(msg: impl Into<String>) -> NumericsError {
    NumericsError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint {
            entries: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: AnyTensor) {
        let name = name.into();
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| *n == name) {
            slot.1 = t;
        } else {
            self.entries.push((name, t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let offset = payload.len() as u64;
            t.write_payload(&mut payload);
            tensors.push(ManifestEntry {
                name: name.clone(),
                dtype: t.dtype(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let manifest = Manifest {
            version: 1,
            payload_bytes: payload.len() as u64,
            tensors,
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a container, validating every manifest entry against the payload.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(err(format!("truncated header: {} bytes", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(err("bad magic"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        if mlen > MAX_MANIFEST || mlen > (bytes.len() - 16) as u64 {
            return Err(err(format!(
                "truncated manifest: declared {mlen} bytes, {} available",
                bytes.len() - 16
            )));
        }
        let mend = 16 + mlen as usize;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[16..mend]).map_err(|e| err(format!("manifest: {e}")))?;
        if manifest.version != 1 {
            return Err(err(format!("unsupported version {}", manifest.version)));
        }
        let payload = &bytes[mend..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(err(format!(
                "integrity: manifest declares {} payload bytes, file holds {}",
                manifest.payload_bytes,
                payload.len()
            )));
        }
        let mut seen = HashSet::new();
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if !seen.insert(e.name.as_str()) {
                return Err(err(format!("duplicate entry `{}`", e.name)));
            }
            let count = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| err(format!("entry `{}`: shape overflows", e.name)))?;
            let expect = count
                .checked_mul(e.dtype.size_of() as u64)
                .ok_or_else(|| err(format!("entry `{}`: size overflows", e.name)))?;
            if expect != e.nbytes {
                return Err(err(format!(
                    "entry `{}`: shape {:?} needs {expect} bytes, manifest says {}",
                    e.name, e.shape, e.nbytes
                )));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= payload.len() as u64)
                .ok_or_else(|| err(format!("entry `{}`: range exceeds payload", e.name)))?;
            let buf = &payload[e.offset as usize..end as usize];
            let t = match e.dtype {
                DType::F32 => AnyTensor::F32(decode::<f32>(&e.shape, buf)?),
                DType::F64 => AnyTensor::F64(decode::<f64>(&e.shape, buf)?),
            };
            entries.push((e.name.clone(), t));
        }
        Ok(Checkpoint {
            entries,
            meta: manifest.meta,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

fn decode<T: Real>(shape: &[usize], buf: &[u8]) -> Result<Tensor<T>> {
    let w = T::DTYPE.size_of();
    let data: Vec<T> = buf.chunks_exact(w).map(T::read_le).collect();
    debug_assert_eq!(data.len(), numel(shape));
    Tensor::new(shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new();
        c.push(
            "encoder.w",
            AnyTensor::F32(Tensor::from_fn([2, 3], |i| i as f32 * 0.5)),
        );
        c.push(
            "bias",
            AnyTensor::F64(Tensor::from_fn([4], |i| -(i as f64))),
        );
        c.meta = serde_json::json!({"step": 3});
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncated_is_integrity_error() {
        let bytes = sample().to_bytes();
        let msg = Checkpoint::from_bytes(&bytes[..bytes.len() - 3])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("integrity"), "{msg}");
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn shape_mismatch_names_entry() {
        let c = sample();
        let mut bytes = c.to_bytes();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[16..16 + mlen].to_vec()).unwrap();
        let patched = json.replace("[2,3]", "[3,3]");
        assert_eq!(patched.len(), json.len());
        bytes[16..16 + mlen].copy_from_slice(patched.as_bytes());
        let msg = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(msg.contains("encoder.w"), "{msg}");
    }
}
