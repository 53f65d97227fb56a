//! Tensor container files.
//!
//! Layout:
//!
//! ```text
//! magic      8 bytes   "MTCKPT01"
//! length     u64 LE    byte length of the manifest
//! manifest   JSON      {"metadata": ..., "tensors": [{name, shape, dtype, offset, len}]}
//! payload    raw f64 LE values; `offset` is relative to the payload start
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MTCKPT01";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

/// Decoded container: free-form metadata plus named tensors in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: serde_json::Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            let len = (t.len() * 8) as u64;
            entries.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset,
                len,
            });
            offset += len;
        }
        let manifest = serde_json::to_vec(&Manifest {
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |msg: &str| Error::format(origin, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| bad(&format!("manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for entry in manifest.tensors {
            if entry.dtype != "f64" {
                return Err(bad(&format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
            }
            let (start, len) = (entry.offset as usize, entry.len as usize);
            let raw = payload
                .get(start..start + len)
                .ok_or_else(|| bad(&format!("{}: buffer out of range", entry.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(entry.shape, data)
                .map_err(|e| bad(&format!("{}: {e}", entry.name)))?;
            tensors.push((entry.name, tensor));
        }
        Ok(Self {
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            cols in 1usize..5,
        ) {
            let rows = values.len().div_ceil(cols);
            let mut padded = values.clone();
            padded.resize(rows * cols, -0.0);
            let ckpt = Checkpoint {
                metadata: serde_json::json!({"k": 1}),
                tensors: vec![
                    ("a".into(), Tensor::matrix(rows, cols, padded).unwrap()),
                    ("b".into(), Tensor::vector(values)),
                ],
            };
            let bytes = ckpt.to_bytes().unwrap();
            let back = Checkpoint::from_bytes(&bytes, "mem").unwrap();
            prop_assert_eq!(back.metadata, ckpt.metadata);
            for ((na, ta), (nb, tb)) in ckpt.tensors.iter().zip(&back.tensors) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"not a checkpoint", "mem").is_err());
        let mut bytes = Checkpoint {
            metadata: serde_json::Value::Null,
            tensors: vec![("x".into(), Tensor::vector(vec![1.0, 2.0]))],
        }
        .to_bytes()
        .unwrap();
        bytes.truncate(bytes.len() - 4);
        assert!(Checkpoint::from_bytes(&bytes, "mem").is_err());
    }
}
