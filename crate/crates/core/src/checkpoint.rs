//! Named-array checkpoint container.
//!
//! A checkpoint is a pair of files sharing one stem: `<stem>.json` holds the
//! manifest (array name, shape, dtype, byte offset, byte length) and
//! `<stem>.bin` holds a single raw little-endian f32 payload. The round trip
//! load -> save is byte-exact.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    pub arrays: Vec<ManifestEntry>,
}

/// In-memory view of a checkpoint: named dense arrays in insertion order.
/// Values are held as f64 but must be f32-representable; `save` stores them
/// as raw little-endian f32.
#[derive(Debug, Clone, Default)]
pub struct NamedArrays {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub config_hash: Option<String>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((name.to_string(), shape.to_vec(), data));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.entries
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, s, d)| (s.as_slice(), d.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let mut payload: Vec<u8> = Vec::new();
        let mut arrays = Vec::new();
        for (name, shape, data) in &self.entries {
            let offset = payload.len() as u64;
            for v in data {
                payload.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            arrays.push(ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
                dtype: "f32".to_string(),
                byte_offset: offset,
                byte_length: (data.len() * 4) as u64,
            });
        }
        let manifest = Manifest {
            version: 1,
            config_hash: self.config_hash.clone(),
            arrays,
        };
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        std::fs::write(stem.with_extension("bin"), payload)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(stem.with_extension("json"))?)?;
        let payload = std::fs::read(stem.with_extension("bin"))?;
        let mut out = NamedArrays::new();
        out.config_hash = manifest.config_hash;
        for e in &manifest.arrays {
            if e.dtype != "f32" {
                return Err(Error::Contract(format!(
                    "unsupported dtype {:?} for array {:?}",
                    e.dtype, e.name
                )));
            }
            let lo = e.byte_offset as usize;
            let hi = lo + e.byte_length as usize;
            if hi > payload.len() || e.byte_length % 4 != 0 {
                return Err(Error::Contract(format!(
                    "array {:?} byte range [{lo}, {hi}) out of bounds",
                    e.name
                )));
            }
            let n = (e.byte_length / 4) as usize;
            if e.shape.iter().product::<usize>() != n {
                return Err(Error::Contract(format!(
                    "array {:?} shape/length mismatch",
                    e.name
                )));
            }
            let data: Vec<f64> = payload[lo..hi]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            out.push(&e.name, &e.shape, data);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ckpt");
        let mut a = NamedArrays::new();
        a.config_hash = Some("deadbeef".into());
        a.push("w", &[2, 3], vec![1.0, -0.5, 0.25, 3.5, 0.0, -2.0]);
        a.push("b", &[3], vec![0.1_f32 as f64, 0.2_f32 as f64, 0.3_f32 as f64]);
        a.save(&stem).unwrap();

        let json1 = std::fs::read(stem.with_extension("json")).unwrap();
        let bin1 = std::fs::read(stem.with_extension("bin")).unwrap();

        let b = NamedArrays::load(&stem).unwrap();
        let stem2 = dir.path().join("ckpt2");
        b.save(&stem2).unwrap();

        assert_eq!(json1, std::fs::read(stem2.with_extension("json")).unwrap());
        assert_eq!(bin1, std::fs::read(stem2.with_extension("bin")).unwrap());
    }

    #[test]
    fn lookup_by_name() {
        let mut a = NamedArrays::new();
        a.push("x", &[2], vec![1.0, 2.0]);
        let (shape, data) = a.get("x").unwrap();
        assert_eq!(shape, &[2]);
        assert_eq!(data, &[1.0, 2.0]);
        assert!(a.get("y").is_none());
    }
}
