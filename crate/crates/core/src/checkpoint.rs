//! Checkpoint file format: a single-line JSON manifest (name, shape,
//! byte offset per tensor, format version, free-form metadata) followed
//! by a newline and raw little-endian 32-bit floats. Loading validates
//! shapes against the caller's model definition.

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor4;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 4],
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    entries: Vec<ManifestEntry>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

/// Writes named tensors (converted to f32) plus string metadata.
pub fn save<T: Real>(
    path: &Path,
    tensors: &[(String, &Tensor4<T>)],
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape(),
            offset,
        });
        offset += (t.len() * 4) as u64;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        entries,
        meta: meta.clone(),
    };
    let header = serde_json::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(header.as_bytes())?;
    file.write_all(b"\n")?;
    for (_, t) in tensors {
        for v in t.data() {
            file.write_all(&(v.as_f64() as f32).to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Loads every tensor and the metadata map.
pub fn load(path: &Path) -> Result<(BTreeMap<String, Tensor4<f32>>, BTreeMap<String, String>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let newline = raw
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&raw[..newline])
        .map_err(|e| Error::Checkpoint(format!("manifest parse failed: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {} (expected {})",
            manifest.format_version, FORMAT_VERSION
        )));
    }
    let data = &raw[newline + 1..];
    let mut out = BTreeMap::new();
    for e in &manifest.entries {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + count * 4;
        if end > data.len() {
            return Err(Error::Checkpoint(format!(
                "entry '{}' overruns the data section ({} > {} bytes)",
                e.name,
                end,
                data.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in data[start..end].chunks_exact(4) {
            values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        let t = Tensor4::from_vec(e.shape, values)
            .map_err(|_| Error::Checkpoint(format!("entry '{}' has inconsistent shape", e.name)))?;
        out.insert(e.name.clone(), t);
    }
    Ok((out, manifest.meta))
}

/// Pulls one tensor out of a loaded checkpoint, validating its shape.
pub fn take_validated(
    loaded: &mut BTreeMap<String, Tensor4<f32>>,
    name: &str,
    expected_shape: [usize; 4],
) -> Result<Tensor4<f32>> {
    let t = loaded.remove(name).ok_or_else(|| {
        Error::Checkpoint(format!("checkpoint is missing parameter '{name}'"))
    })?;
    if t.shape() != expected_shape {
        return Err(Error::Checkpoint(format!(
            "parameter '{name}' has shape {:?}, model expects {:?}",
            t.shape(),
            expected_shape
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn roundtrip_preserves_values_and_meta() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let a = Tensor4::from_vec([1, 2, 1, 2], vec![1.0f32, -2.5, 3.25, 0.0]).unwrap();
        let b = Tensor4::from_vec([2, 1, 1, 1], vec![7.0f32, -7.0]).unwrap();
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), "42".to_string());
        save(
            &path,
            &[("layer.a".to_string(), &a), ("layer.b".to_string(), &b)],
            &meta,
        )
        .unwrap();
        let (mut tensors, meta2) = load(&path).unwrap();
        assert_eq!(meta2.get("step").unwrap(), "42");
        let a2 = take_validated(&mut tensors, "layer.a", [1, 2, 1, 2]).unwrap();
        assert_eq!(a2.data(), a.data());
        assert!(take_validated(&mut tensors, "layer.b", [1, 1, 1, 1]).is_err());
    }

    #[test]
    fn corrupt_manifest_names_problem() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"{\"format_version\":1,\"entries\":[{\"name\":\"w\",\"shape\":[9,9,9,9],\"offset\":0}]}\n").unwrap();
        let err = load(&path).unwrap_err().to_string();
        assert!(err.contains("'w'"), "{err}");
    }
}
