//! JSON manifest + raw little-endian `f32` blob, the on-disk convention shared
//! by adapter, head and autoencoder checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub len: usize,
}

impl TensorRecord {
    fn elem_count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named `f32` tensors packed into one blob.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    pub records: Vec<TensorRecord>,
    pub blob: Vec<u8>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], values: &[f32]) -> Result<()> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "tensor with shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        let offset = self.blob.len();
        self.blob.reserve(values.len() * 4);
        for v in values {
            self.blob.extend_from_slice(&v.to_le_bytes());
        }
        self.records.push(TensorRecord {
            name: name.into(),
            shape: shape.to_vec(),
            offset,
            len: values.len() * 4,
        });
        Ok(())
    }

    /// Checks that every record lies in the blob and that the blob has no slack.
    pub fn validate(&self) -> Result<()> {
        let mut covered = 0usize;
        for r in &self.records {
            if r.len != r.elem_count() * 4 {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?} but {} bytes",
                    r.name, r.shape, r.len
                )));
            }
            if r.offset.checked_add(r.len).is_none_or(|end| end > self.blob.len()) {
                return Err(Error::Checkpoint(format!(
                    "tensor {} spans bytes {}..{} of a {}-byte blob",
                    r.name,
                    r.offset,
                    r.offset + r.len,
                    self.blob.len()
                )));
            }
            covered += r.len;
        }
        if covered != self.blob.len() {
            return Err(Error::Checkpoint(format!(
                "manifest describes {covered} bytes but blob holds {}",
                self.blob.len()
            )));
        }
        Ok(())
    }

    pub fn record(&self, name: &str) -> Option<&TensorRecord> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn get(&self, name: &str) -> Result<(Vec<usize>, Vec<f32>)> {
        let r = self
            .record(name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} not in archive")))?;
        let bytes = self
            .blob
            .get(r.offset..r.offset + r.len)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} out of bounds")))?;
        Ok((r.shape.clone(), decode_f32(bytes)))
    }

    /// Writes `<stem>.json` (manifest plus `meta`) and `<stem>.bin`.
    pub fn write(&self, dir: &Path, stem: &str, meta: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = serde_json::json!({
            "dtype": "f32",
            "byte_order": "little",
            "tensors": self.records,
            "meta": meta,
        });
        let bin = dir.join(format!("{stem}.bin"));
        write_atomic(&bin, &self.blob)?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json("archive", e))?;
        write_atomic(&json, &text)
    }

    /// Reads an archive written by [`TensorArchive::write`], returning its `meta`.
    pub fn read(dir: &Path, stem: &str) -> Result<(Self, serde_json::Value)> {
        #[derive(Deserialize)]
        struct Manifest {
            dtype: String,
            tensors: Vec<TensorRecord>,
            #[serde(default)]
            meta: serde_json::Value,
        }
        let json = dir.join(format!("{stem}.json"));
        let text = std::fs::read(&json).map_err(|e| Error::io(&json, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&text).map_err(|e| Error::json(json.display().to_string(), e))?;
        if manifest.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", manifest.dtype)));
        }
        let bin = dir.join(format!("{stem}.bin"));
        let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let archive = TensorArchive {
            records: manifest.tensors,
            blob,
        };
        archive.validate()?;
        Ok((archive, manifest.meta))
    }
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Write to a temporary sibling, then rename over the target.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncated_blob_is_rejected() {
        let mut a = TensorArchive::new();
        a.push("w", &[2, 3], &[1.0; 6]).unwrap();
        a.validate().unwrap();
        a.blob.truncate(20);
        assert!(matches!(a.validate(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TensorArchive::new();
        a.push("x", &[3], &[1.5, -2.0, f32::MIN_POSITIVE]).unwrap();
        a.write(dir.path(), "ckpt", serde_json::json!({"epochs": 3})).unwrap();
        let (b, meta) = TensorArchive::read(dir.path(), "ckpt").unwrap();
        assert_eq!(a, b);
        assert_eq!(meta["epochs"], 3);
    }
}
