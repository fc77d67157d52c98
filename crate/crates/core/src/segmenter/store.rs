//! On-disk cache of (embedding, post-processed target) pairs.
//!
//! Layout: `index.json` plus `blobs/<hash>.bin`, one blob per image holding
//! the embedding followed by the target, both little-endian `f32` CHW. A blob
//! is written (atomically) before its index entry, and the index is
//! rewritten atomically, so an interrupted run leaves a valid store.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{postprocess_crop, Embedder, ImageEmbedding, PostProcessedImage};
use crate::dataset::{load_image, DatasetManifest, DomainId, ManifestEntry, UnifiedClass};
use crate::tensor_io::{decode_f32, encode_f32, write_atomic};
use crate::{Error, Result};

const INDEX_FILE: &str = "index.json";
const BLOB_DIR: &str = "blobs";
const FORMAT: &str = "embedding-store/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    /// Blob path relative to the store directory.
    pub file: String,
    pub domain: DomainId,
    pub label: UnifiedClass,
    pub embedding_shape: [usize; 3],
    /// Byte offset of the embedding in the blob.
    pub embedding_offset: usize,
    pub target_shape: [usize; 3],
    /// Byte offset of the target in the blob.
    pub target_offset: usize,
    pub mask_empty: bool,
    pub mask_fraction: f64,
}

impl IndexEntry {
    fn blob_len(&self) -> usize {
        self.target_offset + 4 * self.target_shape.iter().product::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub format: String,
    pub embedding_shape: [usize; 3],
    /// Description of the embedder that filled the store.
    pub embedder: serde_json::Value,
    pub entries: BTreeMap<String, IndexEntry>,
}

/// One cached sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredSample {
    pub embedding: ImageEmbedding,
    pub target: PostProcessedImage,
    pub label: UnifiedClass,
}

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dir: PathBuf,
    index: StoreIndex,
}

fn blob_name(image_id: &str) -> String {
    let digest = Sha256::digest(image_id.as_bytes());
    format!("{BLOB_DIR}/{}.bin", hex::encode(&digest[..12]))
}

impl EmbeddingStore {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: StoreIndex =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if index.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported store format {:?}", index.format)));
        }
        Ok(EmbeddingStore {
            dir: dir.to_path_buf(),
            index,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn index(&self) -> &StoreIndex {
        &self.index
    }

    pub fn len(&self) -> usize {
        self.index.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.index.entries.keys().map(String::as_str).collect()
    }

    pub fn entry(&self, image_id: &str) -> Option<&IndexEntry> {
        self.index.entries.get(image_id)
    }

    pub fn domains(&self) -> BTreeSet<DomainId> {
        self.index.entries.values().map(|e| e.domain).collect()
    }

    pub fn embedding_shape(&self) -> [usize; 3] {
        self.index.embedding_shape
    }

    fn read_blob(&self, image_id: &str) -> Result<(IndexEntry, Vec<f32>)> {
        let entry = self
            .entry(image_id)
            .ok_or_else(|| Error::MissingEmbeddings(vec![image_id.to_string()]))?;
        let path = self.dir.join(&entry.file);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() != entry.blob_len() {
            return Err(Error::Checkpoint(format!(
                "blob for {image_id} has {} bytes, index expects {}",
                bytes.len(),
                entry.blob_len()
            )));
        }
        Ok((entry.clone(), decode_f32(&bytes)))
    }

    pub fn read(&self, image_id: &str) -> Result<StoredSample> {
        let (entry, values) = self.read_blob(image_id)?;
        let split = entry.target_offset / 4;
        let to_array = |shape: [usize; 3], v: &[f32]| {
            Array3::from_shape_vec((shape[0], shape[1], shape[2]), v.to_vec())
                .map_err(|e| Error::Shape(e.to_string()))
        };
        let embedding = ImageEmbedding::new(
            image_id,
            entry.domain,
            to_array(entry.embedding_shape, &values[entry.embedding_offset / 4..split])?,
        )?;
        let target = PostProcessedImage::new(image_id, to_array(entry.target_shape, &values[split..])?, entry.mask_empty)?;
        Ok(StoredSample {
            embedding,
            target,
            label: entry.label,
        })
    }

    /// Ids whose blob is absent or has the wrong size.
    pub fn damaged_ids(&self) -> Vec<String> {
        self.index
            .entries
            .iter()
            .filter(|(_, e)| {
                std::fs::metadata(self.dir.join(&e.file))
                    .map(|m| m.len() as usize != e.blob_len())
                    .unwrap_or(true)
            })
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn write_index(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.index).map_err(|e| Error::json("store index", e))?;
        write_atomic(&self.dir.join(INDEX_FILE), text.as_bytes())
    }
}

fn compute_entry(entry: &ManifestEntry, embedder: &dyn Embedder, dir: &Path) -> Result<IndexEntry> {
    let image = load_image(entry)?;
    let (embedding, mask) = embedder.embed_and_segment(&image)?;
    let target = postprocess_crop(&image, &mask)?;
    let embedding_shape = embedding.shape();
    let side = target.side();
    let mut values: Vec<f32> = embedding.features().iter().copied().collect();
    let target_offset = 4 * values.len();
    values.extend(target.pixels().iter().copied());
    let file = blob_name(&entry.image_id);
    write_atomic(&dir.join(&file), &encode_f32(&values))?;
    Ok(IndexEntry {
        file,
        domain: entry.domain,
        label: entry.unified_label.clone(),
        embedding_shape,
        embedding_offset: 0,
        target_shape: [3, side, side],
        target_offset,
        mask_empty: target.mask_empty,
        mask_fraction: mask.foreground_fraction(),
    })
}

/// Embeds, segments and post-processes every manifest entry not already in
/// the store at `out`. The index is flushed every `flush_every` entries.
pub fn cache_embeddings(
    manifest: &DatasetManifest,
    embedder: &dyn Embedder,
    out: &Path,
    flush_every: usize,
) -> Result<EmbeddingStore> {
    let blob_dir = out.join(BLOB_DIR);
    std::fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let mut store = if out.join(INDEX_FILE).exists() {
        let store = EmbeddingStore::open(out)?;
        if store.index.embedding_shape != embedder.embedding_shape() || store.index.embedder != embedder.metadata() {
            return Err(Error::InvalidArgument(format!(
                "store at {} was written by a different embedder",
                out.display()
            )));
        }
        store
    } else {
        let store = EmbeddingStore {
            dir: out.to_path_buf(),
            index: StoreIndex {
                format: FORMAT.to_string(),
                embedding_shape: embedder.embedding_shape(),
                embedder: embedder.metadata(),
                entries: BTreeMap::new(),
            },
        };
        store.write_index()?;
        store
    };

    let pending: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| !store.index.entries.contains_key(&e.image_id))
        .collect();
    if pending.is_empty() {
        return Ok(store);
    }
    for chunk in pending.chunks(flush_every.max(1)) {
        let results: Vec<(String, Result<IndexEntry>)> = chunk
            .par_iter()
            .map(|e| (e.image_id.clone(), compute_entry(e, embedder, out)))
            .collect();
        let mut first_error = None;
        for (id, result) in results {
            match result {
                Ok(entry) => {
                    store.index.entries.insert(id, entry);
                }
                Err(e) => {
                    first_error.get_or_insert(e);
                }
            }
        }
        store.write_index()?;
        log::info!("stage=embed cached={} total={}", store.len(), manifest.len());
        if let Some(e) = first_error {
            return Err(e);
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::PatchEmbedder;

    fn write_png(path: &Path, shade: u8) {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let img = image::RgbImage::from_fn(40, 40, |x, y| {
            if (x as i32 - 20).pow(2) + (y as i32 - 20).pow(2) < 100 {
                image::Rgb([shade, 40, 90])
            } else {
                image::Rgb([230, 220, 225])
            }
        });
        img.save(path).unwrap();
    }

    fn manifest(root: &Path) -> DatasetManifest {
        for (label, shade) in [("EOS", 200u8), ("LYT", 60)] {
            for i in 0..3 {
                write_png(&root.join(label).join(format!("{i}.png")), shade + i as u8);
            }
        }
        crate::dataset::scan_dataset(root, DomainId::Matek19, &crate::dataset::LabelMap::builtin()).unwrap()
    }

    #[test]
    fn cache_and_reopen() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = manifest(data.path());
        let stub = PatchEmbedder::new(4, 8, 0);
        let store = cache_embeddings(&m, &stub, out.path(), 4).unwrap();
        assert_eq!(store.len(), 6);
        let reopened = EmbeddingStore::open(out.path()).unwrap();
        assert_eq!(reopened.index(), store.index());
        let sample = reopened.read(&m.entries[0].image_id).unwrap();
        assert_eq!(sample.embedding.shape(), [4, 8, 8]);
        assert!(!sample.target.mask_empty);
        assert!(reopened.damaged_ids().is_empty());

        let index_path = out.path().join(INDEX_FILE);
        let before = std::fs::metadata(&index_path).unwrap().modified().unwrap();
        std::thread::sleep(std::time::Duration::from_millis(20));
        cache_embeddings(&m, &stub, out.path(), 4).unwrap();
        assert_eq!(std::fs::metadata(&index_path).unwrap().modified().unwrap(), before);
    }

    #[test]
    fn different_embedder_is_rejected() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let m = manifest(data.path());
        cache_embeddings(&m, &PatchEmbedder::new(4, 8, 0), out.path(), 4).unwrap();
        assert!(cache_embeddings(&m, &PatchEmbedder::new(4, 8, 1), out.path(), 4).is_err());
    }
}
