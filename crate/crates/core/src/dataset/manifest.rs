use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use super::{DomainId, LabelMap, UnifiedClass};
use crate::{Error, Result};

/// File extensions treated as images during a scan.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub path: String,
    pub domain: DomainId,
    pub raw_label: String,
    pub unified_label: UnifiedClass,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestMeta {
    source_roots: BTreeMap<DomainId, String>,
    created_with_mapping_hash: String,
}

/// Entries sorted by `image_id`, plus where they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub source_roots: BTreeMap<DomainId, String>,
    pub created_with_mapping_hash: String,
}

impl DatasetManifest {
    pub fn new(
        mut entries: Vec<ManifestEntry>,
        source_roots: BTreeMap<DomainId, String>,
        created_with_mapping_hash: String,
    ) -> Result<Self> {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut seen = HashSet::with_capacity(entries.len());
        for e in &entries {
            if !seen.insert(e.image_id.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate image_id {:?} in manifest",
                    e.image_id
                )));
            }
        }
        Ok(DatasetManifest {
            entries,
            source_roots,
            created_with_mapping_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Combines per-domain manifests. Both must have been built with the same label map.
    pub fn merge(parts: Vec<DatasetManifest>) -> Result<Self> {
        let hashes: BTreeSet<_> = parts.iter().map(|p| p.created_with_mapping_hash.clone()).collect();
        if hashes.len() > 1 {
            return Err(Error::InvalidArgument(
                "cannot merge manifests built with different label maps".into(),
            ));
        }
        let hash = hashes.into_iter().next().unwrap_or_default();
        let mut roots = BTreeMap::new();
        let mut entries = Vec::new();
        for p in parts {
            roots.extend(p.source_roots);
            entries.extend(p.entries);
        }
        Self::new(entries, roots, hash)
    }

    pub fn domain(&self, domain: DomainId) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| e.domain == domain).cloned().collect(),
            source_roots: self
                .source_roots
                .iter()
                .filter(|(d, _)| **d == domain)
                .map(|(d, r)| (*d, r.clone()))
                .collect(),
            created_with_mapping_hash: self.created_with_mapping_hash.clone(),
        }
    }

    pub fn domains(&self) -> BTreeSet<DomainId> {
        self.entries.iter().map(|e| e.domain).collect()
    }

    /// Writes the JSON-lines manifest and a `<path>.meta.json` sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            serde_json::to_writer(&mut w, e).map_err(|err| Error::json("manifest entry", err))?;
            w.write_all(b"\n").map_err(|err| Error::io(path, err))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        let meta = ManifestMeta {
            source_roots: self.source_roots.clone(),
            created_with_mapping_hash: self.created_with_mapping_hash.clone(),
        };
        let meta_path = meta_path(path);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::json("manifest meta", e))?;
        std::fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(&line)
                .map_err(|e| Error::json(format!("{}:{}", path.display(), n + 1), e))?;
            entries.push(entry);
        }
        let meta_path = meta_path(path);
        let meta = if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json("manifest meta", e))?
        } else {
            ManifestMeta {
                source_roots: BTreeMap::new(),
                created_with_mapping_hash: String::new(),
            }
        };
        Self::new(entries, meta.source_roots, meta.created_with_mapping_hash)
    }
}

fn meta_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Scans `<root>/<raw_label>/<image files>` into a manifest.
///
/// Every raw label directory must be present in `label_map`; all unknown
/// labels are reported together.
pub fn scan_dataset(root: &Path, domain: DomainId, label_map: &LabelMap) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let mut entries = Vec::new();
    let mut unknown = BTreeSet::new();
    for item in WalkDir::new(root).min_depth(2).max_depth(2).sort_by_file_name() {
        let item = item.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::io(path, e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk error")))
        })?;
        let path = item.path();
        if !item.file_type().is_file() || !is_image(path) {
            continue;
        }
        let file_name = item.file_name().to_string_lossy().to_string();
        if file_name.starts_with('.') {
            continue;
        }
        let raw_label = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        let Some(unified) = label_map.lookup(domain, &raw_label) else {
            unknown.insert(raw_label);
            continue;
        };
        entries.push(ManifestEntry {
            image_id: format!("{domain}/{raw_label}/{file_name}"),
            path: path.to_string_lossy().to_string(),
            domain,
            raw_label,
            unified_label: unified.clone(),
        });
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownLabel {
            domain: domain.to_string(),
            labels: unknown.into_iter().collect(),
        });
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let mut roots = BTreeMap::new();
    roots.insert(domain, root.to_string_lossy().to_string());
    DatasetManifest::new(entries, roots, label_map.hash())
}
