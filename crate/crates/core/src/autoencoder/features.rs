use std::path::Path;

use ndarray::{Array2, Array3};
use sha2::{Digest, Sha256};

use super::{CrossDomainAe, LATENT_DIM};
use crate::dataset::{DomainId, UnifiedClass};
use crate::segmenter::EmbeddingStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub image_id: String,
    pub domain: DomainId,
    pub label: UnifiedClass,
    pub z: Vec<f32>,
}

/// Latent features, one row per image, sorted by image id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FeatureTable {
    rows: Vec<FeatureRow>,
}

impl FeatureTable {
    pub fn new(mut rows: Vec<FeatureRow>) -> Result<Self> {
        rows.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        if let Some(w) = rows.windows(2).find(|w| w[0].image_id == w[1].image_id) {
            return Err(Error::InvalidArgument(format!("duplicate feature row {}", w[0].image_id)));
        }
        if let Some(r) = rows.iter().find(|r| r.z.len() != LATENT_DIM) {
            return Err(Error::Shape(format!(
                "row {} has {} features, expected {LATENT_DIM}",
                r.image_id,
                r.z.len()
            )));
        }
        Ok(FeatureTable { rows })
    }

    pub fn rows(&self) -> &[FeatureRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.rows.iter().map(|r| r.image_id.as_str()).collect()
    }

    pub fn domain(&self, domain: DomainId) -> FeatureTable {
        FeatureTable {
            rows: self.rows.iter().filter(|r| r.domain == domain).cloned().collect(),
        }
    }

    /// Feature matrix `(N, 50)` in row order.
    pub fn matrix(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows.len(), LATENT_DIM), |(i, j)| self.rows[i].z[j] as f64)
    }

    pub fn labels(&self) -> Vec<UnifiedClass> {
        self.rows.iter().map(|r| r.label.clone()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["image_id".to_string(), "domain".into(), "label".into()];
        header.extend((0..LATENT_DIM).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.image_id.clone(), r.domain.as_str().to_string(), r.label.as_str().to_string()];
            rec.extend(r.z.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.len() != 3 + LATENT_DIM || &header[0] != "image_id" || &header[1] != "domain" || &header[2] != "label" {
            return Err(Error::InvalidArgument(format!(
                "{} does not have the image_id,domain,label,f0..f{} header",
                path.display(),
                LATENT_DIM - 1
            )));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse_err = |what: &str| Error::InvalidArgument(format!("{}: bad {what} in row {:?}", path.display(), &rec[0]));
            let domain: DomainId = rec[1].parse().map_err(|_| parse_err("domain"))?;
            let z = (3..rec.len())
                .map(|i| rec[i].parse::<f32>().map_err(|_| parse_err("feature")))
                .collect::<Result<Vec<_>>>()?;
            rows.push(FeatureRow {
                image_id: rec[0].to_string(),
                domain,
                label: UnifiedClass::new(&rec[2]),
                z,
            });
        }
        Self::new(rows)
    }

    /// SHA-256 over ids, labels and feature bits.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.rows {
            h.update(r.image_id.as_bytes());
            h.update(r.domain.as_str().as_bytes());
            h.update(r.label.as_str().as_bytes());
            for v in &r.z {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Encodes every embedding in the store. Fails listing all ids whose blobs
/// are absent or damaged.
pub fn extract_features(store: &EmbeddingStore, ae: &CrossDomainAe) -> Result<FeatureTable> {
    let damaged = store.damaged_ids();
    if !damaged.is_empty() {
        return Err(Error::MissingEmbeddings(damaged));
    }
    let ids = store.ids();
    let mut rows = Vec::with_capacity(ids.len());
    for chunk in ids.chunks(16) {
        let samples = chunk.iter().map(|id| store.read(id)).collect::<Result<Vec<_>>>()?;
        let embs: Vec<&Array3<f32>> = samples.iter().map(|s| s.embedding.features()).collect();
        let z = ae.encode(&ae.embeddings_tensor(&embs)?)?.to_dtype(candle_core::DType::F32)?.to_vec2::<f32>()?;
        for (s, z) in samples.into_iter().zip(z) {
            rows.push(FeatureRow {
                image_id: s.embedding.image_id,
                domain: s.embedding.domain,
                label: s.label,
                z,
            });
        }
    }
    FeatureTable::new(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, v: f32) -> FeatureRow {
        FeatureRow {
            image_id: id.into(),
            domain: DomainId::Acevedo20,
            label: UnifiedClass::new("platelet"),
            z: (0..LATENT_DIM).map(|i| v * i as f32 + 0.1f32.powi(i as i32 % 7)).collect(),
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let t = FeatureTable::new(vec![row("b", 1.0 / 3.0), row("a", -2.5e-7)]).unwrap();
        assert_eq!(t.ids(), vec!["a", "b"]);
        let p = dir.path().join("f.csv");
        t.write_csv(&p).unwrap();
        let back = FeatureTable::read_csv(&p).unwrap();
        assert_eq!(back, t);
        let header = std::fs::read_to_string(&p).unwrap();
        assert!(header.starts_with("image_id,domain,label,f0,f1,"));
    }

    #[test]
    fn rejects_wrong_width_and_duplicates() {
        let mut r = row("a", 1.0);
        r.z.pop();
        assert!(FeatureTable::new(vec![r]).is_err());
        assert!(FeatureTable::new(vec![row("a", 1.0), row("a", 2.0)]).is_err());
    }
}
