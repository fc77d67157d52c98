use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetManifest, UnifiedClass};
use crate::{Error, Result};

/// Fold index per image id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    /// Ids in fold `f`, sorted.
    pub fn members(&self, f: usize) -> Vec<&str> {
        self.fold_of
            .iter()
            .filter(|(_, v)| **v == f)
            .map(|(k, _)| k.as_str())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json("folds", e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let folds: FoldAssignment =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        if let Some((id, f)) = folds.fold_of.iter().find(|(_, f)| **f >= folds.k) {
            return Err(Error::InvalidArgument(format!(
                "fold {f} for {id} is outside [0, {})",
                folds.k
            )));
        }
        Ok(folds)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("folds serialize")))
    }
}

/// Classes with fewer than `k` members; these still get a partition but some folds miss them.
pub fn undersized_classes(manifest: &DatasetManifest, k: usize) -> Vec<UnifiedClass> {
    let mut counts: BTreeMap<&UnifiedClass, usize> = BTreeMap::new();
    for e in &manifest.entries {
        *counts.entry(&e.unified_label).or_default() += 1;
    }
    counts
        .into_iter()
        .filter(|(_, n)| *n < k)
        .map(|(c, _)| c.clone())
        .collect()
}

/// Stratified k-fold assignment.
///
/// Within each class (taken in sorted order) the ids are sorted, shuffled
/// with a single seeded stream and dealt round-robin; the starting fold
/// carries over between classes so overall fold sizes also stay within one.
pub fn stratified_folds(manifest: &DatasetManifest, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    let mut by_class: BTreeMap<&UnifiedClass, Vec<&str>> = BTreeMap::new();
    for e in &manifest.entries {
        by_class.entry(&e.unified_label).or_default().push(&e.image_id);
    }
    for class in undersized_classes(manifest, k) {
        log::warn!("class {class} has fewer than {k} members; folds will not all contain it");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = BTreeMap::new();
    let mut offset = 0;
    for ids in by_class.values_mut() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        for (i, id) in ids.iter().enumerate() {
            fold_of.insert((*id).to_string(), (offset + i) % k);
        }
        offset = (offset + ids.len()) % k;
    }
    Ok(FoldAssignment { k, seed, fold_of })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DomainId, ManifestEntry};
    use proptest::prelude::*;

    fn manifest(class_sizes: &[usize]) -> DatasetManifest {
        let mut entries = Vec::new();
        for (c, n) in class_sizes.iter().enumerate() {
            for i in 0..*n {
                entries.push(ManifestEntry {
                    image_id: format!("matek19/c{c}/{i:04}.png"),
                    path: String::new(),
                    domain: DomainId::Matek19,
                    raw_label: format!("c{c}"),
                    unified_label: UnifiedClass::new(format!("class{c:02}")),
                });
            }
        }
        DatasetManifest::new(entries, BTreeMap::new(), String::new()).unwrap()
    }

    fn per_class_counts(m: &DatasetManifest, f: &FoldAssignment) -> BTreeMap<String, Vec<usize>> {
        let mut out: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for e in &m.entries {
            let v = out.entry(e.unified_label.to_string()).or_insert_with(|| vec![0; f.k]);
            v[f.fold_of[&e.image_id]] += 1;
        }
        out
    }

    #[test]
    fn single_class_ten_items() {
        let m = manifest(&[10]);
        let f = stratified_folds(&m, 5, 1).unwrap();
        assert_eq!(per_class_counts(&m, &f)["class00"], vec![2; 5]);
    }

    #[test]
    fn thirteen_by_fifty_is_even() {
        let m = manifest(&[50; 13]);
        let f = stratified_folds(&m, 5, 7).unwrap();
        for counts in per_class_counts(&m, &f).values() {
            assert_eq!(counts, &vec![10; 5]);
        }
    }

    #[test]
    fn order_independent() {
        let m = manifest(&[7, 3, 12]);
        let mut shuffled = m.clone();
        shuffled.entries.reverse();
        assert_eq!(stratified_folds(&m, 5, 3).unwrap(), stratified_folds(&shuffled, 5, 3).unwrap());
    }

    #[test]
    fn small_class_still_partitioned() {
        let m = manifest(&[2, 9]);
        assert_eq!(undersized_classes(&m, 5).len(), 1);
        let f = stratified_folds(&m, 5, 0).unwrap();
        assert_eq!(f.fold_of.len(), 11);
    }

    #[test]
    fn k_below_two_rejected() {
        assert!(stratified_folds(&manifest(&[4]), 1, 0).is_err());
    }

    proptest! {
        #[test]
        fn partition_and_balance(sizes in proptest::collection::vec(1usize..40, 1..8), k in 2usize..7, seed in any::<u64>()) {
            let m = manifest(&sizes);
            let f = stratified_folds(&m, k, seed).unwrap();
            prop_assert_eq!(f.fold_of.len(), m.len());
            for e in &m.entries {
                prop_assert!(f.fold_of[&e.image_id] < k);
            }
            for counts in per_class_counts(&m, &f).values() {
                let max = counts.iter().max().unwrap();
                let min = counts.iter().min().unwrap();
                prop_assert!(max - min <= 1);
            }
        }
    }
}
