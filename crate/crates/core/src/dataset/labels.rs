use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::DomainId;
use crate::{Error, Result};

pub const UNIFIED_CLASS_COUNT: usize = 13;

const BUILTIN_MAP: &str = include_str!("../../config/label_map.json");
const BUILTIN_NOTES: &str = include_str!("../../config/label_map.notes.json");

/// One of the 13 unified cell classes shared by both domains.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnifiedClass(String);

impl UnifiedClass {
    pub fn new(name: impl Into<String>) -> Self {
        UnifiedClass(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for UnifiedClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Per-domain mapping from raw dataset labels (directory names) to unified classes.
///
/// On disk this is a JSON object `{domain: {raw_label: unified_label}}`. An
/// optional sibling `<stem>.notes.json` with the same shape carries a
/// provenance note per rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    rules: BTreeMap<DomainId, BTreeMap<String, UnifiedClass>>,
    notes: BTreeMap<DomainId, BTreeMap<String, String>>,
}

impl LabelMap {
    /// Builds and validates a map.
    pub fn new(rules: BTreeMap<DomainId, BTreeMap<String, UnifiedClass>>) -> Result<Self> {
        let map = LabelMap {
            rules,
            notes: BTreeMap::new(),
        };
        map.validate()?;
        Ok(map)
    }

    /// The map shipped with the crate (`config/label_map.json`).
    pub fn builtin() -> Self {
        let mut map = Self::from_json(BUILTIN_MAP).expect("builtin label map is valid");
        map.notes = serde_json::from_str(BUILTIN_NOTES).expect("builtin label notes parse");
        map
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rules: BTreeMap<DomainId, BTreeMap<String, UnifiedClass>> =
            serde_json::from_str(text).map_err(|e| Error::json("label map", e))?;
        Self::new(rules)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = Self::from_json(&text)?;
        let notes_path = path.with_extension("notes.json");
        if notes_path.exists() {
            let notes = std::fs::read_to_string(&notes_path).map_err(|e| Error::io(&notes_path, e))?;
            map.notes = serde_json::from_str(&notes).map_err(|e| Error::json("label notes", e))?;
        }
        Ok(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rules).expect("label map serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        let classes = self.classes();
        if classes.len() != UNIFIED_CLASS_COUNT {
            return Err(Error::LabelMap(format!(
                "expected exactly {UNIFIED_CLASS_COUNT} unified classes, found {}: {:?}",
                classes.len(),
                classes.iter().map(|c| c.as_str()).collect::<Vec<_>>()
            )));
        }
        let raw_count: usize = self.rules.values().map(|m| m.len()).sum();
        if raw_count < UNIFIED_CLASS_COUNT {
            return Err(Error::LabelMap(format!(
                "only {raw_count} raw labels; at least {UNIFIED_CLASS_COUNT} are needed"
            )));
        }
        Ok(())
    }

    pub fn lookup(&self, domain: DomainId, raw_label: &str) -> Option<&UnifiedClass> {
        self.rules.get(&domain).and_then(|m| m.get(raw_label))
    }

    pub fn note(&self, domain: DomainId, raw_label: &str) -> Option<&str> {
        self.notes
            .get(&domain)
            .and_then(|m| m.get(raw_label))
            .map(String::as_str)
    }

    /// Sorted set of unified classes in the image of the map.
    pub fn classes(&self) -> Vec<UnifiedClass> {
        self.rules
            .values()
            .flat_map(|m| m.values().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn raw_labels(&self, domain: DomainId) -> Vec<&str> {
        self.rules
            .get(&domain)
            .map(|m| m.keys().map(String::as_str).collect())
            .unwrap_or_default()
    }

    /// SHA-256 of the canonical JSON form of the rules.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&self.rules).expect("label map serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_covers_thirteen_classes() {
        let map = LabelMap::builtin();
        assert_eq!(map.classes().len(), 13);
        assert_eq!(map.raw_labels(DomainId::Matek19).len(), 15);
        assert!(map.raw_labels(DomainId::Acevedo20).len() >= 8);
        assert!(map.note(DomainId::Matek19, "KSC").is_some());
    }

    #[test]
    fn eos_maps_to_eosinophil() {
        let map = LabelMap::builtin();
        assert_eq!(
            map.lookup(DomainId::Matek19, "EOS").unwrap().as_str(),
            "eosinophil"
        );
        assert!(map.lookup(DomainId::Matek19, "XYZ").is_none());
    }

    #[test]
    fn rejects_wrong_class_count() {
        let err = LabelMap::from_json(r#"{"matek19": {"A": "a", "B": "b"}}"#).unwrap_err();
        assert!(matches!(err, Error::LabelMap(_)));
    }

    #[test]
    fn hash_is_stable_across_round_trip() {
        let map = LabelMap::builtin();
        let again = LabelMap::from_json(&map.to_json()).unwrap();
        assert_eq!(map.hash(), again.hash());
    }
}
