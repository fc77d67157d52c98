//! Dataset discovery, label unification, image loading and fold assignment.

mod folds;
mod image;
mod labels;
mod manifest;

pub use self::folds::{stratified_folds, undersized_classes, FoldAssignment};
pub use self::image::{load_image, CellImage, IMAGE_SIDE};
pub(crate) use self::image::{resize_chw, resize_plane};
pub use self::labels::{LabelMap, UnifiedClass, UNIFIED_CLASS_COUNT};
pub use self::manifest::{scan_dataset, DatasetManifest, ManifestEntry, IMAGE_EXTENSIONS};

use std::fmt;

use serde::{Deserialize, Serialize};

/// The two acquisition domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainId {
    Matek19,
    Acevedo20,
}

impl DomainId {
    pub const ALL: [DomainId; 2] = [DomainId::Matek19, DomainId::Acevedo20];

    pub fn as_str(&self) -> &'static str {
        match self {
            DomainId::Matek19 => "matek19",
            DomainId::Acevedo20 => "acevedo20",
        }
    }

    /// Name used in rendered tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            DomainId::Matek19 => "Matek-19",
            DomainId::Acevedo20 => "Acevedo-20",
        }
    }

    pub fn other(&self) -> DomainId {
        match self {
            DomainId::Matek19 => DomainId::Acevedo20,
            DomainId::Acevedo20 => DomainId::Matek19,
        }
    }
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DomainId {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "matek19" => Ok(DomainId::Matek19),
            "acevedo20" => Ok(DomainId::Acevedo20),
            _ => Err(crate::Error::InvalidArgument(format!("unknown domain {s:?}"))),
        }
    }
}
