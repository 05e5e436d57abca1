//! Image ingestion, perceptual-hash deduplication and stratified splitting.

mod dedup;
mod phash;
mod split;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::ClassCatalog;
use crate::{Error, Result};

pub use dedup::{dedup, DedupResult, DupCluster, DupKind, HashedImage};
pub use phash::{hamming, phash, phash_bytes, phash_file, PHash};
pub use split::{stratified_split, Split, SplitFractions, SplitManifest};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Original,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub path: String,
    pub class_names: Vec<String>,
    #[serde(default)]
    pub origin: Origin,
    pub width: u32,
    pub height: u32,
}

impl ImageRecord {
    /// The stratification key: the first pre-assigned class.
    pub fn primary_class(&self) -> &str {
        self.class_names.first().map(String::as_str).unwrap_or("")
    }

    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Image(format!("image `{}` has zero size", self.id)));
        }
        if self.class_names.is_empty() {
            return Err(Error::InvalidArgument(format!("image `{}` has no class", self.id)));
        }
        if !self.class_names.iter().any(|c| catalog.contains(c)) {
            return Err(Error::UnknownClass(format!("{} (image `{}`)", self.class_names.join(", "), self.id)));
        }
        Ok(())
    }
}

/// Reads image dimensions without decoding the pixel data.
pub fn image_dimensions(path: impl AsRef<Path>) -> Result<(u32, u32)> {
    let path = path.as_ref();
    image::image_dimensions(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}
