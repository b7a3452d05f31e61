//! Dataset index files: a JSON manifest listing image/annotation pairs.
//!
//! The index lives at the dataset root and references files by paths
//! relative to its own directory, so a dataset directory can be moved
//! wholesale. Loading validates that every referenced file exists.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::counting::Point;
use crate::data::{annotations, ppm};
use crate::error::{MocError, Result};
use crate::nn::{Scalar, Tensor};

/// One sample: an image file and its point-annotation file, both relative
/// to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
}

/// Contents of a dataset index file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Number of object categories annotations may reference.
    pub k: usize,
    /// Free-form split name ("train", "val", ...).
    pub split: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Writes the manifest as pretty-printed JSON.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text)?;
        Ok(())
    }
}

/// A loaded dataset: a validated manifest plus the directory its relative
/// paths resolve against.
#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    manifest: Manifest,
}

impl Dataset {
    /// Loads and validates an index file. Malformed JSON is a format error;
    /// a zero category count or a missing referenced file is a config error.
    pub fn load(index_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(index_path)?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| MocError::Format(format!("bad dataset index {}: {e}", index_path.display())))?;
        if manifest.k == 0 {
            return Err(MocError::Config("dataset index declares zero categories".into()));
        }
        let root = index_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        for (i, entry) in manifest.entries.iter().enumerate() {
            for (kind, rel) in [("image", &entry.image), ("annotation", &entry.annotation)] {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(MocError::Config(format!(
                        "dataset entry {i}: {kind} file {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(Self { root, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    /// Number of object categories.
    pub fn categories(&self) -> usize {
        self.manifest.k
    }

    pub fn split(&self) -> &str {
        &self.manifest.split
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.manifest.entries[i].image)
    }

    pub fn annotation_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.manifest.entries[i].annotation)
    }

    /// Loads sample `i`'s image as an `[h, w, 3]` tensor in `[0, 1]`.
    pub fn load_image<F: Scalar>(&self, i: usize) -> Result<Tensor<F>> {
        ppm::read_ppm(&self.image_path(i))
    }

    /// Loads sample `i`'s annotated object centers.
    pub fn load_points(&self, i: usize) -> Result<Vec<Point>> {
        annotations::read_annotations(&self.annotation_path(i), self.manifest.k)
    }
}
