//! Where patch rasters come from: a dataset directory, an in-memory map, or on-the-fly
//! regeneration from a synthetic dataset manifest.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::heightfield::tiff::decode_image_with;
use crate::heightfield::{DatasetManifest, HeightImage, LabeledPatch};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

pub trait PatchSource: Sync {
    fn load(&self, item_id: &str) -> Result<HeightImage>;
}

/// TIFF patches listed in `<root>/manifest.json`.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    root: PathBuf,
    manifest: DatasetManifest,
    files: HashMap<String, String>,
}

impl DirectorySource {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = DatasetManifest::from_json(&text)?;
        let files = manifest
            .patches
            .iter()
            .map(|p| (p.item_id.clone(), p.file.clone()))
            .collect();
        Ok(DirectorySource { root, manifest, files })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, item_id: &str) -> Result<PathBuf> {
        self.files
            .get(item_id)
            .map(|f| self.root.join(f))
            .ok_or_else(|| Error::Dataset(format!("item `{item_id}` is not in the manifest")))
    }
}

impl PatchSource for DirectorySource {
    fn load(&self, item_id: &str) -> Result<HeightImage> {
        let path = self.path_of(item_id)?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(decode_image_with(&bytes, self.manifest.config.calibration)?)
    }
}

/// Regenerates patches from their manifest seeds on demand.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    manifest: DatasetManifest,
    by_id: HashMap<String, usize>,
}

impl SyntheticSource {
    pub fn new(manifest: DatasetManifest) -> Self {
        let by_id = manifest
            .patches
            .iter()
            .enumerate()
            .map(|(i, p)| (p.item_id.clone(), i))
            .collect();
        SyntheticSource { manifest, by_id }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }
}

impl PatchSource for SyntheticSource {
    fn load(&self, item_id: &str) -> Result<HeightImage> {
        let i = self
            .by_id
            .get(item_id)
            .ok_or_else(|| Error::Dataset(format!("item `{item_id}` is not in the manifest")))?;
        Ok(self.manifest.synthesize(&self.manifest.patches[*i])?.into_image())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: HashMap<String, HeightImage>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item_id: impl Into<String>, image: HeightImage) {
        self.images.insert(item_id.into(), image);
    }

    pub fn from_patches(manifest: &DatasetManifest, patches: Vec<LabeledPatch>) -> Self {
        let mut s = Self::new();
        for (entry, patch) in manifest.patches.iter().zip(patches) {
            s.insert(entry.item_id.clone(), patch.into_image());
        }
        s
    }
}

impl PatchSource for MemorySource {
    fn load(&self, item_id: &str) -> Result<HeightImage> {
        self.images
            .get(item_id)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("item `{item_id}` is not loaded")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heightfield::{default_counts, synthesize_dataset, SynthesisConfig};

    #[test]
    fn synthetic_and_memory_sources_agree() {
        let (patches, manifest) = synthesize_dataset(&SynthesisConfig::default(), &default_counts(25)).unwrap();
        let ids: Vec<String> = manifest.patches.iter().map(|p| p.item_id.clone()).collect();
        let synth = SyntheticSource::new(manifest.clone());
        let mem = MemorySource::from_patches(&manifest, patches);
        for id in &ids {
            assert_eq!(synth.load(id).unwrap(), mem.load(id).unwrap());
        }
        assert!(synth.load("nope").is_err());
        assert!(mem.load("nope").is_err());
    }
}
