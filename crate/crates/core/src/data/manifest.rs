//! Manifest-driven ingestion of real stereo datasets.
//!
//! One record per line: `pair_id<TAB>left_path<TAB>right_path<TAB>split`.
//! Blank lines and lines starting with `#` are ignored; relative paths are
//! resolved against the dataset root.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use super::resample::{load_rgb, preprocess_cityscape, preprocess_kitti};
use super::{DatasetName, DatasetSpec, PairDataset, Split, StereoPair};
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub pair_id: String,
    pub left: PathBuf,
    pub right: PathBuf,
    pub split: Split,
}

pub fn parse_manifest(text: &str, root: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [pair_id, left, right, split] = fields[..] else {
            return Err(Error::Config(format!(
                "manifest line {}: expected 4 tab-separated fields, got {}",
                n + 1,
                fields.len()
            )));
        };
        let split: Split = split
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("manifest line {}: unknown split `{split}`", n + 1)))?;
        entries.push(ManifestEntry {
            pair_id: pair_id.to_string(),
            left: root.join(left),
            right: root.join(right),
            split,
        });
    }
    Ok(entries)
}

/// One split of a real dataset.
#[derive(Debug, Clone)]
pub struct ManifestDataset {
    name: DatasetName,
    entries: Vec<ManifestEntry>,
}

impl ManifestDataset {
    pub fn open(spec: &DatasetSpec, split: Split) -> Result<Self> {
        let root = spec
            .root
            .as_deref()
            .ok_or_else(|| Error::Config(format!("dataset {:?} needs a root", spec.name)))?;
        if !root.is_dir() {
            return Err(Error::MissingData(format!("dataset root {} does not exist", root.display())));
        }
        let manifest = spec.manifest.clone().unwrap_or_else(|| root.join(MANIFEST_FILE));
        let text = std::fs::read_to_string(&manifest).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::MissingData(format!("manifest {} does not exist", manifest.display()))
            }
            _ => Error::io(&manifest, e),
        })?;
        let all = parse_manifest(&text, root)?;

        let mut seen: HashMap<&str, Split> = HashMap::new();
        for e in &all {
            if let Some(prev) = seen.insert(&e.pair_id, e.split) {
                return Err(Error::Config(format!(
                    "pair_id {} appears in both {} and {}",
                    e.pair_id,
                    prev.name(),
                    e.split.name()
                )));
            }
        }

        let entries: Vec<ManifestEntry> = all.into_iter().filter(|e| e.split == split).collect();
        if let Some(sizes) = spec.name.split_sizes() {
            let want = sizes.get(split);
            if entries.len() != want {
                return Err(Error::MissingData(format!(
                    "{:?} {} split has {} pairs in the manifest, expected {want}",
                    spec.name,
                    split.name(),
                    entries.len()
                )));
            }
        }
        let missing: Vec<&str> = entries
            .iter()
            .filter(|e| !e.left.is_file() || !e.right.is_file())
            .map(|e| e.pair_id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingData(format!(
                "{} pairs of the {} split have missing image files: {}",
                missing.len(),
                split.name(),
                missing.join(", ")
            )));
        }
        Ok(Self {
            name: spec.name,
            entries,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    fn preprocess(&self, path: &Path) -> Result<crate::image_tensor::ImageTensor> {
        let img = load_rgb(path)?;
        match self.name {
            DatasetName::Kittistereo => preprocess_kitti(&img),
            _ => preprocess_cityscape(&img),
        }
    }
}

impl PairDataset for ManifestDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn pair(&self, index: usize) -> Result<StereoPair> {
        let e = self
            .entries
            .get(index)
            .ok_or_else(|| Error::invalid(format!("pair index {index} out of range {}", self.entries.len())))?;
        Ok(StereoPair {
            pair_id: e.pair_id.clone(),
            x: self.preprocess(&e.left)?,
            x_side: self.preprocess(&e.right)?,
        })
    }

    fn pair_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.pair_id.clone()).collect()
    }
}
