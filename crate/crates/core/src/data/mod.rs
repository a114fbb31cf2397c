//! Stereo-pair datasets: real-data ingestion through a manifest, the two
//! preprocessing pipelines and a synthetic generator.

mod manifest;
mod resample;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::image_tensor::{ImageDims, ImageTensor};
use crate::{Error, Result};

pub use manifest::{parse_manifest, ManifestDataset, ManifestEntry, MANIFEST_FILE};
pub use resample::{
    area_resample, crop, kitti_crop_window, load_rgb, preprocess_cityscape, preprocess_kitti, save_png,
    PAPER_HEIGHT, PAPER_WIDTH,
};
pub use synthetic::{generate_split, generate_synthetic, synthetic_pair, CorrelationMode, SyntheticConfig};

/// A transmitted view `x` and the correlated view `x_side`.
///
/// By convention `x` is the left camera and `x_side` the right one.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoPair {
    pub pair_id: String,
    pub x: ImageTensor,
    pub x_side: ImageTensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const fn new(train: usize, val: usize, test: usize) -> Self {
        Self { train, val, test }
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetName {
    Cityscape,
    Kittistereo,
    Synthetic,
}

impl DatasetName {
    /// Fixed split sizes of the real datasets.
    pub fn split_sizes(self) -> Option<SplitSizes> {
        match self {
            DatasetName::Cityscape => Some(SplitSizes::new(2975, 500, 1525)),
            DatasetName::Kittistereo => Some(SplitSizes::new(1576, 790, 790)),
            DatasetName::Synthetic => None,
        }
    }
}

/// Where a dataset comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub name: DatasetName,
    /// Dataset root for real datasets; manifest paths are relative to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    /// Manifest path; defaults to `<root>/manifest.tsv`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

impl DatasetSpec {
    pub fn synthetic(cfg: SyntheticConfig) -> Self {
        Self {
            name: DatasetName::Synthetic,
            root: None,
            manifest: None,
            synthetic: Some(cfg),
        }
    }

    pub fn real(name: DatasetName, root: impl Into<PathBuf>) -> Self {
        Self {
            name,
            root: Some(root.into()),
            manifest: None,
            synthetic: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.name, &self.synthetic, &self.root) {
            (DatasetName::Synthetic, Some(cfg), _) => cfg.validate(),
            (DatasetName::Synthetic, None, _) => {
                Err(Error::Config("synthetic dataset needs a [dataset.synthetic] table".into()))
            }
            (_, Some(_), _) => Err(Error::Config(
                "a synthetic table is only valid for the synthetic dataset".into(),
            )),
            (_, None, None) => Err(Error::Config(format!("dataset {:?} needs a root", self.name))),
            (_, None, Some(_)) => Ok(()),
        }
    }

    /// Image dims after preprocessing.
    pub fn image_dims(&self) -> ImageDims {
        match &self.synthetic {
            Some(cfg) if self.name == DatasetName::Synthetic => cfg.dims,
            _ => ImageDims::new(3, PAPER_HEIGHT, PAPER_WIDTH),
        }
    }
}

/// Random-access source of stereo pairs with a stable order.
pub trait PairDataset: Send + Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn pair(&self, index: usize) -> Result<StereoPair>;

    fn pair_ids(&self) -> Vec<String>;
}

/// Pairs held in memory.
#[derive(Debug, Clone, Default)]
pub struct InMemoryDataset {
    pairs: Vec<StereoPair>,
}

impl InMemoryDataset {
    pub fn new(pairs: Vec<StereoPair>) -> Self {
        Self { pairs }
    }

    pub fn pairs(&self) -> &[StereoPair] {
        &self.pairs
    }
}

impl PairDataset for InMemoryDataset {
    fn len(&self) -> usize {
        self.pairs.len()
    }

    fn pair(&self, index: usize) -> Result<StereoPair> {
        self.pairs
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("pair index {index} out of range {}", self.pairs.len())))
    }

    fn pair_ids(&self) -> Vec<String> {
        self.pairs.iter().map(|p| p.pair_id.clone()).collect()
    }
}

/// Opens one split. Real datasets are validated eagerly (manifest, split
/// sizes, file presence) and decoded lazily.
pub fn load_split(spec: &DatasetSpec, split: Split) -> Result<Box<dyn PairDataset>> {
    spec.validate()?;
    match spec.name {
        DatasetName::Synthetic => {
            let cfg = spec.synthetic.as_ref().expect("validated");
            Ok(Box::new(InMemoryDataset::new(generate_split(cfg, split)?)))
        }
        _ => Ok(Box::new(ManifestDataset::open(spec, split)?)),
    }
}
