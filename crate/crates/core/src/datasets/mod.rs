//! EM image stacks: loading, splitting, resizing and intensity normalization.

mod loader;
mod normalize;
mod resize;
mod split;
pub mod synthetic;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loader::{load_dataset, load_dataset_with, read_gray, read_mask, Binarize, LoadedDataset};
pub use normalize::{normalize, IMAGENET_MEAN, IMAGENET_STD};
pub use resize::{
    pad_to_patch_multiple, resize_bilinear, resize_nearest, resize_to_patch_grid, snapped_dims,
    Interpolation, ResizePolicy,
};
pub use split::{make_split, split_indices, SplitConfig};

/// Which collection a slice came from. Synthetic or user datasets are `Other(name)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DatasetId {
    Lucchi,
    Vnc,
    Other(String),
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetId::Lucchi => f.write_str("lucchi"),
            DatasetId::Vnc => f.write_str("vnc"),
            DatasetId::Other(name) => f.write_str(name),
        }
    }
}

impl FromStr for DatasetId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lucchi" | "lucchi++" => Ok(DatasetId::Lucchi),
            "vnc" => Ok(DatasetId::Vnc),
            "" => Err(Error::Config("empty dataset id".into())),
            _ => Ok(DatasetId::Other(s.to_string())),
        }
    }
}

impl Serialize for DatasetId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DatasetId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// One EM slice. `image` is `(3, H, W)`: grayscale replicated over three channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Array3<f32>,
    pub mask: Option<Array2<u8>>,
    pub dataset_id: DatasetId,
    pub slice_index: usize,
    pub name: String,
}

impl Sample {
    pub fn new(
        image: Array3<f32>,
        mask: Option<Array2<u8>>,
        dataset_id: DatasetId,
        slice_index: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        let (c, h, w) = image.dim();
        if c != 3 {
            return Err(Error::Integrity(format!("{name}: image has {c} channels, expected 3")));
        }
        if h == 0 || w == 0 {
            return Err(Error::Integrity(format!("{name}: empty image")));
        }
        if let Some(m) = &mask {
            if m.dim() != (h, w) {
                return Err(Error::Integrity(format!(
                    "{name}: image is {h}x{w} but mask is {}x{}",
                    m.dim().0,
                    m.dim().1
                )));
            }
        }
        Ok(Self {
            image,
            mask,
            dataset_id,
            slice_index,
            name,
        })
    }

    /// Build a sample from a single grayscale plane.
    pub fn from_gray(
        gray: &Array2<f32>,
        mask: Option<Array2<u8>>,
        dataset_id: DatasetId,
        slice_index: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let (h, w) = gray.dim();
        let image = Array3::from_shape_fn((3, h, w), |(_, y, x)| gray[[y, x]]);
        Self::new(image, mask, dataset_id, slice_index, name)
    }

    pub fn height(&self) -> usize {
        self.image.dim().1
    }

    pub fn width(&self) -> usize {
        self.image.dim().2
    }
}

/// Directory conventions of the two public EM datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// `train/img`, `train/mask`, `test/img`, `test/mask`.
    LucchiSplitDirs,
    /// `stack1/img`, `stack1/mask` (labelled, split by slice order) and `stack2/img` (unlabelled).
    VncStacks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    pub layout: Layout,
    pub dataset_id: DatasetId,
    /// Checked on load when set. VNC needs the training count to split stack 1.
    pub expected_train_count: Option<usize>,
    pub expected_test_count: Option<usize>,
}

impl DatasetSpec {
    pub fn lucchi(root: impl Into<PathBuf>) -> Self {
        Self {
            root_path: root.into(),
            layout: Layout::LucchiSplitDirs,
            dataset_id: DatasetId::Lucchi,
            expected_train_count: Some(165),
            expected_test_count: Some(165),
        }
    }

    pub fn vnc(root: impl Into<PathBuf>) -> Self {
        Self {
            root_path: root.into(),
            layout: Layout::VncStacks,
            dataset_id: DatasetId::Vnc,
            expected_train_count: Some(17),
            expected_test_count: Some(3),
        }
    }

    /// A user or synthetic dataset in the split-directory layout.
    pub fn split_dirs(root: impl Into<PathBuf>, dataset_id: DatasetId) -> Self {
        Self {
            root_path: root.into(),
            layout: Layout::LucchiSplitDirs,
            dataset_id,
            expected_train_count: None,
            expected_test_count: None,
        }
    }

    pub fn with_counts(mut self, train: usize, test: usize) -> Self {
        self.expected_train_count = Some(train);
        self.expected_test_count = Some(test);
        self
    }
}
