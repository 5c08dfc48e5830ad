use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use ndarray::Array2;

use super::{DatasetId, DatasetSpec, Layout, Sample};
use crate::error::{Error, Result};
use crate::exec::Exec;

/// Mask binarization applied at load time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binarize {
    /// Raw values `>= t` become foreground.
    Threshold(u16),
    /// Any non-zero label becomes foreground.
    NonZero,
}

impl Default for Binarize {
    fn default() -> Self {
        Binarize::Threshold(128)
    }
}

impl Binarize {
    pub fn apply(self, raw: u16) -> u8 {
        match self {
            Binarize::Threshold(t) => u8::from(raw >= t),
            Binarize::NonZero => u8::from(raw > 0),
        }
    }
}

/// Every split of one dataset, each in slice order.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedDataset {
    pub dataset_id: DatasetId,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Slices without masks (VNC stack 2); empty when the layout has none.
    pub unlabelled: Vec<Sample>,
}

pub fn load_dataset(spec: &DatasetSpec, binarize: Binarize) -> Result<LoadedDataset> {
    load_dataset_with(spec, binarize, Exec::default())
}

pub fn load_dataset_with(spec: &DatasetSpec, binarize: Binarize, exec: Exec) -> Result<LoadedDataset> {
    let root = &spec.root_path;
    if !root.is_dir() {
        return Err(Error::Layout(format!("dataset root {} does not exist", root.display())));
    }
    let id = spec.dataset_id.clone();
    match spec.layout {
        Layout::LucchiSplitDirs => {
            let train = load_pairs(&root.join("train/img"), &root.join("train/mask"), &id, binarize, exec)?;
            let test = load_pairs(&root.join("test/img"), &root.join("test/mask"), &id, binarize, exec)?;
            check_count("training", train.len(), spec.expected_train_count)?;
            check_count("test", test.len(), spec.expected_test_count)?;
            Ok(LoadedDataset {
                dataset_id: id,
                train,
                test,
                unlabelled: Vec::new(),
            })
        }
        Layout::VncStacks => {
            let mut labelled =
                load_pairs(&root.join("stack1/img"), &root.join("stack1/mask"), &id, binarize, exec)?;
            let n_train = spec
                .expected_train_count
                .ok_or_else(|| Error::Config("stack layout needs the number of training slices".into()))?;
            if let Some(n_test) = spec.expected_test_count {
                check_count("labelled", labelled.len(), n_train + n_test)?;
            } else if labelled.len() <= n_train {
                return Err(Error::Layout(format!(
                    "stack 1 has {} labelled slices, need more than {n_train}",
                    labelled.len()
                )));
            }
            let test = labelled.split_off(n_train);
            let stack2 = root.join("stack2/img");
            let unlabelled = if stack2.is_dir() {
                let files = list_slices(&stack2)?;
                exec.try_map(&files, |f| load_one(f, None, &id, binarize, 0))?
                    .into_iter()
                    .enumerate()
                    .map(|(i, mut s)| {
                        s.slice_index = i;
                        s
                    })
                    .collect()
            } else {
                Vec::new()
            };
            Ok(LoadedDataset {
                dataset_id: id,
                train: labelled,
                test,
                unlabelled,
            })
        }
    }
}

fn check_count(what: &str, found: usize, expected: impl Into<Option<usize>>) -> Result<()> {
    let Some(expected) = expected.into() else {
        return Ok(());
    };
    if found != expected {
        return Err(Error::Layout(format!(
            "expected {expected} {what} slices, found {found}"
        )));
    }
    Ok(())
}

fn list_slices(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::Layout(format!("missing directory {}", dir.display())));
    }
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
            .unwrap_or(false);
        if path.is_file() && is_image {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

fn load_pairs(
    img_dir: &Path,
    mask_dir: &Path,
    id: &DatasetId,
    binarize: Binarize,
    exec: Exec,
) -> Result<Vec<Sample>> {
    let images = list_slices(img_dir)?;
    let masks = list_slices(mask_dir)?;
    if images.len() != masks.len() {
        let (longer, kind) = if images.len() > masks.len() {
            (&images, "mask")
        } else {
            (&masks, "image")
        };
        let orphan = &longer[images.len().min(masks.len())];
        return Err(Error::Layout(format!(
            "missing {kind} for slice {} ({} images, {} masks)",
            orphan.display(),
            images.len(),
            masks.len()
        )));
    }
    let pairs: Vec<(usize, &PathBuf, &PathBuf)> = images
        .iter()
        .zip(&masks)
        .enumerate()
        .map(|(i, (a, b))| (i, a, b))
        .collect();
    exec.try_map(&pairs, |&(i, img, mask)| load_one(img, Some(mask), id, binarize, i))
}

fn load_one(
    img: &Path,
    mask: Option<&Path>,
    id: &DatasetId,
    binarize: Binarize,
    slice_index: usize,
) -> Result<Sample> {
    let gray = read_gray(img)?;
    let mask = mask.map(|m| read_mask(m, binarize)).transpose()?;
    let name = img
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Sample::from_gray(&gray, mask, id.clone(), slice_index, name)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn is_16bit(img: &DynamicImage) -> bool {
    matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    )
}

/// Decode a slice to a single plane in `[0, 1]` (divided by the dtype maximum).
pub fn read_gray(path: &Path) -> Result<Array2<f32>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = if is_16bit(&img) {
        img.to_luma16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
    } else if matches!(img, DynamicImage::ImageRgb32F(_) | DynamicImage::ImageRgba32F(_)) {
        img.to_luma32f().into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect()
    } else {
        img.to_luma8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
    };
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

/// Decode a mask and binarize its raw integer values.
pub fn read_mask(path: &Path, binarize: Binarize) -> Result<Array2<u8>> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<u8> = if is_16bit(&img) {
        img.to_luma16().into_raw().into_iter().map(|v| binarize.apply(v)).collect()
    } else {
        img.to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| binarize.apply(u16::from(v)))
            .collect()
    };
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}
