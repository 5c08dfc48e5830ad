use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bilinear,
    Nearest,
}

/// Longest-edge rescale followed by snapping both sides to the patch grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizePolicy {
    pub target_longest_edge: usize,
    pub patch_size: usize,
    pub image_interpolation: Interpolation,
    pub mask_interpolation: Interpolation,
}

impl ResizePolicy {
    pub fn new(target_longest_edge: usize, patch_size: usize) -> Self {
        Self {
            target_longest_edge,
            patch_size,
            image_interpolation: Interpolation::Bilinear,
            mask_interpolation: Interpolation::Nearest,
        }
    }

    /// Target = native longest edge snapped down to a patch multiple.
    pub fn native_default(height: usize, width: usize, patch_size: usize) -> Self {
        let longest = height.max(width);
        let p = patch_size.max(1);
        Self::new((longest / p).max(1) * p, patch_size)
    }
}

fn snap(side: f64, p: usize) -> usize {
    ((side / p as f64).round_ties_even() as usize).max(1) * p
}

/// Output `(height, width)` for an input of `(height, width)` under `policy`.
pub fn snapped_dims(height: usize, width: usize, policy: &ResizePolicy) -> Result<(usize, usize)> {
    let p = policy.patch_size;
    if p == 0 {
        return Err(Error::Config("patch_size must be at least 1".into()));
    }
    if policy.target_longest_edge < p {
        return Err(Error::Config(format!(
            "target longest edge {} is smaller than one {p}px patch",
            policy.target_longest_edge
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::Shape("cannot resize an empty image".into()));
    }
    let longest = height.max(width) as f64;
    let target = policy.target_longest_edge as f64;
    let h = height as f64 * target / longest;
    let w = width as f64 * target / longest;
    Ok((snap(h, p), snap(w, p)))
}

fn source_coord(i: usize, n_in: usize, n_out: usize) -> (usize, usize, f32) {
    let scale = n_in as f64 / n_out as f64;
    let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, (src - i0 as f64) as f32)
}

/// Half-pixel bilinear resize of a `(C, H, W)` image (no antialiasing).
pub fn resize_bilinear(image: &Array3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, h, w) = image.dim();
    if (h, w) == (out_h, out_w) {
        return image.clone();
    }
    let rows: Vec<_> = (0..out_h).map(|y| source_coord(y, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|x| source_coord(x, w, out_w)).collect();
    Array3::from_shape_fn((c, out_h, out_w), |(ch, y, x)| {
        let (y0, y1, ty) = rows[y];
        let (x0, x1, tx) = cols[x];
        let top = image[[ch, y0, x0]] * (1.0 - tx) + image[[ch, y0, x1]] * tx;
        let bottom = image[[ch, y1, x0]] * (1.0 - tx) + image[[ch, y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Half-pixel nearest-neighbour resize; never mixes labels.
pub fn resize_nearest<T: Copy>(raster: &Array2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = raster.dim();
    if (h, w) == (out_h, out_w) {
        return raster.clone();
    }
    let pick = |i: usize, n_in: usize, n_out: usize| {
        (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| raster[[pick(y, h, out_h), pick(x, w, out_w)]])
}

pub fn resize_to_patch_grid(sample: &Sample, policy: &ResizePolicy) -> Result<Sample> {
    let (out_h, out_w) = snapped_dims(sample.height(), sample.width(), policy)?;
    let image = match policy.image_interpolation {
        Interpolation::Bilinear => resize_bilinear(&sample.image, out_h, out_w),
        Interpolation::Nearest => {
            let planes: Vec<Array2<f32>> = (0..3)
                .map(|c| resize_nearest(&sample.image.index_axis(ndarray::Axis(0), c).to_owned(), out_h, out_w))
                .collect();
            Array3::from_shape_fn((3, out_h, out_w), |(c, y, x)| planes[c][[y, x]])
        }
    };
    let mask = sample.mask.as_ref().map(|m| match policy.mask_interpolation {
        Interpolation::Nearest => resize_nearest(m, out_h, out_w),
        // Bilinear masks are re-thresholded at one half.
        Interpolation::Bilinear => {
            let as_f = Array3::from_shape_fn((1, m.dim().0, m.dim().1), |(_, y, x)| f32::from(m[[y, x]]));
            resize_bilinear(&as_f, out_h, out_w)
                .index_axis(ndarray::Axis(0), 0)
                .mapv(|v| u8::from(v >= 0.5))
        }
    });
    Sample::new(image, mask, sample.dataset_id.clone(), sample.slice_index, sample.name.clone())
}

/// Zero-pad bottom and right edges up to the next patch multiple.
///
/// Intended for normalized images, where zero is the per-channel mean.
pub fn pad_to_patch_multiple(sample: &Sample, patch_size: usize) -> Result<Sample> {
    if patch_size == 0 {
        return Err(Error::Config("patch_size must be at least 1".into()));
    }
    let (h, w) = (sample.height(), sample.width());
    let ph = h.div_ceil(patch_size) * patch_size;
    let pw = w.div_ceil(patch_size) * patch_size;
    if (ph, pw) == (h, w) {
        return Ok(sample.clone());
    }
    let image = Array3::from_shape_fn((3, ph, pw), |(c, y, x)| {
        if y < h && x < w {
            sample.image[[c, y, x]]
        } else {
            0.0
        }
    });
    let mask = sample
        .mask
        .as_ref()
        .map(|m| Array2::from_shape_fn((ph, pw), |(y, x)| if y < h && x < w { m[[y, x]] } else { 0 }));
    Sample::new(image, mask, sample.dataset_id.clone(), sample.slice_index, sample.name.clone())
}
