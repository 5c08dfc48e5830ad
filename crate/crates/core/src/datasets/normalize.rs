use super::Sample;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Per-channel `(x - mean) / std` with ImageNet statistics. Masks pass through.
pub fn normalize(sample: &Sample) -> Sample {
    let mut out = sample.clone();
    for (c, mut plane) in out.image.outer_iter_mut().enumerate() {
        let (m, s) = (IMAGENET_MEAN[c], IMAGENET_STD[c]);
        plane.mapv_inplace(|x| (x - m) / s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::DatasetId;
    use ndarray::{Array2, Array3};

    #[test]
    fn documented_values() {
        let mut img = Array3::zeros((3, 1, 2));
        img[[0, 0, 0]] = 0.485;
        img[[0, 0, 1]] = 1.0;
        let s = Sample::new(img, Some(Array2::ones((1, 2))), DatasetId::Vnc, 0, "x").unwrap();
        let n = normalize(&s);
        assert_eq!(n.image[[0, 0, 0]], 0.0);
        assert!((n.image[[0, 0, 1]] - 2.2489).abs() < 1e-4);
        assert_eq!(n.mask, s.mask);
    }

    #[test]
    fn channel_means_map_to_zero() {
        let img = Array3::from_shape_fn((3, 4, 4), |(c, _, _)| IMAGENET_MEAN[c]);
        let s = Sample::new(img, None, DatasetId::Lucchi, 0, "m").unwrap();
        assert!(normalize(&s).image.iter().all(|&v| v == 0.0));
    }
}
