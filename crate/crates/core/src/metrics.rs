//! Dataset-level foreground IoU, macro averaging and run summaries.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::datasets::{resize_nearest, DatasetId};
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const IOU_EPSILON: f64 = 1e-7;

/// Running pixel totals for one dataset. Merge is field-wise addition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub dataset_id: DatasetId,
    pub intersection_px: u64,
    pub union_px: u64,
}

impl MetricAccumulator {
    pub fn new(dataset_id: DatasetId) -> Self {
        Self {
            dataset_id,
            intersection_px: 0,
            union_px: 0,
        }
    }

    /// Add one image; any non-zero label counts as foreground.
    pub fn update(&mut self, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} and mask {:?} differ in shape",
                pred.dim(),
                gt.dim()
            )));
        }
        let (i, u) = pixel_counts(pred, gt);
        self.intersection_px += i;
        self.union_px += u;
        Ok(())
    }

    /// Like `update`, but first maps the prediction to the mask's resolution
    /// with nearest-neighbour sampling.
    pub fn update_native(&mut self, pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<()> {
        if pred.dim() == gt.dim() {
            return self.update(pred, gt);
        }
        let (h, w) = gt.dim();
        let resized = resize_nearest(&pred.to_owned(), h, w);
        self.update(resized.view(), gt)
    }

    pub fn merge(mut self, other: &Self) -> Result<Self> {
        if self.dataset_id != other.dataset_id {
            return Err(Error::Config(format!(
                "cannot merge accumulators for `{}` and `{}`",
                self.dataset_id, other.dataset_id
            )));
        }
        self.intersection_px += other.intersection_px;
        self.union_px += other.union_px;
        Ok(self)
    }

    pub fn finalize(&self) -> f64 {
        self.intersection_px as f64 / (self.union_px as f64 + IOU_EPSILON)
    }
}

fn pixel_counts(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> (u64, u64) {
    let (mut i, mut u) = (0u64, 0u64);
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        let (p, g) = (p > 0, g > 0);
        i += u64::from(p && g);
        u += u64::from(p || g);
    });
    (i, u)
}

/// Accumulate `(prediction, mask)` pairs, splitting the work per `exec`.
pub fn accumulate(dataset_id: DatasetId, pairs: &[(Array2<u8>, Array2<u8>)], exec: Exec) -> Result<MetricAccumulator> {
    let totals = exec.fold_merge(
        pairs,
        || Ok((0u64, 0u64)),
        |acc: Result<(u64, u64)>, (p, g)| {
            let (i0, u0) = acc?;
            if p.dim() != g.dim() {
                return Err(Error::Shape(format!(
                    "prediction {:?} and mask {:?} differ in shape",
                    p.dim(),
                    g.dim()
                )));
            }
            let (i, u) = pixel_counts(p.view(), g.view());
            Ok((i0 + i, u0 + u))
        },
        |a, b| match (a, b) {
            (Ok(a), Ok(b)) => Ok((a.0 + b.0, a.1 + b.1)),
            (Err(e), _) | (_, Err(e)) => Err(e),
        },
    );
    let (intersection_px, union_px) = totals?;
    Ok(MetricAccumulator {
        dataset_id,
        intersection_px,
        union_px,
    })
}

/// Unweighted mean of per-dataset scores.
pub fn macro_average(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Config("macro average needs at least one dataset score".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Mean of per-image IoUs. Kept only to contrast with the dataset-level score.
pub fn per_image_mean(pairs: &[(ArrayView2<u8>, ArrayView2<u8>)]) -> f64 {
    let total: f64 = pairs
        .iter()
        .map(|(p, g)| {
            let (i, u) = pixel_counts(*p, *g);
            i as f64 / (u as f64 + IOU_EPSILON)
        })
        .sum();
    total / pairs.len().max(1) as f64
}

/// Per-dataset scores of one run plus their macro average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub per_dataset: BTreeMap<String, f64>,
    pub macro_iou_fg: f64,
}

impl EvalScores {
    pub fn from_accumulators(accs: &[MetricAccumulator]) -> Result<Self> {
        let per_dataset: BTreeMap<String, f64> =
            accs.iter().map(|a| (a.dataset_id.to_string(), a.finalize())).collect();
        let scores: Vec<f64> = per_dataset.values().copied().collect();
        Ok(Self {
            macro_iou_fg: macro_average(&scores)?,
            per_dataset,
        })
    }
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("cannot summarise zero runs".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self { mean, std, n })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(h: usize, w: usize, fg: impl Fn(usize, usize) -> bool) -> Array2<u8> {
        Array2::from_shape_fn((h, w), |(y, x)| u8::from(fg(y, x)))
    }

    #[test]
    fn update_examples() {
        let mut acc = MetricAccumulator::new(DatasetId::Lucchi);
        let g = raster(10, 20, |_, x| x < 10);
        acc.update(g.view(), g.view()).unwrap();
        assert_eq!((acc.intersection_px, acc.union_px), (100, 100));

        let mut acc = MetricAccumulator::new(DatasetId::Lucchi);
        let p = raster(10, 20, |_, x| (5..15).contains(&x));
        acc.update(p.view(), g.view()).unwrap();
        assert_eq!((acc.intersection_px, acc.union_px), (50, 150));

        let mut acc = MetricAccumulator::new(DatasetId::Lucchi);
        let z = raster(4, 4, |_, _| false);
        acc.update(z.view(), z.view()).unwrap();
        assert_eq!((acc.intersection_px, acc.union_px), (0, 0));
    }

    #[test]
    fn update_collapses_labels_and_checks_shape() {
        let mut acc = MetricAccumulator::new(DatasetId::Vnc);
        let p = ndarray::arr2(&[[0u8, 2], [255, 0]]);
        let g = ndarray::arr2(&[[1u8, 1], [0, 0]]);
        acc.update(p.view(), g.view()).unwrap();
        assert_eq!((acc.intersection_px, acc.union_px), (1, 3));
        let bad = Array2::<u8>::zeros((3, 2));
        assert!(matches!(acc.update(bad.view(), g.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn finalize_examples() {
        let acc = |i, u| MetricAccumulator { dataset_id: DatasetId::Lucchi, intersection_px: i, union_px: u };
        assert!((acc(100, 100).finalize() - 0.999_999_999).abs() < 1e-12);
        assert!(acc(100, 100).finalize() < 1.0);
        assert!((acc(50, 150).finalize() - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(acc(0, 0).finalize(), 0.0);
    }

    #[test]
    fn macro_examples() {
        assert!((macro_average(&[0.007, 0.661]).unwrap() - 0.334).abs() < 1e-12);
        assert!((macro_average(&[0.019, 0.732]).unwrap() - 0.3755).abs() < 1e-12);
        assert_eq!(macro_average(&[0.42]).unwrap(), 0.42);
        assert!(macro_average(&[]).is_err());
    }

    #[test]
    fn dataset_level_differs_from_per_image_mean() {
        // A tiny image scored 0 next to a large perfect one: the dataset total
        // is dominated by pixels, the per-image mean by the count of images.
        let big = raster(20, 20, |_, _| true);
        let tiny_gt = raster(20, 20, |y, x| y == 0 && x == 0);
        let tiny_pred = raster(20, 20, |y, x| y == 19 && x == 19);
        let mut acc = MetricAccumulator::new(DatasetId::Lucchi);
        acc.update(big.view(), big.view()).unwrap();
        acc.update(tiny_pred.view(), tiny_gt.view()).unwrap();
        let dataset = acc.finalize();
        let per_image = per_image_mean(&[(big.view(), big.view()), (tiny_pred.view(), tiny_gt.view())]);
        assert!((dataset - 400.0 / 402.0).abs() < 1e-6);
        assert!((per_image - 0.5).abs() < 1e-6);
    }

    #[test]
    fn monotonicity() {
        let g = raster(8, 8, |y, x| (y + x) % 3 == 0);
        let p = raster(8, 8, |y, _| y < 4);
        let mut acc = MetricAccumulator::new(DatasetId::Lucchi);
        acc.update(p.view(), g.view()).unwrap();
        let base = acc.finalize();
        let mut better = acc.clone();
        better.update(g.view(), g.view()).unwrap();
        assert!(better.finalize() >= base);
        let mut worse = acc.clone();
        let inv = g.mapv(|v| 1 - v);
        worse.update(inv.view(), g.view()).unwrap();
        assert!(worse.finalize() <= base);
    }

    #[test]
    fn merge_rules() {
        let a = MetricAccumulator { dataset_id: DatasetId::Lucchi, intersection_px: 3, union_px: 7 };
        let b = MetricAccumulator { dataset_id: DatasetId::Lucchi, intersection_px: 5, union_px: 6 };
        assert_eq!(a.clone().merge(&b).unwrap(), b.clone().merge(&a).unwrap());
        assert_eq!(a.clone().merge(&b).unwrap().union_px, 13);
        assert!(a.merge(&MetricAccumulator::new(DatasetId::Vnc)).is_err());
    }

    #[test]
    fn native_resolution_update() {
        let g = raster(4, 4, |y, _| y < 2);
        let p = raster(2, 2, |y, _| y < 1);
        let mut acc = MetricAccumulator::new(DatasetId::Lucchi);
        acc.update_native(p.view(), g.view()).unwrap();
        assert_eq!((acc.intersection_px, acc.union_px), (8, 8));
    }

    #[test]
    fn exec_modes_agree() {
        let pairs: Vec<(Array2<u8>, Array2<u8>)> = (0..40)
            .map(|k| (raster(9, 7, |y, x| (y * x + k) % 4 == 0), raster(9, 7, |y, x| (y + x + k) % 3 == 0)))
            .collect();
        let seq = accumulate(DatasetId::Vnc, &pairs, Exec::Sequential).unwrap();
        let par = accumulate(DatasetId::Vnc, &pairs, Exec::default()).unwrap();
        assert_eq!(seq, par);
        let mut manual = MetricAccumulator::new(DatasetId::Vnc);
        for (p, g) in &pairs {
            manual.update(p.view(), g.view()).unwrap();
        }
        assert_eq!(seq, manual);
    }

    #[test]
    fn mean_std_sample_convention() {
        let s = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanStd::of(&[0.7]).unwrap().std, 0.0);
        assert_eq!(format!("{}", MeanStd::of(&[0.334, 0.334]).unwrap()), "0.334 ± 0.000");
    }
}
