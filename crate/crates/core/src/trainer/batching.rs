use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Sampling;
use crate::error::{Error, Result};

/// Position of one training sample: dataset index and index within it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BatchItem {
    pub dataset: usize,
    pub index: usize,
}

/// One epoch of batches over datasets with the given sizes.
///
/// Unbalanced concatenates, shuffles and chunks by `batch_size`. Balanced
/// builds one batch per sample of the largest dataset, adding one sample
/// drawn with replacement from every smaller dataset.
pub fn make_batches<R: Rng>(sizes: &[usize], sampling: Sampling, batch_size: usize, rng: &mut R) -> Result<Vec<Vec<BatchItem>>> {
    if sizes.is_empty() || sizes.iter().all(|&n| n == 0) {
        return Err(Error::Config("no training samples".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    match sampling {
        Sampling::Unbalanced => {
            let mut all: Vec<BatchItem> = sizes
                .iter()
                .enumerate()
                .flat_map(|(dataset, &n)| (0..n).map(move |index| BatchItem { dataset, index }))
                .collect();
            all.shuffle(rng);
            Ok(all.chunks(batch_size).map(<[BatchItem]>::to_vec).collect())
        }
        Sampling::Balanced => {
            if sizes.len() < 2 {
                return Err(Error::Config("balanced 1+1 sampling needs two datasets".into()));
            }
            if batch_size != sizes.len() {
                return Err(Error::Config(format!(
                    "balanced 1+1 sampling needs batch_size = {} (one sample per dataset), got {batch_size}",
                    sizes.len()
                )));
            }
            if let Some(d) = sizes.iter().position(|&n| n == 0) {
                return Err(Error::Config(format!("dataset {d} has no training samples")));
            }
            let len = *sizes.iter().max().expect("non-empty");
            let columns: Vec<Vec<usize>> = sizes
                .iter()
                .map(|&n| {
                    if n == len {
                        let mut perm: Vec<usize> = (0..n).collect();
                        perm.shuffle(rng);
                        perm
                    } else {
                        (0..len).map(|_| rng.random_range(0..n)).collect()
                    }
                })
                .collect();
            Ok((0..len)
                .map(|k| {
                    columns
                        .iter()
                        .enumerate()
                        .map(|(dataset, col)| BatchItem { dataset, index: col[k] })
                        .collect()
                })
                .collect())
        }
    }
}
