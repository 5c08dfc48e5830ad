use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.10,
            seed: 0,
        }
    }
}

/// Seeded hold-out split over `0..n`. Both index lists come back sorted.
///
/// The validation size is `round(fraction * n)` with ties to even, clamped
/// to `[1, n - 1]`.
pub fn split_indices(n: usize, cfg: &SplitConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Split(format!("need at least 2 samples to split, got {n}")));
    }
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation_fraction must lie in (0, 1), got {}",
            cfg.validation_fraction
        )));
    }
    let n_val = ((cfg.validation_fraction * n as f64).round_ties_even() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Partition `items` into `(train, val)` keeping the original order inside each part.
pub fn make_split<T: Clone>(items: &[T], cfg: &SplitConfig) -> Result<(Vec<T>, Vec<T>)> {
    let (train, val) = split_indices(items.len(), cfg)?;
    Ok((
        train.iter().map(|&i| items[i].clone()).collect(),
        val.iter().map(|&i| items[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_sizes() {
        let cfg = SplitConfig::default();
        let (t, v) = split_indices(17, &cfg).unwrap();
        assert_eq!((t.len(), v.len()), (15, 2));
        // 16.5 rounds to even.
        let (t, v) = split_indices(165, &cfg).unwrap();
        assert_eq!((t.len(), v.len()), (149, 16));
        let (t, v) = split_indices(2, &cfg).unwrap();
        assert_eq!((t.len(), v.len()), (1, 1));
    }

    #[test]
    fn too_small() {
        assert!(matches!(split_indices(1, &SplitConfig::default()), Err(Error::Split(_))));
        assert!(matches!(split_indices(0, &SplitConfig::default()), Err(Error::Split(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = SplitConfig { validation_fraction: 0.1, seed: 7 };
        assert_eq!(split_indices(165, &cfg).unwrap(), split_indices(165, &cfg).unwrap());
        let other = SplitConfig { seed: 8, ..cfg };
        assert_ne!(split_indices(165, &cfg).unwrap(), split_indices(165, &other).unwrap());
    }

    proptest! {
        #[test]
        fn split_is_partition(n in 2usize..400, seed in any::<u64>(), frac in 0.01f64..0.99) {
            let items: Vec<usize> = (0..n).collect();
            let (train, val) = make_split(&items, &SplitConfig { validation_fraction: frac, seed }).unwrap();
            prop_assert_eq!(train.len() + val.len(), n);
            prop_assert!(!val.is_empty() && !train.is_empty());
            let mut all: Vec<usize> = train.iter().chain(&val).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, items);
        }
    }
}
