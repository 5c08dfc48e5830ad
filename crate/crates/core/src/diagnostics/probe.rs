use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::datasets::{split_indices, SplitConfig};
use crate::error::{Error, Result};

/// Attempts at drawing a split with both classes on each side.
const MAX_RESAMPLES: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub validation_fraction: f64,
    pub seed: u64,
    /// L2 strength on the weights (the intercept is not penalised).
    pub l2: f64,
    pub max_iter: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            validation_fraction: 0.10,
            seed: 0,
            l2: 1.0,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub auroc: f64,
    pub n_train: usize,
    pub n_val: usize,
    /// Seed of the split actually used.
    pub split_seed: u64,
    pub l2: f64,
}

/// Train/validation indices with both classes present on each side.
pub fn probe_split(labels: &[bool], cfg: &ProbeConfig) -> Result<(Vec<usize>, Vec<usize>, u64)> {
    let groups: Vec<usize> = (0..labels.len()).collect();
    probe_split_grouped(labels, &groups, cfg)
}

/// Group id per row; bit-identical rows share a group.
pub fn duplicate_groups(rows: &DMatrix<f64>) -> Vec<usize> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    rows.row_iter()
        .map(|r| {
            let key: Vec<u64> = r.iter().map(|v| v.to_bits()).collect();
            let next = seen.len();
            *seen.entry(key).or_insert(next)
        })
        .collect()
}

/// Like [`probe_split`], but rows sharing a group id always land on the same
/// side, so a repeated embedding cannot be scored against its own twin.
pub fn probe_split_grouped(labels: &[bool], groups: &[usize], cfg: &ProbeConfig) -> Result<(Vec<usize>, Vec<usize>, u64)> {
    let both = |idx: &[usize]| idx.iter().any(|&i| labels[i]) && idx.iter().any(|&i| !labels[i]);
    if !both(&(0..labels.len()).collect::<Vec<_>>()) {
        return Err(Error::Config("linear probe needs both classes".into()));
    }
    let n = labels.len();
    if n < 4 {
        return Err(Error::Split(format!("linear probe needs at least 4 rows, got {n}")));
    }
    if groups.len() != n {
        return Err(Error::Config(format!("{n} labels but {} group ids", groups.len())));
    }
    let n_groups = groups.iter().max().map_or(0, |&g| g + 1);
    // Both classes in validation needs at least two held-out groups.
    let fraction = if (cfg.validation_fraction * n_groups as f64).round_ties_even() < 2.0 {
        2.0 / n_groups as f64
    } else {
        cfg.validation_fraction
    };
    if fraction >= 1.0 {
        return Err(Error::Split(format!("linear probe needs at least 3 distinct embeddings, got {n_groups}")));
    }
    for k in 0..MAX_RESAMPLES {
        let seed = cfg.seed.wrapping_add(k);
        let (_, val_groups) = split_indices(n_groups, &SplitConfig { validation_fraction: fraction, seed })?;
        let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| val_groups.binary_search(&groups[i]).is_ok());
        if both(&train) && both(&val) {
            return Ok((train, val, seed));
        }
        log::warn!("probe split with seed {seed} lacks a class; resampling with seed {}", seed.wrapping_add(1));
    }
    Err(Error::Split(format!(
        "no split with both classes on each side after {MAX_RESAMPLES} seeds"
    )))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// L2-regularised logistic regression fitted by damped Newton steps.
///
/// `x` already carries a trailing column of ones for the intercept.
fn fit_logistic(x: &DMatrix<f64>, y: &[f64], l2: f64, max_iter: usize) -> Result<DVector<f64>> {
    let (n, p) = x.shape();
    let mut penalty = DVector::from_element(p, l2);
    penalty[p - 1] = 0.0;
    let objective = |w: &DVector<f64>| -> f64 {
        let z = x * w;
        let nll: f64 = (0..n)
            .map(|i| {
                // log(1 + e^z) - y z, computed stably.
                let zi = z[i];
                zi.max(0.0) + (-zi.abs()).exp().ln_1p() - y[i] * zi
            })
            .sum();
        nll + 0.5 * w.component_mul(&penalty).dot(w)
    };
    let mut w = DVector::zeros(p);
    let mut f = objective(&w);
    for _ in 0..max_iter {
        let prob = (x * &w).map(sigmoid);
        let resid = DVector::from_fn(n, |i, _| prob[i] - y[i]);
        let grad = x.transpose() * resid + w.component_mul(&penalty);
        let weights = prob.map(|q| (q * (1.0 - q)).max(1e-12));
        let mut hess = x.transpose() * DMatrix::from_fn(n, p, |i, j| x[(i, j)] * weights[i]);
        for j in 0..p {
            // A tiny ridge on the intercept keeps the system definite.
            hess[(j, j)] += penalty[j].max(1e-10);
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("probe Hessian is not positive definite".into()))?
            .solve(&grad);
        let mut t = 1.0;
        let mut next = &w - &step * t;
        let mut f_next = objective(&next);
        while f_next > f && t > 1e-10 {
            t *= 0.5;
            next = &w - &step * t;
            f_next = objective(&next);
        }
        let moved = (&next - &w).amax();
        w = next;
        let improvement = f - f_next;
        f = f_next;
        if moved < 1e-10 || improvement.abs() < 1e-12 * f.abs().max(1.0) {
            break;
        }
    }
    Ok(w)
}

/// Area under the ROC curve by rank sums, ties sharing the average rank.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Config("AUROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&k| labels[k]).map(|k| ranks[k]).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Domain-separability probe: standardise on the training rows, fit, and
/// score the held-out rows.
pub fn linear_probe(rows: &DMatrix<f64>, labels: &[bool], cfg: &ProbeConfig) -> Result<ProbeResult> {
    if rows.nrows() != labels.len() {
        return Err(Error::Config(format!("{} rows but {} labels", rows.nrows(), labels.len())));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("embedding matrix has non-finite entries".into()));
    }
    let (train, val, split_seed) = probe_split_grouped(labels, &duplicate_groups(rows), cfg)?;
    let d = rows.ncols();
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|&i| rows[(i, j)]).sum::<f64>() / train.len() as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let var = train.iter().map(|&i| (rows[(i, j)] - mean[j]).powi(2)).sum::<f64>() / train.len() as f64;
            if var > 0.0 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let design = |idx: &[usize]| {
        DMatrix::from_fn(idx.len(), d + 1, |r, j| if j == d { 1.0 } else { (rows[(idx[r], j)] - mean[j]) / std[j] })
    };
    let y: Vec<f64> = train.iter().map(|&i| f64::from(u8::from(labels[i]))).collect();
    let w = fit_logistic(&design(&train), &y, cfg.l2, cfg.max_iter)?;
    let scores: Vec<f64> = (design(&val) * &w).iter().copied().collect();
    let val_labels: Vec<bool> = val.iter().map(|&i| labels[i]).collect();
    let correct = scores
        .iter()
        .zip(&val_labels)
        .filter(|(s, l)| (**s > 0.0) == **l)
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / val.len() as f64,
        auroc: auroc(&scores, &val_labels)?,
        n_train: train.len(),
        n_val: val.len(),
        split_seed,
        l2: cfg.l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn clusters(n: usize, d: usize, gap: f64, sigma: f64, seed: u64) -> (DMatrix<f64>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma).unwrap();
        let labels: Vec<bool> = (0..2 * n).map(|i| i >= n).collect();
        let rows = DMatrix::from_fn(2 * n, d, |i, j| {
            let centre = if labels[i] && j == 0 { gap } else { 0.0 };
            centre + noise.sample(&mut rng)
        });
        (rows, labels)
    }

    #[test]
    fn separable_clusters() {
        let (rows, labels) = clusters(40, 5, 1.0, 0.01, 1);
        let r = linear_probe(&rows, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!((r.accuracy, r.auroc), (1.0, 1.0));
        assert_eq!(r.n_train + r.n_val, 80);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let mut aucs = Vec::new();
        for seed in 0..20 {
            let (rows, mut labels) = clusters(100, 4, 1.0, 0.5, seed);
            labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 100));
            let cfg = ProbeConfig { validation_fraction: 0.3, seed, ..Default::default() };
            aucs.push(linear_probe(&rows, &labels, &cfg).unwrap().auroc);
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        assert!((mean - 0.5).abs() <= 0.1, "{mean}");
    }

    #[test]
    fn duplicated_points_are_indistinguishable() {
        let (base, _) = clusters(60, 3, 0.0, 1.0, 3);
        let rows = DMatrix::from_fn(120, 3, |i, j| base[(i % 60, j)]);
        let labels: Vec<bool> = (0..120).map(|i| i >= 60).collect();
        let cfg = ProbeConfig { validation_fraction: 0.5, seed: 1, ..Default::default() };
        let r = linear_probe(&rows, &labels, &cfg).unwrap();
        assert!((r.accuracy - 0.5).abs() <= 0.15, "{}", r.accuracy);
        // Twins stay together, so validation scores tie pairwise.
        let r = linear_probe(&rows, &labels, &ProbeConfig::default()).unwrap();
        assert_eq!((r.accuracy, r.auroc), (0.5, 0.5));
    }

    #[test]
    fn single_class_validation_is_resampled() {
        // 2 positives in 20 rows: a 2-row validation split often misses them.
        let labels: Vec<bool> = (0..20).map(|i| i < 2).collect();
        let cfg = ProbeConfig::default();
        let (train, val, seed) = probe_split(&labels, &cfg).unwrap();
        assert!(val.iter().any(|&i| labels[i]) && val.iter().any(|&i| !labels[i]));
        assert!(train.iter().any(|&i| labels[i]));
        assert!(seed >= cfg.seed);
        assert!(probe_split(&[true, true, true], &cfg).is_err());
    }

    #[test]
    fn grouped_split_keeps_twins_together() {
        let rows = DMatrix::from_fn(12, 2, |i, j| ((i % 6) * 3 + j) as f64);
        let groups = duplicate_groups(&rows);
        assert_eq!(groups, [0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]);
        let labels: Vec<bool> = (0..12).map(|i| i >= 6).collect();
        let (train, val, _) = probe_split_grouped(&labels, &groups, &ProbeConfig::default()).unwrap();
        assert_eq!(val.len() % 2, 0);
        for &i in &val {
            assert!(!train.contains(&((i + 6) % 12)));
        }
        let twins = DMatrix::from_fn(4, 1, |i, _| (i % 2) as f64);
        assert!(probe_split_grouped(&[false, false, true, true], &duplicate_groups(&twins), &ProbeConfig::default()).is_err());
    }

    #[test]
    fn auroc_oracle() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]).unwrap(), 0.5);
        assert!(auroc(&[1.0], &[true]).is_err());
    }

    #[test]
    fn logistic_matches_reference_fit() {
        // Unregularised intercept only: the fit is the log-odds of the base rate.
        let x = DMatrix::from_element(10, 1, 1.0);
        let y: Vec<f64> = (0..10).map(|i| f64::from(u8::from(i < 3))).collect();
        let w = fit_logistic(&x, &y, 1.0, 100).unwrap();
        assert!((w[0] - (3.0f64 / 7.0).ln()).abs() < 1e-8);
    }

    #[test]
    fn penalised_fit_matches_reference_solver() {
        // Reference coefficients from an independent L-BFGS solver on the
        // same objective (weight penalty 1/2 |w|^2, free intercept).
        let pts = [[0.0, 1.0], [1.0, 0.5], [2.0, 2.0], [3.0, 1.0], [0.5, 3.0], [2.5, 0.0], [1.5, 1.5], [3.5, 2.5]];
        let y = [0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
        let x = DMatrix::from_fn(8, 3, |i, j| if j == 2 { 1.0 } else { pts[i][j] });
        let w = fit_logistic(&x, &y, 1.0, 100).unwrap();
        for (got, want) in w.iter().zip([1.322_928_28, -0.053_635_32, -2.242_707_37]) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}
