use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean and unbiased (n - 1) covariance of a set of row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianSummary {
    /// `rows` is `n x D`, one embedding per row.
    pub fn fit(rows: &DMatrix<f64>) -> Result<Self> {
        let n = rows.nrows();
        if n < 2 {
            return Err(Error::Config(format!("covariance needs at least 2 rows, got {n}")));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("embedding matrix has non-finite entries".into()));
        }
        let mean = rows.row_mean().transpose();
        let centered = DMatrix::from_fn(n, rows.ncols(), |i, j| rows[(i, j)] - mean[j]);
        let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
        symmetrize(&mut cov);
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Eigenvalues clamped at zero; errors on negatives beyond `-1e-6 * trace`.
fn clamped_eigen(mut m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    symmetrize(&mut m);
    let trace = m.trace().abs();
    let mut eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.min();
    if min < -1e-6 * trace.max(f64::MIN_POSITIVE) && min < -1e-12 {
        return Err(Error::Numerical(format!(
            "{what} has eigenvalue {min:e}, below -1e-6 x trace ({trace:e})"
        )));
    }
    eig.eigenvalues.apply(|v| *v = v.max(0.0));
    Ok(eig)
}

/// Principal square root of a symmetric positive semi-definite matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = clamped_eigen(m.clone(), "covariance")?;
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * s * eig.eigenvectors.transpose())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrechetParts {
    pub mean_term: f64,
    pub trace_term: f64,
    pub distance: f64,
}

/// `|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2)`, clamped at zero.
pub fn frechet_from_summaries(a: &GaussianSummary, b: &GaussianSummary) -> Result<FrechetParts> {
    if a.dim() != b.dim() {
        return Err(Error::Config(format!("embedding widths differ: {} vs {}", a.dim(), b.dim())));
    }
    if a.cov.iter().chain(b.cov.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("covariance has non-finite entries".into()));
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let root_a = sqrtm_psd(&a.cov)?;
    let inner = &root_a * &b.cov * &root_a;
    let cross = clamped_eigen(inner, "cross-covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum::<f64>();
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * cross;
    Ok(FrechetParts {
        mean_term,
        trace_term,
        distance: (mean_term + trace_term).max(0.0),
    })
}

pub fn frechet_distance(e1: &DMatrix<f64>, e2: &DMatrix<f64>) -> Result<f64> {
    if e1.ncols() != e2.ncols() {
        return Err(Error::Config(format!("embedding widths differ: {} vs {}", e1.ncols(), e2.ncols())));
    }
    Ok(frechet_from_summaries(&GaussianSummary::fit(e1)?, &GaussianSummary::fit(e2)?)?.distance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn one_dimensional_closed_form() {
        // Two points each: sample mean 0, sd 1 and mean 3, sd 2 under n - 1.
        let h = 0.5f64.sqrt();
        let a = DMatrix::from_column_slice(2, 1, &[-h, h]);
        let b = DMatrix::from_column_slice(2, 1, &[3.0 - 2.0 * h, 3.0 + 2.0 * h]);
        assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() < 1e-9);
    }

    #[test]
    fn identical_sets_are_zero() {
        let e = random(40, 8, 1);
        assert!(frechet_distance(&e, &e).unwrap() <= 1e-8);
    }

    #[test]
    fn covariance_denominator_is_pinned() {
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 1.0, 4.0, 5.0]);
        let s = GaussianSummary::fit(&e).unwrap();
        assert!((s.cov[(0, 0)] - 7.0 / 3.0).abs() < 1e-12);
        assert!((s.cov[(0, 1)] - 4.0).abs() < 1e-12);
        assert!((s.cov[(1, 1)] - 7.0).abs() < 1e-12);
        // Golden value from an independent reference; the n-denominator
        // estimator gives 4.78222 on the same data.
        let f = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        assert!((frechet_distance(&e, &f).unwrap() - 5.784_447_113_246_582).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(matches!(frechet_distance(&random(5, 3, 0), &random(5, 4, 0)), Err(Error::Config(_))));
        assert!(GaussianSummary::fit(&random(1, 3, 0)).is_err());
        let mut bad = random(4, 2, 0);
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(GaussianSummary::fit(&bad), Err(Error::Numerical(_))));
    }

    #[test]
    fn sqrtm_squares_back() {
        let x = random(30, 5, 3);
        let s = GaussianSummary::fit(&x).unwrap().cov;
        let r = sqrtm_psd(&s).unwrap();
        assert!((&r * &r - &s).abs().max() < 1e-10);
    }

    #[test]
    fn moments_match_gives_zero() {
        // Same mean and covariance from different samples.
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let b = DMatrix::from_row_slice(4, 2, &[0.0, 1.0, 0.0, -1.0, -1.0, 0.0, 1.0, 0.0]);
        assert!(frechet_distance(&a, &b).unwrap() <= 1e-10);
        let shifted = a.map(|v| v + 0.5);
        assert!(frechet_distance(&a, &shifted).unwrap() > 0.4);
    }
}
