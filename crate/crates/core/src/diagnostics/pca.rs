use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// `n x k` projected coordinates, row-major.
    pub coords: Vec<Vec<f64>>,
    /// Share of total variance per component; zero for degenerate components.
    pub explained_variance_ratio: Vec<f64>,
    /// `k x D` unit loading vectors.
    pub components: Vec<Vec<f64>>,
}

/// Project mean-centred rows onto the top-`k` principal axes.
///
/// Signs are fixed so that each component's largest-magnitude loading is
/// positive. Small-`n` inputs go through the `n x n` Gram matrix.
pub fn pca_project(rows: &DMatrix<f64>, k: usize) -> Result<Pca> {
    let (n, d) = rows.shape();
    if n <= k {
        return Err(Error::Config(format!("PCA with k = {k} needs more than {k} rows, got {n}")));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("embedding matrix has non-finite entries".into()));
    }
    let mean = rows.row_mean();
    let x = DMatrix::from_fn(n, d, |i, j| rows[(i, j)] - mean[j]);
    let denom = n as f64 - 1.0;

    // Eigenpairs of the covariance, largest first, as (value, loading).
    let mut pairs: Vec<(f64, nalgebra::DVector<f64>)> = if n < d {
        let gram = &x * x.transpose() / denom;
        let eig = SymmetricEigen::new(gram);
        (0..n)
            .map(|i| {
                let lambda = eig.eigenvalues[i].max(0.0);
                let v = x.transpose() * eig.eigenvectors.column(i);
                let norm = v.norm();
                let v = if norm > 0.0 { v / norm } else { v };
                (lambda, v)
            })
            .collect()
    } else {
        let cov = x.transpose() * &x / denom;
        let eig = SymmetricEigen::new(cov);
        (0..d)
            .map(|i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).into_owned()))
            .collect()
    };
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));

    let total: f64 = pairs.iter().map(|p| p.0).sum();
    let tiny = 1e-12 * total.max(f64::MIN_POSITIVE);
    let mut components = Vec::with_capacity(k);
    let mut ratios = Vec::with_capacity(k);
    for (lambda, mut v) in pairs.into_iter().take(k) {
        if lambda <= tiny {
            ratios.push(0.0);
            components.push(vec![0.0; d]);
            continue;
        }
        let pivot = v.iter().copied().fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if pivot < 0.0 {
            v.neg_mut();
        }
        ratios.push(lambda / total);
        components.push(v.iter().copied().collect());
    }
    let coords = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().enumerate().map(|(j, w)| w * x[(i, j)]).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        coords,
        explained_variance_ratio: ratios,
        components,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn line_has_one_component() {
        let dir = [1.0, -2.0, 0.5, 3.0];
        let rows = DMatrix::from_fn(9, 4, |i, j| (i as f64 - 3.0) * dir[j] + 7.0);
        let p = pca_project(&rows, 2).unwrap();
        assert!((p.explained_variance_ratio[0] - 1.0).abs() < 1e-12);
        assert_eq!(p.explained_variance_ratio[1], 0.0);
        // Largest loading (index 3) is positive.
        assert!(p.components[0][3] > 0.0);
    }

    #[test]
    fn isotropic_ratios() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rows = DMatrix::from_fn(4000, 2, |_, _| StandardNormal.sample(&mut rng));
        let p = pca_project(&rows, 2).unwrap();
        for r in &p.explained_variance_ratio {
            assert!((r - 0.5).abs() < 0.05, "{r}");
        }
    }

    fn planar(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, Vec<[f64; 2]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let basis = DMatrix::<f64>::from_fn(d, 2, |_, _| StandardNormal.sample(&mut rng)).qr().q();
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(-5.0..5.0), rng.random_range(-1.0..1.0)]).collect();
        let rows = DMatrix::from_fn(n, d, |i, j| pts[i][0] * basis[(j, 0)] + pts[i][1] * basis[(j, 1)] + 2.0);
        (rows, pts)
    }

    fn check_distances(rows: &DMatrix<f64>, pts: &[[f64; 2]]) {
        let p = pca_project(rows, 2).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let want = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
                let got = ((p.coords[i][0] - p.coords[j][0]).powi(2) + (p.coords[i][1] - p.coords[j][1]).powi(2)).sqrt();
                assert!((want - got).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn planar_distances_preserved() {
        let (rows, pts) = planar(30, 6, 1);
        check_distances(&rows, &pts);
        // Fewer rows than dimensions takes the Gram path.
        let (rows, pts) = planar(12, 40, 2);
        check_distances(&rows, &pts);
    }

    #[test]
    fn gram_and_covariance_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows = DMatrix::from_fn(10, 10, |_, _| StandardNormal.sample(&mut rng));
        let wide = rows.clone().insert_column(10, 0.0);
        let a = pca_project(&rows, 2).unwrap();
        let b = pca_project(&wide, 2).unwrap();
        for (x, y) in a.coords.iter().zip(&b.coords) {
            assert!((x[0] - y[0]).abs() < 1e-9 && (x[1] - y[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn too_few_rows() {
        assert!(pca_project(&DMatrix::zeros(2, 3), 2).is_err());
    }
}
