use serde::{Deserialize, Serialize};

use super::{complete_basis, dot, gemm, orthogonalize, symmetric_eigen, Matrix, Trans};
use crate::error::{Error, Result};

/// Principal axes of a point cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, one per row, a full basis of the
    /// ambient space.
    pub components: Vec<Vec<f64>>,
    /// Population variances (denominator M) along each component, descending.
    pub variances: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn total_variance(&self) -> f64 {
        self.variances.iter().sum()
    }

    /// Cumulative fraction of variance explained by the first k components.
    pub fn fraction_explained(&self, k: usize) -> f64 {
        let total = self.total_variance();
        if total <= 0.0 {
            return 0.0;
        }
        self.variances.iter().take(k).sum::<f64>() / total
    }

    pub fn explained_fractions(&self) -> Vec<f64> {
        let total = self.total_variance();
        self.variances
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect()
    }

    /// Coordinates of `x − mean` along the first `k` components.
    pub fn project(&self, x: &[f64], k: usize) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        self.components.iter().take(k).map(|c| dot(c, &centered)).collect()
    }

    /// Inverse of [`project`](Self::project) for the first `coords.len()`
    /// components.
    pub fn embed(&self, coords: &[f64]) -> Vec<f64> {
        let mut x = self.mean.clone();
        for (c, comp) in coords.iter().zip(&self.components) {
            for (xi, ci) in x.iter_mut().zip(comp) {
                *xi += c * ci;
            }
        }
        x
    }
}

/// PCA of a point set. Uses the covariance matrix when there are at least as
/// many points as dimensions and the Gram matrix otherwise.
pub fn pca<P: AsRef<[f64]>>(points: &[P]) -> Result<PcaBasis> {
    let m = points.len();
    if m < 2 {
        return Err(Error::InsufficientData(format!("pca needs at least 2 points, got {m}")));
    }
    let dim = points[0].as_ref().len();
    if dim == 0 {
        return Err(Error::InsufficientData("pca on zero-dimensional points".into()));
    }
    let mut mean = vec![0.0; dim];
    for (i, p) in points.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != dim {
            return Err(Error::dim(format!("point {i}"), dim, p.len()));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("point {i} has non-finite coordinates")));
        }
        for (a, b) in mean.iter_mut().zip(p) {
            *a += b;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let centered = Matrix::from_fn(m, dim, |i, j| points[i].as_ref()[j] - mean[j]);
    let denom = m as f64;

    let (variances, components) = if m >= dim {
        let mut cov = Matrix::zeros(dim, dim);
        gemm(1.0 / denom, &centered, Trans::Yes, &centered, Trans::No, 0.0, &mut cov);
        let eig = symmetric_eigen(&cov)?;
        (eig.values.iter().map(|v| v.max(0.0)).collect::<Vec<_>>(), eig.vectors)
    } else {
        let mut gram = Matrix::zeros(m, m);
        gemm(1.0 / denom, &centered, Trans::No, &centered, Trans::Yes, 0.0, &mut gram);
        let eig = symmetric_eigen(&gram)?;
        let top = eig.values.first().copied().unwrap_or(0.0).max(0.0);
        let mut comps: Vec<Vec<f64>> = Vec::new();
        let mut vars = Vec::new();
        for (val, u) in eig.values.iter().zip(&eig.vectors) {
            if *val <= top * 1e-13 || *val <= 0.0 {
                break;
            }
            let mut c = centered.matvec_t(u)?;
            if orthogonalize(&mut c, &comps).is_some() {
                comps.push(c);
                vars.push(*val);
            }
        }
        complete_basis(&mut comps, dim);
        vars.resize(dim, 0.0);
        (vars, comps)
    };
    Ok(PcaBasis {
        mean,
        components,
        variances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn line_in_10d() {
        let dir: Vec<f64> = (0..10).map(|i| (i as f64 + 1.0).sqrt()).collect();
        let pts: Vec<Vec<f64>> = (0..20)
            .map(|t| dir.iter().map(|d| 0.3 + d * t as f64 * 0.1).collect())
            .collect();
        let b = pca(&pts).unwrap();
        assert!(b.variances[0] > 0.0);
        assert!(b.variances[1..].iter().all(|v| *v < 1e-12));
    }

    #[test]
    fn hand_computed_covariance() {
        let pts = [[1.0, 0.0], [-1.0, 0.0], [0.0, 0.1], [0.0, -0.1]];
        let b = pca(&pts).unwrap();
        // Σx²/4 = 0.5, Σy²/4 = 0.005, no cross term.
        assert!((b.variances[0] - 0.5).abs() < 1e-14);
        assert!((b.variances[1] - 0.005).abs() < 1e-14);
        assert!((b.components[0][0].abs() - 1.0).abs() < 1e-14);
        assert!((b.components[1][1].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn isotropic_gaussian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..10_000)
            .map(|_| (0..3).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let b = pca(&pts).unwrap();
        assert!(b.variances[0] / b.variances[2] < 1.1);
    }

    #[test]
    fn fewer_points_than_dimensions() {
        let pts = vec![
            vec![1.0, 0.0, 0.0, 2.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 1.0],
        ];
        let b = pca(&pts).unwrap();
        assert_eq!(b.components.len(), 4);
        for i in 0..4 {
            for j in 0..4 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&b.components[i], &b.components[j]) - e).abs() < 1e-10);
            }
        }
        // full reconstruction
        for p in &pts {
            let c = b.project(p, 4);
            let back = b.embed(&c);
            for (x, y) in back.iter().zip(p) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(b.variances[2] < 1e-12 && b.variances[3] == 0.0);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(pca(&[[1.0, 2.0]]), Err(Error::InsufficientData(_))));
    }
}
