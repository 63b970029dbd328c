use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this are treated as zero when repairing PSD matrices.
pub const EIGEN_FLOOR: f64 = 1e-10;

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| if v < EIGEN_FLOOR { 0.0 } else { v.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Squared Fréchet distance between two Gaussians. Covariances are row-major
/// `d × d`; they are symmetrized on input.
pub fn frechet_distance(mu1: &[f64], c1: &[f64], mu2: &[f64], c2: &[f64]) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || c1.len() != d * d || c2.len() != d * d {
        return Err(Error::Shape(format!(
            "means of {} and {}, covariances of {} and {} entries",
            d,
            mu2.len(),
            c1.len(),
            c2.len()
        )));
    }
    if [mu1, c1, mu2, c2].iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numeric("Fréchet distance inputs are not finite".into()));
    }
    let a = symmetrized(&DMatrix::from_row_slice(d, d, c1));
    let b = symmetrized(&DMatrix::from_row_slice(d, d, c2));
    // Eigenvalues of √A·B·√A are the squared singular values of √A·√B, so
    // the trace of the root is their sum without squaring small eigenvalues.
    let tr_cross: f64 = (sym_sqrt(&a) * sym_sqrt(&b)).singular_values().sum();
    let diff = DVector::from_column_slice(mu1) - DVector::from_column_slice(mu2);
    let value = diff.norm_squared() + a.trace() + b.trace() - 2.0 * tr_cross;
    if value >= 0.0 {
        Ok(value)
    } else if value >= -1e-6 {
        Ok(0.0)
    } else {
        Err(Error::Numeric(format!("Fréchet distance came out negative ({value})")))
    }
}

/// Sample mean and covariance (denominator N-1; zero covariance for N = 1).
pub fn gaussian_fit(features: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = features.len();
    let d = features
        .first()
        .ok_or_else(|| Error::EmptyInput("no feature vectors".into()))?
        .len();
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let mut mu = vec![0.0; d];
    for f in features {
        for (m, v) in mu.iter_mut().zip(f) {
            *m += v;
        }
    }
    for m in &mut mu {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    if n > 1 {
        let centered = DMatrix::from_fn(n, d, |r, c| features[r][c] - mu[c]);
        let gram = centered.transpose() * &centered / (n - 1) as f64;
        for r in 0..d {
            for c in 0..d {
                cov[r * d + c] = gram[(r, c)];
            }
        }
    }
    Ok((mu, cov))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_parameters_give_zero() {
        let mu = [0.3, -1.0];
        let c = [2.0, 0.5, 0.5, 1.0];
        assert!(frechet_distance(&mu, &c, &mu, &c).unwrap().abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_self_distance() {
        // 6 samples in 16 dimensions with widely spread scales.
        let feats: Vec<Vec<f64>> = (0..6)
            .map(|i| {
                (0..16)
                    .map(|j| ((i * 7 + j * 3) % 11) as f64 * 10f64.powi(-j / 3))
                    .collect()
            })
            .collect();
        let (mu, c) = gaussian_fit(&feats).unwrap();
        assert!(frechet_distance(&mu, &c, &mu, &c).unwrap() < 1e-9);
    }

    #[test]
    fn one_dimensional_closed_form() {
        assert_eq!(frechet_distance(&[0.0], &[0.0], &[1.0], &[0.0]).unwrap(), 1.0);
        let v = frechet_distance(&[0.5], &[4.0], &[-1.0], &[9.0]).unwrap();
        assert!((v - (1.5f64.powi(2) + 1.0)).abs() < 1e-9);
    }

    #[test]
    fn diagonal_closed_form() {
        let mut rng = crate::rng::rng_from(4);
        for _ in 0..20 {
            let d = 6;
            let mu1: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mu2: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v1: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
            let v2: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..3.0)).collect();
            let diag = |v: &[f64]| {
                let mut m = vec![0.0; d * d];
                for i in 0..d {
                    m[i * d + i] = v[i];
                }
                m
            };
            let want: f64 = (0..d)
                .map(|i| (mu1[i] - mu2[i]).powi(2) + (v1[i].sqrt() - v2[i].sqrt()).powi(2))
                .sum();
            let got = frechet_distance(&mu1, &diag(&v1), &mu2, &diag(&v2)).unwrap();
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn symmetric_in_arguments() {
        let a = ([0.0, 1.0], [2.0, 0.3, 0.3, 1.0]);
        let b = ([1.0, -1.0], [1.0, -0.2, -0.2, 0.5]);
        let ab = frechet_distance(&a.0, &a.1, &b.0, &b.1).unwrap();
        let ba = frechet_distance(&b.0, &b.1, &a.0, &a.1).unwrap();
        assert!((ab - ba).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(frechet_distance(&[0.0], &[1.0], &[0.0, 1.0], &[1.0; 4]).is_err());
        assert!(frechet_distance(&[f64::NAN], &[1.0], &[0.0], &[1.0]).is_err());
        assert!(gaussian_fit(&[]).is_err());
    }

    #[test]
    fn covariance_uses_unbiased_denominator() {
        let (mu, cov) = gaussian_fit(&[vec![1.0], vec![3.0]]).unwrap();
        assert_eq!(mu, vec![2.0]);
        assert_eq!(cov, vec![2.0]);
    }
}
