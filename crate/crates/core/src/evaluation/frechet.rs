use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Moments {
    /// Needs at least two rows of equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::InvalidValue(format!(
                "moments need at least 2 samples, got {}",
                rows.len()
            )));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        let n = rows.len();
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
        let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        Ok(Self { mean, cov })
    }
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// PSD square root of a symmetric matrix, negative eigenvalues clamped.
fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let root = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `|μ1−μ2|² + Tr(Σ1 + Σ2 − 2(Σ1Σ2)^{1/2})`, clamped to ≥ 0.
///
/// The trace of `(Σ1Σ2)^{1/2}` is taken from the eigenvalues of the
/// symmetric PSD matrix `Σ1^{1/2} Σ2 Σ1^{1/2}`, which is similar to `Σ1Σ2`.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || cov1.shape() != (d, d) || cov2.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "moment dimensions disagree: μ {} / {}, Σ {:?} / {:?}",
            d,
            mu2.len(),
            cov1.shape(),
            cov2.shape()
        )));
    }
    let finite = |m: &DMatrix<f64>| m.iter().all(|v| v.is_finite());
    if !mu1.iter().chain(mu2.iter()).all(|v| v.is_finite()) || !finite(cov1) || !finite(cov2) {
        return Err(Error::InvalidValue("non-finite moments in Fréchet distance".into()));
    }
    let s1 = symmetrize(cov1);
    let s2 = symmetrize(cov2);
    let r1 = sqrt_psd(&s1);
    let inner = symmetrize(&(&r1 * &s2 * &r1));
    let tr_sqrt: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = mu1 - mu2;
    let value = diff.dot(&diff) + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Fréchet distance between two feature sets; `None` when either set has
/// fewer than two samples.
pub fn frechet_between(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Option<f64>> {
    if a.len() < 2 || b.len() < 2 {
        return Ok(None);
    }
    let (ma, mb) = (Moments::from_rows(a)?, Moments::from_rows(b)?);
    frechet_distance(&ma.mean, &ma.cov, &mb.mean, &mb.cov).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    #[test]
    fn scalar_closed_form() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let d = frechet_distance(&dv(&[0.0]), &one, &dv(&[1.0]), &one).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diagonal_closed_form() {
        let a = DMatrix::from_diagonal(&dv(&[1.0, 4.0]));
        let b = DMatrix::from_diagonal(&dv(&[4.0, 1.0]));
        let m = dv(&[0.3, -0.2]);
        let d = frechet_distance(&m, &a, &m, &b).unwrap();
        assert!((d - 2.0).abs() < 1e-10);
    }

    #[test]
    fn set_against_itself_is_zero() {
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 5) as f64).collect())
            .collect();
        assert!(frechet_between(&rows, &rows).unwrap().unwrap() < 1e-6);
        let dup = vec![rows[0].clone(); 4];
        assert!(frechet_between(&dup, &dup).unwrap().unwrap() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_and_small_sets() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(frechet_distance(&dv(&[f64::NAN]), &one, &dv(&[0.0]), &one).is_err());
        assert_eq!(frechet_between(&[vec![1.0]], &[vec![1.0], vec![2.0]]).unwrap(), None);
    }

    fn rows_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..9)
    }

    proptest! {
        #[test]
        fn symmetric(a in rows_strategy(), b in rows_strategy()) {
            let ab = frechet_between(&a, &b).unwrap().unwrap();
            let ba = frechet_between(&b, &a).unwrap().unwrap();
            prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
        }

        #[test]
        fn grows_with_mean_shift(a in rows_strategy(), s in 0.1f64..1.0) {
            let shifted = |k: f64| -> Vec<Vec<f64>> { a.iter().map(|r| r.iter().map(|v| v + k * s).collect()).collect() };
            let d1 = frechet_between(&a, &shifted(1.0)).unwrap().unwrap();
            let d2 = frechet_between(&a, &shifted(2.0)).unwrap().unwrap();
            prop_assert!(d1 > 0.0 && d2 > d1);
        }
    }
}
