//! Distances between feature distributions: Fréchet and polynomial-kernel MMD.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use crate::error::{bail, Result};
use crate::imaging::{resize, Image, Interpolation};

/// `N × D` matrix of feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    rows: Array2<f64>,
}

impl FeatureSet {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() < 2 || rows.ncols() == 0 {
            bail!(InvalidInput, "feature set needs at least 2 rows, got {:?}", rows.dim());
        }
        if rows.iter().any(|v| !v.is_finite()) {
            bail!(NonFinite, "feature set contains non-finite values");
        }
        Ok(Self { rows })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != d) {
            bail!(Shape, "feature rows have different lengths");
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((rows.len(), d), flat).expect("row lengths checked"))
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.len(), self.dim(), self.rows.iter().copied())
    }
}

/// Area-downsampled pixels as a feature vector, a stand-in extractor for smoke tests.
pub fn pixel_features(images: &[&Image], side: usize) -> Result<FeatureSet> {
    let rows = images
        .iter()
        .map(|img| {
            let small = resize(img, side, side, Interpolation::Area)?;
            Ok(small.pixels().iter().map(|&v| v as f64).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    FeatureSet::from_rows(&rows)
}

fn check_pair(a: &FeatureSet, b: &FeatureSet) -> Result<()> {
    if a.dim() != b.dim() {
        bail!(Shape, "feature dims differ: {} vs {}", a.dim(), b.dim());
    }
    Ok(())
}

fn mean_and_cov(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows() as f64;
    let mean = m.row_mean().transpose();
    let mut centered = m.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

/// Square root of a symmetric positive semi-definite matrix; `None` when
/// it has clearly negative eigenvalues.
fn psd_sqrt(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    if eig.eigenvalues.iter().any(|&v| v < -1e-9 * scale || !v.is_finite()) {
        return None;
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Some(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `‖μa − μb‖² + tr(Σa + Σb − 2(Σa Σb)^{1/2})`, with the cross term computed as
/// `tr((√Σa Σb √Σa)^{1/2})`.
pub fn frechet_distance(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    let (mu_a, cov_a) = mean_and_cov(&a.matrix());
    let (mu_b, cov_b) = mean_and_cov(&b.matrix());
    let d = a.dim();
    let cross = |ca: &DMatrix<f64>, cb: &DMatrix<f64>| -> Option<f64> {
        let ra = psd_sqrt(ca)?;
        let inner = &ra * cb * &ra;
        psd_sqrt(&inner).map(|m| m.trace())
    };
    let trace_term = match cross(&cov_a, &cov_b) {
        Some(t) => cov_a.trace() + cov_b.trace() - 2.0 * t,
        None => {
            log::warn!("covariance square root failed; adding 1e-6 to the diagonal");
            let eye = DMatrix::<f64>::identity(d, d) * 1e-6;
            let (ra, rb) = (&cov_a + &eye, &cov_b + &eye);
            let Some(t) = cross(&ra, &rb) else {
                bail!(NonFinite, "covariance square root failed after regularization");
            };
            ra.trace() + rb.trace() - 2.0 * t
        }
    };
    Ok((mu_a - mu_b).norm_squared() + trace_term)
}

/// Unbiased squared MMD with kernel `k(x, y) = (xᵀy / D + 1)³`.
pub fn kernel_mmd(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    check_pair(a, b)?;
    let d = a.dim() as f64;
    let (xa, xb) = (a.matrix(), b.matrix());
    let kernel = |g: DMatrix<f64>| g.map(|v| (v / d + 1.0).powi(3));
    let kaa = kernel(&xa * xa.transpose());
    let kbb = kernel(&xb * xb.transpose());
    let kab = kernel(&xa * xb.transpose());
    let (m, n) = (a.len() as f64, b.len() as f64);
    let off_diag = |k: &DMatrix<f64>| k.sum() - k.trace();
    Ok(off_diag(&kaa) / (m * (m - 1.0)) + off_diag(&kbb) / (n * (n - 1.0))
        - 2.0 * kab.sum() / (m * n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_set(n: usize, d: usize, shift: f64, scale: f64, seed: u64) -> FeatureSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSet::new(Array2::from_shape_fn((n, d), |_| {
            shift + scale * rng.sample::<f64, _>(StandardNormal)
        }))
        .unwrap()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = normal_set(200, 4, 0.0, 1.0, 1);
        assert!(frechet_distance(&a, &a).unwrap().abs() <= 1e-6);
        // With one sample on both sides only the diagonal differs: k = -2 (mean diag - mean off-diag) / m.
        let k = kernel_mmd(&a, &a).unwrap();
        let x = a.rows();
        let m = x.nrows();
        let kern = |i: usize, j: usize| (x.row(i).dot(&x.row(j)) / 4.0 + 1.0).powi(3);
        let diag = (0..m).map(|i| kern(i, i)).sum::<f64>() / m as f64;
        let off = (0..m)
            .flat_map(|i| (0..m).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| kern(i, j))
            .sum::<f64>()
            / (m * (m - 1)) as f64;
        assert!(k <= 0.0);
        assert!((k + 2.0 * (diag - off) / m as f64).abs() < 1e-9, "{k}");
    }

    #[test]
    fn one_dimensional_closed_form() {
        let a = normal_set(20000, 1, 0.0, 1.0, 2);
        let b = normal_set(20000, 1, 1.0, 1.0, 3);
        let f = frechet_distance(&a, &b).unwrap();
        assert!((f - 1.0).abs() < 0.05, "{f}");
    }

    #[test]
    fn frechet_scales_quadratically() {
        let a = normal_set(100, 3, 0.0, 1.0, 4);
        let b = normal_set(100, 3, 0.5, 2.0, 5);
        let c = 3.0;
        let scaled = |s: &FeatureSet| FeatureSet::new(s.rows() * c).unwrap();
        let f = frechet_distance(&a, &b).unwrap();
        let fs = frechet_distance(&scaled(&a), &scaled(&b)).unwrap();
        assert!((fs - c * c * f).abs() < 1e-8 * fs.max(1.0), "{f} {fs}");
        assert!((f - frechet_distance(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn rank_deficient_covariance_is_handled() {
        // Fewer rows than dims: singular covariance.
        let a = normal_set(3, 6, 0.0, 1.0, 6);
        let b = normal_set(3, 6, 0.2, 1.0, 7);
        assert!(frechet_distance(&a, &b).unwrap().is_finite());
    }

    #[test]
    fn kernel_mmd_grows_with_separation() {
        let point = |v: f64, seed: u64| normal_set(10, 2, v, 1e-3, seed);
        let a = point(0.0, 8);
        let near = kernel_mmd(&a, &point(1.0, 9)).unwrap();
        let far = kernel_mmd(&a, &point(3.0, 10)).unwrap();
        assert!(near > 0.0 && far > near);
        let b = normal_set(30, 2, 0.3, 1.0, 11);
        assert!((kernel_mmd(&a, &b).unwrap() - kernel_mmd(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn validation() {
        assert!(FeatureSet::from_rows(&[vec![1.0]]).is_err());
        assert!(FeatureSet::from_rows(&[vec![1.0], vec![f64::NAN]]).is_err());
        let a = normal_set(5, 2, 0.0, 1.0, 1);
        let b = normal_set(5, 3, 0.0, 1.0, 1);
        assert!(frechet_distance(&a, &b).is_err());
        let imgs = [Image::filled(8, 8, 3, 0.2), Image::filled(8, 8, 3, 0.7)];
        let f = pixel_features(&[&imgs[0], &imgs[1]], 2).unwrap();
        assert_eq!((f.len(), f.dim()), (2, 12));
    }
}
