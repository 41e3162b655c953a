use nalgebra::DMatrix;

use crate::error::{invalid, shape_err, Error, Result};

/// Eigenvalues below this are treated as a real failure rather than round-off.
const NEGATIVE_EIGEN_TOL: f64 = 1e-8;

fn moments(feats: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = feats.len() as f64;
    let d = feats[0].len();
    let mut mu = vec![0.0; d];
    for f in feats {
        mu.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut cov = DMatrix::zeros(d, d);
    for f in feats {
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += (f[i] - mu[i]) * (f[j] - mu[j]);
            }
        }
    }
    // unbiased estimate, matching the usual FID convention
    (mu, cov / (n - 1.0))
}

fn eigen_clamped(m: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let sym = (&m + m.transpose()) * 0.5;
    let dim = sym.nrows();
    let eig = sym.try_symmetric_eigen(1e-14, 10_000).ok_or(Error::EigenNonConvergence)?;
    let mut values = Vec::with_capacity(dim);
    for &v in eig.eigenvalues.iter() {
        if v < -NEGATIVE_EIGEN_TOL {
            return Err(invalid(format!("covariance product has negative eigenvalue {v}")));
        }
        values.push(v.max(0.0));
    }
    Ok((eig.eigenvectors, values))
}

fn sqrt_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (vecs, vals) = eigen_clamped(m)?;
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(vals.len(), vals.iter().map(|v| v.sqrt())));
    Ok(&vecs * d * vecs.transpose())
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa^{1/2} Σb Σa^{1/2})^{1/2})`.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid(format!("need >= 2 vectors per set, got {} and {}", a.len(), b.len())));
    }
    let d = a[0].len();
    if d == 0 || a.iter().chain(b).any(|v| v.len() != d) {
        return Err(shape_err("feature vectors must share a non-zero dimension"));
    }
    let (mu_a, cov_a) = moments(a);
    let (mu_b, cov_b) = moments(b);
    let mean_term: f64 = mu_a.iter().zip(&mu_b).map(|(x, y)| (x - y) * (x - y)).sum();
    let root_a = sqrt_psd(cov_a.clone())?;
    let inner = &root_a * &cov_b * &root_a;
    let (_, vals) = eigen_clamped(inner)?;
    let cross: f64 = vals.iter().map(|v| v.sqrt()).sum();
    let dist = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !dist.is_finite() {
        return Err(Error::NonFinite("frechet distance".into()));
    }
    Ok(dist.max(0.0))
}
