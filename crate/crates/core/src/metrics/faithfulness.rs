use crate::error::{invalid, shape_err, Result};
use crate::prototypes::{sq_dist, FeatureMap};

/// Pearson correlation of two equal-length vectors; 0 when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    if a.is_empty() || a.len() != b.len() {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let denom = (va * vb).sqrt();
    if denom <= f64::EPSILON * n.max(1.0) || !denom.is_finite() {
        return 0.0;
    }
    (cov / denom).clamp(-1.0, 1.0)
}

/// `max(ρ, 0)` between `prototype` and the feature patch at its most similar
/// cell of `features`.
pub fn spatial_corr(prototype: &[f64], features: &FeatureMap) -> Result<f64> {
    if prototype.len() != features.depth() {
        return Err(shape_err(format!(
            "prototype has {} dims, feature depth is {}",
            prototype.len(),
            features.depth()
        )));
    }
    let mut best = (0, f64::INFINITY);
    for i in 0..features.cells() {
        let d = sq_dist(features.cell(i), prototype);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(pearson(prototype, features.cell(best.0)).max(0.0))
}

/// `F = (1/m)·Σ_j NIS_j·corr_j`.
pub fn faithfulness(nis: &[f64], corrs: &[f64]) -> Result<f64> {
    if nis.len() != corrs.len() {
        return Err(shape_err(format!("{} NIS values vs {} correlations", nis.len(), corrs.len())));
    }
    if nis.is_empty() {
        return Err(invalid("faithfulness needs at least one prototype"));
    }
    let m = nis.len() as f64;
    Ok(nis.iter().zip(corrs).map(|(n, c)| n * c).sum::<f64>() / m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    #[test]
    fn corr_examples() {
        let p = [0.2, -1.0, 0.7];
        let same = FeatureMap::new(1, 1, 3, p.to_vec()).unwrap();
        assert!((spatial_corr(&p, &same).unwrap() - 1.0).abs() < 1e-12);
        let neg = FeatureMap::new(1, 1, 3, p.iter().map(|v| -v).collect()).unwrap();
        assert_eq!(spatial_corr(&p, &neg).unwrap(), 0.0);
        let flat = FeatureMap::new(1, 1, 3, vec![1.0; 3]).unwrap();
        assert_eq!(spatial_corr(&p, &flat).unwrap(), 0.0);
        assert!(spatial_corr(&p[..2], &same).is_err());
    }

    #[test]
    fn corr_uses_nearest_cell() {
        let p = [1.0, 0.0, 0.0];
        // far cell is perfectly correlated, near cell is anti-correlated
        let f = FeatureMap::new(1, 2, 3, vec![10.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(spatial_corr(&p, &f).unwrap(), 0.0);
    }

    #[test]
    fn pearson_matches_textbook_formula() {
        let mut r = rng::seeded(4);
        let a: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..7).map(|_| r.random_range(-1.0..1.0)).collect();
        let n = 7.0;
        let sab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let saa: f64 = a.iter().map(|x| x * x).sum();
        let sbb: f64 = b.iter().map(|x| x * x).sum();
        let expected = (n * sab - sa * sb) / ((n * saa - sa * sa).sqrt() * (n * sbb - sb * sb).sqrt());
        assert!((pearson(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn faithfulness_examples() {
        assert_eq!(faithfulness(&[1.0], &[1.0]).unwrap(), 1.0);
        assert_eq!(faithfulness(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.25);
        assert!(faithfulness(&[1.0], &[1.0, 0.0]).is_err());
    }
}
