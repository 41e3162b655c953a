use serde::{Deserialize, Serialize};

use super::bank::{max_similarity, nis, HeadKind, Provenance, PrototypeBank};
use super::extractor::FeatureExtractor;
use super::features::FeatureMap;
use crate::error::{Error, Result};
use crate::metrics::{faithfulness, spatial_corr};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeRecord {
    pub prototype: usize,
    /// Best similarity `g_j` of the prototype on the explained image.
    pub similarity: f64,
    pub nis: f64,
    pub corr: f64,
    pub source: Option<Provenance>,
    /// Matched cell `(h, w)` in the explained image's feature grid.
    pub matched: (usize, usize),
}

/// Ranked prototype influences for one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub image_id: String,
    pub head: HeadKind,
    /// Number of prototypes `m` (the `1/m` factor of the faithfulness score).
    pub m: usize,
    /// Sorted by NIS, highest first.
    pub records: Vec<PrototypeRecord>,
    pub faithfulness: f64,
}

impl ExplanationReport {
    /// NIS vector in prototype order.
    pub fn nis_by_prototype(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.m];
        self.records.iter().for_each(|r| v[r.prototype] = r.nis);
        v
    }

    /// Faithfulness recomputed from the records alone.
    pub fn recompute_faithfulness(&self) -> Result<f64> {
        let nis: Vec<f64> = self.records.iter().map(|r| r.nis).collect();
        let corr: Vec<f64> = self.records.iter().map(|r| r.corr).collect();
        faithfulness(&nis, &corr)
    }
}

pub fn explain_features(bank: &PrototypeBank, features: &FeatureMap, image_id: &str) -> Result<ExplanationReport> {
    if bank.kind.pushes() {
        if let Some(j) = bank.provenance.iter().position(Option::is_none) {
            return Err(Error::MissingProvenance(j));
        }
    }
    let mut g = Vec::with_capacity(bank.m());
    let mut matched = Vec::with_capacity(bank.m());
    let mut corr = Vec::with_capacity(bank.m());
    for p in &bank.prototypes {
        let (s, cell) = max_similarity(features, p)?;
        g.push(s);
        matched.push(cell);
        corr.push(spatial_corr(p, features)?);
    }
    let weights = nis(&g)?;
    let score = faithfulness(&weights, &corr)?;
    let mut records: Vec<PrototypeRecord> = (0..bank.m())
        .map(|j| PrototypeRecord {
            prototype: j,
            similarity: g[j],
            nis: weights[j],
            corr: corr[j],
            source: bank.provenance[j].clone(),
            matched: matched[j],
        })
        .collect();
    records.sort_by(|a, b| b.nis.total_cmp(&a.nis).then(a.prototype.cmp(&b.prototype)));
    Ok(ExplanationReport { image_id: image_id.to_string(), head: bank.kind, m: bank.m(), records, faithfulness: score })
}

pub fn explain(bank: &PrototypeBank, extractor: &FeatureExtractor, image: &Tensor, image_id: &str) -> Result<ExplanationReport> {
    explain_features(bank, &extractor.extract(image)?, image_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_prototype_report() {
        let f = FeatureMap::new(1, 2, 3, vec![0.1, 0.5, 0.9, 1.0, 0.0, 0.2]).unwrap();
        let mut bank = PrototypeBank::new(HeadKind::Ppnet, vec![vec![0.1, 0.5, 0.9]], 0.0).unwrap();
        assert!(matches!(explain_features(&bank, &f, "x"), Err(Error::MissingProvenance(0))));
        bank.provenance[0] = Some(Provenance { image_id: "train".into(), h: 0, w: 0 });
        let r = explain_features(&bank, &f, "x").unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].nis, 1.0);
        assert_eq!(r.records[0].matched, (0, 0));
        assert!((r.faithfulness - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_is_sorted_and_consistent() {
        let f = FeatureMap::new(2, 2, 2, vec![0.0, 1.0, 1.0, 0.0, 0.5, 0.5, -1.0, 2.0]).unwrap();
        let bank = PrototypeBank::new(
            HeadKind::Protopool,
            vec![vec![3.0, 3.0], vec![0.0, 1.1], vec![0.9, 0.2]],
            0.0,
        )
        .unwrap();
        let r = explain_features(&bank, &f, "gen").unwrap();
        assert!(r.records.windows(2).all(|w| w[0].nis >= w[1].nis));
        assert!((r.records.iter().map(|x| x.nis).sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(r.recompute_faithfulness().unwrap(), r.faithfulness);
        assert!(r.faithfulness >= 0.0 && r.faithfulness <= 1.0 / 3.0);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<ExplanationReport>(&json).unwrap(), r);
    }
}
