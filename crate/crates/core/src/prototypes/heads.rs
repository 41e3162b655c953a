use rand::Rng;

use super::bank::{assignment_from_distances, HeadKind, Provenance, PrototypeBank};
use super::features::{sq_dist, FeatureSet};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    /// Number of prototypes `m`.
    pub prototypes: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Diversity weight (EPPNet only).
    pub lambda_div: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { prototypes: 10, steps: 200, learning_rate: 0.02, lambda_div: 0.1 }
    }
}

/// Objective of head `kind` for prototypes `protos` (`[m, D]`) over the
/// stacked training cells `feats` (`[N·C, D]`, `C` cells per image).
///
/// - ppnet: cluster cost `mean_i min_j ‖p_j − nearest cell of x_i‖²` plus the
///   alignment cost over the sample sets `X_j`
/// - eppnet: ppnet plus `λ_div · Σ_{i≠j} exp(−‖p_i − p_j‖²)`
/// - protopool: `mean over cells ‖f − z‖²` with `z` the soft pooled prototype
pub fn head_objective(
    g: &Graph,
    protos: Var,
    feats: Var,
    cells_per_image: usize,
    kind: HeadKind,
    lambda_div: f64,
) -> Result<Var> {
    let (ps, fs) = (g.shape(protos), g.shape(feats));
    let (&[m, d], &[nc, fd]) = (ps.as_slice(), fs.as_slice()) else {
        return Err(shape_err(format!("head objective needs [m,D] and [N,D], got {ps:?} and {fs:?}")));
    };
    if d != fd || cells_per_image == 0 || nc % cells_per_image != 0 || nc == 0 {
        return Err(shape_err(format!("prototypes {ps:?} vs features {fs:?} with {cells_per_image} cells per image")));
    }
    let n = nc / cells_per_image;
    let dist = g.pairwise_sq_dist(feats, protos)?;
    match kind {
        HeadKind::Ppnet | HeadKind::Eppnet => {
            let per_image = g.reshape(dist, [n, cells_per_image, m])?;
            let (dmin, _) = g.min_axis(per_image, 1)?;
            let (closest, _) = g.min_axis(dmin, 1)?;
            let cluster = g.mean(closest)?;
            let table: Vec<Vec<f64>> = g.value(dmin).data().chunks(m).map(<[f64]>::to_vec).collect();
            let sets = assignment_from_distances(&table, m);
            let picks: Vec<usize> = sets
                .iter()
                .enumerate()
                .map(|(j, set)| {
                    let best = set.iter().copied().min_by(|&a, &b| table[a][j].total_cmp(&table[b][j])).expect("non-empty");
                    best * m + j
                })
                .collect();
            let align = g.sum(g.gather(dmin, &picks)?)?;
            let base = g.add(cluster, align)?;
            if kind == HeadKind::Ppnet || m < 2 {
                return Ok(base);
            }
            let pd = g.pairwise_sq_dist(protos, protos)?;
            let off_diag = g.constant(Tensor::from_fn([m, m], |k| if k / m == k % m { 0.0 } else { 1.0 }));
            let div = g.sum(g.mul(g.exp(g.neg(pd)?)?, off_diag)?)?;
            g.add(base, g.scale(div, lambda_div)?)
        }
        HeadKind::Protopool => {
            let alpha = g.softmax(g.neg(dist)?, 1)?;
            let z = g.matmul(alpha, protos)?;
            let err = g.sum_axis(g.square(g.sub(feats, z)?)?, 1)?;
            g.mean(err)
        }
    }
}

/// Objective value of `bank` on `features`.
pub fn objective_value(bank: &PrototypeBank, features: &FeatureSet) -> Result<f64> {
    let g = Graph::new();
    let p = g.constant(bank.to_tensor());
    let f = g.constant(features.stacked());
    let l = head_objective(&g, p, f, features.cells_per_map(), bank.kind, bank.lambda_div)?;
    g.scalar(l)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadReport {
    pub initial_objective: f64,
    /// Objective after optimisation, before any push.
    pub final_objective: f64,
}

/// Adam on the head objective from the bank's current prototypes.
pub fn fit_prototypes(bank: &mut PrototypeBank, features: &FeatureSet, config: &HeadConfig) -> Result<HeadReport> {
    if features.is_empty() {
        return Err(invalid("cannot train a head on an empty dataset"));
    }
    let stacked = features.stacked();
    let cells = features.cells_per_map();
    let mut params = crate::tensor::ParamSet::new();
    let id = params.add("prototypes", bank.to_tensor());
    let mut opt = AdamState::new(AdamConfig::with_lr(config.learning_rate), &params);
    let initial_objective = objective_value(bank, features)?;
    for step in 0..config.steps {
        let g = Graph::new();
        let vars = params.bind(&g);
        let f = g.constant(stacked.clone());
        let l = head_objective(&g, vars[id.index()], f, cells, bank.kind, bank.lambda_div)?;
        if !g.scalar(l)?.is_finite() {
            return Err(Error::NonFinite(format!("{} objective at step {step}", bank.kind)));
        }
        let mut grads = g.backward(l)?;
        params.accumulate(&vars, &mut grads)?;
        opt.step(&mut params)?;
    }
    bank.set_from_tensor(params.get(id))?;
    bank.provenance.iter_mut().for_each(|p| *p = None);
    let final_objective = objective_value(bank, features)?;
    Ok(HeadReport { initial_objective, final_objective })
}

/// Replaces every prototype by its nearest training patch (global scan over
/// images, then cells; ties go to the first) and records where it came from.
pub fn push_prototypes(bank: &mut PrototypeBank, features: &FeatureSet) -> Result<()> {
    if features.is_empty() {
        return Err(invalid("cannot push prototypes onto an empty dataset"));
    }
    if features.depth() != bank.dim() {
        return Err(shape_err(format!("feature depth {} vs prototype dimension {}", features.depth(), bank.dim())));
    }
    for j in 0..bank.m() {
        let mut best = (f64::INFINITY, 0, 0);
        for (i, f) in features.maps.iter().enumerate() {
            for c in 0..f.cells() {
                let d = sq_dist(f.cell(c), &bank.prototypes[j]);
                if d < best.0 {
                    best = (d, i, c);
                }
            }
        }
        let f = &features.maps[best.1];
        bank.prototypes[j] = f.cell(best.2).to_vec();
        let (h, w) = f.coords(best.2);
        bank.provenance[j] = Some(Provenance { image_id: features.ids[best.1].clone(), h, w });
    }
    Ok(())
}

/// Initialises from random patches, fits, and (for ppnet / eppnet) pushes.
pub fn train_head<R: Rng + ?Sized>(
    kind: HeadKind,
    features: &FeatureSet,
    config: &HeadConfig,
    rng: &mut R,
) -> Result<(PrototypeBank, HeadReport)> {
    if features.is_empty() {
        return Err(invalid("cannot train a head on an empty dataset"));
    }
    let lambda = if kind == HeadKind::Eppnet { config.lambda_div } else { 0.0 };
    let mut bank = PrototypeBank::from_random_patches(kind, config.prototypes, features, lambda, rng)?;
    let report = fit_prototypes(&mut bank, features, config)?;
    if kind.pushes() {
        push_prototypes(&mut bank, features)?;
    }
    Ok((bank, report))
}
