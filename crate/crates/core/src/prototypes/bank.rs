use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{sq_dist, FeatureMap, FeatureSet};
use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Ppnet,
    Eppnet,
    Protopool,
}

impl HeadKind {
    pub const ALL: [HeadKind; 3] = [HeadKind::Ppnet, HeadKind::Eppnet, HeadKind::Protopool];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Ppnet => "ppnet",
            HeadKind::Eppnet => "eppnet",
            HeadKind::Protopool => "protopool",
        }
    }

    /// Heads whose prototypes are pushed onto training patches.
    pub fn pushes(self) -> bool {
        self != HeadKind::Protopool
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown head `{s}` (expected ppnet, eppnet or protopool)")))
    }
}

/// Training patch a prototype was pushed onto.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub h: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub kind: HeadKind,
    pub prototypes: Vec<Vec<f64>>,
    pub provenance: Vec<Option<Provenance>>,
    pub lambda_div: f64,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    head: HeadKind,
    lambda_div: f64,
    provenance: BTreeMap<usize, Provenance>,
}

impl PrototypeBank {
    pub fn new(kind: HeadKind, prototypes: Vec<Vec<f64>>, lambda_div: f64) -> Result<Self> {
        let bank = Self { kind, provenance: vec![None; prototypes.len()], prototypes, lambda_div };
        bank.validate()?;
        Ok(bank)
    }

    /// `m` prototypes copied from distinct, uniformly chosen training cells.
    pub fn from_random_patches<R: Rng + ?Sized>(
        kind: HeadKind,
        m: usize,
        features: &FeatureSet,
        lambda_div: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let cells = features.cells_per_map();
        let total = features.len() * cells;
        if m == 0 || m > total {
            return Err(invalid(format!("cannot draw {m} prototypes from {total} training patches")));
        }
        let prototypes = rand::seq::index::sample(rng, total, m)
            .into_iter()
            .map(|k| features.maps[k / cells].cell(k % cells).to_vec())
            .collect();
        Self::new(kind, prototypes, lambda_div)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.prototypes.first() else {
            return Err(invalid("a prototype bank needs m >= 1"));
        };
        if first.is_empty() || self.prototypes.iter().any(|p| p.len() != first.len()) {
            return Err(shape_err("prototypes must share a non-zero dimension"));
        }
        if self.prototypes.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prototype vector".into()));
        }
        if self.provenance.len() != self.prototypes.len() {
            return Err(invalid("provenance table length differs from m"));
        }
        if !(self.lambda_div >= 0.0) {
            return Err(invalid("lambda_div must be >= 0"));
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].len()
    }

    /// Prototypes as an `[m, D]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.m(), self.dim()], self.prototypes.concat()).expect("validated bank")
    }

    pub fn set_from_tensor(&mut self, t: &Tensor) -> Result<()> {
        if t.shape() != [self.m(), self.dim()] {
            return Err(shape_err(format!("expected [{}, {}] prototypes, got {:?}", self.m(), self.dim(), t.shape())));
        }
        t.ensure_finite("prototype update")?;
        for (j, p) in self.prototypes.iter_mut().enumerate() {
            p.copy_from_slice(&t.data()[j * t.shape()[1]..(j + 1) * t.shape()[1]]);
        }
        Ok(())
    }

    /// Sidecar path next to a bank checkpoint: `x.ckpt` → `x.provenance.json`.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        path.with_extension("provenance.json")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &[("prototypes".to_string(), self.to_tensor())])?;
        let sidecar = Sidecar {
            head: self.kind,
            lambda_div: self.lambda_div,
            provenance: self
                .provenance
                .iter()
                .enumerate()
                .filter_map(|(j, p)| p.clone().map(|p| (j, p)))
                .collect(),
        };
        serde_json::to_writer_pretty(File::create(Self::sidecar_path(path))?, &sidecar)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = read_checkpoint(&mut BufReader::new(File::open(path)?))?;
        let [(name, t)] = <[(String, Tensor); 1]>::try_from(tensors)
            .map_err(|v| Error::Checkpoint(format!("bank checkpoint holds {} tensors, expected 1", v.len())))?;
        if name != "prototypes" || t.rank() != 2 {
            return Err(Error::Checkpoint(format!("unexpected bank tensor `{name}` {:?}", t.shape())));
        }
        let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(Self::sidecar_path(path))?))?;
        let d = t.shape()[1];
        let prototypes = t.data().chunks(d).map(<[f64]>::to_vec).collect();
        let mut bank = Self::new(sidecar.head, prototypes, sidecar.lambda_div)?;
        for (j, p) in sidecar.provenance {
            let slot = bank.provenance.get_mut(j).ok_or_else(|| Error::Format(format!("provenance for prototype {j}")))?;
            *slot = Some(p);
        }
        Ok(bank)
    }
}

fn check_dim(f: &FeatureMap, p: &[f64]) -> Result<()> {
    if f.depth() != p.len() {
        return Err(shape_err(format!("feature depth {} vs prototype dimension {}", f.depth(), p.len())));
    }
    Ok(())
}

/// `s_hw = −‖f_hw − p‖²` as an `[H,W]` grid.
pub fn similarity_map(f: &FeatureMap, p: &[f64]) -> Result<Tensor> {
    check_dim(f, p)?;
    Tensor::new([f.height(), f.width()], (0..f.cells()).map(|i| -sq_dist(f.cell(i), p)).collect())
}

/// Best similarity `g` and its cell; ties go to the smallest row-major index.
pub fn max_similarity(f: &FeatureMap, p: &[f64]) -> Result<(f64, (usize, usize))> {
    check_dim(f, p)?;
    if f.cells() == 0 {
        return Err(invalid("empty feature map"));
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for i in 0..f.cells() {
        let s = -sq_dist(f.cell(i), p);
        if i == 0 || s > best.0 {
            best = (s, i);
        }
    }
    Ok((best.0, f.coords(best.1)))
}

/// Softmax of the similarity scores, shifted by their maximum.
pub fn nis(g: &[f64]) -> Result<Vec<f64>> {
    if g.is_empty() {
        return Err(invalid("NIS needs at least one prototype"));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("similarity scores".into()));
    }
    let mx = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = g.iter().map(|v| (v - mx).exp()).collect();
    let total: f64 = e.iter().sum();
    Ok(e.into_iter().map(|v| v / total).collect())
}

/// `Σ_{i≠j} exp(−‖p_i − p_j‖²)` over ordered pairs. Zero (with a warning) for `m < 2`.
pub fn diversity_loss(prototypes: &[Vec<f64>]) -> f64 {
    if prototypes.len() < 2 {
        log::warn!("diversity loss is undefined for fewer than two prototypes; using 0");
        return 0.0;
    }
    let mut total = 0.0;
    for (i, a) in prototypes.iter().enumerate() {
        for (j, b) in prototypes.iter().enumerate() {
            if i != j {
                total += (-sq_dist(a, b)).exp();
            }
        }
    }
    total
}

/// Soft assignment of every cell to the prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolAssignment {
    /// `cells × m`, row-major; each row sums to 1.
    pub alpha: Vec<f64>,
    pub z: FeatureMap,
}

/// `α_ij = softmax_j(−‖f_i − p_j‖²)`, `z_i = Σ_j α_ij p_j`.
pub fn pool_assign(f: &FeatureMap, prototypes: &[Vec<f64>]) -> Result<PoolAssignment> {
    let m = prototypes.len();
    if m == 0 {
        return Err(invalid("pool assignment needs at least one prototype"));
    }
    for p in prototypes {
        check_dim(f, p)?;
    }
    let d = f.depth();
    let mut alpha = Vec::with_capacity(f.cells() * m);
    let mut z = Vec::with_capacity(f.cells() * d);
    for i in 0..f.cells() {
        let neg: Vec<f64> = prototypes.iter().map(|p| -sq_dist(f.cell(i), p)).collect();
        let row = nis(&neg)?;
        let mut zi = vec![0.0; d];
        for (a, p) in row.iter().zip(prototypes) {
            zi.iter_mut().zip(p).for_each(|(z, v)| *z += a * v);
        }
        alpha.extend(row);
        z.extend(zi);
    }
    Ok(PoolAssignment { alpha, z: FeatureMap::new(f.height(), f.width(), d, z)? })
}

/// `‖p − nearest cell of f‖²`, i.e. `−g`.
fn min_dist(f: &FeatureMap, p: &[f64]) -> f64 {
    (0..f.cells()).map(|i| sq_dist(f.cell(i), p)).fold(f64::INFINITY, f64::min)
}

/// Sample sets `X_j`: every image joins the prototype it is most similar to
/// (ties to the smaller `j`), and each prototype additionally keeps the image
/// most similar to it (ties to the smaller index), so no set is empty.
pub fn assign_samples(prototypes: &[Vec<f64>], maps: &[FeatureMap]) -> Result<Vec<Vec<usize>>> {
    if maps.is_empty() {
        return Err(invalid("cannot assign samples from an empty dataset"));
    }
    for p in prototypes {
        check_dim(&maps[0], p)?;
    }
    let dist: Vec<Vec<f64>> = maps.iter().map(|f| prototypes.iter().map(|p| min_dist(f, p)).collect()).collect();
    Ok(assignment_from_distances(&dist, prototypes.len()))
}

/// Same rule as [`assign_samples`] from a precomputed `N × m` table of
/// image-to-prototype distances.
pub(crate) fn assignment_from_distances(dist: &[Vec<f64>], m: usize) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); m];
    for (i, row) in dist.iter().enumerate() {
        sets[argmin(row)].push(i);
    }
    for (j, set) in sets.iter_mut().enumerate() {
        let col: Vec<f64> = dist.iter().map(|row| row[j]).collect();
        let best = argmin(&col);
        if !set.contains(&best) {
            set.push(best);
            set.sort_unstable();
        }
    }
    sets
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// `Σ_j min_{x∈X_j} ‖p_j − f(x)_{h*,w*}‖²`.
pub fn alignment_loss(prototypes: &[Vec<f64>], maps: &[FeatureMap], assignment: &[Vec<usize>]) -> Result<f64> {
    if assignment.len() != prototypes.len() {
        return Err(invalid(format!("{} sample sets for {} prototypes", assignment.len(), prototypes.len())));
    }
    let mut total = 0.0;
    for (j, (p, set)) in prototypes.iter().zip(assignment).enumerate() {
        if set.is_empty() {
            return Err(invalid(format!("prototype {j} has no assigned samples")));
        }
        let mut best = f64::INFINITY;
        for &i in set {
            let f = maps.get(i).ok_or_else(|| invalid(format!("sample index {i} out of range")))?;
            check_dim(f, p)?;
            best = best.min(min_dist(f, p));
        }
        total += best;
    }
    Ok(total)
}
