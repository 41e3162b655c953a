use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generate::{random_phantom, PhantomStyle};
use super::pgm::{load_image, quantized, save_image};
use crate::error::{invalid, Error, Result};
use crate::exec::Execution;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub id: String,
    /// Path relative to the manifest's directory.
    pub image: String,
    pub mask: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub items: Vec<ManifestItem>,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub items: Vec<DatasetItem>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetItem> {
        self.items.iter().filter(move |i| i.split == split)
    }

    pub fn train(&self) -> Vec<&DatasetItem> {
        self.split(Split::Train).collect()
    }

    pub fn get(&self, id: &str) -> Option<&DatasetItem> {
        self.items.iter().find(|i| i.id == id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Number of validation items for `n` phantoms: the last `n/10`.
pub fn val_count(n: usize) -> usize {
    n / 10
}

pub fn config_hash(n: usize, seed: u64, size: usize, style: &PhantomStyle) -> String {
    let canonical = format!(
        "n={n};seed={seed};size={size};background={:?};texture={:?};noise={:?}",
        style.background, style.texture_amplitude, style.noise_floor
    );
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Renders `n` phantoms (item `i` seeded with `seed + i`) in memory, quantised
/// to 8 bits so they equal what a reload from disk returns.
pub fn build_dataset(n: usize, seed: u64, size: usize, style: PhantomStyle, exec: Execution) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("dataset needs at least one phantom"));
    }
    let n_train = n - val_count(n);
    let items = exec.try_map(n, |i| {
        let s = seed.wrapping_add(i as u64);
        random_phantom(s, size, style).map(|p| DatasetItem {
            id: format!("phantom_{i:04}"),
            image: quantized(&p.image),
            mask: p.mask,
            seed: s,
            split: if i < n_train { Split::Train } else { Split::Val },
        })
    })?;
    Ok(Dataset { items })
}

/// Writes `n` phantoms and `manifest.json` under `out_dir`.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    size: usize,
    style: PhantomStyle,
    out_dir: &Path,
    exec: Execution,
) -> Result<(DatasetManifest, Dataset)> {
    let dataset = build_dataset(n, seed, size, style, exec)?;
    fs::create_dir_all(out_dir)?;
    let mut items = Vec::with_capacity(n);
    for item in &dataset.items {
        let image = format!("images/{}.pgm", item.id);
        let mask = format!("masks/{}_mask.pgm", item.id);
        save_image(&out_dir.join(&image), &item.image)?;
        save_image(&out_dir.join(&mask), &item.mask)?;
        items.push(ManifestItem { id: item.id.clone(), image, mask, seed: item.seed, split: item.split });
    }
    let manifest = DatasetManifest { items, config_hash: config_hash(n, seed, size, &style) };
    fs::write(out_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok((manifest, dataset))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut ids: Vec<&str> = manifest.items.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Format("manifest has duplicate ids".into()));
    }
    Ok(manifest)
}

/// Loads every image and mask referenced by the manifest at `path`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest = read_manifest(path)?;
    let root: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut items = Vec::with_capacity(manifest.items.len());
    for m in manifest.items {
        let image = load_image(&root.join(&m.image))?;
        let mask = load_image(&root.join(&m.mask))?;
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Format(format!("mask of `{}` is not binary", m.id)));
        }
        items.push(DatasetItem { id: m.id, image, mask, seed: m.seed, split: m.split });
    }
    Ok(Dataset { items })
}
