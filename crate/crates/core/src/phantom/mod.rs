//! Seeded synthetic phantoms (image + region mask), PGM I/O, and dataset manifests.

mod dataset;
mod generate;
mod pgm;

pub use dataset::{
    build_dataset, config_hash, generate_dataset, load_dataset, read_manifest, val_count, Dataset, DatasetItem,
    DatasetManifest, ManifestItem, Split, MANIFEST_FILE,
};
pub use generate::{downsample, generate_phantom, random_phantom, Ellipse, Phantom, PhantomParams, PhantomStyle};
pub use pgm::{decode_pgm, encode_pgm, load_image, quantize, quantized, save_image};
