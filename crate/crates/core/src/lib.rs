//! Mask-conditioned diffusion on synthetic phantoms, with prototype-based
//! explanations of generated images and faithfulness scoring.
//!
//! Module map:
//! - [`tensor`]: f64 tensors, tape autodiff, Adam, checkpoints
//! - [`diffusion`]: noise schedule, forward/reverse process, U-Net-lite denoiser
//! - [`prototypes`]: feature extractor, PPNet / EPPNet / ProtoPool heads, explanations
//! - [`metrics`]: PSNR, SSIM, LPIPS-style distance, faithfulness, Dice, Fréchet distance
//! - [`phantom`]: seeded phantom generator, PGM I/O, dataset manifests
//! - [`harness`]: experiment config and the CLI commands

pub mod diffusion;
pub mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod prototypes;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use exec::Execution;
pub use tensor::{Graph, Tensor, Var};
