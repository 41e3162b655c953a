//! Experiment configuration and the commands behind the `protodiff` CLI.

mod commands;
mod config;
mod layout;
pub mod render;
mod report;

pub use commands::{
    cmd_compare, cmd_evaluate, cmd_explain, cmd_gen_data, cmd_sample, cmd_train_diffusion, cmd_train_proto,
    cmd_trajectory, load_bank, load_denoiser, load_extractor, load_samples, Run, SampleEntry,
};
pub use config::{DataConfig, DiffusionConfig, EvalConfig, ExperimentConfig, OutputConfig, PrototypeConfig};
pub use layout::{require, RunLayout};
pub use report::{
    fmt_sig, mean_sd, ComparisonReport, Evaluation, HeadSummary, ImageInfluence, ImageMetrics, Summary,
};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_PREREQUISITE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_IO: i32 = 5;

/// Process exit code for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingPrerequisite { .. } => EXIT_MISSING_PREREQUISITE,
        Error::NonFinite(_) | Error::EigenNonConvergence => EXIT_NUMERIC,
        Error::Io(_) | Error::Format(_) | Error::Checkpoint(_) | Error::Json(_) => EXIT_IO,
        _ => EXIT_FAILURE,
    }
}
