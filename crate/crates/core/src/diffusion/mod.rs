//! Forward noising chain, learned reverse chain, `L_simple` training and
//! mask-conditioned sampling with trajectory capture.

mod net;
mod process;
mod schedule;

pub use net::{timestep_embedding, DenoiserConfig, DenoiserNet, NoisePredictor};
pub use process::{
    diffusion_loss, is_recorded, p_sample_step, p_sample_step_with_eps, q_sample, q_sample_with, q_step, sample,
    sample_many, train_step, trajectory, SampleOutput, TrainBatch, TrajectoryFrame,
};
pub use schedule::{scaled_beta_range, NoiseSchedule};
