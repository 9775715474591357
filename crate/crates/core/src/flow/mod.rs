//! Velocity fields, Euler sampling, couplings and conditional flow-matching
//! training.

pub mod checkpoint;
pub mod coupling;
pub mod field;
pub mod mlp;
pub mod train;

pub use coupling::{pair_batch, pair_indices, pairing_cost, Coupling};
pub use field::{euler_sample, euler_sample_batch, euler_trajectory, AnalyticGmmField, MlpField, VelocityField};
pub use mlp::{Adam, AdamConfig, BackwardScratch, ForwardCache, Layer, Mlp, Scalar};
pub use train::{cfm_loss, cfm_loss_into, train_cfm, train_cfm_with_progress, Sampler, StandardNormal, LossWorkspace, TrainConfig, TrainOutcome};
