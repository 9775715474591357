// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod flow;
pub mod flower;
pub mod gmm;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod operators;
pub mod rng;

pub use error::{Error, Result};
pub use flower::{FlowerConfig, FlowerOutput, TrajectoryRecord};
pub use gmm::{GaussianMixture, LinearGaussianObservation};
pub use operators::{LinearOperator, SpdSolveOptions};
