//! Affine coupling flows with batch normalization inside the coupling networks.

pub mod batchnorm;
pub mod coupling;
pub mod mlp;
pub mod model;

pub use batchnorm::{batch_stats, batchnorm_forward, BatchNormState, BatchStats, EvalMode};
pub use coupling::CouplingLayer;
pub use mlp::{Activation, Dense, Mlp};
pub use model::{
    bpd, flow_forward, flow_inverse, log_likelihood, log_likelihood_batched, mixed_conditional_loglik,
    prior_log_density, Batch, FlowConfig, FlowModel, FlowOutput,
};
