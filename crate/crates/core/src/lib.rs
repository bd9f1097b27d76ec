//! Z-score logit standardization for knowledge distillation.
//!
//! Teacher and student logits are each standardized to zero mean and
//! standard deviation `1 / tau` before the softmax, so a student only has to
//! match the teacher's logit relations, not its logit range and variance.
//! The crate also carries the machinery to check the method numerically:
//! entropy-maximization solvers, a manual-backprop MLP, synthetic data and
//! the experiments built on them.

pub mod data;
pub mod error;
pub mod experiments;
pub mod json;
pub mod logitcore;
pub mod losses;
pub mod maxent;
pub mod nn;
pub mod props;
pub mod rng;

pub use error::{Error, Result};
pub use logitcore::{
    argmax, general_softmax, logit_stats, softmax_t, zscore, zscore_guarded, LogitStats,
    LogitVector, ProbabilityVector, SoftmaxParams, StandardizedLogits,
};
pub use losses::{
    cross_entropy, entropy, kd_objective, kd_objective_grad, kl_div, KdConfig, LossBreakdown,
    TemperatureScheme,
};
