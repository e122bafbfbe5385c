//! Softmax self-attention and a linearized variant whose attention map is
//! `(C/r) x C` instead of `N x N`, with everything needed to check the two:
//! scalar-loop oracles, hand-written gradients against finite differences,
//! exact allocation accounting and wall-time scaling sweeps.
//!
//! Feature maps are `N x C` matrices (positions as rows); 1×1 convolutions
//! are right-multiplications by `C x C'` weights.

pub mod attention;
pub mod bench;
pub mod channel_attention;
mod error;
pub mod gradients;
pub mod ledger;
pub mod projections;
mod rng;
pub mod tensor;
pub mod verify;

pub use attention::{
    channel_weight_report, elementwise_oracle_linear, elementwise_oracle_quadratic, forward,
    linear_sa_forward_linear, linear_sa_forward_quadratic, residual_combine, vanilla_sa_forward,
    AttentionArtifacts, ChannelWeightReport, OracleKernel, Variant,
};
pub use bench::{
    predict_peak_floats, BenchConfig, BenchRecord, BenchReport, Direction, FeasibilityFrontier,
    ScalingFit,
};
pub use channel_attention::{ca_forward, global_average_pool, CAWeights};
pub use error::{Error, Result, Shape};
pub use gradients::{backward, backward_ca, backward_linear, backward_vanilla, GradientBundle};
pub use ledger::AllocationLedger;
pub use projections::{embed, init_projections, rank_one_projections, FeatureMap, ProjectionSet};
pub use rng::{Rng, RNG_ALGORITHM};
pub use tensor::Matrix;
