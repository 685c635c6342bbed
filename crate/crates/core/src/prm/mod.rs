//! The value function `V(x_t, c)`, read as a process reward model: expected
//! terminal reward given an intermediate diffusion state, fitted by
//! Monte-Carlo regression on terminal rewards.
//!
//! The value is indexed by diffusion index `t` (0 is the clean sample).

mod net;
mod toy;
mod train;

pub use net::{
    value_loss, value_step, RefreshConfig, RewardAsValue, RunningStats, TargetScale, ValueArch,
    ValueFunction, ValueNet,
};
pub use toy::{tabular_least_squares, TabularMdp, TwoBranchSource};
pub use train::{
    has_converged, pretrain_value, refresh_value, rollout_context, DiffusionSource,
    TrajectorySource, ValueLossRow, ValueTrainConfig, ValueTrainReport,
};
