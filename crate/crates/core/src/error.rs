use alloc::string::String;

/// Errors raised anywhere in the core library.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("noise schedule leaves alpha_bar_T = {alpha_bar_last:.4} >= 0.01; increase beta_max or the step count")]
    InsufficientNoise { alpha_bar_last: f64 },

    #[error("diffusion step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("sampling produced a non-finite model output at step {t}")]
    Sampling { t: usize },

    #[error("reward function returned a non-finite value ({0})")]
    Scoring(String),

    #[error("reward `{0}` is not differentiable; reward backpropagation cannot use it")]
    NonDifferentiableReward(String),

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("training diverged at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("rotation angle {angle} is within 1e-6 of pi; the logarithm branch is ambiguous")]
    Branch { angle: f64 },

    #[error("target field is singular at t = {t} under the chosen convention")]
    Singularity { t: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
