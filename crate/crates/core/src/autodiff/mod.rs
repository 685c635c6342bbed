//! Reverse-mode automatic differentiation and the feed-forward pieces built on
//! it: dense tensors, the tape, MLPs, time embeddings, and AdamW.

mod adam;
mod embed;
pub mod gradcheck;
mod mlp;
mod params;
mod tape;
mod tensor;

pub use adam::{clip_global_norm, Adam, AdamConfig, AdamState};
pub(crate) use embed::embedding_rows;
pub use embed::{sinusoidal_embedding, sinusoidal_time_embedding};
pub use mlp::{Layer, Mlp};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Activation, Gradients, Tape, Var};
pub use tensor::Tensor;
