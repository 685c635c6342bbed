//! Value-guided reinforcement fine-tuning of diffusion models at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and contains only numerics: a small
//! reverse-mode autodiff engine, DDPM on low-dimensional Euclidean data, the
//! denoising-MDP records, a Monte-Carlo value model, the value-guided
//! fine-tuning objective with its pairwise KL surrogate, reward functions,
//! flow matching on SO(3), and the sliced Wasserstein metric. File formats,
//! configuration and the CLI live in the `vard-lab` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod ddpm;
pub mod error;
pub mod mdp;
pub mod metrics;
pub mod prm;
pub mod rewards;
pub mod rng;
pub mod so3;
pub mod vard;

pub use error::{Error, Result};
