//! Memorization-aware classifier-free guidance on an analytically solvable
//! toy diffusion model.
//!
//! The crate is organised bottom-up:
//!
//! - [`diffusion`]: noise schedules, forward noising, reverse steps, the
//!   [`Denoiser`](diffusion::Denoiser) contract and the guided sampler.
//! - [`toy`]: the closed-form conditional denoiser over a synthetic dataset in
//!   which global and local memorization are planted by construction.
//! - [`detection`]: first-step magnitude and masked magnitude signals.
//! - [`guidance`]: CFG, prompt re-anchoring, the balanced rule and the
//!   per-policy gated step.
//! - [`prompt_engineering`]: the gradient-descent embedding baseline.
//! - [`semantic_search`]: alternative-condition search with early stopping.
//! - [`metrics`]: copy-detection similarity, localized similarity, utility and
//!   aggregate statistics.
//! - [`pipeline`]: one gated generation from detection to final sample.

pub mod detection;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod metrics;
pub mod pipeline;
pub mod prompt_engineering;
pub mod semantic_search;
pub mod toy;
mod vecops;

pub use error::{Error, Result};
