//! Text preference optimization for conditional diffusion models, end to end
//! on a procedural shape world.
//!
//! * [`autodiff`]: reverse-mode tape over dense tensors.
//! * [`scenegen`]: scene specs, renderer, caption grammar and the
//!   programmatic alignment verifier.
//! * [`editor`]: rule-based construction of mismatched captions.
//! * [`diffusion`]: schedule, denoiser and guided samplers.
//! * [`alignment`]: diffusion, TDPO, TKTO and image-pair DPO/KTO objectives.
//! * [`trainer`]: SFT and alignment loops, AdamW, checkpoints.
//! * [`evaluator`]: win rates, implicit preference score and correlation.

pub mod alignment;
pub mod autodiff;
pub mod diffusion;
pub mod editor;
pub mod error;
pub mod evaluator;
pub mod rng;
pub mod scenegen;
pub mod trainer;

pub use error::{Error, Result};
