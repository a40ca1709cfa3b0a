//! Vision-language pre-training with semantics-enhanced, text-involved
//! masked image modeling, at a scale that trains on a laptop CPU.
//!
//! The crate is organised by concern:
//!
//! * [`model`]: image, text, fusion and decoder transformers.
//! * [`distill`]: momentum teacher, encoding head and CLS agreement.
//! * [`masking`]: text-guided and random patch masks.
//! * [`mim`]: one masked-image-modeling step with its two losses.
//! * [`objectives`]: ITC, ITM, MLM and prefix-LM losses and their sum.
//! * [`train`], [`checkpoint`], [`eval`]: the training harness.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod masking;
pub mod mim;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod train;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use error::{Error, Result};
