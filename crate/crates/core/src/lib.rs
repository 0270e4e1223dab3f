//! Prompt-conditioned all-in-one image restoration.
//!
//! A four-level transformer encoder–decoder whose decoder is interleaved
//! with prompt blocks: learnable prompt components mixed by input-dependent
//! weights and fused back into the features by a transformer block. The
//! crate carries its own small reverse-mode autodiff ([`tensor`]) so every
//! gradient can be checked against finite differences.

pub mod blocks;
pub mod cli;
pub mod degrade;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod metrics;
pub mod network;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use network::{ModelConfig, PromptIr};
pub use tensor::{ParamStore, Tape, Tensor, Var};
