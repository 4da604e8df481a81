//! Open-world test-time adaptation on a toy vision transformer.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`tape`]: dense `f64` matrices and reverse-mode differentiation.
//! - [`backbone`]: a frozen pre-norm transformer exposing per-layer class and patch tokens.
//! - [`aan`]: attention affine adapter (token-conditioned scale/shift of Q, K, V).
//! - [`hln`]: ladder OOD branch over per-layer class tokens, fusion and OOD scores.
//! - [`losses`]: entropy objectives.
//! - [`engine`]: the sharpness-aware two-pass adaptation loop.
//! - [`eval`]: synthetic open-world streams, metrics and report files.
//! - [`config`] and [`checkpoint`]: TOML run configuration and binary model files.

pub mod aan;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hln;
pub mod layers;
pub mod losses;
pub mod oracle;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Axis, Tape, Var};
pub use tensor::Tensor;
