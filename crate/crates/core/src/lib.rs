//! Video representation built from keyframes with temporal prompts.
//!
//! The pipeline: [`media`] picks keyframes and prompt frames from a video,
//! [`compose`] lays each group out as a single patch-aligned image,
//! [`rope`] assigns every token a `(h, w, t, s)` coordinate and applies
//! rotary position embedding over it, and [`harness`] runs a small
//! attention model over the result.

pub mod compose;
pub mod config;
pub mod dtns;
pub mod error;
pub mod harness;
pub mod io;
pub mod media;
pub mod rng;
pub mod rope;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{TokenBlock, TokenKind};
