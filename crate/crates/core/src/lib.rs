//! Desk-scale masked image modeling with frozen-teacher feature targets.
//!
//! The pipeline masks each image, encodes only the visible patches, predicts
//! latents for the masked positions with a one-block cross-attention decoder,
//! projects both through a shared head and supervises the result against the
//! per-patch features of a frozen teacher. Supervision can be placed on the
//! visible predictions, the masked predictions, or both.
//!
//! Everything runs on a small in-crate tensor and reverse-mode differentiation
//! engine ([`numerics`]) so that every gradient can be checked against finite
//! differences in 64-bit arithmetic.

pub mod archive;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod loss;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod patching;
pub mod rng;
pub mod teacher;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Graph, Tensor, Var};
