//! Scene text recognition with primitive representation learning.
//!
//! Two recognizer families operate on 64x256 (horizontal) or 256x64
//! (vertical) grayscale images:
//!
//! - **PREN**: a multiscale CNN feeds pooling and weighted feature
//!   aggregators that learn `n` primitive representations per pyramid
//!   level; graph-convolution projections turn them into per-character
//!   visual text representations, decoded for all positions in one
//!   parallel step.
//! - **PREN2D / Baseline2D**: an encoder-decoder over fused 2D feature
//!   maps with convolutional query/key self-attention; PREN2D gates the
//!   visual text representations into the decoder inputs, Baseline2D runs
//!   the identical stack without them.
//!
//! Everything runs on the crate's own reverse-mode autodiff tape
//! ([`tape`]), trains with masked cross-entropy and ADADELTA
//! ([`training`]), and learns from a bundled procedural glyph corpus
//! ([`synthdata`]) — no external data, fonts, or BLAS.

pub mod error;
pub mod tensor;
pub mod params;
pub mod tape;
pub mod gradcheck;
pub mod layers;
pub mod backbone;
pub mod aggregators;
pub mod vocab;
pub mod textrep;
pub mod pgm;
pub mod synthdata;
pub mod attention2d;
pub mod model;
pub mod training;
pub mod checkpoint;
pub mod config;
pub mod commands;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
