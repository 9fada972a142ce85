//! Interleaved text/latent reasoning over synchronized audio-visual input,
//! built on a small dense-tensor autodiff engine.

pub mod anchors;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod interleave;
pub mod losses;
pub mod ospe;
pub mod suite;
pub mod synthworld;
pub mod tape;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
