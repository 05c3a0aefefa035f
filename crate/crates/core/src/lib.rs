//! Learned dynamic point cloud geometry codec.
//!
//! The crate is layered bottom-up: sparse voxel tensors and neighbor search,
//! a dynamic reverse-mode tape over dense row matrices, sparse convolution
//! blocks built on that tape, entropy coding (exact range coder + learned
//! densities), the two-stage motion estimation/compensation core, and the
//! frame pipeline that ties them into a bitstream format. Everything is
//! deterministic: given the same weights and inputs, encoder and decoder
//! reproduce each other's arithmetic exactly.

pub mod autodiff;
pub mod entropy;
pub mod error;
pub mod inter;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod ply;
pub mod search;
pub mod session;
pub mod sparse;
pub mod synth;
pub mod train;
pub mod util;

pub use error::{Error, Result};
