//! Tape-based reverse-mode autodiff, parameters, and optimization.

pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use optim::{lr_schedule, Adam, AdamConfig};
pub use params::{Param, ParamStore};
pub use tape::{softplus_inv, Gradients, NodeId, Tape};
