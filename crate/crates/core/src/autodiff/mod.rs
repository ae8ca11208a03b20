//! Reverse-mode differentiation over the tensor kernels.
//!
//! Each op on the [`Tape`] is a whole layer (convolution, attention, layer norm)
//! with a hand-written backward rule, so a forward pass records a few dozen
//! nodes rather than one per scalar.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport, TensorCheck};
pub use params::{ParamEntry, ParamGrads, ParamId, ParamStore};
pub use tape::{NodeId, Tape};
