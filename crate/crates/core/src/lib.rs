//! Mean-field signal propagation for deep networks with quantized
//! (staircase) activations.
//!
//! The [`meanfield`] module holds the covariance recursion and its fixed
//! points; [`calibrate`] turns those into spacing and initialization
//! recommendations; [`simulate`] checks the predictions against finite random
//! networks; [`ntk`] evaluates the infinite-width tangent kernel.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod activations;
pub mod calibrate;
pub mod error;
pub mod gauss_kernel;
pub mod meanfield;
pub mod ntk;
mod output;
mod parallel;
mod quad;
pub mod simulate;

pub use activations::{
    make_constant_spaced, make_linear_spaced, ActivationDescriptor, QuantizedActivation, SteSurrogate,
};
pub use error::{Error, Result};
pub use meanfield::{HyperParams, MeanFieldReport, SolverOptions};
pub use output::fmt17;
