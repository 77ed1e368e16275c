//! Laguerre-Gaussian point-spread functions on a pixelated detector: Fisher
//! information and Cramér-Rao bounds for 3D point-source localization, a
//! Fisher-scoring maximum-likelihood fitter and a Monte Carlo harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod beam;
pub mod cli;
pub mod detector;
pub mod error;
pub mod estimator;
pub mod fisher;
pub mod harness;
pub mod lgis;
pub mod quadrature;
pub mod readout;

pub use error::{Error, Result};
