//! Unsupervised per-keypoint depth learning through a closed-form 3D-to-2D
//! affine least-squares fit, with synthetic data, evaluation metrics and a
//! software piecewise-affine image warper.

// `!(x > 0.0)` is used deliberately so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod fsutil;
pub mod geometry;
pub mod lsqgrad;
pub mod metrics;
pub mod nnet;
pub mod synth;
pub mod warp;

pub use error::{Error, Result};
