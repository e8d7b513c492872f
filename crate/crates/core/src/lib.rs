//! Numerical token integrity loss (NTIL) for autoregressive digit prediction.
//!
//! The crate bundles everything needed to train and verify the loss at small
//! scale: a reverse-mode autodiff tape, a character vocabulary with numeric
//! span detection, the loss itself, a tiny recurrent/attention language model,
//! synthetic arithmetic and clock datasets, a teacher-forced training loop, and
//! brute-force oracles for cross-checking.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checks;
pub mod data;
pub mod loss;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod train;
pub mod vocab;
