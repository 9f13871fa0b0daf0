//! Selective classification with stochastic-weight networks.
//!
//! A classifier with Gaussian weights is run `n` times on each input. The
//! class with the highest mean score is accepted only if two-sample Z-tests
//! show its mean is significantly above every other class; otherwise the
//! input is rejected. The crate also provides the Softmax Response baseline,
//! a set of image corruptions, valid-region ROC analysis and a CLI driver.

pub mod cli;
pub mod datasets;
pub mod distort;
pub mod error;
pub mod evaluate;
pub mod net;
pub mod rng;
pub mod selective;
pub mod tensor;

pub use error::{Error, Result};
