//! # fdivreg
//!
//! Multi-target regression with f-divergence regularization.
//!
//! The crate estimates the Henze–Penrose divergence between a set of targets
//! and a set of predictions from the cut edges of a nearest-neighbor graph,
//! and provides a softmax-smoothed version of the same estimator that is
//! differentiable in the prediction coordinates. The smoothed estimator is
//! used as a regularizer next to the mean squared error:
//!
//! ```text
//! L(Θ) = Σ (ŷ − y)² / (b·d2) + w · (D̂ − γ)²
//! ```
//!
//! where `D̂ = 1 − 2 t̂ / n` and `t̂` is the smoothed cut mass over the
//! fully connected graph of the `n = 2b` batch points.
//!
//! ## Modules
//!
//! | Module | Contents |
//! |--------|----------|
//! | [`numerics`] | tensors, seeded RNG streams, distances, softmax |
//! | [`divergence`] | exact and smoothed estimators, analytic gradient |
//! | [`model`] | 1-D CNN / MLP layers with explicit backward passes |
//! | [`loss`] | MSE + divergence penalty and its gradient |
//! | [`optim`] | Adadelta and SGD |
//! | [`data`] | CSV I/O, splitting, scaling, synthetic generators |
//! | [`train`] | minibatch training with best-validation checkpointing |
//! | [`eval`] | RMSE and the paired t-test |
//! | [`sim`] | grid-search simulation on a noisy quadratic |
//! | [`cli`] | command-line dispatch |
// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use thiserror::Error;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Contract(format!($($arg)+)));
        }
    };
}
#[allow(unused_imports)]
pub(crate) use ensure;

pub mod cli;
pub mod data;
pub mod divergence;
pub mod eval;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod sim;
pub mod train;

pub use divergence::{
    f_alpha, hp_divergence_exact, hp_divergence_smoothed, nn_cut_count, smoothed_cut_mass,
    smoothed_divergence_grad, DivergenceReport, LabeledPointSet,
};
pub use numerics::{Rng, Tensor};

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met by its caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or received a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Input data could not be loaded or parsed.
    #[error("load error: {0}")]
    Load(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
