//! Distributionally robust prediction when some covariates are observed in
//! the labeled source population but structurally missing in the target.
//!
//! The crate is organised bottom-up:
//!
//! * [`nnet`]: dense networks, reverse-mode gradients, Adam.
//! * [`simgen`]: the three simulation settings and their perturbed test sets.
//! * [`drum`]: outcome model, energy score, worst-case generators, robust prediction.
//! * [`debias`]: cross-fitted orthogonal bias correction.
//! * [`baselines`]: the ten comparison methods.
//! * [`metrics`]: regression and classification metrics, bootstrap intervals.
//! * [`methods`]: every estimator behind one trait, registered by canonical name.

// `!(x >= 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod data;
pub mod debias;
pub mod drum;
pub mod error;
pub mod methods;
pub mod metrics;
pub mod nnet;
pub mod rng;
pub mod simgen;

pub use error::{Error, Result};
