//! Finite-population symmetric differential games, their moment reduction and
//! the nonlocal mean-field limit system.
//!
//! The crate is split into
//! - [`model`]: coefficient functions, scaling exponents, regime classification;
//! - [`empirical`]: particle ensembles, moments and the 1-D Wasserstein distance;
//! - [`mfg_pde`]: the coupled backward value / forward transport solver;
//! - [`micro`]: finite-N Bellman recursion in `(x_i, rho)` and forward simulation;
//! - [`finmarket`]: the many-investor market instance;
//! - [`experiment`]: config files and the runs behind the command-line tool.

// Negated comparisons are how NaN parameters get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod empirical;
pub mod error;
pub mod experiment;
pub mod finmarket;
pub mod grid;
pub mod mfg_pde;
pub mod micro;
pub mod model;
pub mod output;
pub mod rng;

pub use error::{Error, Result};
