//! Mean-field stochastic optimal control on the one-dimensional torus.
//!
//! The crate evaluates and minimises the controlled McKean–Vlasov cost on a
//! periodic grid, evaluates its Benamou–Brenier energy reformulation, and
//! runs the finite-`N` particle diagnostics (value gap, Wasserstein
//! marginals, path-space KL bounds).

pub mod config;
pub mod dynamics;
pub mod energy;
pub mod error;
pub mod experiments;
pub mod io;
pub mod measure;
pub mod model;
pub mod pair;
pub mod parallel;
pub mod particles;
pub mod pathlaw;
pub mod series;
pub mod solver;

pub use error::{Error, Result};
