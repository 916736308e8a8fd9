//! Budgeted Markov decision processes: exact budgeted dynamic programming,
//! budgeted fitted-Q learning with risk-sensitive exploration, a Lagrangian
//! baseline and an evaluation harness.

// Negated comparisons are how NaN inputs get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod batch;
pub mod bftq;
pub mod dp;
pub mod envs;
pub mod error;
pub mod exploration;
pub mod grid;
pub mod harness;
pub mod hull;
pub mod lagrange;
pub mod mdp;
pub mod par;
pub mod policy;
pub mod qfunc;
pub mod regressor;
pub mod rng;

pub use error::{Error, Result};
pub use grid::{BudgetGrid, BudgetSpace};
pub use mdp::{
    AugmentedAction, AugmentedState, BudgetedMdp, MixturePolicy, Transition, VectorSignal,
};
pub use qfunc::{BiQFunction, GriddedQ};
