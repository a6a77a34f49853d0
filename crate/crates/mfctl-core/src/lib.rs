//! Exact controllability of mean-field linear game-based control systems:
//! coefficient assembly, Kalman and Gramian tests, a Monte Carlo engine, an
//! exact binomial-tree oracle, and steering/equilibrium synthesis.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod assembly;
pub mod blocktensor;
pub mod error;
pub mod field;
pub mod grid;
pub mod kalman;
pub mod model;
pub mod process;
pub mod samples;
pub mod scheme;
pub mod sde;
pub mod synthesis;
pub mod tree;

pub use error::{Error, Result};
