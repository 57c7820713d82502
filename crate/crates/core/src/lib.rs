//! Quantum and Bohmian dynamics of coupled planar rotors in a random potential.

pub mod analysis;
pub mod bohm;
pub mod config;
pub mod error;
pub mod io;
pub mod linalg;
pub mod many_body;
pub mod potential;
pub mod reduced;
pub mod runner;
pub mod rotor;
pub mod seeds;
pub mod state;
pub mod units;

pub use error::{Error, Result};
