pub mod acceptance;
pub mod deterministic;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod noise;
pub mod nonlocality;
pub mod potential;
pub mod quantum_potential;
pub mod split_step;
pub mod sqha;
pub mod stencil;

pub use error::{Error, Result};
