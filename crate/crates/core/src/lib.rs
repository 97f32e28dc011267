pub mod error;
pub mod hamiltonian;
pub mod linalg;
pub mod measures;
pub mod models;
pub mod monotonicity;
pub mod oracle;
pub mod rng;
pub mod solver;
pub mod value;

pub use error::{Error, Result};
