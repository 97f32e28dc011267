//! Equilibrium solvers: the 1-d grid scheme, the particle FBSDE scheme and
//! the best-response check.

pub mod best_response;
pub mod grid;
pub mod particle;

pub use grid::{
    equilibrium_picard, solve_fp_forward, solve_hjb_backward, FlowSolution, GridSpec, SolverConfig,
};
pub use particle::{solve_particle_fbsde, ParticleConfig, ParticlePaths, Seeds, TimeGrid};
pub use best_response::{best_response_gap, equilibrium_cost, quadratic_fit, CostEstimate, EquilibriumFlow, GapEstimate, McConfig};
