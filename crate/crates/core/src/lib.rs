//! Stochastic maximum principle for cascading-default networks: regime-switched
//! LQ dynamics, Monte Carlo simulation, the adjoint BSDE system and its
//! recursive Riccati form, and maximum-principle verification.

pub mod adjoint;
mod backward;
pub mod control;
pub mod error;
pub mod hamiltonian;
pub mod model;
pub mod regime;
pub mod regression;
pub mod riccati;
pub mod rng;
pub mod simulate;
pub mod verify;

pub use adjoint::{evaluate_adjoint, solve_adjoint, solve_adjoint_picard, AdjointSolution, AdjointValue};
pub use backward::{RegimeTables, StepTable, StitchCheck};
pub use control::{build_glued, feedback, Perturbation, PicardRound, Policy, Shape};
pub use error::{Error, Result};
pub use hamiltonian::{ControlModel, HamiltonianInput, LqModel};
pub use model::{load_spec, load_spec_with, LoadOptions, ProblemSpec};
pub use regime::{enumerate_active_regimes, Regime, RegimeTree};
pub use riccati::{crosscheck_vs_adjoint, phi_closed_form, solve_riccati, solve_riccati_tree, RiccatiSolution};
pub use simulate::{estimate_cost, simulate_path, CostEstimate, PathSet, Trajectory};
pub use verify::{check_necessary, check_sufficient_conditions, compare, perturbation_test, VerificationReport};
