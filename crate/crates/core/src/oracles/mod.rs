//! Independent reference implementations used by tests and acceptance runs:
//! a Lindblad master-equation integrator for the Markovian regime, dense
//! exact diagonalization for small closed clusters, and the semiclassical
//! spin integrator with a retarded memory kernel.

pub mod ed;
pub mod lindblad;
pub mod llg;

pub use ed::{ed_connected_keldysh_zz, exact_diagonalization_evolve, ED_CAP};
pub use lindblad::{lindblad_run, lindblad_step, DensityMatrix2, LindbladParams};
pub use llg::{
    extended_llg_step, run_extended_llg, run_standard_llg, ClassicalSpinState,
};
