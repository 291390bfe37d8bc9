//! Error types shared across the engine and the oracles.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An equal-time Keldysh block produced an observable with an imaginary
    /// residue above tolerance.
    #[error("non-hermitian state: imaginary residue {residue:.3e} exceeds {tolerance:.1e}")]
    NonHermitianState { residue: f64, tolerance: f64 },

    /// A two-time access at a row that has not been filled yet.
    #[error("two-time access at ({i}, {j}) outside filled extent {filled}")]
    OutOfExtent { i: usize, j: usize, filled: usize },

    /// Adaptive refinement of the bath-kernel quadrature stalled.
    #[error("bath kernel quadrature did not converge at tau = {tau}: relative change {change:.3e}")]
    QuadratureNotConverged { tau: f64, change: f64 },

    /// The implicit diagonal coefficient of a Volterra step is singular.
    #[error("singular Volterra step at row {row}: |1 - c| = {pivot:.3e}")]
    SingularVolterraStep { row: usize, pivot: f64 },

    /// Schwinger-boson occupation drifted away from 2S.
    #[error("constraint violation at t-index {row}, site {site}: deviation {deviation:.3e}")]
    ConstraintViolation { row: usize, site: usize, deviation: f64 },

    /// Initial Bloch vectors must satisfy |<sigma>| <= 1.
    #[error("invalid Bloch vector for site {site}: |<sigma>| = {norm}")]
    InvalidBlochVector { site: usize, norm: f64 },

    /// Same-site correlators need a replica spin.
    #[error("same-site correlator requested for site {site} without a replica")]
    ReplicaRequired { site: usize },

    /// Asked to augment a configuration that already carries a replica.
    #[error("configuration already contains a replica pair")]
    ReplicaAlreadyPresent,

    /// Exact diagonalization is capped to keep the dense eigensolve feasible.
    #[error("cluster of {n_spins} spins exceeds the exact-diagonalization cap of {cap}")]
    ClusterTooLarge { n_spins: usize, cap: usize },

    /// A Lindblad step left the space of density matrices.
    #[error("not a density matrix: {reason}")]
    NotADensityMatrix { reason: String },

    /// Malformed system configuration.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Checkpoint I/O failures.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
