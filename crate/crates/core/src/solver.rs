//! Predictor-corrector time stepping.
//!
//! Each step appends one row to every two-time function. The right-hand
//! sides of the g equations at the last final row predict the new row by an
//! Euler step (the new diagonal needs the second-argument derivative, which
//! is the transpose of the first by the symmetry of g^K); every dependent
//! quantity is then filled at the new row, the right-hand sides are
//! re-evaluated there, and the corrected row averages the two slopes. The
//! spectral diagonal is pinned to i K0 by the equal-time commutator.

use nalgebra::Vector3;
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::algebra::{i_k0, spin_matrix, Axis, Block4, I};
use crate::eom::{
    effective_hamiltonian, fill_dependent_row, gf_rhs, EngineContext, SimulationState, SystemConfig,
};
use crate::error::{Error, Result};
use crate::observables::{ObservableSet, Recorder, Trajectory};
use crate::twotime::{Parity, TimeGrid, TwoTimeFunction};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverOptions {
    pub dt: f64,
    pub n_steps: usize,
    /// Number of corrector sweeps; the reference scheme performs one.
    pub corrector_passes: usize,
    pub constraint_tolerance: f64,
    /// Gamma_2 = 0 switch: self-energies and propagators off, fields kept.
    pub semiclassical: bool,
    /// Iterate the corrector to a fixed point (max-norm change < 1e-9, at
    /// most 10 passes) instead of a fixed pass count.
    pub fixed_point: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            dt: 0.01,
            n_steps: 100,
            corrector_passes: 1,
            constraint_tolerance: 1e-10,
            semiclassical: false,
            fixed_point: false,
        }
    }
}

const FIXED_POINT_TOL: f64 = 1e-9;
const FIXED_POINT_MAX_PASSES: usize = 10;

/// Per-row progress report for long runs.
#[derive(Debug, Clone, Copy)]
pub struct RowProgress {
    pub row: usize,
    pub time: f64,
    pub constraint_deviation: f64,
    pub wall_seconds: f64,
}

/// Completed run: observables plus run-level diagnostics.
pub struct RunReport {
    pub trajectory: Trajectory,
    pub max_constraint_deviation: f64,
    pub wall_seconds: f64,
    pub memory_bytes: usize,
}

/// Gaussian initial state: i g^K(0,0) = 2S sum_a K^a <sigma^a> + (2S + 1),
/// g^s(0,0) = i K0, D^{K/s}(0,0) = 2 Xi^{K/s}(0,0), lambda_bar = 0,
/// Lambda_bar from the exchange mean field at t = 0.
pub fn initialize(
    ctx: &EngineContext,
    grid: TimeGrid,
    initial_spins: &[Vector3<f64>],
) -> Result<SimulationState> {
    let cfg = &ctx.cfg;
    let n_spins = cfg.n_spins;
    if initial_spins.len() != n_spins {
        return Err(Error::InvalidConfig(format!(
            "{} initial spins for {} sites",
            initial_spins.len(),
            n_spins
        )));
    }
    for (site, v) in initial_spins.iter().enumerate() {
        if v.norm() > 1.0 + 1e-12 {
            return Err(Error::InvalidBlochVector { site, norm: v.norm() });
        }
    }
    let s = cfg.spin_length;
    let n_active = ctx.kernels.len();
    let dim = 3 * n_spins;
    let exchange_on = ctx.exchange_active();

    let zero4 = Block4::zeros();
    let zero3 = crate::twotime::Block3::zeros();
    let zero_c = C64::new(0.0, 0.0);
    let zero_d = nalgebra::DMatrix::<C64>::zeros(dim, dim);

    let mut state = SimulationState {
        grid,
        n_spins,
        spin_length: s,
        g_k: (0..n_spins).map(|_| TwoTimeFunction::new(grid, Parity::Symmetric, &zero4)).collect(),
        g_s: (0..n_spins).map(|_| TwoTimeFunction::new(grid, Parity::Antisymmetric, &zero4)).collect(),
        sigma_k: (0..n_spins).map(|_| TwoTimeFunction::new(grid, Parity::Symmetric, &zero4)).collect(),
        sigma_s: (0..n_spins).map(|_| TwoTimeFunction::new(grid, Parity::Antisymmetric, &zero4)).collect(),
        omega_k: (0..n_spins).map(|_| TwoTimeFunction::new(grid, Parity::Symmetric, &zero3)).collect(),
        omega_s: (0..n_spins).map(|_| TwoTimeFunction::new(grid, Parity::Antisymmetric, &zero3)).collect(),
        mcheck_k: exchange_on.then(|| TwoTimeFunction::new(grid, Parity::Symmetric, &zero_d)),
        mcheck_s: exchange_on.then(|| TwoTimeFunction::new(grid, Parity::Antisymmetric, &zero_d)),
        d_k: (0..n_active).map(|_| TwoTimeFunction::new(grid, Parity::Symmetric, &zero_c)).collect(),
        d_s: (0..n_active).map(|_| TwoTimeFunction::new(grid, Parity::Antisymmetric, &zero_c)).collect(),
        pi_k: (0..n_active).map(|_| TwoTimeFunction::new(grid, Parity::Symmetric, &zero_c)).collect(),
        pi_s: (0..n_active).map(|_| TwoTimeFunction::new(grid, Parity::Antisymmetric, &zero_c)).collect(),
        spin_evs: vec![Vec::new(); n_spins],
        lambda_bar: vec![Vec::new(); n_spins],
        cap_lambda_bar: vec![Vec::new(); n_spins],
    };

    for (n, v) in initial_spins.iter().enumerate() {
        let mut igk = Block4::identity() * C64::new(2.0 * s + 1.0, 0.0);
        for axis in Axis::ALL {
            igk += spin_matrix(axis) * C64::new(2.0 * s * v[axis.index()], 0.0);
        }
        state.g_k[n].push_row(vec![igk * (-I)]);
        state.g_s[n].push_row(vec![i_k0()]);
    }
    fill_dependent_row(&mut state, ctx, 0, false)?;
    Ok(state)
}

/// Enforce the symmetric-parity structure of a corrected diagonal block.
fn symmetrize(b: &Block4) -> Block4 {
    (b + b.transpose()) * C64::new(0.5, 0.0)
}

/// Right-hand sides of both g equations for every column of row `i`.
fn rhs_row(state: &SimulationState, ctx: &EngineContext, i: usize) -> Vec<Vec<(Block4, Block4)>> {
    let skip_memory = !ctx.baths_active() && !ctx.exchange_active();
    (0..state.n_spins)
        .map(|n| {
            let h_eff = effective_hamiltonian(&ctx.cfg, state, n, i);
            (0..=i)
                .into_par_iter()
                .map(|j| gf_rhs(state, &h_eff, n, i, j, skip_memory))
                .collect()
        })
        .collect()
}

/// Advance the state by one time step with the predictor-corrector cycle.
pub fn advance_row(state: &mut SimulationState, ctx: &EngineContext, options: &SolverOptions) -> Result<()> {
    let t = state.filled_rows() - 1;
    let r = t + 1;
    let h = state.grid.dt;
    let hc = C64::new(h, 0.0);
    let half = C64::new(0.5 * h, 0.0);

    // Slopes at the last final row.
    let rhs0 = rhs_row(state, ctx, t);

    // Predictor: Euler step of every column, diagonal via rhs + rhs^T.
    for n in 0..state.n_spins {
        let mut row_k = Vec::with_capacity(r + 1);
        let mut row_s = Vec::with_capacity(r + 1);
        for j in 0..=t {
            row_k.push(state.g_k[n].stored(t, j) + rhs0[n][j].0 * hc);
            row_s.push(state.g_s[n].stored(t, j) + rhs0[n][j].1 * hc);
        }
        let (dk, _) = &rhs0[n][t];
        row_k.push(symmetrize(&(state.g_k[n].stored(t, t) + (dk + dk.transpose()) * hc)));
        row_s.push(i_k0());
        state.g_k[n].push_row(row_k);
        state.g_s[n].push_row(row_s);
    }
    fill_dependent_row(state, ctx, r, false)?;

    // Corrector: average the slopes at t and at the predicted row.
    let passes = if options.fixed_point {
        FIXED_POINT_MAX_PASSES
    } else {
        options.corrector_passes.max(1)
    };
    for _ in 0..passes {
        let rhs1 = rhs_row(state, ctx, r);
        let mut max_change: f64 = 0.0;
        for n in 0..state.n_spins {
            for j in 0..=t {
                let gk = state.g_k[n].stored(t, j) + (rhs0[n][j].0 + rhs1[n][j].0) * half;
                let gs = state.g_s[n].stored(t, j) + (rhs0[n][j].1 + rhs1[n][j].1) * half;
                if options.fixed_point {
                    max_change = max_change.max((gk - state.g_k[n].stored(r, j)).norm());
                }
                state.g_k[n].set(r, j, gk);
                state.g_s[n].set(r, j, gs);
            }
            let (dk0, _) = &rhs0[n][t];
            let (dk1, _) = &rhs1[n][r];
            let diag = state.g_k[n].stored(t, t)
                + ((dk0 + dk0.transpose()) + (dk1 + dk1.transpose())) * half;
            let diag = symmetrize(&diag);
            if options.fixed_point {
                max_change = max_change.max((diag - state.g_k[n].stored(r, r)).norm());
            }
            state.g_k[n].set(r, r, diag);
            state.g_s[n].set(r, r, i_k0());
        }
        fill_dependent_row(state, ctx, r, true)?;
        if options.fixed_point && max_change < FIXED_POINT_TOL {
            break;
        }
    }

    for n in 0..state.n_spins {
        let dev = state.constraint_deviation(n, r);
        if dev > options.constraint_tolerance {
            return Err(Error::ConstraintViolation { row: r, site: n, deviation: dev });
        }
        debug_assert!(state.g_k[n].row(r).iter().all(|b| b.iter().all(|c| c.re.is_finite() && c.im.is_finite())));
    }
    Ok(())
}

/// Full driver: initialize, march every row, extract observables.
pub fn run(
    cfg: &SystemConfig,
    options: &SolverOptions,
    initial_spins: &[Vector3<f64>],
    observables: &ObservableSet,
) -> Result<RunReport> {
    run_with_progress(cfg, options, initial_spins, observables, None)
}

pub fn run_with_progress(
    cfg: &SystemConfig,
    options: &SolverOptions,
    initial_spins: &[Vector3<f64>],
    observables: &ObservableSet,
    mut progress: Option<&mut dyn FnMut(RowProgress)>,
) -> Result<RunReport> {
    crate::algebra::verify_constants();
    let start = std::time::Instant::now();
    let grid = TimeGrid::new(options.n_steps, options.dt)?;
    let ctx = EngineContext::new(cfg.clone(), &grid, options.semiclassical)?;
    let mut state = initialize(&ctx, grid, initial_spins)?;
    let mut recorder = Recorder::new(&ctx, observables, grid)?;
    recorder.record_row(&state, &ctx, 0)?;
    let mut max_dev: f64 = (0..cfg.n_spins)
        .map(|n| state.constraint_deviation(n, 0))
        .fold(0.0, f64::max);
    for row in 1..options.n_steps {
        advance_row(&mut state, &ctx, options).map_err(|e| match e {
            Error::ConstraintViolation { site, deviation, .. } => {
                Error::ConstraintViolation { row, site, deviation }
            }
            other => other,
        })?;
        recorder.record_row(&state, &ctx, row)?;
        let dev = (0..cfg.n_spins)
            .map(|n| state.constraint_deviation(n, row))
            .fold(0.0, f64::max);
        max_dev = max_dev.max(dev);
        if let Some(cb) = progress.as_deref_mut() {
            cb(RowProgress {
                row,
                time: grid.time(row),
                constraint_deviation: dev,
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(RunReport {
        trajectory: recorder.finish(),
        max_constraint_deviation: max_dev,
        wall_seconds: start.elapsed().as_secs_f64(),
        memory_bytes: state.memory_bytes(),
    })
}
