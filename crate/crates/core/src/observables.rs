//! Physical quantities extracted from the simulation state.
//!
//! Spin expectation values and purity come from the equal-time Keldysh
//! blocks. Two-spin correlators come exclusively from the mean-field
//! propagator, <s^a_n(t) s^b_n'(t')> = (i/4) Mcheck^{ab}_{nn'}(t,t'); only
//! the (t, 0) column and the equal-time diagonal are retained by default
//! since full two-time retention costs Theta(N_t^2) per pair.

use nalgebra::Vector3;
use num_complex::Complex64 as C64;

use crate::algebra::Axis;
use crate::bath::BathSpec;
use crate::eom::{EngineContext, ReplicaInfo, SimulationState, SystemConfig};
use crate::error::{Error, Result};
use crate::twotime::{Block3, TimeGrid};

/// Overall sign relating i * Mcheck^K to the physical sigma-sigma Keldysh
/// correlator <{sigma^a_n(t), sigma^b_n'(t')}>_c in this code's conventions;
/// anchored against the exact-diagonalization dimer in the test suite.
pub const CORR_SIGN: f64 = -1.0;

/// Default ferromagnetic spin-replica coupling, in the model energy unit.
pub const DEFAULT_REPLICA_COUPLING: f64 = -1e-3;

/// Which optional observables a run should record.
#[derive(Debug, Clone, Copy, Default)]
pub struct ObservableSet {
    pub correlators: bool,
    pub currents: bool,
}

/// |P| = sqrt(sum_a <sigma_a>^2), the Bloch-vector norm of a spin-1/2 state.
pub fn purity(spin_ev: &Vector3<f64>) -> f64 {
    spin_ev.norm()
}

/// Connected two-spin correlator of one site pair: the (t, 0) column plus
/// the equal-time diagonal, in spin (not Pauli) units.
#[derive(Debug, Clone)]
pub struct CorrelatorColumn {
    pub n: usize,
    pub nprime: usize,
    /// (i/4) Mcheck^K_{nn'}(t, 0), sign-anchored; 3x3 over (alpha, beta).
    pub column_k: Vec<Block3>,
    pub column_s: Vec<Block3>,
    /// Same at (t, t).
    pub diag_k: Vec<Block3>,
    pub diag_s: Vec<Block3>,
}

/// Per-time-step observables of a completed run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// [time][site], Pauli units <sigma^a> = <s^a> / S.
    pub spin_evs: Vec<Vec<Vector3<f64>>>,
    /// [time][site].
    pub purity: Vec<Vec<f64>>,
    pub correlators: Option<Vec<CorrelatorColumn>>,
    /// [time][bond].
    pub currents: Option<Vec<Vec<Vector3<f64>>>>,
    /// Exchange-coupled site pairs, n < n'.
    pub bonds: Vec<(usize, usize)>,
}

/// Builds a Trajectory row by row between solver steps.
pub struct Recorder {
    set: ObservableSet,
    traj: Trajectory,
}

impl Recorder {
    pub fn new(ctx: &EngineContext, set: &ObservableSet, grid: TimeGrid) -> Result<Recorder> {
        let bonds = ctx.cfg.exchange.bonds();
        if (set.correlators || set.currents) && bonds.is_empty() {
            return Err(Error::InvalidConfig(
                "correlators and currents need exchange-coupled pairs (or a replica)".into(),
            ));
        }
        if (set.correlators || set.currents) && ctx.semiclassical {
            return Err(Error::InvalidConfig(
                "correlators are carried by the mean-field propagator, which the \
                 semiclassical switch disables"
                    .into(),
            ));
        }
        let correlators = set.correlators.then(|| {
            bonds
                .iter()
                .map(|&(n, m)| CorrelatorColumn {
                    n,
                    nprime: m,
                    column_k: Vec::with_capacity(grid.n_steps),
                    column_s: Vec::with_capacity(grid.n_steps),
                    diag_k: Vec::with_capacity(grid.n_steps),
                    diag_s: Vec::with_capacity(grid.n_steps),
                })
                .collect()
        });
        let currents = set.currents.then(Vec::new);
        Ok(Recorder {
            set: *set,
            traj: Trajectory {
                times: Vec::with_capacity(grid.n_steps),
                spin_evs: Vec::with_capacity(grid.n_steps),
                purity: Vec::with_capacity(grid.n_steps),
                correlators,
                currents,
                bonds,
            },
        })
    }

    pub fn record_row(&mut self, state: &SimulationState, ctx: &EngineContext, row: usize) -> Result<()> {
        let s = state.spin_length;
        self.traj.times.push(state.grid.time(row));
        let evs: Vec<Vector3<f64>> = (0..state.n_spins)
            .map(|n| state.spin_evs[n][row] / s)
            .collect();
        self.traj.purity.push(evs.iter().map(purity).collect());
        self.traj.spin_evs.push(evs);
        if self.set.correlators {
            let cols = self.traj.correlators.as_mut().unwrap();
            for col in cols.iter_mut() {
                let (ck, cs) = mcheck_pair_block(state, col.n, col.nprime, row, 0)?;
                col.column_k.push(ck);
                col.column_s.push(cs);
                let (dk, ds) = mcheck_pair_block(state, col.n, col.nprime, row, row)?;
                col.diag_k.push(dk);
                col.diag_s.push(ds);
            }
        }
        if self.set.currents {
            let bonds = self.traj.bonds.clone();
            let mut currents_row = Vec::with_capacity(bonds.len());
            for (n, m) in bonds {
                currents_row.push(bond_spin_current(state, &ctx.cfg, n, m, row)?);
            }
            self.traj.currents.as_mut().unwrap().push(currents_row);
        }
        Ok(())
    }

    pub fn finish(self) -> Trajectory {
        self.traj
    }
}

/// (i/4) Mcheck^{K/s} 3x3 block for a site pair, sign-anchored.
fn mcheck_pair_block(
    state: &SimulationState,
    n: usize,
    nprime: usize,
    i: usize,
    j: usize,
) -> Result<(Block3, Block3)> {
    let sign = C64::new(CORR_SIGN, 0.0);
    let quarter_i = C64::new(0.0, 0.25) * sign;
    let mk = state
        .mcheck_k
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("no mean-field propagator in this run".into()))?;
    let ms = state.mcheck_s.as_ref().unwrap();
    let big_k = mk.get(i, j)?;
    let big_s = ms.get(i, j)?;
    let mut ck = Block3::zeros();
    let mut cs = Block3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            ck[(a, b)] = quarter_i * big_k[(3 * n + a, 3 * nprime + b)];
            cs[(a, b)] = quarter_i * big_s[(3 * n + a, 3 * nprime + b)];
        }
    }
    Ok((ck, cs))
}

/// Connected two-spin correlator <s^a_n(t_i) s^b_n'(t_j)>, Keldysh and
/// spectral parts. A same-site request is redirected to the replica pair
/// when one is configured, and rejected otherwise.
pub fn two_spin_correlator(
    state: &SimulationState,
    cfg: &SystemConfig,
    n: usize,
    nprime: usize,
    i: usize,
    j: usize,
    alpha: Axis,
    beta: Axis,
) -> Result<(C64, C64)> {
    let (n, nprime) = if n == nprime {
        match cfg.replica {
            Some(info) if info.original == n || info.replica == n => (info.original, info.replica),
            _ => return Err(Error::ReplicaRequired { site: n }),
        }
    } else {
        (n, nprime)
    };
    let (ck, cs) = mcheck_pair_block(state, n, nprime, i, j)?;
    Ok((ck[(alpha.index(), beta.index())], cs[(alpha.index(), beta.index())]))
}

/// Duplicate one spin (default: site 0) together with its baths and couple
/// the copy ferromagnetically to the original. The correlator between the
/// pair then stands in for the same-site two-spin correlator.
pub fn replica_augment(cfg: &SystemConfig, target: usize, coupling: f64) -> Result<SystemConfig> {
    if cfg.replica.is_some() {
        return Err(Error::ReplicaAlreadyPresent);
    }
    if target >= cfg.n_spins {
        return Err(Error::InvalidConfig(format!(
            "replica target {} out of {} sites",
            target, cfg.n_spins
        )));
    }
    if coupling == 0.0 {
        return Err(Error::InvalidConfig("replica coupling must be nonzero".into()));
    }
    let n_old = cfg.n_spins;
    let replica = n_old;
    let mut exchange = crate::eom::Exchange::none(n_old + 1);
    for n in 0..n_old {
        for m in n + 1..n_old {
            let mut block = [[0.0; 3]; 3];
            let mut nonzero = false;
            for (ai, a) in Axis::ALL.iter().enumerate() {
                for (bi, b) in Axis::ALL.iter().enumerate() {
                    block[ai][bi] = cfg.exchange.coupling(n, *a, m, *b);
                    nonzero |= block[ai][bi] != 0.0;
                }
            }
            if nonzero {
                exchange.set_bond(n, m, block);
            }
        }
    }
    exchange.set_isotropic_bond(target, replica, coupling);
    let mut field = cfg.field.clone();
    field.push(cfg.field[target]);
    let mut baths = cfg.baths.clone();
    for b in cfg.baths.iter().filter(|b| b.site == target) {
        baths.push(BathSpec { site: replica, ..b.clone() });
    }
    let out = SystemConfig {
        n_spins: n_old + 1,
        spin_length: cfg.spin_length,
        exchange,
        field,
        baths,
        replica: Some(ReplicaInfo {
            original: target,
            replica,
            coupling,
        }),
    };
    out.validate()?;
    Ok(out)
}

/// Extend an initial-spin list for a replica-augmented configuration.
pub fn replica_initial_spins(initial: &[Vector3<f64>], info: &ReplicaInfo) -> Vec<Vector3<f64>> {
    let mut out = initial.to_vec();
    out.push(initial[info.original]);
    out
}

/// Order parameter m^2: the time integral of the Keldysh zz correlator
/// column in Pauli units, over the simulated window. The formal integral is
/// unbounded; convergence over the finite horizon is the caller's check
/// (localized-phase runs drift by a few percent in the last quarter).
pub fn order_parameter(traj: &Trajectory) -> Result<f64> {
    let cols = traj
        .correlators
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("order parameter needs recorded correlators".into()))?;
    let col = cols
        .first()
        .ok_or_else(|| Error::InvalidConfig("no correlator pair recorded".into()))?;
    if traj.times.len() < 2 {
        return Ok(0.0);
    }
    let dt = traj.times[1] - traj.times[0];
    let samples: Vec<C64> = col
        .column_k
        .iter()
        .map(|b| b[(Axis::Z.index(), Axis::Z.index())] * 4.0)
        .collect();
    Ok(crate::twotime::causal_integral(&samples, dt).re)
}

/// Partial order-parameter integral over [t_lo_frac, t_hi_frac] of the window.
pub fn order_parameter_window(traj: &Trajectory, lo_frac: f64, hi_frac: f64) -> Result<f64> {
    let cols = traj
        .correlators
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("order parameter needs recorded correlators".into()))?;
    let col = cols.first().ok_or_else(|| Error::InvalidConfig("no correlator pair".into()))?;
    let n = traj.times.len();
    let lo = ((n as f64 * lo_frac) as usize).min(n.saturating_sub(1));
    let hi = ((n as f64 * hi_frac) as usize).clamp(lo + 1, n);
    let dt = traj.times[1] - traj.times[0];
    let samples: Vec<C64> = col.column_k[lo..hi]
        .iter()
        .map(|b| b[(2, 2)] * 4.0)
        .collect();
    Ok(crate::twotime::causal_integral(&samples, dt).re)
}

/// Bond spin current I^a_{n->n'}(t) = -2 J sum_{bc} eps_{abc}
/// <sigma^b_n sigma^c_n'>^K(t, t), with J the isotropic bond coupling.
/// Antisymmetric under n <-> n' through the Keldysh parity of Mcheck.
pub fn bond_spin_current(
    state: &SimulationState,
    cfg: &SystemConfig,
    n: usize,
    nprime: usize,
    row: usize,
) -> Result<Vector3<f64>> {
    if n == nprime {
        return Err(Error::InvalidConfig("bond current needs two distinct sites".into()));
    }
    let j = cfg.exchange.coupling(n, Axis::X, nprime, Axis::X);
    if j == 0.0 && cfg.exchange.coupling(n, Axis::Z, nprime, Axis::Z) == 0.0 {
        return Ok(Vector3::zeros());
    }
    let (lo, hi, flip) = if n < nprime { (n, nprime, false) } else { (nprime, n, true) };
    let (ck, _) = mcheck_pair_block(state, lo, hi, row, row)?;
    // Pauli units: <sigma sigma> = 4 <s s>.
    let c = ck * C64::new(4.0, 0.0);
    let c = if flip {
        // <sigma^b_n sigma^c_n'> with n > n': equal-time Keldysh block is the
        // transpose of the stored (lo, hi) block.
        c.transpose()
    } else {
        c
    };
    let eps = |a: usize, b: usize| (c[(a, b)] - c[(b, a)]).re;
    Ok(Vector3::new(eps(1, 2), eps(2, 0), eps(0, 1)) * (-2.0 * j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn purity_examples() {
        assert_abs_diff_eq!(purity(&Vector3::new(1.0, 0.0, 0.0)), 1.0);
        assert_abs_diff_eq!(purity(&Vector3::new(0.0, 0.0, 0.0)), 0.0);
        assert_abs_diff_eq!(purity(&Vector3::new(0.6, 0.0, 0.8)), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn levi_civita_kills_symmetric_correlators() {
        // A symmetric 3x3 block contracted with eps gives zero current.
        let c = Block3::from_fn(|a, b| C64::new((a + b) as f64, 0.0));
        let eps = |a: usize, b: usize| (c[(a, b)] - c[(b, a)]).re;
        let i = Vector3::new(eps(1, 2), eps(2, 0), eps(0, 1));
        assert_eq!(i, Vector3::zeros());
    }

    #[test]
    fn replica_augment_builds_a_valid_pair() {
        let cfg = SystemConfig {
            n_spins: 1,
            spin_length: 0.5,
            exchange: crate::eom::Exchange::none(1),
            field: SystemConfig::uniform_field(1, [1.0, 0.0, 0.0]),
            baths: vec![BathSpec {
                gamma: 0.1,
                omega_c: 1.0,
                s: 1.0,
                temperature: 0.0,
                site: 0,
                axis: Axis::Z,
            }],
            replica: None,
        };
        let aug = replica_augment(&cfg, 0, -1e-3).unwrap();
        assert_eq!(aug.n_spins, 2);
        assert_eq!(aug.baths.len(), 2);
        assert_eq!(aug.baths[1].site, 1);
        assert!(aug.exchange.coupling(0, Axis::Z, 1, Axis::Z) < 0.0, "FM coupling is negative");
        assert_eq!(aug.exchange.coupling(0, Axis::X, 0, Axis::X), 0.0);
        aug.validate().unwrap();
        // Replica of a replica is rejected.
        assert!(matches!(replica_augment(&aug, 0, -1e-3), Err(Error::ReplicaAlreadyPresent)));
    }
}
