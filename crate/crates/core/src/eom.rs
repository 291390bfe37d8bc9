//! Right-hand sides of the fourteen real-time equations of motion.
//!
//! The state couples, per time pair (t, t'), the Schwinger-boson propagators
//! g^{K/s}, the bath and mean-field propagators D^{K/s} and Mcheck^{K/s},
//! their self-energies Sigma, Pi, Omega, and the one-time field expectation
//! values lambda_bar / Lambda_bar. Keldysh components are symmetric and
//! spectral components antisymmetric under transposition + time exchange, so
//! every container stores the lower triangle t' <= t only.
//!
//! The propagator equations are Volterra equations of the second kind. A new
//! row t = r is filled column by column; the unknown entry appears inside its
//! own memory integral only at the t1 = r trapezoid node, so each entry needs
//! one scalar (D) or one dense 3N x 3N (Mcheck) linear solve. The bath
//! double integrals follow the printed limit pattern, re-derived from the
//! contour form to settle the argument pairing: with C = Pi o D,
//!
//!   D^K(t,t') = 2 Xi^K(t,t')
//!             + 2 int_0^t  dt1 Xi^s(t,t1) int_0^{t1}    dt2 Pi^s(t1,t2) D^K(t2,t')
//!             + 2 int_0^t' dt1 Xi^K(t,t1) int_{t1}^{t'} dt2 Pi^s(t1,t2) D^s(t2,t')
//!             - 2 int_0^t  dt1 Xi^s(t,t1) int_0^{t'}    dt2 Pi^K(t1,t2) D^s(t2,t'),
//!
//! where the second line is the relabeled form of the printed
//! int_0^{t'} int_0^{t1} Xi^K(t,t2) Pi^s(t2,t1) D^s(t1,t') term (swap the
//! dummy names t1 <-> t2 and reorder the triangle 0 <= t1 <= t2 <= t').

use nalgebra::{DMatrix, Vector3};
use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::algebra::{self, spin_matrix, symplectic, trace_prod, Axis, Block4, I, ONE, ZERO};
use crate::bath::{BathKernel, BathSpec};
use crate::error::{Error, Result};
use crate::twotime::{trapezoid_weight, Block3, TimeGrid, TwoTimeFunction};

/// Generalized Heisenberg exchange J^{alpha beta}_{n n'} as a dense
/// (3 N_S) x (3 N_S) real matrix over the composite index 3n + alpha.
#[derive(Debug, Clone, PartialEq)]
pub struct Exchange {
    n_spins: usize,
    j: DMatrix<f64>,
}

impl Exchange {
    pub fn none(n_spins: usize) -> Exchange {
        Exchange {
            n_spins,
            j: DMatrix::zeros(3 * n_spins, 3 * n_spins),
        }
    }

    /// Nearest-neighbor chain with J^{alpha beta}_{n,n+1} = j delta_ab in
    /// both directions (AF for j > 0, FM for j < 0).
    pub fn chain(n_spins: usize, j: f64) -> Exchange {
        let mut e = Exchange::none(n_spins);
        for n in 0..n_spins.saturating_sub(1) {
            for a in 0..3 {
                e.j[(3 * n + a, 3 * (n + 1) + a)] = j;
                e.j[(3 * (n + 1) + a, 3 * n + a)] = j;
            }
        }
        e
    }

    /// Nearest-neighbor rows x cols grid, isotropic coupling per direction.
    pub fn grid(rows: usize, cols: usize, j: f64) -> Exchange {
        let n_spins = rows * cols;
        let mut e = Exchange::none(n_spins);
        let site = |r: usize, c: usize| r * cols + c;
        for r in 0..rows {
            for c in 0..cols {
                if r + 1 < rows {
                    e.set_isotropic_bond(site(r, c), site(r + 1, c), j);
                }
                if c + 1 < cols {
                    e.set_isotropic_bond(site(r, c), site(r, c + 1), j);
                }
            }
        }
        e
    }

    pub fn set_isotropic_bond(&mut self, n: usize, m: usize, j: f64) {
        assert_ne!(n, m, "no single-ion anisotropy: J_nn must stay zero");
        for a in 0..3 {
            self.j[(3 * n + a, 3 * m + a)] = j;
            self.j[(3 * m + a, 3 * n + a)] = j;
        }
    }

    /// Set one bond's 3x3 coupling block (mirrored to keep J symmetric).
    pub fn set_bond(&mut self, n: usize, m: usize, block: [[f64; 3]; 3]) {
        assert_ne!(n, m, "no single-ion anisotropy: J_nn must stay zero");
        for a in 0..3 {
            for b in 0..3 {
                self.j[(3 * n + a, 3 * m + b)] = block[a][b];
                self.j[(3 * m + b, 3 * n + a)] = block[a][b];
            }
        }
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn coupling(&self, n: usize, alpha: Axis, m: usize, beta: Axis) -> f64 {
        self.j[(3 * n + alpha.index(), 3 * m + beta.index())]
    }

    pub fn is_zero(&self) -> bool {
        self.j.iter().all(|v| *v == 0.0)
    }

    /// Site pairs coupled by at least one nonzero matrix element, n < m.
    pub fn bonds(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for n in 0..self.n_spins {
            for m in n + 1..self.n_spins {
                let coupled = (0..3).any(|a| (0..3).any(|b| self.j[(3 * n + a, 3 * m + b)] != 0.0));
                if coupled {
                    out.push((n, m));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let d = 3 * self.n_spins;
        if self.j.nrows() != d || self.j.ncols() != d {
            return Err(Error::InvalidConfig("exchange matrix shape mismatch".into()));
        }
        for n in 0..self.n_spins {
            for a in 0..3 {
                for b in 0..3 {
                    if self.j[(3 * n + a, 3 * n + b)] != 0.0 {
                        return Err(Error::InvalidConfig(format!(
                            "single-ion anisotropy J_({n},{n}) must vanish"
                        )));
                    }
                }
            }
        }
        for r in 0..d {
            for c in 0..d {
                if (self.j[(r, c)] - self.j[(c, r)]).abs() > 1e-14 {
                    return Err(Error::InvalidConfig(
                        "exchange must be symmetric under (n,alpha) <-> (n',beta)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn as_complex(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.j.nrows(), self.j.ncols(), |r, c| C64::new(self.j[(r, c)], 0.0))
    }
}

/// Marker connecting a physical spin to its replica copy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReplicaInfo {
    pub original: usize,
    pub replica: usize,
    pub coupling: f64,
}

/// Spins, exchange, field, and bath attachments.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub n_spins: usize,
    /// Spin length S; 1/2 unless stated otherwise.
    pub spin_length: f64,
    pub exchange: Exchange,
    /// External field per site.
    pub field: Vec<Vector3<f64>>,
    pub baths: Vec<BathSpec>,
    /// Present only on configurations produced by `replica_augment`.
    pub replica: Option<ReplicaInfo>,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_spins == 0 {
            return Err(Error::InvalidConfig("n_spins must be positive".into()));
        }
        if !(self.spin_length > 0.0) {
            return Err(Error::InvalidConfig("spin_length must be positive".into()));
        }
        if self.field.len() != self.n_spins {
            return Err(Error::InvalidConfig(format!(
                "field list has {} entries for {} spins",
                self.field.len(),
                self.n_spins
            )));
        }
        if self.exchange.n_spins() != self.n_spins {
            return Err(Error::InvalidConfig("exchange sized for a different spin count".into()));
        }
        self.exchange.validate()?;
        for b in &self.baths {
            b.validate()?;
            if b.site >= self.n_spins {
                return Err(Error::InvalidConfig(format!(
                    "bath attached to site {} of {}",
                    b.site, self.n_spins
                )));
            }
        }
        Ok(())
    }

    pub fn uniform_field(n_spins: usize, h: [f64; 3]) -> Vec<Vector3<f64>> {
        vec![Vector3::new(h[0], h[1], h[2]); n_spins]
    }
}

/// Immutable inputs of the row fill: config, tabulated kernels, exchange.
pub struct EngineContext {
    pub cfg: SystemConfig,
    /// Kernels for baths with gamma > 0, in `active_baths` order.
    pub kernels: Vec<BathKernel>,
    /// Indices into cfg.baths of the active (gamma > 0) baths.
    pub active_baths: Vec<usize>,
    pub j_complex: Option<DMatrix<C64>>,
    /// Gamma_2 = 0 switch: all self-energies and propagators forced to zero,
    /// mean fields retained (tree + one-loop dynamics).
    pub semiclassical: bool,
}

impl EngineContext {
    pub fn new(cfg: SystemConfig, grid: &TimeGrid, semiclassical: bool) -> Result<EngineContext> {
        cfg.validate()?;
        let active_baths: Vec<usize> = cfg
            .baths
            .iter()
            .enumerate()
            .filter(|(_, b)| b.gamma > 0.0)
            .map(|(i, _)| i)
            .collect();
        let kernels = active_baths
            .iter()
            .map(|&i| crate::bath::precompute_kernel(&cfg.baths[i], grid))
            .collect::<Result<Vec<_>>>()?;
        let j_complex = if cfg.exchange.is_zero() {
            None
        } else {
            Some(cfg.exchange.as_complex())
        };
        Ok(EngineContext {
            cfg,
            kernels,
            active_baths,
            j_complex,
            semiclassical,
        })
    }

    /// Mcheck / Omega machinery runs only with nonzero exchange.
    pub fn exchange_active(&self) -> bool {
        self.j_complex.is_some() && !self.semiclassical
    }

    /// D / Pi machinery runs only with at least one gamma > 0 bath.
    pub fn baths_active(&self) -> bool {
        !self.active_baths.is_empty() && !self.semiclassical
    }

    pub fn bath_spec(&self, k: usize) -> &BathSpec {
        &self.cfg.baths[self.active_baths[k]]
    }
}

/// The 14 coupled two-time functions plus the field histories.
pub struct SimulationState {
    pub grid: TimeGrid,
    pub n_spins: usize,
    pub spin_length: f64,
    pub g_k: Vec<TwoTimeFunction<Block4>>,
    pub g_s: Vec<TwoTimeFunction<Block4>>,
    pub sigma_k: Vec<TwoTimeFunction<Block4>>,
    pub sigma_s: Vec<TwoTimeFunction<Block4>>,
    pub omega_k: Vec<TwoTimeFunction<Block3>>,
    pub omega_s: Vec<TwoTimeFunction<Block3>>,
    pub mcheck_k: Option<TwoTimeFunction<DMatrix<C64>>>,
    pub mcheck_s: Option<TwoTimeFunction<DMatrix<C64>>>,
    /// Indexed per active bath.
    pub d_k: Vec<TwoTimeFunction<C64>>,
    pub d_s: Vec<TwoTimeFunction<C64>>,
    pub pi_k: Vec<TwoTimeFunction<C64>>,
    pub pi_s: Vec<TwoTimeFunction<C64>>,
    /// [site][row], spin units (<s^alpha>, bounded by S).
    pub spin_evs: Vec<Vec<Vector3<f64>>>,
    pub lambda_bar: Vec<Vec<Vector3<f64>>>,
    pub cap_lambda_bar: Vec<Vec<Vector3<f64>>>,
}

impl SimulationState {
    pub fn filled_rows(&self) -> usize {
        self.g_k[0].filled_rows()
    }

    /// Payload bytes across every two-time container and field history.
    pub fn memory_bytes(&self) -> usize {
        let mut total = 0;
        for f in self.g_k.iter().chain(&self.g_s).chain(&self.sigma_k).chain(&self.sigma_s) {
            total += f.memory_bytes();
        }
        for f in self.omega_k.iter().chain(&self.omega_s) {
            total += f.memory_bytes();
        }
        for f in [&self.mcheck_k, &self.mcheck_s].into_iter().flatten() {
            total += f.memory_bytes();
        }
        for f in self.d_k.iter().chain(&self.d_s).chain(&self.pi_k).chain(&self.pi_s) {
            total += f.memory_bytes();
        }
        for v in self.spin_evs.iter().chain(&self.lambda_bar).chain(&self.cap_lambda_bar) {
            total += v.len() * std::mem::size_of::<Vector3<f64>>();
        }
        total
    }

    /// |<n1 + n2> - 2S| at a filled diagonal entry; conserved to roundoff by
    /// the commuting [K0, K^alpha] trace structure of the right-hand sides.
    pub fn constraint_deviation(&self, site: usize, row: usize) -> f64 {
        let gk = self.g_k[site].stored(row, row);
        let tr = gk.trace() * I;
        let number = 0.25 * tr.re - 1.0;
        let target = 2.0 * self.spin_length;
        (number - target).abs().max(0.25 * tr.im.abs())
    }

    /// <s^alpha> at a filled diagonal entry, spin units.
    pub fn spin_ev(&self, site: usize, row: usize) -> crate::error::Result<Vector3<f64>> {
        let gk = self.g_k[site].stored(row, row);
        Ok(Vector3::new(
            algebra::spin_ev_from_gk(gk, Axis::X)?,
            algebra::spin_ev_from_gk(gk, Axis::Y)?,
            algebra::spin_ev_from_gk(gk, Axis::Z)?,
        ))
    }
}

/// H_tilde_n(t) = (1/4) sum_alpha (h + lambda_bar + Lambda_bar)^alpha K^alpha.
pub fn effective_hamiltonian(cfg: &SystemConfig, state: &SimulationState, site: usize, row: usize) -> Block4 {
    let f = cfg.field[site] + state.lambda_bar[site][row] + state.cap_lambda_bar[site][row];
    let mut h = Block4::zeros();
    for axis in Axis::ALL {
        if f[axis.index()] != 0.0 {
            h += spin_matrix(axis) * C64::new(0.25 * f[axis.index()], 0.0);
        }
    }
    h
}

/// Two-loop bubbles Omega^{alpha beta, K/s} from the g blocks at one (t, t'):
/// Omega^K = (i/16) Tr[K^a gK K^b gK^T + K^a gs K^b gs^T],
/// Omega^s = (i/8)  Tr[K^a gK K^b gs^T].
pub fn self_energies_bubble(gk: &Block4, gs: &Block4) -> (Block3, Block3) {
    let gk_t = gk.transpose();
    let gs_t = gs.transpose();
    let mut p = [Block4::zeros(); 3]; // K^a gK
    let mut s = [Block4::zeros(); 3]; // K^a gs
    let mut q = [Block4::zeros(); 3]; // K^b gK^T
    let mut r = [Block4::zeros(); 3]; // K^b gs^T
    for a in Axis::ALL {
        let k = spin_matrix(a);
        p[a.index()] = k * gk;
        s[a.index()] = k * gs;
        q[a.index()] = k * gk_t;
        r[a.index()] = k * gs_t;
    }
    let sixteenth = I / C64::new(16.0, 0.0);
    let eighth = I / C64::new(8.0, 0.0);
    let mut omega_k = Block3::zeros();
    let mut omega_s = Block3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            omega_k[(a, b)] = sixteenth * (trace_prod(&p[a], &q[b]) + trace_prod(&s[a], &r[b]));
            omega_s[(a, b)] = eighth * trace_prod(&p[a], &r[b]);
        }
    }
    (omega_k, omega_s)
}

/// Bath self-energy bubble: the beta = alpha trace on the bath axis.
pub fn bubble_pi(gk: &Block4, gs: &Block4, axis: Axis) -> (C64, C64) {
    let k = spin_matrix(axis);
    let pk = k * gk;
    let ps = k * gs;
    let qk = k * gk.transpose();
    let qs = k * gs.transpose();
    let pi_k = I / C64::new(16.0, 0.0) * (trace_prod(&pk, &qk) + trace_prod(&ps, &qs));
    let pi_s = I / C64::new(8.0, 0.0) * trace_prod(&pk, &qs);
    (pi_k, pi_s)
}

/// Sigma^{K/s}(t,t') from same-argument g, D, and [J Mcheck J] blocks.
///
/// `d_vals`: per bath attached to this site, (axis, D_K, D_s) at (t, t');
/// axes without a bath contribute no D term. `exch` carries
/// ([J Mcheck^K J]_nn, [J Mcheck^s J]_nn) when exchange is active.
pub fn self_energy_sigma(
    gk: &Block4,
    gs: &Block4,
    d_vals: &[(Axis, C64, C64)],
    exch: Option<(&Block3, &Block3)>,
) -> (Block4, Block4) {
    let pref = I / C64::new(8.0, 0.0);
    let mut sig_k = Block4::zeros();
    let mut sig_s = Block4::zeros();
    for (axis, dk, ds) in d_vals {
        let k = spin_matrix(*axis);
        let kgk = k * gk * k;
        let kgs = k * gs * k;
        sig_k += kgk * (pref * dk) + kgs * (pref * ds);
        sig_s += kgk * (pref * ds) + kgs * (pref * dk);
    }
    if let Some((ek, es)) = exch {
        let mut kgk = [Block4::zeros(); 3];
        let mut kgs = [Block4::zeros(); 3];
        for a in Axis::ALL {
            kgk[a.index()] = spin_matrix(a) * gk;
            kgs[a.index()] = spin_matrix(a) * gs;
        }
        for a in 0..3 {
            for b in 0..3 {
                let kb = spin_matrix(Axis::from_index(b));
                let gk_ab = kgk[a] * kb;
                let gs_ab = kgs[a] * kb;
                sig_k += gk_ab * (pref * ek[(a, b)]) + gs_ab * (pref * es[(a, b)]);
                sig_s += gk_ab * (pref * es[(a, b)]) + gs_ab * (pref * ek[(a, b)]);
            }
        }
    }
    (sig_k, sig_s)
}

/// d/dt g^{K/s}(t_i, t_j) at fixed second argument:
///
///   d gK = 2i K0 H g K + i K0 int_0^{t_i} Sig^s gK - i K0 int_0^{t_j} Sig^K gs,
///   d gs = 2i K0 H gs  + i K0 int_{t_j}^{t_i} Sig^s gs.
pub fn gf_rhs(
    state: &SimulationState,
    h_eff: &Block4,
    site: usize,
    i: usize,
    j: usize,
    semiclassical: bool,
) -> (Block4, Block4) {
    let h = state.grid.dt;
    let k0 = symplectic();
    let gk_ij = *state.g_k[site].stored(i, j);
    let gs_ij = *state.g_s[site].stored(i, j);
    let two_i = C64::new(0.0, 2.0);
    let mut rhs_k = k0 * (h_eff * gk_ij) * two_i;
    let mut rhs_s = k0 * (h_eff * gs_ij) * two_i;
    if !semiclassical {
        let mut acc_k = Block4::zeros();
        for a in 0..=i {
            let w = trapezoid_weight(a, 0, i, h);
            if w == 0.0 {
                continue;
            }
            let sig_s = state.sigma_s[site].stored(i, a);
            let gk_aj = if a >= j {
                *state.g_k[site].stored(a, j)
            } else {
                state.g_k[site].stored(j, a).transpose()
            };
            acc_k += sig_s * gk_aj * C64::new(w, 0.0);
        }
        for a in 0..=j {
            let w = trapezoid_weight(a, 0, j, h);
            if w == 0.0 {
                continue;
            }
            let sig_k = state.sigma_k[site].stored(i, a);
            let gs_aj = if a >= j {
                *state.g_s[site].stored(a, j)
            } else {
                -state.g_s[site].stored(j, a).transpose()
            };
            acc_k -= sig_k * gs_aj * C64::new(w, 0.0);
        }
        rhs_k += k0 * acc_k * I;

        let mut acc_s = Block4::zeros();
        for a in j..=i {
            let w = trapezoid_weight(a, j, i, h);
            if w == 0.0 {
                continue;
            }
            let sig_s = state.sigma_s[site].stored(i, a);
            acc_s += sig_s * state.g_s[site].stored(a, j) * C64::new(w, 0.0);
        }
        rhs_s += k0 * acc_s * I;
    }
    (rhs_k, rhs_s)
}

/// Scalar Volterra forward substitution for one bath's propagators at row r:
/// D^s first (strictly causal limits), then D^K. Columns are filled in
/// ascending j so the j = r entries can reflect earlier columns of the row.
pub fn step_propagator_d(
    pi_k: &TwoTimeFunction<C64>,
    pi_s: &TwoTimeFunction<C64>,
    d_k: &mut TwoTimeFunction<C64>,
    d_s: &mut TwoTimeFunction<C64>,
    kernel: &BathKernel,
    dt: f64,
    row: usize,
) -> Result<()> {
    let h = dt;
    let r = row;
    let xi_s = |tau: usize| kernel.xi_s[tau];
    let xi_k = |tau: usize| kernel.xi_k[tau];

    // --- D^s row: D^s(r,j) = 2 Xi^s + 2 int_{t_j}^{t_r} int_{t_j}^{t1} Xi^s Pi^s D^s ---
    let mut row_s: Vec<C64> = Vec::with_capacity(r + 1);
    for j in 0..=r {
        if j == r {
            row_s.push(ZERO); // Xi^s(0) = 0 and the integral range is empty
            continue;
        }
        let mut acc = ZERO;
        let mut c_coef = ZERO;
        for a in j..=r {
            let wa = trapezoid_weight(a, j, r, h);
            if wa == 0.0 {
                continue;
            }
            let xs = xi_s(r - a);
            if xs == ZERO {
                continue;
            }
            let pis_row = pi_s.row(a);
            let mut inner = ZERO;
            for b in j..=a {
                let wb = trapezoid_weight(b, j, a, h);
                if wb == 0.0 {
                    continue;
                }
                if b == r {
                    c_coef += xs * pis_row[b] * (2.0 * wa * wb);
                } else {
                    inner += pis_row[b] * d_s.stored(b, j) * wb;
                }
            }
            acc += xs * inner * wa;
        }
        let known = xi_s(r - j) * 2.0 + acc * 2.0;
        let denom = ONE - c_coef;
        if denom.norm() < 1e-12 {
            return Err(Error::SingularVolterraStep { row: r, pivot: denom.norm() });
        }
        row_s.push(known / denom);
    }
    d_s.push_row(row_s);

    // --- D^K row ---
    let mut row_k: Vec<C64> = Vec::with_capacity(r + 1);
    for j in 0..=r {
        // D^K(b, j) for b < r; symmetric reflection handles b < j, and for
        // the diagonal column the earlier entries of this very row are used.
        let dk_col: Vec<C64> = if j == r {
            row_k.clone()
        } else {
            (0..r)
                .map(|b| if b >= j { *d_k.stored(b, j) } else { *d_k.stored(j, b) })
                .collect()
        };
        // D^s(b, j) for b <= j; antisymmetric reflection from row j (already
        // pushed above, so j = r works too).
        let ds_col: Vec<C64> = (0..=j)
            .map(|b| if b == j { ZERO } else { -d_s.stored(j, b) })
            .collect();

        let mut acc = ZERO;
        let mut c_coef = ZERO;
        // T1 (+) and T3 (-) share the outer Xi^s(r - a) weight over [0, r].
        for a in 0..=r {
            let wa = trapezoid_weight(a, 0, r, h);
            if wa == 0.0 {
                continue;
            }
            let xs = xi_s(r - a);
            if xs == ZERO {
                continue;
            }
            let pis_row = pi_s.row(a);
            let mut ia = ZERO;
            for b in 0..=a {
                let wb = trapezoid_weight(b, 0, a, h);
                if wb == 0.0 {
                    continue;
                }
                if b == r {
                    c_coef += xs * pis_row[b] * (2.0 * wa * wb);
                } else {
                    ia += pis_row[b] * dk_col[b] * wb;
                }
            }
            let mut ic = ZERO;
            for b in 0..=j {
                let wb = trapezoid_weight(b, 0, j, h);
                if wb == 0.0 {
                    continue;
                }
                let p = if b <= a { *pi_k.stored(a, b) } else { *pi_k.stored(b, a) };
                ic += p * ds_col[b] * wb;
            }
            acc += xs * (ia - ic) * wa;
        }
        // T2: outer Xi^K(r - a) over [0, t_j], inner Pi^s D^s over [t_a, t_j].
        for a in 0..=j {
            let wa = trapezoid_weight(a, 0, j, h);
            if wa == 0.0 {
                continue;
            }
            let xk = xi_k(r - a);
            let mut ib = ZERO;
            for b in a..=j {
                let wb = trapezoid_weight(b, a, j, h);
                if wb == 0.0 {
                    continue;
                }
                let p = -*pi_s.stored(b, a); // Pi^s(a, b) = -Pi^s(b, a)
                ib += p * ds_col[b] * wb;
            }
            acc += xk * ib * wa;
        }
        let known = xi_k(r - j) * 2.0 + acc * 2.0;
        let denom = ONE - c_coef;
        if denom.norm() < 1e-12 {
            return Err(Error::SingularVolterraStep { row: r, pivot: denom.norm() });
        }
        row_k.push(known / denom);
    }
    d_k.push_row(row_k);
    Ok(())
}

/// Dense Volterra forward substitution for the mean-field propagator at row
/// r. Only Mcheck is stored; the time-local split M = 2 J delta + J Mcheck J
/// is contracted by consumers. The unknown column entry appears at the
/// t1 = r node, handled by one LU solve shared across the row.
pub fn step_propagator_m(
    omega_k: &[TwoTimeFunction<Block3>],
    omega_s: &[TwoTimeFunction<Block3>],
    mcheck_k: &mut TwoTimeFunction<DMatrix<C64>>,
    mcheck_s: &mut TwoTimeFunction<DMatrix<C64>>,
    j_mat: &DMatrix<C64>,
    dt: f64,
    row: usize,
) -> Result<()> {
    let h = dt;
    let r = row;
    let dim = j_mat.nrows();
    let n_spins = dim / 3;

    // out = BD(Omega(r, a)) * J without forming the block-diagonal matrix.
    let bd_j = |blocks: &mut dyn FnMut(usize) -> Block3, out: &mut DMatrix<C64>| {
        for n in 0..n_spins {
            let block = blocks(n);
            for c in 0..dim {
                for u in 0..3 {
                    let mut acc = ZERO;
                    for v in 0..3 {
                        acc += block[(u, v)] * j_mat[(3 * n + v, c)];
                    }
                    out[(3 * n + u, c)] = acc;
                }
            }
        }
    };

    // Unknown coefficient: 2 * w(r on [0, r]) = h for r > 0, zero at r = 0.
    let wr = 2.0 * trapezoid_weight(r, 0, r, h);
    let mut l = DMatrix::<C64>::identity(dim, dim);
    if wr != 0.0 {
        let mut oj = DMatrix::<C64>::zeros(dim, dim);
        bd_j(&mut |n| *omega_s[n].stored(r, r), &mut oj);
        l -= oj * C64::new(wr, 0.0);
    }
    let lu = l.clone().lu();
    let pivot_min = (0..dim).map(|k| lu.u()[(k, k)].norm()).fold(f64::INFINITY, f64::min);
    if pivot_min < 1e-12 {
        return Err(Error::SingularVolterraStep { row: r, pivot: pivot_min });
    }

    let mut oj = DMatrix::<C64>::zeros(dim, dim);
    let mut m_arg = DMatrix::<C64>::zeros(dim, dim);
    let mut prod = DMatrix::<C64>::zeros(dim, dim);

    // --- Mcheck^s row ---
    let mut row_s: Vec<DMatrix<C64>> = Vec::with_capacity(r + 1);
    for j in 0..=r {
        let mut rhs = omega_diag4(omega_s, r, j, dim, n_spins);
        if j < r {
            let mut acc = DMatrix::<C64>::zeros(dim, dim);
            for a in j..r {
                let wa = trapezoid_weight(a, j, r, h);
                if wa == 0.0 {
                    continue;
                }
                bd_j(&mut |n| *omega_s[n].stored(r, a), &mut oj);
                m_arg.copy_from(mcheck_s.stored(a, j));
                oj.mul_to(&m_arg, &mut prod);
                acc.axpy(C64::new(wa, 0.0), &prod, ONE);
            }
            rhs.axpy(C64::new(2.0, 0.0), &acc, ONE);
            row_s.push(lu.solve(&rhs).ok_or(Error::SingularVolterraStep { row: r, pivot: 0.0 })?);
        } else {
            // Empty integral range: Mcheck^s(r, r) = 4 Omega^s(r, r) exactly.
            row_s.push(rhs);
        }
    }
    mcheck_s.push_row(row_s);

    // --- Mcheck^K row (ascending j; the diagonal column reflects earlier
    // columns of this row) ---
    let mut row_k: Vec<DMatrix<C64>> = Vec::with_capacity(r + 1);
    for j in 0..=r {
        let mut rhs = omega_diag4(omega_k, r, j, dim, n_spins);
        let mut acc = DMatrix::<C64>::zeros(dim, dim);
        for a in 0..r {
            let wa = trapezoid_weight(a, 0, r, h);
            if wa == 0.0 {
                continue;
            }
            bd_j(&mut |n| *omega_s[n].stored(r, a), &mut oj);
            if a >= j {
                m_arg.copy_from(mcheck_k.stored(a, j));
            } else if j == r {
                m_arg.copy_from(&row_k[a].transpose());
            } else {
                m_arg.copy_from(&mcheck_k.stored(j, a).transpose());
            }
            oj.mul_to(&m_arg, &mut prod);
            acc.axpy(C64::new(wa, 0.0), &prod, ONE);
        }
        for a in 0..=j {
            let wa = trapezoid_weight(a, 0, j, h);
            if wa == 0.0 {
                continue;
            }
            bd_j(&mut |n| *omega_k[n].stored(r, a), &mut oj);
            if a == j {
                m_arg.copy_from(mcheck_s.stored(j, j));
            } else {
                m_arg.copy_from(&(-mcheck_s.stored(j, a).transpose()));
            }
            oj.mul_to(&m_arg, &mut prod);
            acc.axpy(C64::new(-wa, 0.0), &prod, ONE);
        }
        rhs.axpy(C64::new(2.0, 0.0), &acc, ONE);
        if wr != 0.0 {
            row_k.push(lu.solve(&rhs).ok_or(Error::SingularVolterraStep { row: r, pivot: 0.0 })?);
        } else {
            row_k.push(rhs);
        }
    }
    mcheck_k.push_row(row_k);
    Ok(())
}

/// 4 * Omega(r, j) as a site-block-diagonal dense matrix.
fn omega_diag4(
    omega: &[TwoTimeFunction<Block3>],
    r: usize,
    j: usize,
    dim: usize,
    n_spins: usize,
) -> DMatrix<C64> {
    let mut m = DMatrix::<C64>::zeros(dim, dim);
    for n in 0..n_spins {
        let b = omega[n].stored(r, j);
        for u in 0..3 {
            for v in 0..3 {
                m[(3 * n + u, 3 * n + v)] = b[(u, v)] * 4.0;
            }
        }
    }
    m
}

/// (lambda_bar, Lambda_bar) at t-index `row`:
/// lambda^a_n(t) = int_0^t Xi^{a s}_n(t, t1) <s^a_n>(t1) dt1 per attached
/// bath, Lambda^a_n(t) = 2 sum_{b n'} J^{ab}_{nn'} <s^b_{n'}>(t).
pub fn field_evs(
    ctx: &EngineContext,
    spin_evs: &[Vec<Vector3<f64>>],
    grid: &TimeGrid,
    row: usize,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let n_spins = ctx.cfg.n_spins;
    let h = grid.dt;
    let mut lambda = vec![Vector3::zeros(); n_spins];
    for (k, kernel) in ctx.kernels.iter().enumerate() {
        let spec = ctx.bath_spec(k);
        let (site, ai) = (spec.site, spec.axis.index());
        let mut acc = 0.0;
        for a in 0..=row {
            let w = trapezoid_weight(a, 0, row, h);
            if w != 0.0 {
                acc += w * kernel.xi_s[row - a].re * spin_evs[site][a][ai];
            }
        }
        lambda[site][ai] += acc;
    }
    let mut cap = vec![Vector3::zeros(); n_spins];
    for n in 0..n_spins {
        for alpha in Axis::ALL {
            let mut acc = 0.0;
            for m in 0..n_spins {
                for beta in Axis::ALL {
                    let j = ctx.cfg.exchange.coupling(n, alpha, m, beta);
                    if j != 0.0 {
                        acc += j * spin_evs[m][row][beta.index()];
                    }
                }
            }
            cap[n][alpha.index()] = 2.0 * acc;
        }
    }
    (lambda, cap)
}

/// Fill (or refresh) every dependent quantity at row `row` from the current
/// g blocks, in the order Omega/Pi -> Mcheck -> D -> Sigma -> fields.
pub fn fill_dependent_row(
    state: &mut SimulationState,
    ctx: &EngineContext,
    row: usize,
    overwrite: bool,
) -> Result<()> {
    let r = row;
    let n_spins = state.n_spins;

    if overwrite {
        truncate_dependent_row(state, r);
    }

    // Spin EVs of the new diagonal feed the field EVs below.
    for n in 0..n_spins {
        let ev = state.spin_ev(n, r)?;
        if state.spin_evs[n].len() == r {
            state.spin_evs[n].push(ev);
        } else {
            state.spin_evs[n][r] = ev;
        }
    }

    if ctx.exchange_active() {
        for n in 0..n_spins {
            let g_k = &state.g_k[n];
            let g_s = &state.g_s[n];
            let pairs: Vec<(Block3, Block3)> = (0..=r)
                .into_par_iter()
                .map(|j| self_energies_bubble(g_k.stored(r, j), g_s.stored(r, j)))
                .collect();
            let (mut ks, mut ss) = (Vec::with_capacity(r + 1), Vec::with_capacity(r + 1));
            for (k, s) in pairs {
                ks.push(k);
                ss.push(s);
            }
            state.omega_k[n].push_row(ks);
            state.omega_s[n].push_row(ss);
        }
    }
    if ctx.baths_active() {
        for k in 0..ctx.kernels.len() {
            let spec = ctx.bath_spec(k);
            let (site, axis) = (spec.site, spec.axis);
            let g_k = &state.g_k[site];
            let g_s = &state.g_s[site];
            let pairs: Vec<(C64, C64)> = (0..=r)
                .into_par_iter()
                .map(|j| bubble_pi(g_k.stored(r, j), g_s.stored(r, j), axis))
                .collect();
            let (mut ks, mut ss) = (Vec::with_capacity(r + 1), Vec::with_capacity(r + 1));
            for (pk, ps) in pairs {
                ks.push(pk);
                ss.push(ps);
            }
            state.pi_k[k].push_row(ks);
            state.pi_s[k].push_row(ss);
        }
    }

    if ctx.exchange_active() {
        let j_mat = ctx.j_complex.as_ref().unwrap();
        step_propagator_m(
            &state.omega_k,
            &state.omega_s,
            state.mcheck_k.as_mut().unwrap(),
            state.mcheck_s.as_mut().unwrap(),
            j_mat,
            state.grid.dt,
            r,
        )?;
    }
    if ctx.baths_active() {
        for k in 0..ctx.kernels.len() {
            step_propagator_d(
                &state.pi_k[k],
                &state.pi_s[k],
                &mut state.d_k[k],
                &mut state.d_s[k],
                &ctx.kernels[k],
                state.grid.dt,
                r,
            )?;
        }
    }

    if !ctx.semiclassical {
        for n in 0..n_spins {
            let baths_on_site: Vec<(usize, Axis)> = (0..ctx.kernels.len())
                .filter(|&k| ctx.bath_spec(k).site == n)
                .map(|k| (k, ctx.bath_spec(k).axis))
                .collect();
            let j_mat = ctx.j_complex.as_ref();
            let g_k = &state.g_k[n];
            let g_s = &state.g_s[n];
            let d_k = &state.d_k;
            let d_s = &state.d_s;
            let mcheck_k = state.mcheck_k.as_ref();
            let mcheck_s = state.mcheck_s.as_ref();
            let rows: Vec<(Block4, Block4)> = (0..=r)
                .into_par_iter()
                .map(|j| {
                    let gk = g_k.stored(r, j);
                    let gs = g_s.stored(r, j);
                    let d_vals: Vec<(Axis, C64, C64)> = baths_on_site
                        .iter()
                        .map(|&(k, axis)| (axis, *d_k[k].stored(r, j), *d_s[k].stored(r, j)))
                        .collect();
                    let exch = j_mat.map(|jm| {
                        let mk = mcheck_k.unwrap().stored(r, j);
                        let ms = mcheck_s.unwrap().stored(r, j);
                        let jk = jm * mk * jm;
                        let js = jm * ms * jm;
                        let mut ek = Block3::zeros();
                        let mut es = Block3::zeros();
                        for u in 0..3 {
                            for v in 0..3 {
                                ek[(u, v)] = jk[(3 * n + u, 3 * n + v)];
                                es[(u, v)] = js[(3 * n + u, 3 * n + v)];
                            }
                        }
                        (ek, es)
                    });
                    self_energy_sigma(gk, gs, &d_vals, exch.as_ref().map(|(a, b)| (a, b)))
                })
                .collect();
            let (mut ks, mut ss) = (Vec::with_capacity(r + 1), Vec::with_capacity(r + 1));
            for (k, s) in rows {
                ks.push(k);
                ss.push(s);
            }
            state.sigma_k[n].push_row(ks);
            state.sigma_s[n].push_row(ss);
        }
    }

    let (lambda, cap) = field_evs(ctx, &state.spin_evs, &state.grid, r);
    for n in 0..n_spins {
        if state.lambda_bar[n].len() == r {
            state.lambda_bar[n].push(lambda[n]);
            state.cap_lambda_bar[n].push(cap[n]);
        } else {
            state.lambda_bar[n][r] = lambda[n];
            state.cap_lambda_bar[n][r] = cap[n];
        }
    }
    Ok(())
}

/// Drop the dependent quantities of the top row so a corrector pass can
/// recompute them from the corrected g blocks.
fn truncate_dependent_row(state: &mut SimulationState, row: usize) {
    for f in state.omega_k.iter_mut().chain(state.omega_s.iter_mut()) {
        f.pop_row_if(row);
    }
    for f in state.sigma_k.iter_mut().chain(state.sigma_s.iter_mut()) {
        f.pop_row_if(row);
    }
    for f in [&mut state.mcheck_k, &mut state.mcheck_s].into_iter().flatten() {
        f.pop_row_if(row);
    }
    for f in state
        .d_k
        .iter_mut()
        .chain(state.d_s.iter_mut())
        .chain(state.pi_k.iter_mut())
        .chain(state.pi_s.iter_mut())
    {
        f.pop_row_if(row);
    }
}
