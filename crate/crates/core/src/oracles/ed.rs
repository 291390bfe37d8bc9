//! Dense exact diagonalization for small closed spin clusters.
//!
//! The Hamiltonian of Eq.-(1) form, H = h . sum_n s_n + sum_{nn'} J s s,
//! is built in the 2^N product basis (bit n of the index is site n, 0 = up),
//! diagonalized once, and evolved by the spectral decomposition.

use nalgebra::{DMatrix, DVector, Vector3};
use num_complex::Complex64 as C64;

use crate::algebra::Axis;
use crate::eom::SystemConfig;
use crate::error::{Error, Result};

/// Dense eigensolves stay desk-feasible up to this many spins.
pub const ED_CAP: usize = 12;

fn check_cap(n_spins: usize) -> Result<()> {
    if n_spins > ED_CAP {
        return Err(Error::ClusterTooLarge { n_spins, cap: ED_CAP });
    }
    Ok(())
}

/// Apply sigma^alpha on `site` to a basis state, returning (new index, amp).
#[inline]
fn apply_sigma(alpha: Axis, site: usize, basis: usize) -> (usize, C64) {
    let bit = (basis >> site) & 1;
    match alpha {
        Axis::Z => (basis, C64::new(1.0 - 2.0 * bit as f64, 0.0)),
        Axis::X => (basis ^ (1 << site), C64::new(1.0, 0.0)),
        Axis::Y => {
            // sigma_y |0> = i |1>, sigma_y |1> = -i |0>  (0 = up)
            let amp = if bit == 0 { C64::new(0.0, 1.0) } else { C64::new(0.0, -1.0) };
            (basis ^ (1 << site), amp)
        }
    }
}

fn build_hamiltonian(cfg: &SystemConfig) -> DMatrix<C64> {
    let n = cfg.n_spins;
    let dim = 1usize << n;
    let mut h = DMatrix::<C64>::zeros(dim, dim);
    for b in 0..dim {
        // Field term: sum_n sum_a h^a sigma^a_n / 2.
        for site in 0..n {
            for alpha in Axis::ALL {
                let coeff = cfg.field[site][alpha.index()] / 2.0;
                if coeff == 0.0 {
                    continue;
                }
                let (b2, amp) = apply_sigma(alpha, site, b);
                h[(b2, b)] += amp * coeff;
            }
        }
        // Exchange over ordered pairs: sum_{nn'} J^{ab}_{nn'} s^a_n s^b_n'
        // = sum_{n<m} 2 J^{ab} (sigma^a_n / 2)(sigma^b_m / 2).
        for site_n in 0..n {
            for site_m in site_n + 1..n {
                for alpha in Axis::ALL {
                    for beta in Axis::ALL {
                        let j = cfg.exchange.coupling(site_n, alpha, site_m, beta);
                        if j == 0.0 {
                            continue;
                        }
                        let (b1, a1) = apply_sigma(beta, site_m, b);
                        let (b2, a2) = apply_sigma(alpha, site_n, b1);
                        h[(b2, b)] += a1 * a2 * (j / 2.0);
                    }
                }
            }
        }
    }
    h
}

/// Product state from per-site Bloch vectors (must be pure, |v| = 1).
pub fn product_state(bloch: &[Vector3<f64>]) -> Result<DVector<C64>> {
    for (site, v) in bloch.iter().enumerate() {
        if (v.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidBlochVector { site, norm: v.norm() });
        }
    }
    let n = bloch.len();
    let dim = 1usize << n;
    let mut psi = DVector::<C64>::zeros(dim);
    for b in 0..dim {
        let mut amp = C64::new(1.0, 0.0);
        for (site, v) in bloch.iter().enumerate() {
            let theta = v.z.clamp(-1.0, 1.0).acos();
            let phi = v.y.atan2(v.x);
            let up = (b >> site) & 1 == 0;
            amp *= if up {
                C64::new((theta / 2.0).cos(), 0.0)
            } else {
                C64::from_polar((theta / 2.0).sin(), phi)
            };
        }
        psi[b] = amp;
    }
    Ok(psi)
}

fn sigma_ev(psi: &DVector<C64>, alpha: Axis, site: usize) -> f64 {
    let mut acc = C64::new(0.0, 0.0);
    for b in 0..psi.len() {
        if psi[b] == C64::new(0.0, 0.0) {
            continue;
        }
        let (b2, amp) = apply_sigma(alpha, site, b);
        acc += psi[b2].conj() * amp * psi[b];
    }
    acc.re
}

/// <sigma^a_n>(t) at the requested times from one dense eigensolve.
pub fn exact_diagonalization_evolve(
    cfg: &SystemConfig,
    initial_bloch: &[Vector3<f64>],
    times: &[f64],
) -> Result<Vec<Vec<Vector3<f64>>>> {
    check_cap(cfg.n_spins)?;
    cfg.validate()?;
    if initial_bloch.len() != cfg.n_spins {
        return Err(Error::InvalidConfig("initial state length mismatch".into()));
    }
    let h = build_hamiltonian(cfg);
    let eig = h.symmetric_eigen();
    let v = &eig.eigenvectors;
    let energies = &eig.eigenvalues;
    let psi0 = product_state(initial_bloch)?;
    let coeffs = v.adjoint() * &psi0;
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let phases = DVector::<C64>::from_iterator(
            energies.len(),
            energies.iter().map(|&e| C64::from_polar(1.0, -e * t)),
        );
        let psi_t = v * coeffs.component_mul(&phases);
        let evs: Vec<Vector3<f64>> = (0..cfg.n_spins)
            .map(|site| {
                Vector3::new(
                    sigma_ev(&psi_t, Axis::X, site),
                    sigma_ev(&psi_t, Axis::Y, site),
                    sigma_ev(&psi_t, Axis::Z, site),
                )
            })
            .collect();
        out.push(evs);
    }
    Ok(out)
}

/// Connected symmetrized two-spin correlator
/// <{sigma^a_n(t), sigma^b_m(0)}>_c from the same spectral decomposition.
/// Used to anchor the sign convention of the engine correlators.
pub fn ed_connected_keldysh_zz(
    cfg: &SystemConfig,
    initial_bloch: &[Vector3<f64>],
    site_n: usize,
    site_m: usize,
    times: &[f64],
) -> Result<Vec<f64>> {
    check_cap(cfg.n_spins)?;
    let h = build_hamiltonian(cfg);
    let eig = h.symmetric_eigen();
    let v = &eig.eigenvectors;
    let energies = &eig.eigenvalues;
    let psi0 = product_state(initial_bloch)?;
    let coeffs = v.adjoint() * &psi0;
    let dim = psi0.len();
    let apply_z = |psi: &DVector<C64>, site: usize| {
        DVector::<C64>::from_iterator(
            dim,
            (0..dim).map(|b| {
                let bit = (b >> site) & 1;
                psi[b] * (1.0 - 2.0 * bit as f64)
            }),
        )
    };
    let forward = |c: &DVector<C64>, t: f64| {
        let phases = DVector::<C64>::from_iterator(
            energies.len(),
            energies.iter().map(|&e| C64::from_polar(1.0, -e * t)),
        );
        v * c.component_mul(&phases)
    };
    let zb_psi0 = apply_z(&psi0, site_m);
    let zb_coeffs = v.adjoint() * &zb_psi0;
    let z_m0 = sigma_ev(&psi0, Axis::Z, site_m);
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let psi_t = forward(&coeffs, t);
        // <sz_n(t) sz_m(0)> = <psi_t| sz_n U(t) sz_m |psi0>
        let rhs = forward(&zb_coeffs, t);
        let zn_psi_t = apply_z(&psi_t, site_n);
        let g_greater: C64 = zn_psi_t.dotc(&rhs); // <sz_n(t) sz_m(0)>
        let keldysh = 2.0 * g_greater.re; // sum of both orderings for hermitian ops
        let z_n_t = sigma_ev(&psi_t, Axis::Z, site_n);
        out.push(keldysh - 2.0 * z_n_t * z_m0);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eom::Exchange;
    use approx::assert_abs_diff_eq;

    fn free_spin_cfg(h: [f64; 3]) -> SystemConfig {
        SystemConfig {
            n_spins: 1,
            spin_length: 0.5,
            exchange: Exchange::none(1),
            field: SystemConfig::uniform_field(1, h),
            baths: Vec::new(),
            replica: None,
        }
    }

    #[test]
    fn single_spin_larmor() {
        let omega_q = 0.8;
        let cfg = free_spin_cfg([0.0, 0.0, omega_q]);
        let times: Vec<f64> = (0..100).map(|k| 0.07 * k as f64).collect();
        let evs = exact_diagonalization_evolve(&cfg, &[Vector3::new(1.0, 0.0, 0.0)], &times).unwrap();
        for (k, t) in times.iter().enumerate() {
            assert_abs_diff_eq!(evs[k][0].x, (omega_q * t).cos(), epsilon = 1e-10);
            assert_abs_diff_eq!(evs[k][0].z, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn heisenberg_dimer_beat() {
        // J_{01} = J delta_ab in both directions (H = 2J s0.s1): starting from
        // |up down>, <sigma^z_0>(t) = cos(2 J t).
        let j = 0.6;
        let cfg = SystemConfig {
            n_spins: 2,
            spin_length: 0.5,
            exchange: Exchange::chain(2, j),
            field: SystemConfig::uniform_field(2, [0.0, 0.0, 0.0]),
            baths: Vec::new(),
            replica: None,
        };
        let init = [Vector3::new(0.0, 0.0, 1.0), Vector3::new(0.0, 0.0, -1.0)];
        let times: Vec<f64> = (0..120).map(|k| 0.05 * k as f64).collect();
        let evs = exact_diagonalization_evolve(&cfg, &init, &times).unwrap();
        for (k, t) in times.iter().enumerate() {
            assert_abs_diff_eq!(evs[k][0].z, (2.0 * j * t).cos(), epsilon = 1e-9);
            assert_abs_diff_eq!(evs[k][1].z, -(2.0 * j * t).cos(), epsilon = 1e-9);
        }
    }

    #[test]
    fn neel_grid_conserves_total_sz() {
        let cfg = SystemConfig {
            n_spins: 9,
            spin_length: 0.5,
            exchange: Exchange::grid(3, 3, 1.0),
            field: SystemConfig::uniform_field(9, [0.0, 0.0, 0.0]),
            baths: Vec::new(),
            replica: None,
        };
        let init: Vec<Vector3<f64>> = (0..9)
            .map(|k| Vector3::new(0.0, 0.0, if (k / 3 + k % 3) % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let times = [0.0, 0.4, 1.1];
        let evs = exact_diagonalization_evolve(&cfg, &init, &times).unwrap();
        for row in &evs {
            let total: f64 = row.iter().map(|v| v.z).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-8); // odd site count
        }
    }

    #[test]
    fn cap_is_enforced() {
        let cfg = SystemConfig {
            n_spins: 13,
            spin_length: 0.5,
            exchange: Exchange::none(13),
            field: SystemConfig::uniform_field(13, [0.0, 0.0, 0.0]),
            baths: Vec::new(),
            replica: None,
        };
        let init = vec![Vector3::new(0.0, 0.0, 1.0); 13];
        assert!(matches!(
            exact_diagonalization_evolve(&cfg, &init, &[0.0]),
            Err(Error::ClusterTooLarge { .. })
        ));
    }
}
