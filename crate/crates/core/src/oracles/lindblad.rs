//! Lindblad master equation for the two-level system coupled to one bath,
//! with jump operators built in the eigenbasis of H_S:
//!
//!   L0 = sqrt(J(dE) (1 + n_BE) |<+|sz|->|^2 / 4) |-><+|   (emission)
//!   L1 = sqrt(J(dE) n_BE       |<+|sz|->|^2 / 4) |+><-|   (absorption)
//!   L2 = sqrt(gamma_L T |<-|sz|-><+|sz|+>| / 2)  |-><-|   (dephasing)
//!
//! "gamma_L T" is read as gamma_L * k_B T, and the product of diagonal
//! matrix elements (negative whenever omega_q != 0) is taken in magnitude
//! since only |L2|^2 enters the dissipator. gamma_L is a free parameter of
//! the oracle, fitted rather than equated to the engine's gamma.

use nalgebra::{Matrix2, Vector3};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

type M2 = Matrix2<C64>;

const HERM_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-12;
const EIG_TOL: f64 = -1e-10;

/// 2x2 density matrix with validity checks on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix2(M2);

impl DensityMatrix2 {
    pub fn new(m: M2) -> Result<DensityMatrix2> {
        let herm = (m - m.adjoint()).norm();
        if herm > HERM_TOL {
            return Err(Error::NotADensityMatrix {
                reason: format!("hermiticity residue {herm:.3e}"),
            });
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(Error::NotADensityMatrix {
                reason: format!("trace {tr}"),
            });
        }
        // Eigenvalues of a 2x2 hermitian matrix.
        let a = m[(0, 0)].re;
        let d = m[(1, 1)].re;
        let b2 = m[(0, 1)].norm_sqr();
        let disc = ((a - d) * (a - d) / 4.0 + b2).sqrt();
        let lo = (a + d) / 2.0 - disc;
        if lo < EIG_TOL {
            return Err(Error::NotADensityMatrix {
                reason: format!("negative eigenvalue {lo:.3e}"),
            });
        }
        Ok(DensityMatrix2(m))
    }

    pub fn from_bloch(p: &Vector3<f64>) -> Result<DensityMatrix2> {
        let half = C64::new(0.5, 0.0);
        let m = M2::new(
            half * (1.0 + p.z),
            half * C64::new(p.x, -p.y),
            half * C64::new(p.x, p.y),
            half * (1.0 - p.z),
        );
        DensityMatrix2::new(m)
    }

    pub fn bloch(&self) -> Vector3<f64> {
        let m = &self.0;
        Vector3::new(
            2.0 * m[(0, 1)].re,
            -2.0 * m[(0, 1)].im,
            (m[(0, 0)] - m[(1, 1)]).re,
        )
    }

    pub fn matrix(&self) -> &M2 {
        &self.0
    }
}

/// Two-level system + bath parameters for the Lindblad oracle.
#[derive(Debug, Clone, Copy)]
pub struct LindbladParams {
    pub omega_q: f64,
    pub delta: f64,
    /// Oracle coupling; adjusted by fitting, not equal to the engine gamma.
    pub gamma_l: f64,
    /// k_B T.
    pub temperature: f64,
    pub omega_c: f64,
    pub s: f64,
}

struct JumpOps {
    h: M2,
    ls: Vec<M2>,
}

fn jump_ops(p: &LindbladParams) -> JumpOps {
    let de = (p.omega_q * p.omega_q + p.delta * p.delta).sqrt();
    let h = M2::new(
        C64::new(p.omega_q / 2.0, 0.0),
        C64::new(p.delta / 2.0, 0.0),
        C64::new(p.delta / 2.0, 0.0),
        C64::new(-p.omega_q / 2.0, 0.0),
    );
    if de == 0.0 {
        return JumpOps { h, ls: Vec::new() };
    }
    // Real eigenvectors of H: |+> = (cos t2, sin t2), |-> = (-sin t2, cos t2)
    // with cos theta = omega_q / dE, sin theta = delta / dE.
    let theta = p.delta.atan2(p.omega_q);
    let (c2, s2) = ((theta / 2.0).cos(), (theta / 2.0).sin());
    let plus = nalgebra::Vector2::new(C64::new(c2, 0.0), C64::new(s2, 0.0));
    let minus = nalgebra::Vector2::new(C64::new(-s2, 0.0), C64::new(c2, 0.0));
    let sz_pm = -theta.sin(); // <+|sz|->
    let sz_pp = theta.cos(); // <+|sz|+>
    let sz_mm = -theta.cos(); // <-|sz|->
    let j_de = p.gamma_l * p.omega_c.powf(1.0 - p.s) * de.powf(p.s) * (-de / p.omega_c).exp();
    let n_be = if p.temperature > 0.0 {
        1.0 / ((de / p.temperature).exp() - 1.0)
    } else {
        0.0
    };
    let rate0 = j_de * (1.0 + n_be) * sz_pm * sz_pm / 4.0;
    let rate1 = j_de * n_be * sz_pm * sz_pm / 4.0;
    let rate2 = p.gamma_l * p.temperature * (sz_mm * sz_pp).abs() / 2.0;
    let outer = |a: &nalgebra::Vector2<C64>, b: &nalgebra::Vector2<C64>| -> M2 {
        M2::from_fn(|i, j| a[i] * b[j].conj())
    };
    let mut ls = Vec::new();
    if rate0 > 0.0 {
        ls.push(outer(&minus, &plus) * C64::new(rate0.sqrt(), 0.0));
    }
    if rate1 > 0.0 {
        ls.push(outer(&plus, &minus) * C64::new(rate1.sqrt(), 0.0));
    }
    if rate2 > 0.0 {
        ls.push(outer(&minus, &minus) * C64::new(rate2.sqrt(), 0.0));
    }
    JumpOps { h, ls }
}

fn master_rhs(ops: &JumpOps, rho: &M2) -> M2 {
    let i = C64::new(0.0, 1.0);
    let mut out = (ops.h * rho - rho * ops.h) * (-i);
    for l in &ops.ls {
        let ld = l.adjoint();
        let ldl = ld * l;
        out += l * rho * ld - (ldl * rho + rho * ldl) * C64::new(0.5, 0.0);
    }
    out
}

/// One classical 4th-order step of the master equation.
pub fn lindblad_step(rho: &DensityMatrix2, params: &LindbladParams, dt: f64) -> Result<DensityMatrix2> {
    let ops = jump_ops(params);
    Ok(rk4(&ops, rho, dt)?)
}

fn rk4(ops: &JumpOps, rho: &DensityMatrix2, dt: f64) -> Result<DensityMatrix2> {
    let y = rho.matrix();
    let k1 = master_rhs(ops, y);
    let k2 = master_rhs(ops, &(y + k1 * C64::new(dt / 2.0, 0.0)));
    let k3 = master_rhs(ops, &(y + k2 * C64::new(dt / 2.0, 0.0)));
    let k4 = master_rhs(ops, &(y + k3 * C64::new(dt, 0.0)));
    let next = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * C64::new(dt / 6.0, 0.0);
    DensityMatrix2::new(next)
}

/// Integrate from `rho0` and sample the Bloch vector at the output grid
/// 0, dt_out, ..., (n_out - 1) dt_out. Substeps keep the integrator error
/// far below anything under test.
pub fn lindblad_run(
    rho0: &DensityMatrix2,
    params: &LindbladParams,
    dt_out: f64,
    n_out: usize,
) -> Result<Vec<Vector3<f64>>> {
    let ops = jump_ops(params);
    let de = (params.omega_q * params.omega_q + params.delta * params.delta).sqrt();
    let scale = de.max(params.gamma_l * params.temperature).max(1e-12);
    let substeps = (dt_out * scale / 1e-3).ceil().max(1.0) as usize;
    let dt = dt_out / substeps as f64;
    let mut rho = rho0.clone();
    let mut out = Vec::with_capacity(n_out);
    out.push(rho.bloch());
    for _ in 1..n_out {
        for _ in 0..substeps {
            rho = rk4(&ops, &rho, dt)?;
        }
        out.push(rho.bloch());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gamma_zero_is_unitary_larmor() {
        // gamma_L = 0: precession about the (delta, 0, omega_q) axis at
        // frequency dE; starting along x with a pure z field.
        let p = LindbladParams {
            omega_q: 1.3,
            delta: 0.0,
            gamma_l: 0.0,
            temperature: 0.0,
            omega_c: 7.5,
            s: 1.0,
        };
        let rho0 = DensityMatrix2::from_bloch(&Vector3::new(1.0, 0.0, 0.0)).unwrap();
        let traj = lindblad_run(&rho0, &p, 0.05, 200).unwrap();
        for (k, b) in traj.iter().enumerate() {
            let t = 0.05 * k as f64;
            assert_abs_diff_eq!(b.x, (p.omega_q * t).cos(), epsilon = 1e-7);
            assert_abs_diff_eq!(b.z, 0.0, epsilon = 1e-7);
        }
    }

    #[test]
    fn omega_q_zero_kills_the_dephasing_jump() {
        let p = LindbladParams {
            omega_q: 0.0,
            delta: 1.0,
            gamma_l: 0.1,
            temperature: 2.0,
            omega_c: 7.5,
            s: 1.0,
        };
        let ops = jump_ops(&p);
        // <+-|sz|+-> = 0 at omega_q = 0, so only emission + absorption remain.
        assert_eq!(ops.ls.len(), 2);
    }

    #[test]
    fn infinite_temperature_mixes_the_state() {
        let p = LindbladParams {
            omega_q: 0.0,
            delta: 1.0,
            gamma_l: 0.05,
            temperature: 200.0,
            omega_c: 7.5,
            s: 1.0,
        };
        let rho0 = DensityMatrix2::from_bloch(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        let traj = lindblad_run(&rho0, &p, 0.5, 400).unwrap();
        let p_final = traj.last().unwrap().norm();
        assert!(p_final < 0.05, "purity {p_final} should approach 0 at high T");
    }

    #[test]
    fn step_preserves_trace_and_positivity() {
        let p = LindbladParams {
            omega_q: 0.5,
            delta: 1.0,
            gamma_l: 0.2,
            temperature: 1.0,
            omega_c: 7.5,
            s: 1.0,
        };
        let mut rho = DensityMatrix2::from_bloch(&Vector3::new(0.0, 0.6, 0.8)).unwrap();
        for _ in 0..2000 {
            // new() re-validates hermiticity, trace, positivity each step
            rho = lindblad_step(&rho, &p, 5e-4).unwrap();
        }
    }

    #[test]
    fn rejects_invalid_density_matrices() {
        let bad = M2::new(
            C64::new(1.2, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(-0.2, 0.0),
        );
        assert!(matches!(
            DensityMatrix2::new(bad),
            Err(Error::NotADensityMatrix { .. })
        ));
        assert!(DensityMatrix2::from_bloch(&Vector3::new(0.9, 0.9, 0.9)).is_err());
    }
}
