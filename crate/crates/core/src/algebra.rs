//! Spin matrices for the real-field Schwinger-boson representation.
//!
//! Two flavors of Schwinger bosons per spin are expanded into the real field
//! quadruplet (x1, p1, x2, p2). Spin bilinears are generated by four constant
//! 4x4 matrices: Kx, Ky, Kz (real, symmetric, squaring to the identity) and
//! the symplectic form K0 (imaginary, antisymmetric). Everything downstream
//! of the equations of motion reduces to products and traces of these with
//! 4x4 propagator blocks.

use nalgebra::SMatrix;
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// One (site, site) block of a Schwinger-boson-space object.
pub type Block4 = SMatrix<C64, 4, 4>;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Cartesian axes, plus the symplectic index used by the kinetic term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }

    pub fn from_index(i: usize) -> Axis {
        Axis::ALL[i]
    }
}

fn kron2(a: [[f64; 2]; 2], b: [[C64; 2]; 2]) -> Block4 {
    let mut m = Block4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    m[(2 * i + k, 2 * j + l)] = b[k][l] * a[i][j];
                }
            }
        }
    }
    m
}

const SX: [[f64; 2]; 2] = [[0.0, 1.0], [1.0, 0.0]];
const SZ: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, -1.0]];
const ID2: [[f64; 2]; 2] = [[1.0, 0.0], [0.0, 1.0]];

fn sy_c() -> [[C64; 2]; 2] {
    [[ZERO, -I], [I, ZERO]]
}

fn id2_c() -> [[C64; 2]; 2] {
    [[ONE, ZERO], [ZERO, ONE]]
}

fn real2_c(a: [[f64; 2]; 2]) -> [[C64; 2]; 2] {
    [
        [C64::new(a[0][0], 0.0), C64::new(a[0][1], 0.0)],
        [C64::new(a[1][0], 0.0), C64::new(a[1][1], 0.0)],
    ]
}

/// Kx = sigma_x (x) I2.
pub fn k_x() -> Block4 {
    kron2(SX, id2_c())
}

/// Ky = -sigma_y (x) sigma_y; real and symmetric despite the sigma_y factors.
pub fn k_y() -> Block4 {
    let sy = sy_c();
    let mut m = Block4::zeros();
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    m[(2 * i + k, 2 * j + l)] = -sy[i][j] * sy[k][l];
                }
            }
        }
    }
    m
}

/// Kz = sigma_z (x) I2.
pub fn k_z() -> Block4 {
    kron2(SZ, id2_c())
}

/// K0 = I2 (x) sigma_y, the symplectic form of the (x, p) pairs.
pub fn k_0() -> Block4 {
    kron2(ID2, sy_c())
}

/// The constant spin matrix for a Cartesian axis.
pub fn spin_matrix(axis: Axis) -> &'static Block4 {
    use std::sync::OnceLock;
    static KX: OnceLock<Block4> = OnceLock::new();
    static KY: OnceLock<Block4> = OnceLock::new();
    static KZ: OnceLock<Block4> = OnceLock::new();
    match axis {
        Axis::X => KX.get_or_init(k_x),
        Axis::Y => KY.get_or_init(k_y),
        Axis::Z => KZ.get_or_init(k_z),
    }
}

/// The symplectic matrix, cached like the spin matrices.
pub fn symplectic() -> &'static Block4 {
    use std::sync::OnceLock;
    static K0: OnceLock<Block4> = OnceLock::new();
    K0.get_or_init(k_0)
}

/// i * K0, the fixed equal-time value of the spectral Green's function.
pub fn i_k0() -> Block4 {
    symplectic() * I
}

/// Trace of the product of two 4x4 blocks without forming the product.
pub fn trace_prod(a: &Block4, b: &Block4) -> C64 {
    let mut acc = ZERO;
    for u in 0..4 {
        for v in 0..4 {
            acc += a[(u, v)] * b[(v, u)];
        }
    }
    acc
}

/// Spin expectation value <s^alpha> = (i/8) Tr[gK(t,t) K^alpha].
///
/// The trace must be real up to roundoff; a larger imaginary residue means
/// the state lost its hermiticity structure.
pub fn spin_ev_from_gk(gk_diag: &Block4, axis: Axis) -> Result<f64> {
    const TOL: f64 = 1e-10;
    let tr = trace_prod(gk_diag, spin_matrix(axis));
    let val = I * tr / C64::new(8.0, 0.0);
    if val.im.abs() > TOL {
        return Err(Error::NonHermitianState {
            residue: val.im.abs(),
            tolerance: TOL,
        });
    }
    Ok(val.re)
}

/// Startup self-check of the matrix algebra the equations of motion rely on:
/// K^alpha^2 = 1, Tr[K^a K^b] = 4 delta_ab, tracelessness, antisymmetry of K0,
/// and [K0, K^alpha] = 0 (which makes the boson-number trace conserve exactly).
pub fn verify_constants() {
    let k0 = symplectic();
    assert!((k0 + k0.transpose()).norm() < 1e-14, "K0 must be antisymmetric");
    for a in Axis::ALL {
        let ka = spin_matrix(a);
        assert!((ka - ka.transpose()).norm() < 1e-14);
        assert!((ka * ka - Block4::identity()).norm() < 1e-14);
        assert!(ka.trace().norm() < 1e-14);
        assert!((ka * k0 - k0 * ka).norm() < 1e-14);
        for b in Axis::ALL {
            let kb = spin_matrix(b);
            let expected = if a == b { 4.0 } else { 0.0 };
            assert!((trace_prod(ka, kb) - C64::new(expected, 0.0)).norm() < 1e-14);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn constants_pass_startup_checks() {
        verify_constants();
    }

    #[test]
    fn kz_is_diag_1_1_m1_m1() {
        let kz = spin_matrix(Axis::Z);
        let expected = [1.0, 1.0, -1.0, -1.0];
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { expected[i] } else { 0.0 };
                assert_abs_diff_eq!(kz[(i, j)].re, want, epsilon = 1e-15);
                assert_abs_diff_eq!(kz[(i, j)].im, 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn kx_swaps_flavor_blocks() {
        // sigma_x (x) I2: ones at (0,2),(1,3),(2,0),(3,1).
        let kx = spin_matrix(Axis::X);
        let ones = [(0, 2), (1, 3), (2, 0), (3, 1)];
        for i in 0..4 {
            for j in 0..4 {
                let want = if ones.contains(&(i, j)) { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(kx[(i, j)].re, want, epsilon = 1e-15);
                assert_abs_diff_eq!(kx[(i, j)].im, 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn ky_is_real_symmetric_antidiagonal() {
        // -sigma_y (x) sigma_y: +1 at (0,3),(3,0), -1 at (1,2),(2,1).
        let ky = spin_matrix(Axis::Y);
        for i in 0..4 {
            for j in 0..4 {
                let want = match (i, j) {
                    (0, 3) | (3, 0) => 1.0,
                    (1, 2) | (2, 1) => -1.0,
                    _ => 0.0,
                };
                assert_abs_diff_eq!(ky[(i, j)].re, want, epsilon = 1e-15);
                assert_abs_diff_eq!(ky[(i, j)].im, 0.0, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn k0_is_block_diagonal_sigma_y() {
        let k0 = symplectic();
        for b in 0..2 {
            assert_eq!(k0[(2 * b, 2 * b + 1)], -I);
            assert_eq!(k0[(2 * b + 1, 2 * b)], I);
        }
        assert_abs_diff_eq!(k0.norm(), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn spin_ev_spin_up() {
        // i gK = Kz + (2S+1) with S = 1/2 is the spin-up initial block.
        let igk = spin_matrix(Axis::Z) + Block4::identity() * C64::new(2.0, 0.0);
        let gk = igk * (-I);
        assert_abs_diff_eq!(spin_ev_from_gk(&gk, Axis::Z).unwrap(), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(spin_ev_from_gk(&gk, Axis::X).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn spin_ev_fully_mixed() {
        let gk = Block4::identity() * C64::new(2.0, 0.0) * (-I);
        for axis in Axis::ALL {
            assert_abs_diff_eq!(spin_ev_from_gk(&gk, axis).unwrap(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn spin_ev_spin_down() {
        let igk = -spin_matrix(Axis::Z) + Block4::identity() * C64::new(2.0, 0.0);
        let gk = igk * (-I);
        assert_abs_diff_eq!(spin_ev_from_gk(&gk, Axis::Z).unwrap(), -0.5, epsilon = 1e-14);
    }

    #[test]
    fn spin_ev_is_linear() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut random_sym = || {
            let mut m = Block4::zeros();
            for i in 0..4 {
                for j in i..4 {
                    let v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
            m
        };
        for _ in 0..16 {
            let a = random_sym();
            let b = random_sym();
            // Work on the raw trace; random blocks are not hermitian states.
            let f = |m: &Block4| I * trace_prod(m, spin_matrix(Axis::Y)) / C64::new(8.0, 0.0);
            let lhs = f(&(a * C64::new(0.3, 0.0) + b * C64::new(-1.7, 0.0)));
            let rhs = f(&a) * C64::new(0.3, 0.0) + f(&b) * C64::new(-1.7, 0.0);
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn spin_ev_rejects_non_hermitian() {
        let mut gk = Block4::zeros();
        gk[(0, 0)] = C64::new(1.0, 0.0); // i gK = i on the diagonal: imaginary trace
        gk[(1, 1)] = C64::new(1.0, 0.0);
        assert!(matches!(
            spin_ev_from_gk(&gk, Axis::Z),
            Err(Error::NonHermitianState { .. })
        ));
    }

    #[test]
    fn sigma_z_field_reconstruction() {
        // phi^T Kz phi / 2 = (x1^2 + p1^2 - x2^2 - p2^2) / 2 on random vectors.
        let kz = spin_matrix(Axis::Z);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..32 {
            let phi: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
            let mut quad = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    quad += phi[i] * kz[(i, j)].re * phi[j];
                }
            }
            let direct = phi[0] * phi[0] + phi[1] * phi[1] - phi[2] * phi[2] - phi[3] * phi[3];
            assert_abs_diff_eq!(quad / 2.0, direct / 2.0, epsilon = 1e-12);
        }
    }
}
