//! Bath spectral densities and the two-time bath kernel.
//!
//! The kernel is stationary, so it is tabulated once per bath as 1-D arrays
//! over tau = t - t'. The spectral component has the closed form
//!
//!   Xi_s(tau) = -(gamma wc^2 / pi) Gamma(1+s) sin[(1+s) atan(wc tau)]
//!               / [1 + (wc tau)^2]^{(1+s)/2}
//!
//! which fixes the normalization of the mode-sum-to-integral convention
//! sum_k g_k^2 -> int dw J(w) / 2pi. The Keldysh component follows from the
//! same convention with a coth(w / 2 k_B T) weight,
//!
//!   Xi_K(tau) = -(i/pi) int_0^inf dw J(w) coth(w / 2 k_B T) cos(w tau),
//!
//! purely imaginary; `xi_keldysh` returns the real magnitude (Xi_K / i).
//! At T = 0 the coth weight is 1 and the integral has the cos-analog of the
//! spectral closed form, so no quadrature is needed there. At T > 0 only the
//! thermal part (coth - 1) = 2 n_BE is integrated numerically; it decays
//! exponentially above w ~ T, which keeps the quadrature domain small.

use num_complex::Complex64 as C64;

use crate::algebra::Axis;
use crate::error::{Error, Result};
use crate::twotime::TimeGrid;

/// One bosonic bath attached to a single spin component.
#[derive(Debug, Clone, PartialEq)]
pub struct BathSpec {
    /// Coupling strength gamma (energy units).
    pub gamma: f64,
    /// Cutoff frequency of the exponential tail.
    pub omega_c: f64,
    /// Ohmicity exponent: s < 1 sub-Ohmic, s = 1 Ohmic, s > 1 super-Ohmic.
    pub s: f64,
    /// k_B T of this bath.
    pub temperature: f64,
    /// Spin index the bath couples to.
    pub site: usize,
    /// Spin component the bath couples to.
    pub axis: Axis,
}

impl BathSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gamma < 0.0 || !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("bath gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.omega_c > 0.0) {
            return Err(Error::InvalidConfig(format!("bath omega_c must be > 0, got {}", self.omega_c)));
        }
        if !(self.s > 0.0) {
            return Err(Error::InvalidConfig(format!("bath exponent s must be > 0, got {}", self.s)));
        }
        if self.temperature < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "bath temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// J(w) = gamma wc^{1-s} w^s exp(-w/wc) for w >= 0, antisymmetrically extended.
pub fn spectral_density(spec: &BathSpec, omega: f64) -> f64 {
    if omega == 0.0 {
        return 0.0;
    }
    let w = omega.abs();
    let j = spec.gamma * spec.omega_c.powf(1.0 - spec.s) * w.powf(spec.s) * (-w / spec.omega_c).exp();
    if omega > 0.0 {
        j
    } else {
        -j
    }
}

fn gamma_fn(x: f64) -> f64 {
    // Lanczos approximation, g = 7. Plenty for the s-exponents in play.
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma_fn(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut a = COEF[0];
        let t = x + G + 0.5;
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * a
    }
}

/// Spectral kernel component Xi_s(tau); odd in tau and zero at tau = 0.
pub fn xi_spectral(spec: &BathSpec, tau: f64) -> f64 {
    let x = spec.omega_c * tau;
    let phase = (1.0 + spec.s) * x.atan();
    let envelope = (1.0 + x * x).powf((1.0 + spec.s) / 2.0);
    -(spec.gamma * spec.omega_c * spec.omega_c / std::f64::consts::PI) * gamma_fn(1.0 + spec.s) * phase.sin()
        / envelope
}

/// T = 0 Keldysh magnitude: the cos-partner of the spectral closed form.
fn xi_keldysh_zero_t(spec: &BathSpec, tau: f64) -> f64 {
    let x = spec.omega_c * tau;
    let phase = (1.0 + spec.s) * x.atan();
    let envelope = (1.0 + x * x).powf((1.0 + spec.s) / 2.0);
    -(spec.gamma * spec.omega_c * spec.omega_c / std::f64::consts::PI) * gamma_fn(1.0 + spec.s) * phase.cos()
        / envelope
}

/// Thermal integrand transformed with u = w^s to absorb the integrable
/// w^{s-1} singularity of J(w) n_BE(w) at w = 0.
fn thermal_integrand_u(spec: &BathSpec, u: f64, tau: f64) -> f64 {
    let t = spec.temperature;
    if u == 0.0 {
        // lim_{w->0} J(w) 2 n_BE(w) w^{1-s} / s = 2 gamma wc^{1-s} T / s
        return 2.0 * spec.gamma * spec.omega_c.powf(1.0 - spec.s) * t / spec.s;
    }
    let w = u.powf(1.0 / spec.s);
    let x = w / t;
    // 2 n_BE, computed stably for large x.
    let occ2 = if x > 700.0 { 0.0 } else { 2.0 / x.exp_m1() };
    spectral_density(spec, w) * occ2 * (w * tau).cos() * w.powf(1.0 - spec.s) / spec.s
}

/// Adaptive trapezoid with node doubling until the relative change of the
/// result drops below 1e-8.
fn refine_thermal_integral(spec: &BathSpec, tau: f64) -> Result<f64> {
    let t = spec.temperature;
    let omega_max = (spec.omega_c * (40.0 + 10.0 * spec.s)).min(50.0 * t.max(f64::MIN_POSITIVE));
    let u_max = omega_max.powf(spec.s);
    // Enough starting nodes to see the cos oscillation over the domain.
    let oscillation = (4.0 * omega_max * tau.abs() / std::f64::consts::PI).ceil() as usize;
    let mut n = (256 + oscillation).next_power_of_two();
    let h0 = u_max / n as f64;
    let mut sum = 0.5 * (thermal_integrand_u(spec, 0.0, tau) + thermal_integrand_u(spec, u_max, tau));
    for k in 1..n {
        sum += thermal_integrand_u(spec, k as f64 * h0, tau);
    }
    let mut integral = sum * h0;
    let floor = 1e-14 * spec.gamma * spec.omega_c * (spec.omega_c + t);
    let mut change = f64::INFINITY;
    for _ in 0..18 {
        let h = u_max / (2 * n) as f64;
        let mut mid = 0.0;
        for k in 0..n {
            mid += thermal_integrand_u(spec, (2 * k + 1) as f64 * h, tau);
        }
        let next = integral / 2.0 + mid * h;
        change = (next - integral).abs() / next.abs().max(floor);
        integral = next;
        n *= 2;
        if change < 1e-8 {
            return Ok(-integral / std::f64::consts::PI);
        }
    }
    Err(Error::QuadratureNotConverged { tau, change })
}

/// Keldysh kernel magnitude; the full component is Xi_K(tau) = i * this value.
pub fn xi_keldysh(spec: &BathSpec, tau: f64) -> Result<f64> {
    let zero_t = xi_keldysh_zero_t(spec, tau);
    if spec.temperature == 0.0 {
        return Ok(zero_t);
    }
    Ok(zero_t + refine_thermal_integral(spec, tau)?)
}

/// Tabulated kernel samples on a time grid; stationary, so 1-D over tau.
#[derive(Debug, Clone)]
pub struct BathKernel {
    pub spec: BathSpec,
    pub dt: f64,
    /// Xi_K(k dt), purely imaginary.
    pub xi_k: Vec<C64>,
    /// Xi_s(k dt), purely real.
    pub xi_s: Vec<C64>,
}

impl BathKernel {
    pub fn len(&self) -> usize {
        self.xi_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi_s.is_empty()
    }

    pub fn memory_bytes(&self) -> usize {
        32 * self.xi_s.len()
    }

    /// Binary dump mirroring the two-time checkpoint layout.
    pub fn write_to<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(b"BKRN").map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.dt.to_le_bytes()).map_err(io)?;
        for v in self.xi_k.iter().chain(self.xi_s.iter()) {
            w.write_all(&v.re.to_le_bytes()).map_err(io)?;
            w.write_all(&v.im.to_le_bytes()).map_err(io)?;
        }
        Ok(())
    }

    pub fn read_from<R: std::io::Read>(spec: BathSpec, mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"BKRN" {
            return Err(Error::Checkpoint("bad kernel magic".into()));
        }
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(io)?;
        let n = u64::from_le_bytes(buf) as usize;
        r.read_exact(&mut buf).map_err(io)?;
        let dt = f64::from_le_bytes(buf);
        let mut read_vec = |len: usize| -> Result<Vec<C64>> {
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| Error::Checkpoint(e.to_string()))?;
                let re = f64::from_le_bytes(b);
                r.read_exact(&mut b).map_err(|e| Error::Checkpoint(e.to_string()))?;
                let im = f64::from_le_bytes(b);
                out.push(C64::new(re, im));
            }
            Ok(out)
        };
        let xi_k = read_vec(n)?;
        let xi_s = read_vec(n)?;
        Ok(BathKernel { spec, dt, xi_k, xi_s })
    }
}

/// Tabulate Xi_K and Xi_s at tau = 0, dt, ..., (n_steps - 1) dt.
pub fn precompute_kernel(spec: &BathSpec, grid: &TimeGrid) -> Result<BathKernel> {
    spec.validate()?;
    let mut xi_k = Vec::with_capacity(grid.n_steps);
    let mut xi_s = Vec::with_capacity(grid.n_steps);
    for k in 0..grid.n_steps {
        let tau = grid.time(k);
        xi_k.push(C64::new(0.0, xi_keldysh(spec, tau)?));
        xi_s.push(C64::new(xi_spectral(spec, tau), 0.0));
    }
    Ok(BathKernel {
        spec: spec.clone(),
        dt: grid.dt,
        xi_k,
        xi_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(gamma: f64, omega_c: f64, s: f64, temperature: f64) -> BathSpec {
        BathSpec {
            gamma,
            omega_c,
            s,
            temperature,
            site: 0,
            axis: Axis::Z,
        }
    }

    #[test]
    fn gamma_fn_on_integers_and_halves() {
        assert_abs_diff_eq!(gamma_fn(1.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gamma_fn(2.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(gamma_fn(1.5), 0.5 * std::f64::consts::PI.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(gamma_fn(3.0), 2.0, epsilon = 1e-11);
    }

    #[test]
    fn ohmic_spectral_density_at_cutoff() {
        let b = spec(1.0, 1.0, 1.0, 0.0);
        assert_abs_diff_eq!(spectral_density(&b, 1.0), (-1.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn spectral_density_vanishes_at_zero() {
        for s in [0.5, 1.0, 2.0] {
            let b = spec(0.7, 2.0, s, 0.0);
            assert_eq!(spectral_density(&b, 0.0), 0.0);
        }
    }

    #[test]
    fn spectral_density_antisymmetric() {
        let b = spec(0.3, 1.5, 0.5, 0.0);
        for w in [0.5, 1.0, 2.0] {
            assert_abs_diff_eq!(spectral_density(&b, -w), -spectral_density(&b, w), epsilon = 1e-15);
        }
    }

    #[test]
    fn xi_spectral_zero_at_equal_times() {
        for s in [0.5, 1.0, 1.7] {
            assert_eq!(xi_spectral(&spec(1.0, 1.0, s, 0.0), 0.0), 0.0);
        }
    }

    #[test]
    fn xi_spectral_is_odd() {
        let b = spec(0.9, 1.3, 0.5, 0.0);
        for tau in [0.1, 1.0, 7.5] {
            assert_abs_diff_eq!(xi_spectral(&b, -tau), -xi_spectral(&b, tau), epsilon = 1e-14);
        }
    }

    #[test]
    fn xi_spectral_ohmic_tail_bound() {
        // |Xi_s| <= gamma wc^2 Gamma(2) / (pi (wc tau)^2) for s = 1; check the
        // asymptotic bound numerically far in the tail.
        let b = spec(1.0, 1.0, 1.0, 0.0);
        for tau in [1e2, 1e3] {
            let bound = gamma_fn(2.0) / (std::f64::consts::PI * tau * tau) * 1.01;
            assert!(xi_spectral(&b, tau).abs() <= bound);
        }
    }

    #[test]
    fn xi_keldysh_matches_independent_quadrature_at_zero_t() {
        // Oracle: brute-force trapezoid of -(1/pi) int J(w) cos(w tau) dw with
        // a fixed fine grid, independent of the closed form used in release.
        let b = spec(0.8, 1.2, 0.5, 0.0);
        let omega_max = b.omega_c * 60.0;
        let n = 400_000usize;
        let h = omega_max / n as f64;
        for tau in [0.0, 0.3, 2.0] {
            let mut acc = 0.0;
            for k in 0..=n {
                let w = k as f64 * h;
                let f = spectral_density(&b, w) * (w * tau).cos();
                acc += if k == 0 || k == n { 0.5 * f } else { f };
            }
            let oracle = -acc * h / std::f64::consts::PI;
            let got = xi_keldysh(&b, tau).unwrap();
            assert!(
                (got - oracle).abs() <= 1e-6 * oracle.abs().max(1e-6),
                "tau {tau}: got {got}, oracle {oracle}"
            );
        }
    }

    #[test]
    fn xi_keldysh_finite_for_sub_ohmic_at_equal_times() {
        let b = spec(1.0, 1.0, 0.5, 0.4);
        let v = xi_keldysh(&b, 0.0).unwrap();
        assert!(v.is_finite());
        // Refining further (already built into the adaptive loop) keeps it stable.
        let v2 = xi_keldysh(&b, 0.0).unwrap();
        assert_abs_diff_eq!(v, v2, epsilon = 1e-12);
    }

    #[test]
    fn xi_keldysh_monotone_in_temperature() {
        let mut last = 0.0;
        for (k, t) in [0.0, 0.5, 1.0, 2.0, 5.0].iter().enumerate() {
            let b = spec(1.0, 1.0, 1.0, *t);
            let v = xi_keldysh(&b, 0.0).unwrap().abs();
            if k > 0 {
                assert!(v > last, "|Xi_K(0)| must grow with T: {v} vs {last}");
            }
            last = v;
        }
    }

    #[test]
    fn kernel_tabulation_scales_linearly_in_gamma() {
        let grid = TimeGrid::new(16, 0.25).unwrap();
        let k1 = precompute_kernel(&spec(0.5, 2.0, 1.0, 0.3), &grid).unwrap();
        let k2 = precompute_kernel(&spec(1.5, 2.0, 1.0, 0.3), &grid).unwrap();
        for i in 0..grid.n_steps {
            assert_abs_diff_eq!(3.0 * k1.xi_s[i].re, k2.xi_s[i].re, epsilon = 1e-10);
            assert_abs_diff_eq!(3.0 * k1.xi_k[i].im, k2.xi_k[i].im, epsilon = 1e-8);
        }
    }

    #[test]
    fn kernel_single_step_grid() {
        let grid = TimeGrid::new(2, 0.1).unwrap();
        let k = precompute_kernel(&spec(1.0, 1.0, 1.0, 0.0), &grid).unwrap();
        assert_eq!(k.xi_s[0], C64::new(0.0, 0.0));
    }

    #[test]
    fn large_cutoff_concentrates_spectral_kernel() {
        // wc = 100: samples beyond tau = 2/wc carry a small fraction of the peak.
        let b = spec(1.0, 100.0, 1.0, 0.0);
        let grid = TimeGrid::new(400, 0.002).unwrap();
        let k = precompute_kernel(&b, &grid).unwrap();
        let peak = k.xi_s.iter().map(|v| v.re.abs()).fold(0.0, f64::max);
        let outside = k
            .xi_s
            .iter()
            .enumerate()
            .filter(|(i, _)| grid.time(*i) > 2.0 / b.omega_c)
            .map(|(_, v)| v.re.abs())
            .fold(0.0, f64::max);
        assert!(outside < 0.25 * peak, "outside {outside} vs peak {peak}");
    }

    #[test]
    fn sub_ohmic_decays_slower_than_ohmic() {
        let tau = 50.0;
        let sub = xi_spectral(&spec(1.0, 1.0, 0.5, 0.0), tau).abs();
        let ohm = xi_spectral(&spec(1.0, 1.0, 1.0, 0.0), tau).abs();
        assert!(sub / ohm > 1.0, "sub {sub} vs ohmic {ohm}");
    }

    #[test]
    fn kernel_binary_roundtrip() {
        let grid = TimeGrid::new(24, 0.2).unwrap();
        let b = spec(0.7, 1.0, 1.0, 0.8);
        let k = precompute_kernel(&b, &grid).unwrap();
        let mut buf = Vec::new();
        k.write_to(&mut buf).unwrap();
        let k2 = BathKernel::read_from(b, buf.as_slice()).unwrap();
        assert_eq!(k.xi_k, k2.xi_k);
        assert_eq!(k.xi_s, k2.xi_s);
    }
}
