//! Triangular storage and causal quadrature for functions of two times.
//!
//! Keldysh components are symmetric and spectral components antisymmetric
//! under simultaneous transposition and exchange of the two time arguments,
//! so only entries with t' <= t are stored. One row is appended per outer
//! time step; rows already filled are immutable.

use std::io::{Read, Write};

use nalgebra::{DMatrix, Matrix3, SMatrix};
use num_complex::Complex64 as C64;

use crate::error::{Error, Result};

/// Uniform grid of `n_steps` samples spaced by `dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub dt: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, dt: f64) -> Result<TimeGrid> {
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {dt}")));
        }
        if n_steps < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_steps must be at least 2, got {n_steps}"
            )));
        }
        Ok(TimeGrid { n_steps, dt })
    }

    pub fn time(&self, i: usize) -> f64 {
        self.dt * i as f64
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_steps).map(|i| self.time(i)).collect()
    }
}

/// Behavior under simultaneous transposition and time exchange.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    /// O(t, t') = +O(t', t)^T (Keldysh components).
    Symmetric,
    /// O(t, t') = -O(t', t)^T (spectral components).
    Antisymmetric,
}

impl Parity {
    fn sign(self) -> f64 {
        match self {
            Parity::Symmetric => 1.0,
            Parity::Antisymmetric => -1.0,
        }
    }
}

/// Complex block that can live on a two-time grid.
pub trait TwoTimeBlock: Clone + Send + Sync {
    fn reflect(&self, parity: Parity) -> Self;
    fn zero_like(&self) -> Self;
    fn byte_len(&self) -> usize;
    fn is_finite(&self) -> bool;
    fn shape(&self) -> (usize, usize);
    fn components(&self) -> Vec<C64>;
    fn from_components(shape: (usize, usize), data: &[C64]) -> Self;
}

impl TwoTimeBlock for C64 {
    fn reflect(&self, parity: Parity) -> Self {
        self * parity.sign()
    }
    fn zero_like(&self) -> Self {
        C64::new(0.0, 0.0)
    }
    fn byte_len(&self) -> usize {
        16
    }
    fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
    fn shape(&self) -> (usize, usize) {
        (1, 1)
    }
    fn components(&self) -> Vec<C64> {
        vec![*self]
    }
    fn from_components(_shape: (usize, usize), data: &[C64]) -> Self {
        data[0]
    }
}

macro_rules! impl_fixed_block {
    ($n:literal) => {
        impl TwoTimeBlock for SMatrix<C64, $n, $n> {
            fn reflect(&self, parity: Parity) -> Self {
                self.transpose() * C64::new(parity.sign(), 0.0)
            }
            fn zero_like(&self) -> Self {
                Self::zeros()
            }
            fn byte_len(&self) -> usize {
                16 * $n * $n
            }
            fn is_finite(&self) -> bool {
                self.iter().all(|c| c.re.is_finite() && c.im.is_finite())
            }
            fn shape(&self) -> (usize, usize) {
                ($n, $n)
            }
            fn components(&self) -> Vec<C64> {
                // Row-major on disk.
                let mut out = Vec::with_capacity($n * $n);
                for i in 0..$n {
                    for j in 0..$n {
                        out.push(self[(i, j)]);
                    }
                }
                out
            }
            fn from_components(_shape: (usize, usize), data: &[C64]) -> Self {
                Self::from_fn(|i, j| data[i * $n + j])
            }
        }
    };
}

impl_fixed_block!(3);
impl_fixed_block!(4);

impl TwoTimeBlock for DMatrix<C64> {
    fn reflect(&self, parity: Parity) -> Self {
        self.transpose() * C64::new(parity.sign(), 0.0)
    }
    fn zero_like(&self) -> Self {
        DMatrix::zeros(self.nrows(), self.ncols())
    }
    fn byte_len(&self) -> usize {
        16 * self.nrows() * self.ncols()
    }
    fn is_finite(&self) -> bool {
        self.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
    fn shape(&self) -> (usize, usize) {
        (self.nrows(), self.ncols())
    }
    fn components(&self) -> Vec<C64> {
        let mut out = Vec::with_capacity(self.nrows() * self.ncols());
        for i in 0..self.nrows() {
            for j in 0..self.ncols() {
                out.push(self[(i, j)]);
            }
        }
        out
    }
    fn from_components(shape: (usize, usize), data: &[C64]) -> Self {
        DMatrix::from_fn(shape.0, shape.1, |i, j| data[i * shape.1 + j])
    }
}

pub type Block3 = Matrix3<C64>;

/// Lower-triangular two-time container. Row i holds columns 0..=i.
#[derive(Debug, Clone)]
pub struct TwoTimeFunction<B: TwoTimeBlock> {
    grid: TimeGrid,
    parity: Parity,
    block_shape: (usize, usize),
    /// Concatenated rows; row i starts at i(i+1)/2.
    data: Vec<B>,
    filled_rows: usize,
}

impl<B: TwoTimeBlock> TwoTimeFunction<B> {
    pub fn new(grid: TimeGrid, parity: Parity, template: &B) -> Self {
        TwoTimeFunction {
            grid,
            parity,
            block_shape: template.shape(),
            data: Vec::new(),
            filled_rows: 0,
        }
    }

    pub fn grid(&self) -> TimeGrid {
        self.grid
    }

    pub fn parity(&self) -> Parity {
        self.parity
    }

    pub fn block_shape(&self) -> (usize, usize) {
        self.block_shape
    }

    pub fn filled_rows(&self) -> usize {
        self.filled_rows
    }

    fn idx(i: usize, j: usize) -> usize {
        i * (i + 1) / 2 + j
    }

    /// Append row `filled_rows` from a column iterator (j = 0..=row).
    pub fn push_row(&mut self, blocks: Vec<B>) {
        assert_eq!(blocks.len(), self.filled_rows + 1, "row length mismatch");
        self.data.extend(blocks);
        self.filled_rows += 1;
    }

    /// Overwrite an existing entry (used by corrector passes on the top row).
    pub fn set(&mut self, i: usize, j: usize, block: B) {
        assert!(j <= i && i < self.filled_rows);
        self.data[Self::idx(i, j)] = block;
    }

    /// Remove row `row` if it is the top row; no-op otherwise. Corrector
    /// passes use this to refresh dependent quantities of the row in flight.
    pub fn pop_row_if(&mut self, row: usize) {
        if self.filled_rows == row + 1 {
            self.data.truncate(Self::idx(row, 0));
            self.filled_rows = row;
        }
    }

    /// Stored (lower-triangle) block; requires j <= i < filled extent.
    pub fn stored(&self, i: usize, j: usize) -> &B {
        debug_assert!(j <= i && i < self.filled_rows);
        &self.data[Self::idx(i, j)]
    }

    /// Parity-resolved access for any index pair within the filled extent.
    pub fn get(&self, i: usize, j: usize) -> Result<B> {
        let filled = self.filled_rows;
        if i >= filled || j >= filled {
            return Err(Error::OutOfExtent { i, j, filled });
        }
        if j <= i {
            Ok(self.stored(i, j).clone())
        } else {
            Ok(self.stored(j, i).reflect(self.parity))
        }
    }

    /// All stored entries of one row.
    pub fn row(&self, i: usize) -> &[B] {
        let start = Self::idx(i, 0);
        &self.data[start..start + i + 1]
    }

    /// Bytes held in block payloads: filled_rows(filled_rows+1)/2 * block size.
    pub fn memory_bytes(&self) -> usize {
        let per = self
            .data
            .first()
            .map(|b| b.byte_len())
            .unwrap_or(16 * self.block_shape.0 * self.block_shape.1);
        self.data.len() * per
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|b| b.is_finite())
    }

    /// Binary checkpoint: header (n_steps, dt, block shape, parity, filled
    /// rows), then row-major complex doubles, little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        w.write_all(b"TT2T").map_err(io)?;
        w.write_all(&(self.grid.n_steps as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&self.grid.dt.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.block_shape.0 as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.block_shape.1 as u64).to_le_bytes()).map_err(io)?;
        let parity_byte: u8 = match self.parity {
            Parity::Symmetric => 0,
            Parity::Antisymmetric => 1,
        };
        w.write_all(&[parity_byte]).map_err(io)?;
        w.write_all(&(self.filled_rows as u64).to_le_bytes()).map_err(io)?;
        for block in &self.data {
            for c in block.components() {
                w.write_all(&c.re.to_le_bytes()).map_err(io)?;
                w.write_all(&c.im.to_le_bytes()).map_err(io)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != b"TT2T" {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut u64buf).map_err(|e| Error::Checkpoint(e.to_string()))?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n_steps = read_u64(&mut r)? as usize;
        let mut f64buf = [0u8; 8];
        r.read_exact(&mut f64buf).map_err(io)?;
        let dt = f64::from_le_bytes(f64buf);
        let rows = read_u64(&mut r)? as usize;
        let cols = read_u64(&mut r)? as usize;
        let mut parity_byte = [0u8; 1];
        r.read_exact(&mut parity_byte).map_err(io)?;
        let parity = match parity_byte[0] {
            0 => Parity::Symmetric,
            1 => Parity::Antisymmetric,
            other => return Err(Error::Checkpoint(format!("bad parity byte {other}"))),
        };
        let filled_rows = read_u64(&mut r)? as usize;
        let grid = TimeGrid::new(n_steps, dt)?;
        let n_entries = filled_rows * (filled_rows + 1) / 2;
        let per_block = rows * cols;
        let mut data = Vec::with_capacity(n_entries);
        let mut comp = vec![C64::new(0.0, 0.0); per_block];
        for _ in 0..n_entries {
            for c in comp.iter_mut() {
                r.read_exact(&mut f64buf).map_err(io)?;
                let re = f64::from_le_bytes(f64buf);
                r.read_exact(&mut f64buf).map_err(io)?;
                let im = f64::from_le_bytes(f64buf);
                *c = C64::new(re, im);
            }
            data.push(B::from_components((rows, cols), &comp));
        }
        Ok(TwoTimeFunction {
            grid,
            parity,
            block_shape: (rows, cols),
            data,
            filled_rows,
        })
    }
}

/// Trapezoid weight of node `k` on the inclusive index range [a, b].
/// Zero when the range is a single node: the empty causal integral.
#[inline]
pub fn trapezoid_weight(k: usize, a: usize, b: usize, dt: f64) -> f64 {
    debug_assert!(a <= k && k <= b);
    if a == b {
        0.0
    } else if k == a || k == b {
        0.5 * dt
    } else {
        dt
    }
}

/// Trapezoid rule over samples at consecutive grid times; exact on affine
/// integrands and zero for a single sample.
pub fn causal_integral(samples: &[C64], dt: f64) -> C64 {
    let n = samples.len();
    if n < 2 {
        return C64::new(0.0, 0.0);
    }
    let mut acc = (samples[0] + samples[n - 1]) * 0.5;
    for s in &samples[1..n - 1] {
        acc += s;
    }
    acc * dt
}

/// Same rule for 4x4 blocks.
pub fn causal_integral_block4(samples: &[crate::algebra::Block4], dt: f64) -> crate::algebra::Block4 {
    let n = samples.len();
    if n < 2 {
        return crate::algebra::Block4::zeros();
    }
    let mut acc = (samples[0] + samples[n - 1]) * C64::new(0.5, 0.0);
    for s in &samples[1..n - 1] {
        acc += s;
    }
    acc * C64::new(dt, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(n, 0.1).unwrap()
    }

    #[test]
    fn grid_rejects_degenerate_input() {
        assert!(TimeGrid::new(1, 0.1).is_err());
        assert!(TimeGrid::new(10, 0.0).is_err());
        assert!(TimeGrid::new(10, -1.0).is_err());
    }

    #[test]
    fn symmetric_reflection_transposes() {
        let mut f = TwoTimeFunction::<Block3>::new(grid(4), Parity::Symmetric, &Block3::zeros());
        let b = Block3::from_fn(|i, j| C64::new((3 * i + j) as f64, 1.0));
        f.push_row(vec![Block3::zeros()]);
        f.push_row(vec![Block3::zeros(), Block3::zeros()]);
        f.push_row(vec![Block3::zeros(), b, Block3::zeros()]);
        let got = f.get(1, 2).unwrap();
        assert_eq!(got, b.transpose());
    }

    #[test]
    fn antisymmetric_reflection_negates_transpose() {
        let mut f =
            TwoTimeFunction::<Block3>::new(grid(4), Parity::Antisymmetric, &Block3::zeros());
        let b = Block3::from_fn(|i, j| C64::new((3 * i + j) as f64, -2.0));
        f.push_row(vec![Block3::zeros()]);
        f.push_row(vec![Block3::zeros(), Block3::zeros()]);
        f.push_row(vec![Block3::zeros(), b, Block3::zeros()]);
        let got = f.get(1, 2).unwrap();
        assert_eq!(got, -b.transpose());
    }

    #[test]
    fn diagonal_access_is_identity() {
        let mut f = TwoTimeFunction::<C64>::new(grid(3), Parity::Symmetric, &c(0.0));
        f.push_row(vec![c(5.0)]);
        f.push_row(vec![c(1.0), c(7.0)]);
        assert_eq!(f.get(1, 1).unwrap(), c(7.0));
    }

    #[test]
    fn out_of_extent_is_an_error() {
        let mut f = TwoTimeFunction::<C64>::new(grid(5), Parity::Symmetric, &c(0.0));
        f.push_row(vec![c(1.0)]);
        assert!(matches!(f.get(1, 0), Err(Error::OutOfExtent { .. })));
        assert!(matches!(f.get(0, 3), Err(Error::OutOfExtent { .. })));
        assert!(f.get(0, 0).is_ok());
    }

    #[test]
    fn causal_integral_constant() {
        let h = 0.25;
        let samples = vec![c(3.0); 5]; // [0, 4h]
        assert_abs_diff_eq!(causal_integral(&samples, h).re, 4.0 * h * 3.0, epsilon = 1e-15);
    }

    #[test]
    fn causal_integral_affine_exact() {
        let h = 0.3;
        let samples: Vec<C64> = (0..3).map(|k| c(k as f64 * h)).collect(); // f(t) = t on [0, 2h]
        assert_abs_diff_eq!(causal_integral(&samples, h).re, 2.0 * h * h, epsilon = 1e-15);
    }

    #[test]
    fn causal_integral_single_node_is_zero() {
        assert_eq!(causal_integral(&[c(9.0)], 0.1), c(0.0));
    }

    #[test]
    fn causal_integral_quadratic_error_bound() {
        // f(t) = t^2 on [0, 1]: trapezoid error is h^2/6 for the textbook bound
        // (b - a) h^2 max|f''| / 12 = h^2 / 6.
        for m in [10usize, 40, 160] {
            let h = 1.0 / m as f64;
            let samples: Vec<C64> = (0..=m).map(|k| c((k as f64 * h).powi(2))).collect();
            let err = (causal_integral(&samples, h).re - 1.0 / 3.0).abs();
            assert!(err <= h * h / 6.0 + 1e-15, "error {err} exceeds bound at m = {m}");
        }
    }

    #[test]
    fn causal_integral_second_order_on_sin() {
        // Halving dt reduces the error by about 4x on smooth integrands.
        let integrate = |m: usize| {
            let h = 1.0 / m as f64;
            let samples: Vec<C64> = (0..=m).map(|k| c((k as f64 * h).sin())).collect();
            causal_integral(&samples, h).re
        };
        let exact = 1.0 - 1.0f64.cos();
        let e1 = (integrate(64) - exact).abs();
        let e2 = (integrate(128) - exact).abs();
        let ratio = e1 / e2;
        assert!((3.0..=5.0).contains(&ratio), "convergence ratio {ratio}");
    }

    #[test]
    fn roundtrip_set_get_parity() {
        let mut f = TwoTimeFunction::<Block3>::new(grid(6), Parity::Antisymmetric, &Block3::zeros());
        for i in 0..5usize {
            let row: Vec<Block3> = (0..=i)
                .map(|j| Block3::from_fn(|a, b| C64::new((i + 2 * j + a) as f64, b as f64)))
                .collect();
            f.push_row(row);
        }
        for i in 0..5usize {
            for j in 0..=i {
                let stored = f.get(i, j).unwrap();
                let reflected = f.get(j, i).unwrap();
                assert_eq!(reflected, -stored.transpose());
            }
        }
    }

    #[test]
    fn memory_accounting_matches_triangular_growth() {
        let count_bytes = |rows: usize| {
            let mut f = TwoTimeFunction::<Block3>::new(
                TimeGrid::new(rows, 0.1).unwrap(),
                Parity::Symmetric,
                &Block3::zeros(),
            );
            for i in 0..rows {
                f.push_row(vec![Block3::zeros(); i + 1]);
            }
            f.memory_bytes()
        };
        let per_block = 16 * 9;
        assert_eq!(count_bytes(50), 50 * 51 / 2 * per_block);
        assert_eq!(count_bytes(100), 100 * 101 / 2 * per_block);
        // Theta(N^2) growth: doubling rows quadruples the payload (up to the
        // linear diagonal term).
        let r = count_bytes(100) as f64 / count_bytes(50) as f64;
        assert!((3.5..=4.5).contains(&r));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut f = TwoTimeFunction::<Block3>::new(grid(8), Parity::Antisymmetric, &Block3::zeros());
        for i in 0..4usize {
            let row: Vec<Block3> = (0..=i)
                .map(|j| Block3::from_fn(|a, b| C64::new(i as f64 + a as f64, j as f64 - b as f64)))
                .collect();
            f.push_row(row);
        }
        let mut buf = Vec::new();
        f.write_checkpoint(&mut buf).unwrap();
        let g = TwoTimeFunction::<Block3>::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(g.filled_rows(), 4);
        assert_eq!(g.parity(), Parity::Antisymmetric);
        assert_eq!(g.grid().n_steps, 8);
        for i in 0..4usize {
            for j in 0..=i {
                assert_eq!(g.stored(i, j), f.stored(i, j));
            }
        }
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let buf = b"NOPE".to_vec();
        assert!(TwoTimeFunction::<C64>::read_checkpoint(buf.as_slice()).is_err());
    }
}
