//! Dense f64 linear algebra, elementwise nonlinearities, quadrature and the
//! seeded random stream shared by every other module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Entries drawn i.i.d. from N(0, std²), row by row.
    pub fn random_normal(rows: usize, cols: usize, rng: &mut RngStream, std: f64) -> Self {
        Self::from_fn(rows, cols, |_, _| std * rng.next_normal())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: matrix has {} columns, vector has {}",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::Shape(format!(
                "matvec_t: matrix has {} rows, vector has {}",
                self.rows,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Squared Frobenius distance `‖self − other‖²_F`.
    pub fn frobenius_dist_sq(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "frobenius distance between {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-subtracted softmax.
pub fn stable_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::EmptySoftmax);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// `log(Σ exp z)` computed around the maximum.
pub fn log_sum_exp(z: &[f64]) -> Result<f64> {
    if z.is_empty() {
        return Err(Error::EmptySoftmax);
    }
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Trapezoid rule over a strictly increasing grid with endpoints 0 and 1.
pub fn trapezoid_integral(ts: &[f64], ys: &[f64]) -> Result<f64> {
    check_unit_grid(ts)?;
    if ys.len() != ts.len() {
        return Err(Error::Shape(format!(
            "trapezoid: {} grid points but {} values",
            ts.len(),
            ys.len()
        )));
    }
    Ok(ts
        .windows(2)
        .zip(ys.windows(2))
        .map(|(t, y)| 0.5 * (t[1] - t[0]) * (y[0] + y[1]))
        .sum())
}

/// Validates an interpolation grid: at least two points, strictly increasing,
/// first point 0, last point 1.
pub fn check_unit_grid(ts: &[f64]) -> Result<()> {
    if ts.len() < 2 {
        return Err(Error::Grid(format!("need at least 2 points, got {}", ts.len())));
    }
    if ts[0] != 0.0 || ts[ts.len() - 1] != 1.0 {
        return Err(Error::Grid(format!(
            "endpoints are {} and {}",
            ts[0],
            ts[ts.len() - 1]
        )));
    }
    if let Some(j) = ts.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Grid(format!(
            "not increasing at index {}: {} then {}",
            j + 1,
            ts[j],
            ts[j + 1]
        )));
    }
    Ok(())
}

/// `points` evenly spaced values on [0, 1], endpoints exact.
pub fn uniform_grid(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::Grid(format!("need at least 2 points, got {points}")));
    }
    let last = (points - 1) as f64;
    Ok((0..points).map(|j| j as f64 / last).collect())
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Counter-based splitmix64 stream.
///
/// The `i`-th output (1-based) is the splitmix64 finalizer applied to
/// `seed + i·0x9E3779B97F4A7C15` (wrapping), which is exactly the classic
/// splitmix64 sequence started from state `seed`.
///
/// * uniform: top 53 bits of one output, scaled to [0, 1).
/// * normal: Box–Muller on two consecutive uniforms `u1, u2`,
///   `sqrt(−2 ln(1 − u1)) · cos(2π u2)`; the sine branch is discarded so every
///   normal consumes exactly two outputs.
/// * bounded integer: high 64 bits of the 128-bit product `output · n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// An independent stream derived from this one's seed and a label.
    pub fn derive(&self, label: u64) -> RngStream {
        let mut mixer = RngStream::new(self.seed ^ label.wrapping_mul(GOLDEN_GAMMA));
        RngStream::new(mixer.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let mut z = self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Fisher–Yates, walking from the last position down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normals(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| std * self.next_normal()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(stable_softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        assert_eq!(stable_softmax(&[-812.5]).unwrap(), vec![1.0]);
        assert_eq!(stable_softmax(&[1e300]).unwrap(), vec![1.0]);
        let p = stable_softmax(&[2f64.ln(), 0.0]).unwrap();
        // naive exp/sum at small magnitude
        let naive = [2.0 / 3.0, 1.0 / 3.0];
        assert!((p[0] - naive[0]).abs() < 1e-15);
        assert!((p[1] - naive[1]).abs() < 1e-15);
        assert!(matches!(stable_softmax(&[]), Err(Error::EmptySoftmax)));
    }

    #[test]
    fn softmax_survives_large_scores() {
        let p = stable_softmax(&[1000.0, 999.0, -1000.0]).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_translation_invariance() {
        let mut rng = RngStream::new(11);
        for _ in 0..500 {
            let n = 1 + rng.below(8);
            let z = rng.normals(n, 3.0);
            let c = 10.0 * rng.next_normal();
            let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
            let p = stable_softmax(&z).unwrap();
            let q = stable_softmax(&shifted).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[-3.0, -0.5]), vec![0.0, 0.0]);
        assert_eq!(relu(&[0.0, 1.5, 7.0]), vec![0.0, 1.5, 7.0]);
    }

    #[test]
    fn trapezoid_examples() {
        let ts = [0.0, 0.1, 0.35, 1.0];
        assert!((trapezoid_integral(&ts, &[2.5; 4]).unwrap() - 2.5).abs() < 1e-15);
        let grid = uniform_grid(25).unwrap();
        assert!((trapezoid_integral(&grid, &grid).unwrap() - 0.5).abs() < 1e-15);
        let sq: Vec<f64> = grid.iter().map(|t| t * t).collect();
        assert!((trapezoid_integral(&grid, &sq).unwrap() - 1.0 / 3.0).abs() < 1e-3);
    }

    #[test]
    fn trapezoid_rejects_bad_grids() {
        assert!(matches!(
            trapezoid_integral(&[0.0, 0.6, 0.4, 1.0], &[0.0; 4]),
            Err(Error::Grid(_))
        ));
        assert!(trapezoid_integral(&[0.0, 0.5, 0.5, 1.0], &[0.0; 4]).is_err());
        assert!(trapezoid_integral(&[0.1, 1.0], &[0.0; 2]).is_err());
        assert!(trapezoid_integral(&[0.0], &[0.0]).is_err());
        assert!(matches!(
            trapezoid_integral(&[0.0, 1.0], &[0.0; 3]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(3);
        for _ in 0..50 {
            let a = Matrix::random_normal(8, 8, &mut rng, 1.0);
            let b = Matrix::random_normal(8, 8, &mut rng, 1.0);
            let fast = a.matmul(&b).unwrap();
            let slow = naive_matmul(&a, &b);
            for (x, y) in fast.data().iter().zip(slow.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn matvec_and_transpose_agree() {
        let mut rng = RngStream::new(5);
        let a = Matrix::random_normal(3, 5, &mut rng, 1.0);
        let y = rng.normals(3, 1.0);
        let left = a.matvec_t(&y).unwrap();
        let right = a.transpose().matvec(&y).unwrap();
        for (l, r) in left.iter().zip(&right) {
            assert!((l - r).abs() < 1e-14);
        }
        assert!(a.matvec(&y).is_err());
    }

    #[test]
    fn matrix_shape_checked() {
        assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
        assert!(Matrix::new(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        let xs: Vec<u64> = (0..10_000).map(|_| a.next_normal().to_bits()).collect();
        let ys: Vec<u64> = (0..10_000).map(|_| b.next_normal().to_bits()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn rng_matches_reference_splitmix64() {
        // Reference values of splitmix64 seeded with 1234567.
        let mut rng = RngStream::new(1234567);
        assert_eq!(rng.next_u64(), 6457827717110365317);
        assert_eq!(rng.next_u64(), 3203168211198807973);
        assert_eq!(rng.next_u64(), 9817491932198370423);
    }

    #[test]
    fn rng_normal_moments() {
        let mut rng = RngStream::new(9);
        let xs = rng.normals(200_000, 1.0);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.02);
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut rng = RngStream::new(1);
        let mut v: Vec<usize> = (0..50).collect();
        rng.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
