//! Dense tensors, seeded random streams, and the distance/softmax kernels
//! shared by the divergence estimators.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        ensure!(!shape.is_empty(), "tensor shape must have at least one dimension");
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor dimensions must be positive, got {shape:?}"
        );
        let len: usize = shape.iter().product();
        ensure!(
            len == data.len(),
            "shape {shape:?} needs {len} values, got {}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows in matrix literal"
        );
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// A column vector (`n × 1`).
    pub fn column(values: &[f64]) -> Result<Self> {
        Self::new(vec![values.len(), 1], values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows: the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    /// Element `(i, j)` of a matrix.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.row_len() + j]
    }

    /// Same data under a new shape of equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        ensure!(
            len == self.data.len() && shape.iter().all(|&d| d > 0),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Gathers the listed rows into a new tensor, preserving trailing dims.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        ensure!(!indices.is_empty(), "row selection must be nonempty");
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            ensure!(i < self.rows(), "row index {i} out of range {}", self.rows());
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded ChaCha8 stream.
///
/// [`Rng::fork`] derives a child stream from `(seed, index)` alone, through a
/// SplitMix64 mix of the two, so children do not depend on how much of the
/// parent has been consumed. Forks nest: `rng.fork(3).fork(1)` is itself a
/// reproducible stream.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, index: u64) -> Rng {
        Rng::new(splitmix64(self.seed ^ splitmix64(index.wrapping_mul(GOLDEN_GAMMA))))
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform01(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "cannot draw an index from an empty range");
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

pub fn sample_gaussian(rng: &mut Rng, mu: f64, sigma: f64, shape: &[usize]) -> Result<Tensor> {
    ensure!(sigma >= 0.0 && sigma.is_finite(), "sigma must be finite and >= 0, got {sigma}");
    ensure!(mu.is_finite(), "mu must be finite");
    let mut out = Tensor::new(shape.to_vec(), vec![mu; shape.iter().product()])?;
    if sigma > 0.0 {
        let normal = Normal::new(mu, sigma).map_err(|e| Error::Contract(e.to_string()))?;
        for v in out.data_mut() {
            *v = normal.sample(rng);
        }
    }
    Ok(out)
}

/// Uniform draws on `[lo, hi)`; `lo == hi` yields a constant tensor.
pub fn sample_uniform(rng: &mut Rng, lo: f64, hi: f64, shape: &[usize]) -> Result<Tensor> {
    ensure!(lo.is_finite() && hi.is_finite(), "bounds must be finite");
    ensure!(lo <= hi, "uniform bounds out of order: {lo} > {hi}");
    let mut out = Tensor::new(shape.to_vec(), vec![lo; shape.iter().product()])?;
    if hi > lo {
        for v in out.data_mut() {
            // lo + u·(hi − lo) can round up to hi; redraw in that case.
            *v = loop {
                let x = lo + rng.uniform01() * (hi - lo);
                if x < hi {
                    break x;
                }
            };
        }
    }
    Ok(out)
}

/// Euclidean distances between the rows of `a` (m×d) and `b` (k×d).
pub fn pairwise_distances(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ensure!(
        a.shape().len() == 2 && b.shape().len() == 2,
        "pairwise_distances expects matrices"
    );
    let d = a.row_len();
    ensure!(
        d == b.row_len(),
        "point dimension mismatch: {} vs {}",
        d,
        b.row_len()
    );
    let (m, k) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(m * k);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..k {
            out.push(euclidean(ai, b.row(j)));
        }
    }
    Tensor::new(vec![m, k], out)
}

#[inline]
pub(crate) fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Row softmax of `−dist/λ` with the diagonal excluded.
///
/// Entry `(i, j)` is `exp(−dist[i][j]/λ) / Σ_{u≠i} exp(−dist[i][u]/λ)` and the
/// diagonal is exactly zero. Each row is shifted by its smallest off-diagonal
/// distance before exponentiation, so tiny `λ` does not underflow the row.
pub fn row_softmax_neg_scaled(dist: &Tensor, lambda: f64) -> Result<Tensor> {
    ensure!(
        dist.shape().len() == 2 && dist.shape()[0] == dist.shape()[1],
        "softmax expects a square distance matrix, got {:?}",
        dist.shape()
    );
    let n = dist.rows();
    ensure!(n >= 2, "softmax needs at least two points, got {n}");
    ensure!(lambda > 0.0 && lambda.is_finite(), "lambda must be positive, got {lambda}");
    ensure!(dist.is_finite(), "distance matrix contains non-finite values");

    let mut out = vec![0.0; n * n];
    for i in 0..n {
        let row = dist.row(i);
        let min = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        let o = &mut out[i * n..(i + 1) * n];
        let mut total = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let e = (-(row[j] - min) / lambda).exp();
            o[j] = e;
            total += e;
        }
        for v in o.iter_mut() {
            *v /= total;
        }
    }
    Tensor::new(vec![n, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distances_trivial() {
        let d = pairwise_distances(&Tensor::from_rows(&[vec![0.0]]).unwrap(), &Tensor::from_rows(&[vec![3.0]]).unwrap()).unwrap();
        assert_eq!(d.data(), &[3.0]);
        let a = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(pairwise_distances(&a, &b).unwrap().data(), &[5.0]);
    }

    #[test]
    fn distances_match_brute_force() {
        let mut rng = Rng::new(11);
        let a = sample_gaussian(&mut rng, 0.0, 1.0, &[4, 2]).unwrap();
        let b = sample_gaussian(&mut rng, 0.0, 1.0, &[4, 2]).unwrap();
        let d = pairwise_distances(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for c in 0..2 {
                    let diff = a.data()[i * 2 + c] - b.data()[j * 2 + c];
                    s += diff * diff;
                }
                assert!((d.at(i, j) - s.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn distances_reject_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(pairwise_distances(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn self_distances_symmetric_zero_diagonal() {
        let mut rng = Rng::new(5);
        let a = sample_gaussian(&mut rng, 0.0, 1.0, &[6, 3]).unwrap();
        let d = pairwise_distances(&a, &a).unwrap();
        for i in 0..6 {
            assert_eq!(d.at(i, i), 0.0);
            for j in 0..6 {
                assert_eq!(d.at(i, j), d.at(j, i));
            }
        }
    }

    #[test]
    fn softmax_two_points() {
        let d = Tensor::from_rows(&[vec![0.0, 7.0], vec![7.0, 0.0]]).unwrap();
        let s = row_softmax_neg_scaled(&d, 0.3).unwrap();
        assert_eq!(s.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_row() {
        let n = 5;
        let mut rows = vec![vec![2.5; n]; n];
        for (i, r) in rows.iter_mut().enumerate() {
            r[i] = 0.0;
        }
        let s = row_softmax_neg_scaled(&Tensor::from_rows(&rows).unwrap(), 1.0).unwrap();
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { 0.0 } else { 0.25 };
                assert!((s.at(i, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_four_point_example() {
        let pts = Tensor::column(&[0.0, 2.0, 1.0, 3.0]).unwrap();
        let d = pairwise_distances(&pts, &pts).unwrap();
        let s = row_softmax_neg_scaled(&d, 2.0).unwrap();
        let row = s.row(0);
        assert_eq!(row[0], 0.0);
        assert!((row[1] - 0.30720).abs() < 5e-6);
        assert!((row[2] - 0.50648).abs() < 5e-6);
        assert!((row[3] - 0.18632).abs() < 5e-6);
    }

    #[test]
    fn softmax_rejects_single_point() {
        let d = Tensor::zeros(&[1, 1]);
        assert!(row_softmax_neg_scaled(&d, 1.0).is_err());
        let d = Tensor::zeros(&[2, 2]);
        assert!(row_softmax_neg_scaled(&d, 0.0).is_err());
    }

    #[test]
    fn degenerate_gaussian_and_determinism() {
        let mut rng = Rng::new(1);
        let t = sample_gaussian(&mut rng, 1.5, 0.0, &[3, 2]).unwrap();
        assert!(t.data().iter().all(|&v| v == 1.5));
        let a = sample_gaussian(&mut Rng::new(9), 0.0, 2.0, &[50]).unwrap();
        let b = sample_gaussian(&mut Rng::new(9), 0.0, 2.0, &[50]).unwrap();
        assert_eq!(a, b);
        assert!(sample_gaussian(&mut rng, 0.0, -1.0, &[2]).is_err());
    }

    #[test]
    fn uniform_law_of_large_numbers() {
        let mut rng = Rng::new(2024);
        let t = sample_uniform(&mut rng, -2.0, 2.0, &[100_000]).unwrap();
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        let min = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!(min >= -2.0 && max < 2.0);
        assert!(sample_uniform(&mut rng, 1.0, 0.0, &[1]).is_err());
    }

    #[test]
    fn forks_are_position_independent() {
        let mut a = Rng::new(77);
        let b = Rng::new(77);
        a.uniform01();
        let (mut fa, mut fb) = (a.fork(3), b.fork(3));
        assert_eq!(fa.next_u64(), fb.next_u64());
        assert_ne!(b.fork(3).next_u64(), b.fork(4).next_u64());
    }

    #[test]
    fn tensor_shape_contract() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
        let s = t.select_rows(&[1, 0]).unwrap();
        assert_eq!(s.data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0]);
    }
}
