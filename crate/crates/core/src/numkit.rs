//! Dense row-major arrays, seeded random streams and column statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Row-major `rows x cols` matrix of finite `f64`.
///
/// Batches of points are stored one point per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RealArray {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl RealArray {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty shape ({rows}, {cols})")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "data length {} does not match ({rows}, {cols})",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {bad} of ({rows}, {cols}) array")));
        }
        Ok(Self { data, rows, cols })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "RealArray shape must be positive");
        Self {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut a = Self::zeros(rows, cols);
        a.data.fill(value);
        a
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Builds an array without the finiteness scan. Callers guarantee the shape.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { data, rows, cols }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn ensure_same_shape(&self, other: &RealArray, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> RealArray {
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        RealArray::from_raw(idx.len(), self.cols, out)
    }

    /// Column-wise concatenation `[self | other]`.
    pub fn hcat(&self, other: &RealArray) -> Result<RealArray> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "hcat rows {} vs {}",
                self.rows, other.rows
            )));
        }
        let cols = self.cols + other.cols;
        let mut out = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            out.extend_from_slice(self.row(i));
            out.extend_from_slice(other.row(i));
        }
        Ok(RealArray::from_raw(self.rows, cols, out))
    }

    /// Row-wise concatenation.
    pub fn vcat(&self, other: &RealArray) -> Result<RealArray> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "vcat cols {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(RealArray::from_raw(self.rows + other.rows, self.cols, data))
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &RealArray, b: f64) -> Result<RealArray> {
        self.ensure_same_shape(other, "lincomb")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(RealArray::from_raw(self.rows, self.cols, data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealArray {
        RealArray::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &RealArray) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean norm of each row.
    pub fn row_norms(&self) -> Vec<f64> {
        self.iter_rows()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Seeded ChaCha8 stream. Two states with equal `(seed, stream)` produce the
/// same draws on every platform.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Independent child stream keyed by `label`; does not advance `self`.
    pub fn child(&self, label: u64) -> RngState {
        let seed = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(label.wrapping_mul(GOLDEN))));
        RngState::with_stream(seed, label)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}

/// `n x d` standard normal draws.
pub fn gauss(rng: &mut RngState, n: usize, d: usize) -> RealArray {
    assert!(n >= 1 && d >= 1, "gauss requires n >= 1 and d >= 1");
    let data = (0..n * d).map(|_| rng.normal()).collect();
    RealArray::from_raw(n, d, data)
}

/// Per-column sample mean and unbiased (n - 1) variance.
pub fn mean_var(a: &RealArray) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = a.rows();
    if n < 2 {
        return Err(Error::VarianceUndefined(n));
    }
    let mean = column_means(a);
    let mut var = vec![0.0; a.cols()];
    for row in a.iter_rows() {
        for ((v, x), m) in var.iter_mut().zip(row).zip(&mean) {
            let dx = x - m;
            *v += dx * dx;
        }
    }
    var.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    Ok((mean, var))
}

pub fn column_means(a: &RealArray) -> Vec<f64> {
    let mut mean = vec![0.0; a.cols()];
    for row in a.iter_rows() {
        for (m, x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    let n = a.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Per-column unbiased sample covariance between matching columns of `a` and `b`.
pub fn column_cov(a: &RealArray, b: &RealArray) -> Result<Vec<f64>> {
    a.ensure_same_shape(b, "column_cov")?;
    let n = a.rows();
    if n < 2 {
        return Err(Error::VarianceUndefined(n));
    }
    let ma = column_means(a);
    let mb = column_means(b);
    let mut cov = vec![0.0; a.cols()];
    for (ra, rb) in a.iter_rows().zip(b.iter_rows()) {
        for j in 0..cov.len() {
            cov[j] += (ra[j] - ma[j]) * (rb[j] - mb[j]);
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);
    Ok(cov)
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
