//! Dense linear algebra and seeded randomness shared by the rest of the crate.
//!
//! Everything here runs in 64-bit precision. The eigensolver is a cyclic
//! Jacobi sweep, which is plenty for the few-hundred-dimensional symmetric
//! matrices that show up in embedding entropy and PCA.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Off-diagonal tolerance used when callers have no better choice.
pub const DEFAULT_EIG_TOL: f64 = 1e-10;
/// Maximum number of full Jacobi sweeps.
pub const MAX_SWEEPS: usize = 100;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite matrix entry at flat index {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid("ragged rows"));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    /// Column `j` is the unit eigenvector for `eigenvalues[j]`.
    pub eigenvectors: DenseMatrix,
    pub sweeps: usize,
}

impl SymEig {
    /// Rebuilds `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        let n = self.eigenvalues.len();
        let v = &self.eigenvectors;
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let s: f64 = (0..n).map(|k| v.get(i, k) * self.eigenvalues[k] * v.get(j, k)).sum();
                out.set(i, j, s);
            }
        }
        out
    }
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Iterates until the off-diagonal Frobenius norm drops below
/// `tol * max(1, ‖m‖_F)`, failing after [`MAX_SWEEPS`] sweeps.
pub fn sym_eig(m: &DenseMatrix, tol: f64) -> Result<SymEig> {
    if !m.is_square() {
        return Err(invalid(format!("sym_eig needs a square matrix, got {}x{}", m.rows, m.cols)));
    }
    let n = m.rows;
    for i in 0..n {
        for j in (i + 1)..n {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-9 {
                return Err(invalid(format!("matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    let mut a = m.clone();
    // symmetrize so that sub-1e-9 asymmetries do not bias the rotations
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, avg);
            a.set(j, i, avg);
        }
    }
    let mut v = DenseMatrix::identity(n);
    let scale = a.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
    let threshold = tol * scale;

    let mut sweeps = 0;
    let mut off = off_diagonal_norm(&a);
    while off > threshold {
        if sweeps == MAX_SWEEPS {
            return Err(Error::Convergence { sweeps, off_norm: off });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        off = off_diagonal_norm(&a);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)).then(i.cmp(&j)));
    let eigenvalues = order.iter().map(|&i| a.get(i, i)).collect();
    let mut eigenvectors = DenseMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(SymEig { eigenvalues, eigenvectors, sweeps })
}

/// Fitted principal axes.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `cols x k`, column `j` is the `j`-th principal axis.
    pub components: DenseMatrix,
    /// Variance of the data along each retained axis, non-increasing.
    pub explained_variance: Vec<f64>,
    pub total_variance: f64,
}

impl Pca {
    pub fn fit(x: &DenseMatrix, k: usize) -> Result<Self> {
        let (n, d) = (x.rows, x.cols);
        if k > d {
            return Err(invalid(format!("cannot keep {k} components of {d}-dimensional data")));
        }
        if n < 2 {
            return Err(invalid("PCA needs at least two rows"));
        }
        let mean: Vec<f64> = (0..d).map(|c| (0..n).map(|r| x.get(r, c)).sum::<f64>() / n as f64).collect();
        let mut cov = DenseMatrix::zeros(d, d);
        for r in 0..n {
            let row = x.row(r);
            for i in 0..d {
                let di = row[i] - mean[i];
                for j in i..d {
                    let v = cov.get(i, j) + di * (row[j] - mean[j]);
                    cov.set(i, j, v);
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                let v = cov.get(i, j) / denom;
                cov.set(i, j, v);
                cov.set(j, i, v);
            }
        }
        let eig = sym_eig(&cov, DEFAULT_EIG_TOL)?;
        let mut components = DenseMatrix::zeros(d, k);
        for j in 0..k {
            let axis = eig.eigenvectors.column(j);
            // largest-magnitude coordinate is made positive
            let pivot = axis
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()).then(b.0.cmp(&a.0)))
                .map_or(1.0, |(_, v)| *v);
            let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
            for (i, a) in axis.iter().enumerate() {
                components.set(i, j, sign * a);
            }
        }
        let explained_variance = eig.eigenvalues[..k].iter().map(|v| v.max(0.0)).collect();
        Ok(Self { mean, components, explained_variance, total_variance: cov.trace() })
    }

    pub fn transform(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let d = self.mean.len();
        if x.cols != d {
            return Err(invalid(format!("expected {d} columns, got {}", x.cols)));
        }
        let k = self.components.cols;
        let mut out = DenseMatrix::zeros(x.rows, k);
        for r in 0..x.rows {
            let row = x.row(r);
            for j in 0..k {
                let s: f64 = (0..d).map(|i| (row[i] - self.mean[i]) * self.components.get(i, j)).sum();
                out.set(r, j, s);
            }
        }
        Ok(out)
    }
}

/// Projects mean-centered rows of `x` onto its top `k` principal axes.
pub fn pca_reduce(x: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    Pca::fit(x, k)?.transform(x)
}

/// FNV-1a, 64-bit. Pinned so hashed artefacts are identical across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_extend(0xcbf2_9ce4_8422_2325, bytes)
}

/// Continues an FNV-1a hash from a previous state.
pub fn fnv1a64_extend(mut state: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        state ^= u64::from(*b);
        state = state.wrapping_mul(0x0000_0100_0000_01b3);
    }
    state
}

/// Stream identifier for a named phase of an experiment.
pub fn stream_id(phase: &str, iteration: u64, job: u64) -> u64 {
    let h = fnv1a64(phase.as_bytes());
    let h = fnv1a64_extend(h, &iteration.to_le_bytes());
    fnv1a64_extend(h, &job.to_le_bytes())
}

/// A reproducible random stream keyed by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id mapped onto ChaCha's native stream
/// counter, so distinct ids from the same seed never share keystream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    /// Stream for `(phase, iteration, job)` under `seed`.
    pub fn named(seed: u64, phase: &str, iteration: u64, job: u64) -> Self {
        Self::new(seed, stream_id(phase, iteration, job))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Running mean; exact when every value is equal.
pub fn mean(xs: &[f64]) -> Option<f64> {
    let (first, rest) = xs.split_first()?;
    let mut m = *first;
    for (k, x) in rest.iter().enumerate() {
        m += (x - m) / (k + 2) as f64;
    }
    Some(m)
}

/// Sample standard deviation over `√n`; `None` when fewer than two values.
pub fn standard_error(xs: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let m = mean(xs)?;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    Some(var.sqrt() / (n as f64).sqrt())
}

/// Median of a non-empty slice; the mean of the middle pair for even lengths.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v: f64 = rng.gen_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn orthonormality_error(v: &DenseMatrix) -> f64 {
        let vtv = v.transpose().matmul(v).unwrap();
        vtv.max_abs_diff(&DenseMatrix::identity(v.cols()))
    }

    #[test]
    fn identity_eigenvalues() {
        let eig = sym_eig(&DenseMatrix::identity(2), DEFAULT_EIG_TOL).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_axis_aligned() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let eig = sym_eig(&m, DEFAULT_EIG_TOL).unwrap();
        assert_eq!(eig.eigenvalues, vec![2.0, 1.0]);
        assert_eq!(eig.eigenvectors.get(1, 0).abs(), 1.0);
        assert_eq!(eig.eigenvectors.get(0, 1).abs(), 1.0);
    }

    #[test]
    fn random_symmetric_reconstructs() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..20 {
            let m = random_symmetric(8, &mut rng);
            let eig = sym_eig(&m, DEFAULT_EIG_TOL).unwrap();
            assert!(eig.reconstruct().max_abs_diff(&m) < 1e-8);
            assert!(orthonormality_error(&eig.eigenvectors) < 1e-6);
            assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            let sum: f64 = eig.eigenvalues.iter().sum();
            assert!((sum - m.trace()).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let rect = DenseMatrix::zeros(2, 3);
        assert!(matches!(sym_eig(&rect, DEFAULT_EIG_TOL), Err(Error::InvalidInput(_))));
        let asym = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&asym, DEFAULT_EIG_TOL), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pca_line_has_one_component() {
        let rows: Vec<Vec<f64>> = (0..10).map(|t| {
            let t = t as f64;
            vec![1.0 + t, 2.0 - 2.0 * t, 0.5 * t]
        }).collect();
        let x = DenseMatrix::from_rows(&rows).unwrap();
        let pca = Pca::fit(&x, 3).unwrap();
        let ratio = pca.explained_variance[0] / pca.total_variance;
        assert!((ratio - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pca_full_rank_preserves_variance() {
        let mut rng = RngStream::new(3, 1);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let x = DenseMatrix::from_rows(&rows).unwrap();
        let pca = Pca::fit(&x, 6).unwrap();
        let kept: f64 = pca.explained_variance.iter().sum();
        assert!((kept - pca.total_variance).abs() < 1e-8);
        let proj = pca.transform(&x).unwrap();
        // variance of projected columns sums to total
        let var_sum: f64 = (0..6)
            .map(|c| {
                let col = proj.column(c);
                let m = mean(&col).unwrap();
                col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 29.0
            })
            .sum();
        assert!((var_sum - pca.total_variance).abs() < 1e-8);
    }

    #[test]
    fn pca_rejects_too_many_components() {
        let x = DenseMatrix::zeros(4, 2);
        assert!(matches!(pca_reduce(&x, 3), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pca_sign_convention() {
        let mut rng = RngStream::new(11, 0);
        let rows: Vec<Vec<f64>> = (0..40).map(|_| (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let pca = Pca::fit(&DenseMatrix::from_rows(&rows).unwrap(), 3).unwrap();
        for j in 0..3 {
            let col = pca.components.column(j);
            let pivot = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap();
            assert!(pivot > 0.0);
        }
    }

    #[test]
    fn rng_streams_replay_and_diverge() {
        let a: Vec<u64> = {
            let mut r = RngStream::new(42, 1);
            (0..32).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42, 1);
            (0..32).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let c: Vec<u64> = {
            let mut r = RngStream::new(42, 2);
            (0..32).map(|_| r.next_u64()).collect()
        };
        // no shared window of 16 consecutive draws
        for i in 0..=16 {
            for j in 0..=16 {
                assert_ne!(&a[i..i + 16], &c[j..j + 16]);
            }
        }
    }

    #[test]
    fn helper_statistics() {
        assert_eq!(median(&[3.0, 9.0, 5.0]), Some(5.0));
        assert_eq!(median(&[4.0, 5.0]), Some(4.5));
        assert_eq!(standard_error(&[1.0]), None);
        let se = standard_error(&[1.0, 3.0]).unwrap();
        assert!((se - 1.0).abs() < 1e-12);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
    }
}
