//! Dense row-major `f64` matrices, keyed random streams and the statistics
//! (Pearson correlation, covariance, Frobenius norm) shared by every stage.

use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries((0..self.rows).map(|r| self.row(r)))
                .finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape {
                    op: "from_rows",
                    lhs: (i, r.len()),
                    rhs: (rows.len(), cols),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
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
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &r in idx {
            data.extend_from_slice(self.row(r));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |r, c| self.get(r, idx[c]))
    }

    /// Stacks `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "vstack",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Concatenates columns of `parts` left to right.
    pub fn hstack(parts: &[&Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |m| m.rows);
        if let Some(bad) = parts.iter().find(|m| m.rows != rows) {
            return Err(Error::Shape {
                op: "hstack",
                lhs: (rows, 0),
                rhs: bad.shape(),
            });
        }
        let cols = parts.iter().map(|m| m.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for m in parts {
                data.extend_from_slice(m.row(r));
            }
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add_assign",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols as isize, 1),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            (&self.data, 1, self.cols as isize),
            (&other.data, other.cols as isize, 1),
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            (&self.data, self.cols as isize, 1),
            (&other.data, 1, other.cols as isize),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `out (m×n) = a (m×k) · b (k×n)` with explicit (row, col) strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], isize, isize),
    b: (&[f64], isize, isize),
    out: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    debug_assert!(out.len() == m * n);
    // SAFETY: the callers size `a`, `b` and `out` to match the dimensions and
    // strides passed here; `out` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.frobenius_norm()
}

/// Sample Pearson correlation coefficient, clamped to `[-1, 1]`.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "pearson",
            lhs: (x.len(), 1),
            rhs: (y.len(), 1),
        });
    }
    if x.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "pearson needs at least 2 observations, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::DegenerateVariance(
            "pearson on a constant column".into(),
        ));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Covariance of the columns of `m` (rows are samples), normalized by `1/n`.
pub fn covariance(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "covariance needs at least 2 rows, got {n}"
        )));
    }
    let d = m.cols();
    let mut means = vec![0.0; d];
    for r in 0..n {
        for (acc, v) in means.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    means.iter_mut().for_each(|v| *v /= n as f64);
    let centered = Matrix::from_fn(n, d, |r, c| m.get(r, c) - means[c]);
    let mut cov = centered.matmul_tn(&centered)?.scale(1.0 / n as f64);
    // Exact symmetry regardless of summation order inside gemm.
    for i in 0..d {
        for j in (i + 1)..d {
            let v = 0.5 * (cov.get(i, j) + cov.get(j, i));
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok(cov)
}

/// What a random stream is used for; part of the stream key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Subsample,
    Split,
    DataDrop,
    ClassDrop,
    Init,
    Shuffle,
    Augment,
    Labels,
    Synth,
    Bench,
    Gradcheck,
    CovDev,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Subsample => 1,
            Purpose::Split => 2,
            Purpose::DataDrop => 3,
            Purpose::ClassDrop => 4,
            Purpose::Init => 5,
            Purpose::Shuffle => 6,
            Purpose::Augment => 7,
            Purpose::Labels => 8,
            Purpose::Synth => 9,
            Purpose::Bench => 10,
            Purpose::Gradcheck => 11,
            Purpose::CovDev => 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamKey {
    pub silo: u32,
    pub round: u32,
    pub purpose: Purpose,
}

impl StreamKey {
    pub fn new(silo: u32, round: u32, purpose: Purpose) -> Self {
        Self {
            silo,
            round,
            purpose,
        }
    }

    pub fn global(purpose: Purpose) -> Self {
        Self::new(0, 0, purpose)
    }
}

/// Deterministic random stream identified by `(seed, key)`.
///
/// Streams are derived independently from the key, so draws do not depend on
/// the order in which clients or batches are scheduled.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    key: StreamKey,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, key: StreamKey) -> Self {
        let words = [
            seed,
            u64::from(key.silo),
            u64::from(key.round),
            key.purpose.tag(),
        ];
        let mut state = 0x6A09_E667_F3BC_C908_u64;
        let mut bytes = [0u8; 32];
        for (i, chunk) in bytes.chunks_exact_mut(8).enumerate() {
            for w in words {
                state = splitmix64(state ^ w);
            }
            state = splitmix64(state ^ i as u64);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        Self {
            seed,
            key,
            inner: ChaCha8Rng::from_seed(bytes),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    /// A fresh stream for another key under the same seed.
    pub fn sibling(&self, key: StreamKey) -> RngStream {
        RngStream::new(self.seed, key)
    }
}

impl RngCore for RngStream {
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    fn random_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    // Cyclic Jacobi eigenvalues for small symmetric matrices.
    fn jacobi_eigenvalues(m: &Matrix) -> Vec<f64> {
        let n = m.rows();
        let mut a = m.clone();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a.get(i, j).powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in (p + 1)..n {
                    let apq = a.get(p, q);
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
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
                }
            }
        }
        (0..n).map(|i| a.get(i, i)).collect()
    }

    #[test]
    fn identity_matmul() {
        let mut rng = RngStream::new(1, StreamKey::global(Purpose::Bench));
        let m = random_matrix(2, 3, &mut rng);
        assert_eq!(Matrix::identity(2).matmul(&m).unwrap(), m);
    }

    #[test]
    fn small_matmul() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = RngStream::new(7, StreamKey::global(Purpose::Bench));
        let a = random_matrix(5, 7, &mut rng);
        let b = random_matrix(7, 3, &mut rng);
        assert!(max_abs_diff(&a.matmul(&b).unwrap(), &naive_matmul(&a, &b)) < 1e-12);
        // transposed variants
        let at = a.transpose();
        assert!(max_abs_diff(&at.matmul_tn(&b).unwrap(), &naive_matmul(&a, &b)) < 1e-12);
        let bt = b.transpose();
        assert!(max_abs_diff(&a.matmul_nt(&bt).unwrap(), &naive_matmul(&a, &b)) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("(2, 3)"), "{err}");
    }

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        // cov = 1.0 (unnormalized sum 4, /4), var x = var y = 1.25 -> 0.8
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let oracle = {
            let mx = 2.5;
            let my = 2.5;
            let cov: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
            let sx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
            let sy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
            cov / (sx * sy)
        };
        assert!((oracle - 0.8).abs() < 1e-15);
        assert!((pearson(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pearson_constant_column_errors() {
        assert!(matches!(
            pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn covariance_examples() {
        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(covariance(&same).unwrap(), Matrix::zeros(2, 2));
        let eye = Matrix::identity(2);
        let c = covariance(&eye).unwrap();
        let expected = Matrix::from_rows(&[vec![0.25, -0.25], vec![-0.25, 0.25]]).unwrap();
        assert!(max_abs_diff(&c, &expected) < 1e-15);
        assert!(matches!(
            covariance(&Matrix::zeros(1, 3)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn covariance_symmetric_psd() {
        let mut rng = RngStream::new(3, StreamKey::global(Purpose::Bench));
        let m = random_matrix(50, 4, &mut rng);
        let c = covariance(&m).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((c.get(i, j) - c.get(j, i)).abs() <= 1e-12);
            }
        }
        let min_eig = jacobi_eigenvalues(&c).into_iter().fold(f64::INFINITY, f64::min);
        assert!(min_eig >= -1e-10, "{min_eig}");
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(Matrix::zeros(3, 2).frobenius_norm(), 0.0);
        assert_eq!(Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap().frobenius_norm(), 5.0);
        let mut rng = RngStream::new(5, StreamKey::global(Purpose::Bench));
        let m = random_matrix(6, 9, &mut rng);
        let mut s = 0.0;
        for r in 0..6 {
            for c in 0..9 {
                s += m.get(r, c) * m.get(r, c);
            }
        }
        assert!((frobenius_norm(&m) - s.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rng_stream_replays_and_separates() {
        let key = StreamKey::new(2, 5, Purpose::Augment);
        let a: Vec<u64> = {
            let mut r = RngStream::new(42, key);
            (0..16).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = RngStream::new(42, key);
            (0..16).map(|_| r.next_u64()).collect()
        };
        assert_eq!(a, b);
        let other = {
            let mut r = RngStream::new(42, StreamKey::new(3, 5, Purpose::Augment));
            (0..16).map(|_| r.next_u64()).collect::<Vec<_>>()
        };
        assert_ne!(a, other);
        let reseeded = {
            let mut r = RngStream::new(43, key);
            (0..16).map(|_| r.next_u64()).collect::<Vec<_>>()
        };
        assert_ne!(a, reseeded);
    }

    #[test]
    fn rng_streams_look_independent() {
        // Correlation of uniform draws from neighbouring keys should be ~0.
        let n = 20_000;
        let mut r1 = RngStream::new(9, StreamKey::new(1, 0, Purpose::Shuffle));
        let mut r2 = RngStream::new(9, StreamKey::new(2, 0, Purpose::Shuffle));
        let x: Vec<f64> = (0..n).map(|_| r1.random::<f64>()).collect();
        let y: Vec<f64> = (0..n).map(|_| r2.random::<f64>()).collect();
        let r = pearson(&x, &y).unwrap();
        assert!(r.abs() < 4.0 / (n as f64).sqrt(), "{r}");
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, k in 1usize..6, l in 1usize..6, p in 1usize..6) {
            let mut rng = RngStream::new(seed, StreamKey::global(Purpose::Bench));
            let a = random_matrix(n, k, &mut rng);
            let b = random_matrix(k, l, &mut rng);
            let c = random_matrix(l, p, &mut rng);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.frobenius_norm().max(1e-300);
            prop_assert!(max_abs_diff(&left, &right) / scale < 1e-9 || max_abs_diff(&left, &right) < 1e-12);
        }

        #[test]
        fn pearson_symmetric_scale_invariant_bounded(
            xs in prop::collection::vec(-100.0f64..100.0, 3..40),
            seed in any::<u64>(),
            a in 0.01f64..50.0,
            b in -50.0f64..50.0,
        ) {
            let mut rng = RngStream::new(seed, StreamKey::global(Purpose::Bench));
            let ys: Vec<f64> = xs.iter().map(|_| rng.random_range(-10.0..10.0)).collect();
            let (Ok(r), Ok(r2)) = (pearson(&xs, &ys), pearson(&ys, &xs)) else {
                return Ok(());
            };
            prop_assert!((-1.0..=1.0).contains(&r));
            prop_assert!((r - r2).abs() < 1e-12);
            let scaled: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let r3 = pearson(&scaled, &ys).unwrap();
            prop_assert!((r - r3).abs() < 1e-12, "{} vs {}", r, r3);
        }

        #[test]
        fn covariance_is_psd(seed in any::<u64>(), rows in 2usize..30, cols in 1usize..6) {
            let mut rng = RngStream::new(seed, StreamKey::global(Purpose::Bench));
            let m = random_matrix(rows, cols, &mut rng);
            let c = covariance(&m).unwrap();
            prop_assert_eq!(c.clone(), c.transpose());
            let min_eig = jacobi_eigenvalues(&c).into_iter().fold(f64::INFINITY, f64::min);
            prop_assert!(min_eig >= -1e-10);
        }
    }
}
