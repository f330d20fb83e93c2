//! Minimal dense linear algebra for symmetric matrices.
//!
//! Everything here is plain `Vec<f64>` row-major storage. The matrices this
//! crate works with (logit covariances, last-layer curvature) are dense,
//! symmetric, and small enough that O(n^3) factorizations are fine; there is
//! no sparse or iterative machinery.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Cholesky pivots at or below `PIVOT_RTOL * max_diagonal` count as failure.
/// Distinguishes genuine indefiniteness from roundoff.
const PIVOT_RTOL: f64 = 1e-12;

/// General dense row-major matrix. Storage for weights, batches, gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Wrap an existing row-major buffer. Panics if the length is wrong.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer length mismatch");
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// y = A x.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec length mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// y = A^T x.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "tr_matvec length mismatch");
        let mut y = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            for (j, yj) in y.iter_mut().enumerate() {
                *yj += self.get(i, j) * xi;
            }
        }
        y
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().copied()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense symmetric matrix.
///
/// Symmetry is a construction invariant: `new` rejects asymmetric input,
/// `from_fn_sym` mirrors the lower triangle, `from_average` symmetrizes as
/// (M + M^T)/2. All entries must be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Wrap a row-major buffer that is already symmetric.
    ///
    /// Panics if the buffer has the wrong length, holds non-finite entries,
    /// or is asymmetric beyond a 1e-12 relative tolerance. Use
    /// `from_average` for data with roundoff-level asymmetry.
    pub fn new(dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), dim * dim, "symmetric buffer length mismatch");
        for (idx, &v) in data.iter().enumerate() {
            assert!(
                v.is_finite(),
                "non-finite entry {v} at flat index {idx} in SymMatrix"
            );
        }
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = data[i * dim + j];
                let b = data[j * dim + i];
                let scale = 1.0f64.max(a.abs()).max(b.abs());
                assert!(
                    (a - b).abs() <= 1e-12 * scale,
                    "asymmetric entries at ({i},{j}): {a} vs {b}"
                );
            }
        }
        SymMatrix { dim, data }
    }

    /// Build from a closure evaluated on i <= j and mirrored.
    pub fn from_fn_sym(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                assert!(v.is_finite(), "non-finite entry at ({i},{j})");
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        SymMatrix { dim, data }
    }

    /// Symmetrize a row-major buffer as (M + M^T)/2.
    pub fn from_average(dim: usize, data: &[f64]) -> Self {
        assert_eq!(data.len(), dim * dim, "symmetric buffer length mismatch");
        Self::from_fn_sym(dim, |i, j| 0.5 * (data[i * dim + j] + data[j * dim + i]))
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag(&vec![1.0; dim])
    }

    pub fn diag(d: &[f64]) -> Self {
        let dim = d.len();
        let mut m = Self::zeros(dim);
        for (i, &v) in d.iter().enumerate() {
            m.data[i * dim + i] = v;
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// self + eps * I.
    pub fn add_scaled_identity(&self, eps: f64) -> SymMatrix {
        let mut out = self.clone();
        for i in 0..self.dim {
            out.data[i * self.dim + i] += eps;
        }
        out
    }

    pub fn scaled(&self, c: f64) -> SymMatrix {
        SymMatrix {
            dim: self.dim,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "matvec length mismatch");
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Lower-triangular Cholesky factor L with L L^T equal to the source matrix.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    dim: usize,
    /// Row-major dense storage; entries above the diagonal are zero.
    lower: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// Column j of L (length dim; leading j entries are zero).
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, j)).collect()
    }

    /// L L^T, for reconstruction checks.
    pub fn reconstruct(&self) -> SymMatrix {
        SymMatrix::from_fn_sym(self.dim, |i, j| {
            (0..=i.min(j)).map(|k| self.get(i, k) * self.get(j, k)).sum()
        })
    }

    /// L z for a vector z.
    pub fn lower_matvec(&self, z: &[f64]) -> Vec<f64> {
        assert_eq!(z.len(), self.dim);
        (0..self.dim)
            .map(|i| (0..=i).map(|k| self.get(i, k) * z[k]).sum())
            .collect()
    }
}

/// Factor a symmetric positive definite matrix as L L^T.
///
/// Fails with `NotPositiveDefinite` when a pivot falls at or below the
/// relative tolerance; the caller is expected to dampen and retry.
pub fn cholesky(m: &SymMatrix) -> Result<CholeskyFactor> {
    let n = m.dim();
    let max_diag = (0..n).fold(0.0f64, |acc, i| acc.max(m.get(i, i).abs()));
    let tol = PIVOT_RTOL * max_diag;
    let mut lower = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            for k in 0..j {
                sum -= lower[i * n + k] * lower[j * n + k];
            }
            if i == j {
                if sum <= tol {
                    return Err(Error::NotPositiveDefinite {
                        index: i,
                        pivot: sum,
                    });
                }
                lower[i * n + i] = sum.sqrt();
            } else {
                lower[i * n + j] = sum / lower[j * n + j];
            }
        }
    }
    Ok(CholeskyFactor { dim: n, lower })
}

/// Solve (L L^T) x = b by forward then backward substitution.
pub fn solve_spd(f: &CholeskyFactor, b: &[f64]) -> Result<Vec<f64>> {
    let n = f.dim;
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.len(),
            context: "solve_spd rhs",
        });
    }
    // L y = b
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= f.get(i, k) * y[k];
        }
        y[i] = sum / f.get(i, i);
    }
    // L^T x = y
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= f.get(k, i) * x[k];
        }
        x[i] = sum / f.get(i, i);
    }
    Ok(x)
}

/// Inverse of a symmetric positive definite matrix via Cholesky column solves.
pub fn invert_spd(m: &SymMatrix) -> Result<SymMatrix> {
    let n = m.dim();
    let f = cholesky(m)?;
    let mut raw = vec![0.0; n * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = solve_spd(&f, &e)?;
        e[j] = 0.0;
        for i in 0..n {
            raw[i * n + j] = col[i];
        }
    }
    // Column solves agree across the diagonal only up to roundoff.
    Ok(SymMatrix::from_average(n, &raw))
}

/// All eigenvalues of a symmetric matrix, unordered.
///
/// Householder tridiagonalization followed by implicit-shift QL, values only.
pub fn sym_eigenvalues(m: &SymMatrix) -> Result<Vec<f64>> {
    let n = m.dim();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![m.get(0, 0)]);
    }
    let mut a: Vec<Vec<f64>> = (0..n).map(|i| m.row(i).to_vec()).collect();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(&mut a, &mut d, &mut e);
    ql_implicit(&mut d, &mut e)?;
    Ok(d)
}

/// Smallest and largest eigenvalues of a symmetric matrix.
pub fn eig_extremes(m: &SymMatrix) -> Result<(f64, f64)> {
    let eigs = sym_eigenvalues(m)?;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for v in eigs {
        min = min.min(v);
        max = max.max(v);
    }
    Ok((min, max))
}

/// Householder reduction of a symmetric matrix to tridiagonal form.
/// On return `d` holds the diagonal and `e[1..]` the subdiagonal.
fn tridiagonalize(a: &mut [Vec<f64>], d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for i in (1..n).rev() {
        let l = i - 1;
        let mut h = 0.0;
        if l > 0 {
            let mut scale = 0.0;
            for k in 0..=l {
                scale += a[i][k].abs();
            }
            if scale == 0.0 {
                e[i] = a[i][l];
            } else {
                for k in 0..=l {
                    a[i][k] /= scale;
                    h += a[i][k] * a[i][k];
                }
                let mut f = a[i][l];
                let g = if f >= 0.0 { -h.sqrt() } else { h.sqrt() };
                e[i] = scale * g;
                h -= f * g;
                a[i][l] = f - g;
                f = 0.0;
                for j in 0..=l {
                    let mut g2 = 0.0;
                    for k in 0..=j {
                        g2 += a[j][k] * a[i][k];
                    }
                    for k in (j + 1)..=l {
                        g2 += a[k][j] * a[i][k];
                    }
                    e[j] = g2 / h;
                    f += e[j] * a[i][j];
                }
                let hh = f / (h + h);
                for j in 0..=l {
                    let fj = a[i][j];
                    let gj = e[j] - hh * fj;
                    e[j] = gj;
                    for k in 0..=j {
                        a[j][k] -= fj * e[k] + gj * a[i][k];
                    }
                }
            }
        } else {
            e[i] = a[i][l];
        }
        d[i] = h;
    }
    e[0] = 0.0;
    for i in 0..n {
        d[i] = a[i][i];
    }
}

/// Implicit-shift QL on a tridiagonal matrix; eigenvalues land in `d`.
fn ql_implicit(d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    const MAX_ITER: usize = 50;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() + dd == dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > MAX_ITER {
                return Err(Error::NoConvergence {
                    iterations: MAX_ITER,
                });
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = hypot(g, 1.0);
            // shift by g + sign(g) * |r|
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = hypot(f, g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                f = (d[i] - g) * s + 2.0 * c * b;
                p = s * f;
                d[i + 1] = g + p;
                g = c * f - b;
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

fn hypot(a: f64, b: f64) -> f64 {
    a.hypot(b)
}

/// Draw mean + L z with z a vector of independent standard normals.
pub fn sample_mvn(mean: &[f64], f: &CholeskyFactor, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if mean.len() != f.dim {
        return Err(Error::DimensionMismatch {
            expected: f.dim,
            got: mean.len(),
            context: "sample_mvn mean",
        });
    }
    let z: Vec<f64> = (0..f.dim).map(|_| rng.sample(StandardNormal)).collect();
    let lz = f.lower_matvec(&z);
    Ok(mean.iter().zip(&lz).map(|(m, v)| m + v).collect())
}

/// Explicitly seeded generator; all experiment randomness flows from these.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent sub-stream for a worker, derived from (seed, worker index).
pub fn worker_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(worker);
    rng
}
