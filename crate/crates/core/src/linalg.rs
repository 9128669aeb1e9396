//! Banded direct factorization and a few dense helpers.
//!
//! Every operator in this crate is a short-stencil matrix over lexicographically
//! ordered grid nodes, so its nonzeros sit inside a band of half-width at most
//! `n - 1` (2D) and a banded LU is an exact sparse direct solver for it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, Error, Result};

/// Square matrix with `kl` sub-diagonals and `ku` super-diagonals, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        Self {
            n,
            kl,
            ku,
            data: vec![0.0; n * (kl + ku + 1)],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, 0, 0);
        m.data.iter_mut().for_each(|v| *v = 1.0);
        m
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn lower_bandwidth(&self) -> usize {
        self.kl
    }

    pub fn upper_bandwidth(&self) -> usize {
        self.ku
    }

    #[inline]
    fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && j <= i + self.ku
    }

    #[inline]
    fn offset(&self, i: usize, j: usize) -> usize {
        i * (self.kl + self.ku + 1) + (j + self.kl - i)
    }

    /// Column range `[lo, hi)` of the band in row `i`.
    #[inline]
    pub fn row_range(&self, i: usize) -> (usize, usize) {
        (i.saturating_sub(self.kl), (i + self.ku + 1).min(self.n))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i < self.n && j < self.n && self.in_band(i, j) {
            self.data[self.offset(i, j)]
        } else {
            0.0
        }
    }

    /// Adds `v` to entry `(i, j)`. Panics if the entry lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            self.in_band(i, j),
            "entry ({i}, {j}) outside band kl={} ku={}",
            self.kl,
            self.ku
        );
        let k = self.offset(i, j);
        self.data[k] += v;
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j));
        let k = self.offset(i, j);
        self.data[k] = v;
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.n, x.len())?;
        Ok(DVector::from_iterator(
            self.n,
            (0..self.n).map(|i| {
                let (lo, hi) = self.row_range(i);
                (lo..hi).map(|j| self.data[self.offset(i, j)] * x[j]).sum()
            }),
        ))
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.n, x.len())?;
        let mut y = DVector::zeros(self.n);
        for i in 0..self.n {
            let (lo, hi) = self.row_range(i);
            let xi = x[i];
            for j in lo..hi {
                y[j] += self.data[self.offset(i, j)] * xi;
            }
        }
        Ok(y)
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n, self.ku, self.kl);
        for i in 0..self.n {
            let (lo, hi) = self.row_range(i);
            for j in lo..hi {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Banded product `self * other`.
    pub fn matmul(&self, other: &BandMatrix) -> Result<BandMatrix> {
        check_len(self.n, other.n)?;
        let mut c = Self::zeros(self.n, self.kl + other.kl, self.ku + other.ku);
        for i in 0..self.n {
            let (lo, hi) = self.row_range(i);
            for k in lo..hi {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let (klo, khi) = other.row_range(k);
                for j in klo..khi {
                    c.add(i, j, a * other.get(k, j));
                }
            }
        }
        Ok(c)
    }

    /// Left-multiplies by a diagonal matrix.
    pub fn scale_rows(&self, d: &DVector<f64>) -> Result<BandMatrix> {
        check_len(self.n, d.len())?;
        let mut m = self.clone();
        for i in 0..self.n {
            let (lo, hi) = self.row_range(i);
            for j in lo..hi {
                let k = m.offset(i, j);
                m.data[k] *= d[i];
            }
        }
        Ok(m)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// Structurally nonzero entries in row-major order.
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let (lo, hi) = self.row_range(i);
            (lo..hi).filter_map(move |j| {
                let v = self.get(i, j);
                (v != 0.0).then_some((i, j, v))
            })
        })
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        self.triplets()
            .map(|(i, j, v)| (v - self.get(j, i)).abs())
            .fold(0.0, f64::max)
    }
}

/// LU factorization with partial pivoting of a [`BandMatrix`], in the
/// LAPACK `gbtrf` layout: the multipliers of step `k` stay in the physical
/// rows they were computed in and `U` gains `kl` extra super-diagonals.
#[derive(Debug, Clone)]
pub struct BandLu {
    n: usize,
    kl: usize,
    // width of stored U rows: columns [i, i + kl + ku]
    uw: usize,
    u: Vec<f64>,
    mult: Vec<f64>,
    piv: Vec<usize>,
}

impl BandLu {
    pub fn factor(a: &BandMatrix) -> Result<Self> {
        let n = a.n;
        let kl = a.kl;
        let ku = a.ku;
        // working rows cover columns [i - kl, i + kl + ku]
        let ww = 2 * kl + ku + 1;
        let mut w = vec![0.0; n * ww];
        let idx = |i: usize, j: usize| i * ww + (j + kl - i);
        for i in 0..n {
            let (lo, hi) = a.row_range(i);
            for j in lo..hi {
                w[idx(i, j)] = a.get(i, j);
            }
        }
        let scale = a.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 && n > 0 {
            return Err(Error::Singular("zero matrix".into()));
        }
        let mut mult = vec![0.0; n * kl.max(1)];
        let mut piv = vec![0; n];
        for k in 0..n {
            let last = (k + kl).min(n - 1);
            let cend = (k + kl + ku).min(n - 1);
            let mut p = k;
            let mut best = w[idx(k, k)].abs();
            for i in k + 1..=last {
                let v = w[idx(i, k)].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if !(best > scale * 1e-300) || !best.is_finite() {
                return Err(Error::Singular(format!("zero pivot at step {k}")));
            }
            piv[k] = p;
            if p != k {
                for j in k..=cend {
                    w.swap(idx(k, j), idx(p, j));
                }
            }
            let pivot = w[idx(k, k)];
            for i in k + 1..=last {
                let m = w[idx(i, k)] / pivot;
                mult[k * kl + (i - k - 1)] = m;
                w[idx(i, k)] = 0.0;
                if m != 0.0 {
                    for j in k + 1..=cend {
                        w[idx(i, j)] -= m * w[idx(k, j)];
                    }
                }
            }
        }
        // compact U rows to columns [i, i + kl + ku]
        let uw = kl + ku + 1;
        let mut u = vec![0.0; n * uw];
        for i in 0..n {
            for j in i..(i + uw).min(n) {
                u[i * uw + (j - i)] = w[idx(i, j)];
            }
        }
        Ok(Self {
            n,
            kl,
            uw,
            u,
            mult,
            piv,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn ue(&self, i: usize, j: usize) -> f64 {
        self.u[i * self.uw + (j - i)]
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.n, b.len())?;
        let n = self.n;
        let mut x = b.clone();
        for k in 0..n {
            x.swap_rows(k, self.piv[k]);
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                    x[i] -= self.mult[k * self.kl + (i - k - 1)] * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..(k + self.uw).min(n) {
                s -= self.ue(k, j) * x[j];
            }
            x[k] = s / self.ue(k, k);
        }
        Ok(x)
    }

    /// Solves `Aᵀ x = b`.
    pub fn solve_transpose(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(self.n, b.len())?;
        let n = self.n;
        let mut z = b.clone();
        for k in 0..n {
            let mut s = z[k];
            for j in k.saturating_sub(self.uw - 1)..k {
                s -= self.ue(j, k) * z[j];
            }
            z[k] = s / self.ue(k, k);
        }
        for k in (0..n).rev() {
            let mut s = 0.0;
            for i in k + 1..=(k + self.kl).min(n.saturating_sub(1)) {
                s += self.mult[k * self.kl + (i - k - 1)] * z[i];
            }
            z[k] -= s;
            z.swap_rows(k, self.piv[k]);
        }
        Ok(z)
    }
}

/// Column-pivoted elimination on a wide matrix: returns the indices of a
/// maximal set of linearly independent columns, in pivot order.
///
/// A column is accepted while its pivot exceeds `rel_tol` times the largest
/// entry of the original matrix.
pub fn independent_columns(c: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let (r, m) = c.shape();
    let mut a = c.clone();
    let scale = a.amax();
    let mut cols: Vec<usize> = (0..m).collect();
    let mut picked = Vec::new();
    if scale == 0.0 {
        return picked;
    }
    for step in 0..r.min(m) {
        // complete pivoting over the trailing block
        let mut best = (0.0, step, step);
        for i in step..r {
            for j in step..m {
                let v = a[(i, j)].abs();
                if v > best.0 {
                    best = (v, i, j);
                }
            }
        }
        if best.0 <= rel_tol * scale {
            break;
        }
        a.swap_rows(step, best.1);
        a.swap_columns(step, best.2);
        cols.swap(step, best.2);
        picked.push(cols[step]);
        let p = a[(step, step)];
        for i in step + 1..r {
            let f = a[(i, step)] / p;
            if f != 0.0 {
                for j in step..m {
                    let v = a[(step, j)];
                    a[(i, j)] -= f * v;
                }
            }
        }
    }
    picked
}

/// Basis of the null space of a full-row-rank `N×M` matrix, as an
/// `M×(M−N)` matrix `Z` with `C Z = 0` (not orthonormal).
pub fn null_space_basis(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (r, m) = c.shape();
    let basic = independent_columns(c, 1e-12);
    if basic.len() < r {
        return Err(Error::RankDeficient {
            rank: basic.len(),
            expected: r,
        });
    }
    let mut is_basic = vec![false; m];
    basic.iter().for_each(|&j| is_basic[j] = true);
    let free: Vec<usize> = (0..m).filter(|&j| !is_basic[j]).collect();
    let cb = c.select_columns(&basic);
    let cf = c.select_columns(&free);
    let lu = cb.lu();
    let x = lu
        .solve(&cf)
        .ok_or_else(|| Error::Singular("basic constraint block".into()))?;
    let mut z = DMatrix::zeros(m, free.len());
    for (col, &fj) in free.iter().enumerate() {
        z[(fj, col)] = 1.0;
        for (row, &bj) in basic.iter().enumerate() {
            z[(bj, col)] = -x[(row, col)];
        }
    }
    Ok(z)
}

/// Largest eigenpair of a symmetric positive semidefinite operator by
/// Lanczos iteration with full reorthogonalization.
pub fn lanczos_largest<F>(
    n: usize,
    apply: F,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<(f64, DVector<f64>)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if n == 0 {
        return Ok((0.0, DVector::zeros(0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    q /= q.norm();
    let mut basis: Vec<DVector<f64>> = vec![q];
    let mut alpha: Vec<f64> = Vec::new();
    let mut beta: Vec<f64> = Vec::new();
    let max_iter = max_iter.min(n).max(1);
    let mut last_theta = f64::NAN;
    loop {
        let k = basis.len() - 1;
        let mut w = apply(&basis[k])?;
        let a = basis[k].dot(&w);
        alpha.push(a);
        for _ in 0..2 {
            for v in &basis {
                let c = v.dot(&w);
                w.axpy(-c, v, 1.0);
            }
        }
        let b = w.norm();
        let steps = alpha.len();
        let check = steps.is_multiple_of(5) || steps == max_iter || b <= 1e-14 * a.abs().max(1e-300);
        if check {
            let t = DMatrix::from_fn(steps, steps, |i, j| {
                if i == j {
                    alpha[i]
                } else if i == j + 1 {
                    beta[j]
                } else if j == i + 1 {
                    beta[i]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let (imax, theta) = eig.eigenvalues.iter().copied().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
            );
            if !theta.is_finite() {
                return Err(Error::EigenSolver("non-finite Ritz value".into()));
            }
            let y = eig.eigenvectors.column(imax);
            let resid = (b * y[steps - 1]).abs();
            let stalled = (theta - last_theta).abs() <= tol * theta.abs() * 1e-3;
            let done = resid <= tol * theta.abs()
                || b <= 1e-14 * theta.abs().max(1e-300)
                || steps >= max_iter
                || stalled;
            last_theta = theta;
            if done {
                let mut x = DVector::zeros(n);
                for (i, v) in basis.iter().enumerate().take(steps) {
                    x.axpy(y[i], v, 1.0);
                }
                let nx = x.norm();
                if nx > 0.0 {
                    x /= nx;
                }
                return Ok((theta, x));
            }
        }
        beta.push(b);
        basis.push(w / b);
    }
}

/// Quadratic form `xᵀ diag(w) y`.
pub fn weighted_dot(w: &DVector<f64>, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    w.iter()
        .zip(x.iter())
        .zip(y.iter())
        .map(|((w, x), y)| w * x * y)
        .sum()
}
