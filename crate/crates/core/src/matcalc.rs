//! Symmetric-matrix calculus: eigen-decomposition, the spectral matrix
//! exponential and logarithm, the `vecl` vectorization and correlation
//! matrix validation.
//!
//! `vecl` order is column-major over the strict lower triangle:
//! `(1,0), (2,0), ..., (m-1,0), (2,1), ..., (m-1,m-2)` (0-based). Pair-level
//! design rows and every Jacobian in this crate follow the same order.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative tolerance for the positive-definiteness check.
pub const SPD_TOL: f64 = 1e-12;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_SWEEPS: usize = 10_000;

/// Real symmetric matrix with a single stored value per unordered pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    // Row-major lower triangle including the diagonal.
    packed: Vec<f64>,
}

#[inline]
fn packed_index(j: usize, k: usize) -> usize {
    let (hi, lo) = if j >= k { (j, k) } else { (k, j) };
    hi * (hi + 1) / 2 + lo
}

impl SymmetricMatrix {
    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "symmetric matrix dimension must be positive");
        Self {
            dim,
            packed: vec![0.0; dim * (dim + 1) / 2],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut out = Self::zeros(dim);
        for j in 0..dim {
            out.set(j, j, 1.0);
        }
        out
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut out = Self::zeros(diag.len());
        for (j, &d) in diag.iter().enumerate() {
            out.set(j, j, d);
        }
        out
    }

    /// Builds from the lower triangle of `a`; the upper triangle is ignored.
    pub fn from_lower(a: &DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "matrix must be square");
        let mut out = Self::zeros(a.nrows());
        for j in 0..a.nrows() {
            for k in 0..=j {
                out.set(j, k, a[(j, k)]);
            }
        }
        out
    }

    /// Builds from `(a + a')/2`.
    pub fn from_dense_symmetrized(a: &DMatrix<f64>) -> Self {
        assert_eq!(a.nrows(), a.ncols(), "matrix must be square");
        let mut out = Self::zeros(a.nrows());
        for j in 0..a.nrows() {
            for k in 0..=j {
                out.set(j, k, 0.5 * (a[(j, k)] + a[(k, j)]));
            }
        }
        out
    }

    /// Row-major construction; panics unless `rows` is square.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let m = rows.len();
        let dense = DMatrix::from_fn(m, m, |j, k| {
            assert_eq!(rows[j].len(), m, "row {j} has wrong length");
            rows[j][k]
        });
        Self::from_lower(&dense)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.packed[packed_index(j, k)]
    }

    #[inline]
    pub fn set(&mut self, j: usize, k: usize, value: f64) {
        let idx = packed_index(j, k);
        self.packed[idx] = value;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|j| self.get(j, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.packed.iter().all(|v| v.is_finite())
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |j, k| self.get(j, k))
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.packed.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// `max_jk |self_jk - other_jk|`.
    pub fn max_abs_diff(&self, other: &SymmetricMatrix) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.packed
            .iter()
            .zip(&other.packed)
            .fold(0.0, |acc, (a, b)| acc.max((a - b).abs()))
    }

    /// Matrix infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.dim)
            .map(|j| (0..self.dim).map(|k| self.get(j, k).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Eigenvalues in ascending order with matching orthonormal eigenvectors
/// (columns of `eigenvectors`).
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `Q diag(f(lambda)) Q'`, symmetric by construction.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> SymmetricMatrix {
        let q = &self.eigenvectors;
        let m = self.dim();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = SymmetricMatrix::zeros(m);
        for j in 0..m {
            for k in 0..=j {
                let mut s = 0.0;
                for (r, &fr) in fl.iter().enumerate() {
                    s += q[(j, r)] * fr * q[(k, r)];
                }
                out.set(j, k, s);
            }
        }
        out
    }

    pub fn reconstruct(&self) -> SymmetricMatrix {
        self.map_spectrum(|l| l)
    }
}

pub fn eigh(a: &SymmetricMatrix) -> Result<EigenDecomposition> {
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let m = a.dim();
    let eig = SymmetricEigen::try_new(a.to_dense(), EIGEN_EPS, EIGEN_MAX_SWEEPS).ok_or(
        Error::NoConvergence {
            what: "symmetric eigensolver",
            iterations: EIGEN_MAX_SWEEPS,
        },
    )?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let eigenvalues = DVector::from_iterator(m, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut eigenvectors = DMatrix::zeros(m, m);
    for (dst, &src) in order.iter().enumerate() {
        eigenvectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

fn check_spd(eig: &EigenDecomposition) -> Result<()> {
    let lmin = eig.eigenvalues[0];
    let lmax = eig.eigenvalues[eig.dim() - 1];
    if lmin <= SPD_TOL * lmax.max(1.0) {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: lmin,
        });
    }
    Ok(())
}

pub fn matrix_log(a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let eig = eigh(a)?;
    check_spd(&eig)?;
    Ok(eig.map_spectrum(f64::ln))
}

pub fn matrix_exp(a: &SymmetricMatrix) -> Result<SymmetricMatrix> {
    let eig = eigh(a)?;
    Ok(eig.map_spectrum(f64::exp))
}

/// Number of strict-lower-triangle entries of an `m x m` matrix.
#[inline]
pub fn pair_count(m: usize) -> usize {
    m * m.saturating_sub(1) / 2
}

/// Inverse of [`pair_count`]: the `m` with `m(m-1)/2 == len`.
pub fn dim_from_pair_count(len: usize) -> Result<usize> {
    // m = (1 + sqrt(1 + 8 len)) / 2
    let m = ((1.0 + (1.0 + 8.0 * len as f64).sqrt()) / 2.0).round() as usize;
    if pair_count(m) == len {
        Ok(m.max(1))
    } else {
        Err(Error::BadLength { len })
    }
}

/// Iterates `(row, col)` index pairs in `vecl` order.
pub fn vecl_pairs(m: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m).flat_map(move |k| ((k + 1)..m).map(move |j| (j, k)))
}

/// Position of the pair `(j, k)` (either order, `j != k`) in `vecl` order.
#[inline]
pub fn vecl_index(m: usize, j: usize, k: usize) -> usize {
    let (hi, lo) = if j > k { (j, k) } else { (k, j) };
    debug_assert!(hi < m && hi != lo);
    // Columns 0..lo contribute (m-1) + (m-2) + ... + (m-lo) entries.
    lo * (2 * m - lo - 1) / 2 + (hi - lo - 1)
}

pub fn vecl(a: &SymmetricMatrix) -> Vec<f64> {
    vecl_pairs(a.dim()).map(|(j, k)| a.get(j, k)).collect()
}

pub fn vecl_inverse(v: &[f64], diagonal: &[f64]) -> Result<SymmetricMatrix> {
    let m = dim_from_pair_count(v.len())?;
    if diagonal.len() != m {
        return Err(Error::DimensionMismatch {
            what: "diagonal of vecl inverse",
            expected: m,
            got: diagonal.len(),
        });
    }
    let mut out = SymmetricMatrix::from_diagonal(diagonal);
    for ((j, k), &x) in vecl_pairs(m).zip(v) {
        out.set(j, k, x);
    }
    Ok(out)
}

/// Symmetric positive-definite matrix with unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix(SymmetricMatrix);

impl CorrelationMatrix {
    pub fn new(m: SymmetricMatrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFinite);
        }
        for j in 0..m.dim() {
            if m.get(j, j) != 1.0 {
                return Err(Error::NotCorrelation(format!(
                    "diagonal entry {j} is {}",
                    m.get(j, j)
                )));
            }
            for k in 0..j {
                let r = m.get(j, k);
                if !(r > -1.0 && r < 1.0) {
                    return Err(Error::NotCorrelation(format!(
                        "entry ({j},{k}) = {r} outside (-1, 1)"
                    )));
                }
            }
        }
        let eig = eigh(&m)?;
        check_spd(&eig)?;
        Ok(Self(m))
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Result<Self> {
        Self::new(SymmetricMatrix::from_lower(a))
    }

    pub fn identity(dim: usize) -> Self {
        Self(SymmetricMatrix::identity(dim))
    }

    /// Skips validation. Callers guarantee the invariants hold.
    pub(crate) fn new_unchecked(m: SymmetricMatrix) -> Self {
        Self(m)
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.0.get(j, k)
    }

    pub fn as_symmetric(&self) -> &SymmetricMatrix {
        &self.0
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.0.to_dense()
    }

    pub fn into_inner(self) -> SymmetricMatrix {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ar1(rho: f64, m: usize) -> SymmetricMatrix {
        let mut a = SymmetricMatrix::zeros(m);
        for j in 0..m {
            for k in 0..=j {
                a.set(j, k, rho.powi((j - k) as i32));
            }
        }
        a
    }

    // Real roots of the monic cubic x^3 + b x^2 + c x + d by bisection on
    // the sign changes between the critical points.
    fn cubic_roots(b: f64, c: f64, d: f64) -> [f64; 3] {
        let p = |x: f64| ((x + b) * x + c) * x + d;
        let disc = (4.0 * b * b - 12.0 * c).sqrt();
        let c1 = (-2.0 * b - disc) / 6.0;
        let c2 = (-2.0 * b + disc) / 6.0;
        let bisect = |mut lo: f64, mut hi: f64| {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if (p(lo) < 0.0) == (p(mid) < 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        [bisect(-100.0, c1), bisect(c1, c2), bisect(c2, 100.0)]
    }

    // Scaling and squaring with a 50-term Taylor series.
    fn exp_series(a: &DMatrix<f64>) -> DMatrix<f64> {
        let norm = a.iter().map(|v| v.abs()).fold(0.0, f64::max) * a.nrows() as f64;
        let s = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
        let scaled = a / 2f64.powi(s);
        let n = a.nrows();
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..50 {
            term = &term * &scaled / k as f64;
            sum += &term;
        }
        for _ in 0..s {
            sum = &sum * &sum;
        }
        sum
    }

    // Inverse scaling and squaring: Denman-Beavers square roots, then the
    // Mercator series for log(I - X).
    fn log_series(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let id = DMatrix::<f64>::identity(n, n);
        let mut y = a.clone();
        let roots = 6;
        for _ in 0..roots {
            let mut yk = y.clone();
            let mut zk = id.clone();
            for _ in 0..60 {
                let yi = yk.clone().try_inverse().unwrap();
                let zi = zk.clone().try_inverse().unwrap();
                let yn = (&yk + zi) * 0.5;
                let zn = (&zk + yi) * 0.5;
                yk = yn;
                zk = zn;
            }
            y = yk;
        }
        let x = &id - &y;
        let mut pow = x.clone();
        let mut sum = DMatrix::<f64>::zeros(n, n);
        for k in 1..400 {
            sum -= &pow / k as f64;
            pow = &pow * &x;
        }
        sum * 2f64.powi(roots)
    }

    #[test]
    fn eigh_identity() {
        let e = eigh(&SymmetricMatrix::identity(3)).unwrap();
        for l in e.eigenvalues.iter() {
            assert_abs_diff_eq!(*l, 1.0, epsilon = 1e-14);
        }
        let qtq = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((qtq - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn eigh_two_by_two_correlation() {
        let a = SymmetricMatrix::from_rows(&[&[1.0, 0.5], &[0.5, 1.0]]);
        let e = eigh(&a).unwrap();
        assert_abs_diff_eq!(e.eigenvalues[0], 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(e.eigenvalues[1], 1.5, epsilon = 1e-14);
    }

    #[test]
    fn eigh_ar1_matches_cubic_roots() {
        let a = ar1(0.5, 3);
        // det(xI - A) for A = [[1,r,r2],[r,1,r],[r2,r,1]], t = x - 1:
        // t^3 - (2r^2 + r^4) t - 2 r^2 r2 with r2 = r^2.
        let (r, r2) = (0.5f64, 0.25f64);
        let s = 2.0 * r * r + r2 * r2;
        let q = 2.0 * r * r * r2;
        // Expand (x-1)^3 - s (x-1) - q.
        let b = -3.0;
        let c = 3.0 - s;
        let d = -1.0 + s - q;
        let roots = cubic_roots(b, c, d);
        let e = eigh(&a).unwrap();
        for (got, want) in e.eigenvalues.iter().zip(roots) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
        let rec = e.reconstruct();
        assert!(rec.max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn eigh_rejects_nan() {
        let mut a = SymmetricMatrix::identity(2);
        a.set(1, 0, f64::NAN);
        assert!(matches!(eigh(&a), Err(Error::NonFinite)));
        assert!(matches!(matrix_exp(&a), Err(Error::NonFinite)));
    }

    #[test]
    fn log_of_identity_is_zero() {
        let l = matrix_log(&SymmetricMatrix::identity(4)).unwrap();
        assert!(l.max_abs() < 1e-15);
    }

    #[test]
    fn log_two_by_two_closed_form() {
        for &rho in &[-0.9, -0.3, 0.0, 0.5, 0.95] {
            let a = SymmetricMatrix::from_rows(&[&[1.0, rho], &[rho, 1.0]]);
            let l = matrix_log(&a).unwrap();
            assert_abs_diff_eq!(l.get(1, 0), 0.5 * ((1.0 + rho) / (1.0 - rho)).ln(), epsilon = 1e-13);
            assert_abs_diff_eq!(l.get(0, 0), 0.5 * (1.0 - rho * rho).ln(), epsilon = 1e-13);
            assert_abs_diff_eq!(l.get(1, 1), 0.5 * (1.0 - rho * rho).ln(), epsilon = 1e-13);
        }
    }

    #[test]
    fn log_ar1_matches_series_oracle() {
        let a = ar1(0.5, 3);
        let got = matrix_log(&a).unwrap().to_dense();
        let want = log_series(&a.to_dense());
        assert!((got - want).amax() < 1e-10);
    }

    #[test]
    fn log_rejects_singular() {
        let a = SymmetricMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(matches!(matrix_log(&a), Err(Error::NotPositiveDefinite { .. })));
        let neg = SymmetricMatrix::from_diagonal(&[1.0, -1.0]);
        assert!(matches!(matrix_log(&neg), Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn exp_of_zero_and_diagonal() {
        let e = matrix_exp(&SymmetricMatrix::zeros(3)).unwrap();
        assert!(e.max_abs_diff(&SymmetricMatrix::identity(3)) < 1e-15);
        let d = matrix_exp(&SymmetricMatrix::from_diagonal(&[0.3, -1.2])).unwrap();
        assert_abs_diff_eq!(d.get(0, 0), 0.3f64.exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(d.get(1, 1), (-1.2f64).exp(), epsilon = 1e-14);
        assert_eq!(d.get(1, 0), 0.0);
    }

    #[test]
    fn exp_random_matches_taylor_oracle() {
        let vals = [
            0.3, -1.1, 0.7, 0.25, 2.0, -0.4, 0.9, 0.15, -0.6, 1.3,
        ];
        let mut a = SymmetricMatrix::zeros(4);
        let mut it = vals.iter();
        for j in 0..4 {
            for k in 0..=j {
                a.set(j, k, *it.next().unwrap());
            }
        }
        let got = matrix_exp(&a).unwrap().to_dense();
        let want = exp_series(&a.to_dense());
        let scale = want.amax();
        assert!((got - want).amax() < 1e-11 * scale);
    }

    #[test]
    fn vecl_golden_order() {
        let a = SymmetricMatrix::from_rows(&[
            &[0.0, 1.0, 2.0, 3.0],
            &[1.0, 0.0, 4.0, 5.0],
            &[2.0, 4.0, 0.0, 6.0],
            &[3.0, 5.0, 6.0, 0.0],
        ]);
        // (1,0),(2,0),(3,0),(2,1),(3,1),(3,2)
        assert_eq!(vecl(&a), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let pairs: Vec<_> = vecl_pairs(4).collect();
        assert_eq!(pairs, vec![(1, 0), (2, 0), (3, 0), (2, 1), (3, 1), (3, 2)]);
        for (idx, (j, k)) in pairs.iter().enumerate() {
            assert_eq!(vecl_index(4, *j, *k), idx);
            assert_eq!(vecl_index(4, *k, *j), idx);
        }
    }

    #[test]
    fn vecl_small_cases() {
        let a = SymmetricMatrix::from_rows(&[&[1.0, 0.3], &[0.3, 1.0]]);
        assert_eq!(vecl(&a), vec![0.3]);
        let b = vecl_inverse(&[0.7], &[0.0, 0.0]).unwrap();
        assert_eq!(b.to_dense(), DMatrix::from_row_slice(2, 2, &[0.0, 0.7, 0.7, 0.0]));
        let c = vecl_inverse(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(c.dim(), 3);
        assert_eq!(c.get(2, 1), 3.0);
        assert_eq!(c.diagonal(), vec![4.0, 5.0, 6.0]);
    }

    #[test]
    fn vecl_inverse_bad_length() {
        assert!(matches!(vecl_inverse(&[0.0; 4], &[0.0; 3]), Err(Error::BadLength { len: 4 })));
        assert!(matches!(
            vecl_inverse(&[0.0; 3], &[0.0; 2]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert_eq!(vecl_inverse(&[], &[2.0]).unwrap().get(0, 0), 2.0);
    }

    #[test]
    fn correlation_validation() {
        assert!(CorrelationMatrix::new(ar1(0.5, 4)).is_ok());
        let mut bad = ar1(0.5, 3);
        bad.set(1, 1, 1.0 + 1e-14);
        assert!(matches!(CorrelationMatrix::new(bad), Err(Error::NotCorrelation(_))));
        let out_of_range = SymmetricMatrix::from_rows(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert!(CorrelationMatrix::new(out_of_range).is_err());
        // Entries in range but jointly indefinite.
        let indefinite = SymmetricMatrix::from_rows(&[
            &[1.0, 0.9, -0.9],
            &[0.9, 1.0, 0.9],
            &[-0.9, 0.9, 1.0],
        ]);
        assert!(matches!(
            CorrelationMatrix::new(indefinite),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
