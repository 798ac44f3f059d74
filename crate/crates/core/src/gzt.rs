//! The generalized z-transformation `gamma = vecl(log R)` of a correlation
//! matrix, its inverse and the analytic Jacobian `d vecl(R) / d gamma`.
//!
//! The inverse solves for the diagonal `x` that makes `exp(G[x])` a
//! correlation matrix, where `G[x]` is the symmetric matrix with `gamma`
//! below the diagonal and `x` on it, through the fixed-point iteration
//! `x <- x - log diag(exp(G[x]))`.
//!
//! The Jacobian works in `vec` coordinates (column-major, index `r + m*c` for
//! entry `(r, c)`). With `G = Q diag(l) Q'`,
//!
//! ```text
//! A  = (Q kron Q) Xi (Q kron Q)'                  d vec R = A d vec G
//! B  = A - A Ed' (Ed A Ed')^-1 Ed A               unit-diagonal constraint
//! J  = El B (El + Eu)'
//! ```
//!
//! where `Xi` holds the divided differences of `exp` over the spectrum and
//! `El`, `Eu`, `Ed` select the strict lower triangle, its transpose and the
//! diagonal. The selections are kept as index tables.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::matcalc::{
    self, dim_from_pair_count, eigh, pair_count, vecl_pairs, CorrelationMatrix,
    EigenDecomposition, SymmetricMatrix,
};

/// Stopping tolerance on `max |x_k - x_{k-1}|` for the inverse map.
pub const INVERSE_TOL: f64 = 1e-12;
/// Iteration cap for the inverse map.
pub const INVERSE_MAX_ITER: usize = 200;
/// Eigenvalue gap below which the divided difference uses its limit.
pub const REPEATED_EIGEN_TOL: f64 = 1e-10;

/// Unconstrained image `vecl(log R)` of an `m x m` correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GztVector {
    values: Vec<f64>,
    dim: usize,
}

impl GztVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let dim = dim_from_pair_count(values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("gamma".into()));
        }
        Ok(Self { values, dim })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; pair_count(dim)],
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn gzt_forward(r: &CorrelationMatrix) -> Result<GztVector> {
    let g = matcalc::matrix_log(r.as_symmetric())?;
    Ok(GztVector {
        values: matcalc::vecl(&g),
        dim: r.dim(),
    })
}

/// Output of the fixed-point inverse together with solver diagnostics.
#[derive(Debug, Clone)]
pub struct InverseSolution {
    pub corr: CorrelationMatrix,
    /// Eigen-decomposition of `log R = G[x*]`, reusable for the Jacobian.
    pub log_eigen: EigenDecomposition,
    /// Fixed-point iterations performed.
    pub iterations: usize,
    pub last_step: f64,
}

pub fn gzt_inverse(gamma: &GztVector) -> Result<CorrelationMatrix> {
    gzt_inverse_detailed(gamma).map(|s| s.corr)
}

pub fn gzt_inverse_detailed(gamma: &GztVector) -> Result<InverseSolution> {
    let m = gamma.dim();
    let mut g = matcalc::vecl_inverse(&gamma.values, &vec![0.0; m])?;
    if m == 1 {
        return Ok(InverseSolution {
            corr: CorrelationMatrix::identity(1),
            log_eigen: eigh(&g)?,
            iterations: 0,
            last_step: 0.0,
        });
    }
    let mut iterations = 0;
    let mut last_step = f64::INFINITY;
    let mut eig = eigh(&g)?;
    while iterations < INVERSE_MAX_ITER {
        let e = eig.map_spectrum(f64::exp);
        last_step = 0.0;
        for j in 0..m {
            let step = e.get(j, j).ln();
            last_step = last_step.max(step.abs());
            g.set(j, j, g.get(j, j) - step);
        }
        iterations += 1;
        eig = eigh(&g)?;
        if !last_step.is_finite() {
            return Err(Error::NonFinite);
        }
        if last_step < INVERSE_TOL {
            break;
        }
    }
    if last_step >= INVERSE_TOL {
        return Err(Error::MaxIterations {
            iterations,
            last_step,
        });
    }
    let mut r = eig.map_spectrum(f64::exp);
    for j in 0..m {
        r.set(j, j, 1.0);
    }
    Ok(InverseSolution {
        corr: CorrelationMatrix::new_unchecked(r),
        log_eigen: eig,
        iterations,
        last_step,
    })
}

/// Tunables for the Jacobian. The default is the production setting; other
/// values exist for fault-injection diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct JacobianOptions {
    pub repeated_eigen_tol: f64,
}

impl Default for JacobianOptions {
    fn default() -> Self {
        Self {
            repeated_eigen_tol: REPEATED_EIGEN_TOL,
        }
    }
}

/// Intermediate matrices of the Jacobian computation.
#[derive(Debug, Clone)]
pub struct JacobianWorkspace {
    dim: usize,
    /// `d vec R / d vec G`, `m^2 x m^2`.
    pub a: DMatrix<f64>,
    /// Diagonal of `Xi`, indexed by `r + m*s`.
    pub xi: DVector<f64>,
    /// Constrained derivative, `m^2 x m^2`, symmetrized.
    pub b: DMatrix<f64>,
    /// `vec` positions of the strict lower triangle in `vecl` order.
    pub lower_index: Vec<usize>,
    /// `vec` positions of the transposed pairs in `vecl` order.
    pub upper_index: Vec<usize>,
    /// `vec` positions of the diagonal.
    pub diag_index: Vec<usize>,
}

impl JacobianWorkspace {
    pub fn from_correlation(r: &CorrelationMatrix) -> Result<Self> {
        let eig = eigh(r.as_symmetric())?;
        let log_eigen = EigenDecomposition {
            eigenvalues: eig.eigenvalues.map(f64::ln),
            eigenvectors: eig.eigenvectors,
        };
        Self::from_log_eigen(&log_eigen, JacobianOptions::default())
    }

    /// Builds from the eigen-decomposition of `G = log R`.
    pub fn from_log_eigen(log_eigen: &EigenDecomposition, opts: JacobianOptions) -> Result<Self> {
        let m = log_eigen.dim();
        let m2 = m * m;
        let lam = &log_eigen.eigenvalues;
        let q = &log_eigen.eigenvectors;

        let mut xi = DVector::zeros(m2);
        for s in 0..m {
            for r in 0..m {
                let (lr, ls) = (lam[r], lam[s]);
                xi[r + m * s] = if (lr - ls).abs() < opts.repeated_eigen_tol {
                    lr.exp()
                } else {
                    (lr.exp() - ls.exp()) / (lr - ls)
                };
            }
        }

        let qq = q.kronecker(q);
        let mut scaled = qq.clone();
        for (c, mut col) in scaled.column_iter_mut().enumerate() {
            col *= xi[c];
        }
        let a = &scaled * qq.transpose();

        let diag_index: Vec<usize> = (0..m).map(|j| j + m * j).collect();
        let lower_index: Vec<usize> = vecl_pairs(m).map(|(j, k)| j + m * k).collect();
        let upper_index: Vec<usize> = vecl_pairs(m).map(|(j, k)| k + m * j).collect();

        // Y = A Ed', C = Ed A Ed'
        let y = a.select_columns(&diag_index);
        let mut c = y.select_rows(&diag_index);
        c = (&c + c.transpose()) * 0.5;
        let chol = c
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?;
        let cinv_yt = chol.solve(&y.transpose());
        let mut b = &a - &y * cinv_yt;
        b = (&b + b.transpose()) * 0.5;

        Ok(Self {
            dim: m,
            a,
            xi,
            b,
            lower_index,
            upper_index,
            diag_index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `d vecl(R) / d gamma`, rows and columns in `vecl` order.
    pub fn jacobian(&self) -> DMatrix<f64> {
        let n = self.lower_index.len();
        DMatrix::from_fn(n, n, |p, q| {
            let row = self.lower_index[p];
            self.b[(row, self.lower_index[q])] + self.b[(row, self.upper_index[q])]
        })
    }
}

pub fn gzt_jacobian(r: &CorrelationMatrix) -> Result<DMatrix<f64>> {
    Ok(JacobianWorkspace::from_correlation(r)?.jacobian())
}

pub fn gzt_jacobian_with(r: &CorrelationMatrix, opts: JacobianOptions) -> Result<DMatrix<f64>> {
    let eig = eigh(r.as_symmetric())?;
    let log_eigen = EigenDecomposition {
        eigenvalues: eig.eigenvalues.map(f64::ln),
        eigenvectors: eig.eigenvectors,
    };
    Ok(JacobianWorkspace::from_log_eigen(&log_eigen, opts)?.jacobian())
}

/// `d vecl(R) / d gamma` from the eigen-decomposition of `log R`, evaluating
/// only the entries of `A` the contraction touches. Each entry of `A` is
/// `A[(a,b),(c,d)] = u_ac' Xi u_bd` with `u_ac[r] = Q[a,r] Q[c,r]`.
pub fn pair_jacobian(log_eigen: &EigenDecomposition, opts: JacobianOptions) -> Result<DMatrix<f64>> {
    let m = log_eigen.dim();
    let np = pair_count(m);
    if np == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let lam = &log_eigen.eigenvalues;
    let q = &log_eigen.eigenvectors;
    let xi = DMatrix::from_fn(m, m, |r, s| {
        let (lr, ls) = (lam[r], lam[s]);
        if (lr - ls).abs() < opts.repeated_eigen_tol {
            lr.exp()
        } else {
            (lr.exp() - ls.exp()) / (lr - ls)
        }
    });
    // u[a*m + c] and xu[a*m + c] = Xi u_ac, stored as columns.
    let u = DMatrix::from_fn(m, m * m, |r, ac| q[(ac / m, r)] * q[(ac % m, r)]);
    let xu = &xi * &u;
    let a_entry = |a: usize, b: usize, c: usize, d: usize| u.column(a * m + c).dot(&xu.column(b * m + d));

    let pairs: Vec<(usize, usize)> = vecl_pairs(m).collect();
    let mut c = DMatrix::from_fn(m, m, |t, s| a_entry(t, t, s, s));
    c = (&c + c.transpose()) * 0.5;
    // Y[p, t] = A[(j,k),(t,t)]
    let y = DMatrix::from_fn(np, m, |p, t| {
        let (j, k) = pairs[p];
        a_entry(j, k, t, t)
    });
    let chol = c
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?;
    let cinv_yt = chol.solve(&y.transpose());
    let correction = &y * cinv_yt;
    Ok(DMatrix::from_fn(np, np, |p, qi| {
        let (j, k) = pairs[p];
        let (l, s) = pairs[qi];
        let lower = a_entry(j, k, l, s);
        let upper = a_entry(j, k, s, l);
        lower + upper - (correction[(p, qi)] + correction[(qi, p)])
    }))
}

fn check_permutation(perm: &[usize], m: usize) -> Result<()> {
    if perm.len() != m {
        return Err(Error::BadPermutation { dim: m });
    }
    let mut seen = vec![false; m];
    for &p in perm {
        if p >= m || seen[p] {
            return Err(Error::BadPermutation { dim: m });
        }
        seen[p] = true;
    }
    Ok(())
}

/// Relabels `R`: output entry `(i, j)` is input entry `(perm[i], perm[j])`.
pub fn permute(r: &CorrelationMatrix, perm: &[usize]) -> Result<CorrelationMatrix> {
    let m = r.dim();
    check_permutation(perm, m)?;
    let mut out = SymmetricMatrix::zeros(m);
    for i in 0..m {
        for j in 0..=i {
            out.set(i, j, r.get(perm[i], perm[j]));
        }
    }
    Ok(CorrelationMatrix::new_unchecked(out))
}

/// Pair-index permutation induced by `perm`: entry `p` of the result is the
/// `vecl` position in the original ordering of output pair `p`.
pub fn pair_permutation(perm: &[usize]) -> Result<Vec<usize>> {
    let m = perm.len();
    check_permutation(perm, m)?;
    Ok(vecl_pairs(m)
        .map(|(i, j)| matcalc::vecl_index(m, perm[i], perm[j]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ar1(rho: f64, m: usize) -> CorrelationMatrix {
        CorrelationMatrix::from_dense(&DMatrix::from_fn(m, m, |j, k| {
            rho.powi((j as i32 - k as i32).abs())
        }))
        .unwrap()
    }

    #[test]
    fn forward_identity_is_zero() {
        let g = gzt_forward(&CorrelationMatrix::identity(5)).unwrap();
        assert_eq!(g.values().len(), 10);
        assert!(g.values().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn forward_two_by_two_is_fisher_z() {
        let r = ar1(0.5, 2);
        let g = gzt_forward(&r).unwrap();
        assert_abs_diff_eq!(g.values()[0], 0.5f64.atanh(), epsilon = 1e-14);
        assert_abs_diff_eq!(g.values()[0], 0.549306, epsilon = 1e-6);
    }

    #[test]
    fn forward_ar1_against_spectral_oracle() {
        // Oracle: cyclic Jacobi rotations, written independently of eigh.
        let r = ar1(0.5, 3).to_dense();
        let mut a = r.clone();
        let mut v = DMatrix::<f64>::identity(3, 3);
        for _ in 0..50 {
            for p in 0..3 {
                for q in (p + 1)..3 {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    let mut rot = DMatrix::<f64>::identity(3, 3);
                    rot[(p, p)] = c;
                    rot[(q, q)] = c;
                    rot[(p, q)] = s;
                    rot[(q, p)] = -s;
                    a = rot.transpose() * &a * &rot;
                    v = &v * rot;
                }
            }
        }
        let logd = DMatrix::from_diagonal(&a.diagonal().map(f64::ln));
        let log_r = &v * logd * v.transpose();
        let want = [log_r[(1, 0)], log_r[(2, 0)], log_r[(2, 1)]];
        let got = gzt_forward(&ar1(0.5, 3)).unwrap();
        for (g, w) in got.values().iter().zip(want) {
            assert_abs_diff_eq!(*g, w, epsilon = 1e-12);
        }
        let back = gzt_inverse(&got).unwrap();
        assert!(back.as_symmetric().max_abs_diff(ar1(0.5, 3).as_symmetric()) < 1e-10);
    }

    #[test]
    fn inverse_zero_is_identity() {
        for m in 1..6 {
            let r = gzt_inverse(&GztVector::zeros(m)).unwrap();
            assert!(r.as_symmetric().max_abs_diff(&SymmetricMatrix::identity(m)) < 1e-15);
        }
    }

    #[test]
    fn inverse_fisher_z() {
        let r = gzt_inverse(&GztVector::new(vec![0.549306]).unwrap()).unwrap();
        assert_abs_diff_eq!(r.get(1, 0), 0.549306f64.tanh(), epsilon = 1e-12);
        assert_abs_diff_eq!(r.get(1, 0), 0.5, epsilon = 1e-6);
    }

    #[test]
    fn inverse_round_trip_m5() {
        let gamma: Vec<f64> = (0..10).map(|i| ((i as f64) * 0.7).sin()).collect();
        let sol = gzt_inverse_detailed(&GztVector::new(gamma.clone()).unwrap()).unwrap();
        assert!(sol.iterations > 0 && sol.iterations < INVERSE_MAX_ITER);
        let r = CorrelationMatrix::new(sol.corr.as_symmetric().clone()).unwrap();
        let back = gzt_forward(&r).unwrap();
        for (a, b) in back.values().iter().zip(&gamma) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-9);
        }
    }

    #[test]
    fn inverse_extreme_gamma_errors_or_converges() {
        // Very large entries either converge or hit the documented cap.
        let res = gzt_inverse(&GztVector::new(vec![40.0, -40.0, 40.0]).unwrap());
        match res {
            Ok(r) => assert_eq!(r.get(0, 0), 1.0),
            Err(e) => assert!(matches!(e, Error::MaxIterations { .. } | Error::NotPositiveDefinite { .. })),
        }
    }

    #[test]
    fn gamma_rejects_bad_length() {
        assert!(matches!(GztVector::new(vec![0.0; 4]), Err(Error::BadLength { .. })));
        assert!(GztVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn jacobian_ar_half_matches_published_values() {
        let want = [[0.736, 0.188, 0.014], [0.188, 0.910, 0.188], [0.014, 0.188, 0.736]];
        let j = gzt_jacobian(&ar1(0.5, 3)).unwrap();
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(j[(r, c)], want[r][c], epsilon = 5e-4);
            }
        }
        let jn = gzt_jacobian(&ar1(-0.5, 3)).unwrap();
        let signs = [[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0], [1.0, -1.0, 1.0]];
        for r in 0..3 {
            for c in 0..3 {
                assert_abs_diff_eq!(jn[(r, c)], signs[r][c] * want[r][c], epsilon = 5e-4);
            }
        }
    }

    fn fd_jacobian(r: &CorrelationMatrix, h: f64) -> DMatrix<f64> {
        let gamma = gzt_forward(r).unwrap().into_values();
        let n = gamma.len();
        let mut out = DMatrix::zeros(n, n);
        for c in 0..n {
            let mut gp = gamma.clone();
            let mut gm = gamma.clone();
            gp[c] += h;
            gm[c] -= h;
            let rp = matcalc::vecl(gzt_inverse(&GztVector::new(gp).unwrap()).unwrap().as_symmetric());
            let rm = matcalc::vecl(gzt_inverse(&GztVector::new(gm).unwrap()).unwrap().as_symmetric());
            for p in 0..n {
                out[(p, c)] = (rp[p] - rm[p]) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn jacobian_identity_matches_finite_differences() {
        let r = CorrelationMatrix::identity(3);
        let j = gzt_jacobian(&r).unwrap();
        let fd = fd_jacobian(&r, 1e-6);
        assert!((&j - &fd).amax() < 1e-6 * fd.amax().max(1.0), "{j} vs {fd}");
        // At the identity every eigenvalue repeats, so the Jacobian is I.
        assert!((j - DMatrix::<f64>::identity(3, 3)).amax() < 1e-8);
    }

    #[test]
    fn jacobian_workspace_invariants() {
        let ws = JacobianWorkspace::from_correlation(&ar1(0.6, 4)).unwrap();
        assert!(ws.xi.iter().all(|&x| x > 0.0));
        assert!((&ws.a - ws.a.transpose()).amax() < 1e-12);
        assert!(ws.a.clone().cholesky().is_some());
        let ev = ws.b.clone().symmetric_eigenvalues();
        assert!(ev.min() > -1e-10);
        assert_eq!(ws.diag_index, vec![0, 5, 10, 15]);
    }

    #[test]
    fn pair_jacobian_agrees_with_workspace() {
        for (rho, m) in [(0.5, 3), (-0.3, 5), (0.8, 6), (0.0, 4)] {
            let r = ar1(rho, m);
            let full = gzt_jacobian(&r).unwrap();
            let eig = eigh(r.as_symmetric()).unwrap();
            let log_eigen = EigenDecomposition {
                eigenvalues: eig.eigenvalues.map(f64::ln),
                eigenvectors: eig.eigenvectors,
            };
            let fast = pair_jacobian(&log_eigen, JacobianOptions::default()).unwrap();
            assert!((&full - &fast).amax() < 1e-12, "m={m}: {full} vs {fast}");
        }
    }

    #[test]
    fn permute_identity_and_swap() {
        let r = ar1(0.4, 3);
        assert_eq!(permute(&r, &[0, 1, 2]).unwrap(), r);
        let r2 = ar1(0.4, 2);
        assert_eq!(permute(&r2, &[1, 0]).unwrap(), r2);
        assert!(matches!(permute(&r, &[0, 0, 1]), Err(Error::BadPermutation { .. })));
        assert!(matches!(permute(&r, &[0, 1]), Err(Error::BadPermutation { .. })));
    }

    #[test]
    fn permute_relabels_gamma() {
        let r = ar1(0.7, 4);
        let perm = [2, 0, 3, 1];
        let lhs = gzt_forward(&permute(&r, &perm).unwrap()).unwrap();
        let g = gzt_forward(&r).unwrap();
        let map = pair_permutation(&perm).unwrap();
        for (p, &src) in map.iter().enumerate() {
            assert_abs_diff_eq!(lhs.values()[p], g.values()[src], epsilon = 1e-12);
        }
    }
}
