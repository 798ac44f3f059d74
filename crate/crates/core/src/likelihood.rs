//! Gaussian log-likelihood of the joint mean / log-variance / matrix-log
//! correlation model, its score, the Fisher information and a quasi-Fisher
//! scoring fitter.
//!
//! Reported log-likelihoods omit the `-(m_i/2) log 2 pi` constant:
//! `l = -1/2 sum_i (log|D_i R_i D_i| + nu_i' (D_i R_i D_i)^-1 nu_i)`.
//!
//! Parameters are ordered `(beta, alpha, lambda)` everywhere.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gzt::{gzt_inverse_detailed, pair_jacobian, GztVector, JacobianOptions};
use crate::matcalc::{matrix_log, pair_count, vecl, vecl_pairs, CorrelationMatrix, EigenDecomposition, SymmetricMatrix};
use crate::model::{CoefficientLabel, GroupData, GroupedDataset, ParameterVector};

/// Per-group quantities entering the likelihood.
#[derive(Debug, Clone)]
pub struct LikelihoodTerms {
    /// Residual `y_i - mu_i`.
    pub nu: DVector<f64>,
    /// Diagonal of `D_i`.
    pub sd: DVector<f64>,
    pub corr: CorrelationMatrix,
    /// `D^-1 nu nu' D^-1`.
    pub rhat: DMatrix<f64>,
    /// `diag(R^-1 Rhat)`.
    pub h: DVector<f64>,
}

/// Covariance structure of one group at given `(alpha, lambda)`.
#[derive(Debug, Clone)]
struct GroupCov {
    sd: DVector<f64>,
    logvar_sum: f64,
    r: DMatrix<f64>,
    r_inv: DMatrix<f64>,
    logdet_r: f64,
    log_eigen: Option<EigenDecomposition>,
    jac: Option<DMatrix<f64>>,
}

impl GroupCov {
    fn new(g: &GroupData, alpha: &DVector<f64>, lambda: &DVector<f64>) -> Result<Self> {
        let logvar = &g.z * lambda;
        if logvar.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        let sd = logvar.map(|v| (0.5 * v).exp());
        let (r, log_eigen) = if g.size() == 1 {
            (DMatrix::identity(1, 1), None)
        } else {
            let gamma = &g.w * alpha;
            let sol = gzt_inverse_detailed(&GztVector::new(gamma.as_slice().to_vec())?)?;
            (sol.corr.to_dense(), Some(sol.log_eigen))
        };
        let chol = r
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?;
        let logdet_r = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let r_inv = chol.inverse();
        Ok(Self {
            sd,
            logvar_sum: logvar.sum(),
            r,
            r_inv,
            logdet_r,
            log_eigen,
            jac: None,
        })
    }

    fn with_jacobian(mut self) -> Result<Self> {
        if let Some(le) = &self.log_eigen {
            self.jac = Some(pair_jacobian(le, JacobianOptions::default())?);
        }
        Ok(self)
    }

    fn standardized(&self, g: &GroupData, beta: &DVector<f64>) -> DVector<f64> {
        (&g.y - &g.x * beta).component_div(&self.sd)
    }

    fn loglik(&self, e: &DVector<f64>) -> f64 {
        let quad = (&self.r_inv * e).dot(e);
        -0.5 * (self.logvar_sum + self.logdet_r + quad)
    }

    /// `D^-1 X`.
    fn scaled_x(&self, g: &GroupData) -> DMatrix<f64> {
        let mut xs = g.x.clone();
        for (j, mut row) in xs.row_iter_mut().enumerate() {
            row /= self.sd[j];
        }
        xs
    }
}

fn build_covs(data: &GroupedDataset, alpha: &DVector<f64>, lambda: &DVector<f64>, jacobian: bool) -> Result<Vec<GroupCov>> {
    data.groups
        .par_iter()
        .map(|g| {
            let c = GroupCov::new(g, alpha, lambda)?;
            if jacobian && alpha.len() > 0 {
                c.with_jacobian()
            } else {
                Ok(c)
            }
        })
        .collect()
}

fn total_loglik(data: &GroupedDataset, covs: &[GroupCov], beta: &DVector<f64>) -> f64 {
    let parts: Vec<f64> = data
        .groups
        .par_iter()
        .zip(covs.par_iter())
        .map(|(g, c)| c.loglik(&c.standardized(g, beta)))
        .collect();
    parts.iter().sum()
}

/// Mean-block score and information of one group.
fn beta_part(g: &GroupData, cov: &GroupCov, e: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let xs = cov.scaled_x(g);
    let rxs = &cov.r_inv * &xs;
    (rxs.tr_mul(e), xs.tr_mul(&rxs))
}

/// `(alpha, lambda)`-block score and information of one group.
#[derive(Debug, Clone)]
struct ThetaPart {
    s2: DVector<f64>,
    s3: DVector<f64>,
    i22: DMatrix<f64>,
    i23: DMatrix<f64>,
    i33: DMatrix<f64>,
    j: Option<DMatrix<f64>>,
    h: Option<DMatrix<f64>>,
}

/// `J[(j,k),(l,s)] = a_jl a_ks + a_js a_kl` over `vecl` pairs.
fn j_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let pairs: Vec<(usize, usize)> = vecl_pairs(m).collect();
    DMatrix::from_fn(pairs.len(), pairs.len(), |p, q| {
        let (j, k) = pairs[p];
        let (l, s) = pairs[q];
        a[(j, l)] * a[(k, s)] + a[(j, s)] * a[(k, l)]
    })
}

/// `H[(j,k),l] = a_jk (delta_jl + delta_kl)`, the covariance of `v_j v_k`
/// with `e_l v_l` where `v = R^-1 e`.
fn h_matrix(a: &DMatrix<f64>) -> DMatrix<f64> {
    let m = a.nrows();
    let pairs: Vec<(usize, usize)> = vecl_pairs(m).collect();
    DMatrix::from_fn(pairs.len(), m, |p, l| {
        let (j, k) = pairs[p];
        let hits = (j == l) as u8 + (k == l) as u8;
        a[(j, k)] * hits as f64
    })
}

fn theta_part(g: &GroupData, cov: &GroupCov, e: &DVector<f64>, keep_cache: bool) -> ThetaPart {
    let (m, d, q) = (g.size(), g.w.ncols(), g.z.ncols());
    let a = &cov.r_inv;
    let v = a * e;
    let hvec = v.component_mul(e);
    let s3 = g.z.tr_mul(&hvec.add_scalar(-1.0)) * 0.5;
    let mut mid = a.component_mul(&cov.r);
    for j in 0..m {
        mid[(j, j)] += 1.0;
    }
    let i33 = g.z.tr_mul(&(&mid * &g.z)) * 0.25;

    let mut out = ThetaPart {
        s2: DVector::zeros(d),
        s3,
        i22: DMatrix::zeros(d, d),
        i23: DMatrix::zeros(d, q),
        i33,
        j: None,
        h: None,
    };
    if m < 2 || d == 0 {
        return out;
    }
    let jac = cov.jac.as_ref().expect("jacobian computed for groups with pairs");
    let eta = DVector::from_iterator(pair_count(m), vecl_pairs(m).map(|(j, k)| v[j] * v[k] - a[(j, k)]));
    let jw = jac * &g.w;
    out.s2 = jw.tr_mul(&eta);
    let jm = j_matrix(a);
    let hm = h_matrix(a);
    out.i22 = jw.tr_mul(&(&jm * &jw));
    out.i23 = jw.tr_mul(&(&hm * &g.z)) * 0.5;
    if keep_cache {
        out.j = Some(jm);
        out.h = Some(hm);
    }
    out
}

/// Blocks of the Fisher information. `I12 = I13 = 0`.
#[derive(Debug, Clone)]
pub struct FisherBlocks {
    pub i11: DMatrix<f64>,
    pub i22: DMatrix<f64>,
    pub i33: DMatrix<f64>,
    /// `d x q`.
    pub i23: DMatrix<f64>,
    /// Per-group `J_i`; empty unless requested through [`fisher_information`].
    pub j: Vec<Option<DMatrix<f64>>>,
    /// Per-group `H_i`; empty unless requested through [`fisher_information`].
    pub h: Vec<Option<DMatrix<f64>>>,
    r_inv: Vec<DMatrix<f64>>,
}

impl FisherBlocks {
    /// `(j, k)` element of `R_i^-1`, when caches were kept.
    pub fn a(&self, group: usize, j: usize, k: usize) -> Option<f64> {
        self.r_inv.get(group).map(|a| a[(j, k)])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.i11.nrows(), self.i22.nrows(), self.i33.nrows())
    }

    /// Full symmetric information in `(beta, alpha, lambda)` order.
    pub fn full(&self) -> DMatrix<f64> {
        let (p, d, q) = self.dims();
        let mut f = DMatrix::zeros(p + d + q, p + d + q);
        f.view_mut((0, 0), (p, p)).copy_from(&self.i11);
        f.view_mut((p, p), (d, d)).copy_from(&self.i22);
        f.view_mut((p + d, p + d), (q, q)).copy_from(&self.i33);
        f.view_mut((p, p + d), (d, q)).copy_from(&self.i23);
        f.view_mut((p + d, p), (q, d)).copy_from(&self.i23.transpose());
        f
    }

    /// Inverse information over the free coefficients, embedded in the full
    /// index space with zero rows and columns for fixed ones.
    pub fn covariance(&self, free: &[bool]) -> Result<DMatrix<f64>> {
        let full = self.full();
        let n = full.nrows();
        let idx: Vec<usize> = (0..n).filter(|&i| free.get(i).copied().unwrap_or(true)).collect();
        let sub = full.select_rows(&idx).select_columns(&idx);
        let inv = spd_inverse(&sub)?;
        let mut out = DMatrix::zeros(n, n);
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(i, j)] = inv[(a, b)];
            }
        }
        Ok(out)
    }
}

fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let sym = (m + m.transpose()) * 0.5;
    let chol = sym.cholesky().ok_or(Error::SingularInformation)?;
    let inv = chol.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInformation);
    }
    Ok(inv)
}

fn spd_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if m.nrows() == 0 {
        return Ok(b.clone());
    }
    let sym = (m + m.transpose()) * 0.5;
    let chol = sym.cholesky().ok_or(Error::SingularInformation)?;
    let x = chol.solve(b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInformation);
    }
    Ok(x)
}

pub fn log_likelihood(params: &ParameterVector, data: &GroupedDataset) -> Result<f64> {
    params.check_against(data)?;
    let covs = build_covs(data, &params.alpha, &params.lambda, false)?;
    Ok(total_loglik(data, &covs, &params.beta))
}

pub fn likelihood_terms(params: &ParameterVector, data: &GroupedDataset) -> Result<Vec<LikelihoodTerms>> {
    params.check_against(data)?;
    let covs = build_covs(data, &params.alpha, &params.lambda, false)?;
    Ok(data
        .groups
        .iter()
        .zip(covs)
        .map(|(g, c)| {
            let nu = &g.y - &g.x * &params.beta;
            let e = nu.component_div(&c.sd);
            let rhat = &e * e.transpose();
            let h = (&c.r_inv * &e).component_mul(&e);
            let corr = CorrelationMatrix::new_unchecked(SymmetricMatrix::from_dense_symmetrized(&c.r));
            LikelihoodTerms {
                nu,
                sd: c.sd,
                corr,
                rhat,
                h,
            }
        })
        .collect())
}

/// Per-group score vectors; their sum is [`score`].
pub fn group_scores(params: &ParameterVector, data: &GroupedDataset) -> Result<Vec<DVector<f64>>> {
    params.check_against(data)?;
    let covs = build_covs(data, &params.alpha, &params.lambda, true)?;
    let (p, d, q) = (data.p(), data.d(), data.q());
    Ok(data
        .groups
        .par_iter()
        .zip(covs.par_iter())
        .map(|(g, c)| {
            let e = c.standardized(g, &params.beta);
            let (s1, _) = beta_part(g, c, &e);
            let t = theta_part(g, c, &e, false);
            let mut s = DVector::zeros(p + d + q);
            s.rows_mut(0, p).copy_from(&s1);
            s.rows_mut(p, d).copy_from(&t.s2);
            s.rows_mut(p + d, q).copy_from(&t.s3);
            s
        })
        .collect())
}

pub fn score(params: &ParameterVector, data: &GroupedDataset) -> Result<DVector<f64>> {
    let parts = group_scores(params, data)?;
    let mut s = DVector::zeros(data.n_params());
    for part in &parts {
        s += part;
    }
    Ok(s)
}

struct Assembled {
    s: DVector<f64>,
    info: FisherBlocks,
}

fn assemble(data: &GroupedDataset, covs: &[GroupCov], beta: &DVector<f64>, keep_cache: bool) -> Assembled {
    let (p, d, q) = (data.p(), data.d(), data.q());
    let parts: Vec<(DVector<f64>, DMatrix<f64>, ThetaPart)> = data
        .groups
        .par_iter()
        .zip(covs.par_iter())
        .map(|(g, c)| {
            let e = c.standardized(g, beta);
            let (s1, i11) = beta_part(g, c, &e);
            (s1, i11, theta_part(g, c, &e, keep_cache))
        })
        .collect();
    let mut s = DVector::zeros(p + d + q);
    let mut info = FisherBlocks {
        i11: DMatrix::zeros(p, p),
        i22: DMatrix::zeros(d, d),
        i33: DMatrix::zeros(q, q),
        i23: DMatrix::zeros(d, q),
        j: Vec::new(),
        h: Vec::new(),
        r_inv: Vec::new(),
    };
    for (s1, i11, t) in parts {
        s.rows_mut(0, p).zip_apply(&s1, |a, b| *a += b);
        s.rows_mut(p, d).zip_apply(&t.s2, |a, b| *a += b);
        s.rows_mut(p + d, q).zip_apply(&t.s3, |a, b| *a += b);
        info.i11 += i11;
        info.i22 += t.i22;
        info.i33 += t.i33;
        info.i23 += t.i23;
        if keep_cache {
            info.j.push(t.j);
            info.h.push(t.h);
        }
    }
    for b in [&mut info.i11, &mut info.i22, &mut info.i33] {
        *b = (&*b + b.transpose()) * 0.5;
    }
    if keep_cache {
        info.r_inv = covs.iter().map(|c| c.r_inv.clone()).collect();
    }
    Assembled { s, info }
}

/// Fisher information with per-group `J_i`, `H_i` and `R_i^-1` caches.
pub fn fisher_information(params: &ParameterVector, data: &GroupedDataset) -> Result<FisherBlocks> {
    params.check_against(data)?;
    let covs = build_covs(data, &params.alpha, &params.lambda, true)?;
    let info = assemble(data, &covs, &params.beta, true).info;
    spd_inverse(&info.full())?;
    Ok(info)
}

/// Fitter settings.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Stop when `max |omega_{k+1} - omega_k| < tol`.
    pub tol: f64,
    /// Secondary guard: `max |score| < score_tol * (1 + |l|)` at the end.
    pub score_tol: f64,
    pub max_halvings: usize,
    /// Additional fits from perturbed starts; the best optimum is kept.
    pub restarts: usize,
    pub seed: u64,
    /// Coefficients held fixed, as `(flat index, value)`.
    pub fixed: Vec<(usize, f64)>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            tol: 1e-7,
            score_tol: 1e-6,
            max_halvings: 10,
            restarts: 0,
            seed: 0,
            fixed: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub loglik: f64,
    /// `max |omega_k - omega_{k-1}|`; zero for the starting point.
    pub step: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ParameterVector,
    pub loglik: f64,
    pub information: FisherBlocks,
    /// Square roots of the diagonal of the inverse information; NaN for
    /// fixed coefficients.
    pub std_errors: Vec<f64>,
    pub free: Vec<bool>,
    pub labels: Vec<CoefficientLabel>,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
    pub trace: Vec<TraceEntry>,
    pub n_groups: usize,
    pub n_obs: usize,
    pub fingerprint: u64,
}

impl FitResult {
    pub fn estimates(&self) -> Vec<f64> {
        self.params.to_vec()
    }

    /// Number of estimated (non-fixed) coefficients.
    pub fn n_free(&self) -> usize {
        self.free.iter().filter(|f| **f).count()
    }

    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        self.information.covariance(&self.free)
    }
}

fn free_mask(n: usize, fixed: &[(usize, f64)]) -> Result<Vec<bool>> {
    let mut free = vec![true; n];
    for &(i, v) in fixed {
        if i >= n {
            return Err(Error::DimensionMismatch {
                what: "fixed coefficient index",
                expected: n,
                got: i,
            });
        }
        if !v.is_finite() {
            return Err(Error::NonFiniteInput("fixed coefficient".into()));
        }
        free[i] = false;
    }
    Ok(free)
}

/// Least squares `argmin |y - X b|` over the free columns, with the fixed
/// columns' contribution subtracted from `y` first.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, start: &DVector<f64>, free: &[bool]) -> Result<DVector<f64>> {
    let idx: Vec<usize> = (0..x.ncols()).filter(|&i| free[i]).collect();
    let mut out = start.clone();
    if idx.is_empty() {
        return Ok(out);
    }
    let fixed_part = x * DVector::from_iterator(x.ncols(), (0..x.ncols()).map(|i| if free[i] { 0.0 } else { start[i] }));
    let xf = x.select_columns(&idx);
    let rhs = xf.tr_mul(&(y - fixed_part));
    let sol = spd_solve(&xf.tr_mul(&xf), &rhs)?;
    for (a, &i) in idx.iter().enumerate() {
        out[i] = sol[a];
    }
    Ok(out)
}

fn stack<F: Fn(&GroupData) -> &DMatrix<f64>>(data: &GroupedDataset, f: F) -> DMatrix<f64> {
    let rows: usize = data.groups.iter().map(|g| f(g).nrows()).sum();
    let cols = data.groups.first().map(|g| f(g).ncols()).unwrap_or(0);
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for g in &data.groups {
        let block = f(g);
        out.view_mut((r, 0), (block.nrows(), cols)).copy_from(block);
        r += block.nrows();
    }
    out
}

/// `E log chi^2_1`; centres the log squared residuals.
const LOG_CHISQ1_MEAN: f64 = -1.270_362_845_461_478;

/// Starting values: OLS for `beta`, least squares of `log r^2` on `Z` for
/// `lambda`, and for `alpha` the better (by likelihood) of zero and a least
/// squares fit of pooled empirical `vecl(log R)` per group size.
pub fn default_init(data: &GroupedDataset, fixed: &[(usize, f64)]) -> Result<ParameterVector> {
    let (p, d, q) = (data.p(), data.d(), data.q());
    let free = free_mask(p + d + q, fixed)?;
    let mut start = ParameterVector::zeros(p, d, q).to_vec();
    for &(i, v) in fixed {
        start[i] = v;
    }
    let start = ParameterVector::from_slice(&start, p, d, q)?;

    let x = stack(data, |g| &g.x);
    let y = DVector::from_iterator(data.n_obs(), data.groups.iter().flat_map(|g| g.y.iter().copied()));
    let beta = least_squares(&x, &y, &start.beta, &free[..p])?;
    let resid = &y - &x * &beta;
    let z = stack(data, |g| &g.z);
    let log_r2 = resid.map(|r| (r * r).max(1e-8).ln() - LOG_CHISQ1_MEAN);
    let lambda = least_squares(&z, &log_r2, &start.lambda, &free[p + d..])?;

    let base = ParameterVector {
        beta,
        alpha: start.alpha.clone(),
        lambda,
    };
    if d == 0 || !free[p..p + d].iter().any(|f| *f) {
        return Ok(base);
    }
    let mut best = base.clone();
    let mut best_ll = log_likelihood(&best, data).unwrap_or(f64::NEG_INFINITY);
    if let Some(alpha) = pooled_alpha(data, &base, &free[p..p + d]) {
        let cand = ParameterVector { alpha, ..base };
        if let Ok(ll) = log_likelihood(&cand, data) {
            if ll > best_ll {
                best = cand;
                best_ll = ll;
            }
        }
    }
    if !best_ll.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(best)
}

fn pooled_alpha(data: &GroupedDataset, base: &ParameterVector, free: &[bool]) -> Option<DVector<f64>> {
    use std::collections::BTreeMap;
    let mut by_size: BTreeMap<usize, Vec<DVector<f64>>> = BTreeMap::new();
    for g in &data.groups {
        if g.size() < 2 {
            continue;
        }
        let sd = (&g.z * &base.lambda).map(|v| (0.5 * v).exp());
        let e = (&g.y - &g.x * &base.beta).component_div(&sd);
        by_size.entry(g.size()).or_default().push(e);
    }
    let mut targets: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (m, es) in &by_size {
        if es.len() < m + 2 {
            continue;
        }
        let mut s = DMatrix::zeros(*m, *m);
        for e in es {
            s += e * e.transpose();
        }
        let dinv = s.diagonal().map(|v| 1.0 / v.sqrt());
        let r = DMatrix::from_fn(*m, *m, |j, k| if j == k { 1.0 } else { s[(j, k)] * dinv[j] * dinv[k] });
        if let Ok(log_r) = matrix_log(&SymmetricMatrix::from_dense_symmetrized(&r)) {
            targets.insert(*m, vecl(&log_r));
        }
    }
    if targets.is_empty() {
        return None;
    }
    let mut rows: Vec<DMatrix<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for g in &data.groups {
        if let Some(t) = targets.get(&g.size()) {
            rows.push(g.w.clone());
            ys.extend_from_slice(t);
        }
    }
    let d = base.alpha.len();
    let n: usize = rows.iter().map(|r| r.nrows()).sum();
    let mut w = DMatrix::zeros(n, d);
    let mut at = 0;
    for r in &rows {
        w.view_mut((at, 0), (r.nrows(), d)).copy_from(r);
        at += r.nrows();
    }
    least_squares(&w, &DVector::from_vec(ys), &base.alpha, free).ok()
}

/// Maximum likelihood fit by quasi-Fisher scoring.
///
/// Each iteration takes an exact generalized least squares step for `beta`
/// with `(alpha, lambda)` held, then a scoring step for `(alpha, lambda)`
/// using their joint information block. That step is halved (up to
/// `max_halvings` times) while the likelihood decreases or a correlation
/// matrix cannot be built; steps already below `tol` are taken as they are.
///
/// Returns [`Error::FitNotConverged`] carrying the last iterate when the
/// iteration budget runs out.
pub fn fit(data: &GroupedDataset, init: Option<&ParameterVector>, opts: &FitOptions) -> Result<FitResult> {
    let n = data.n_params();
    let free = free_mask(n, &opts.fixed)?;
    let start = match init {
        Some(p) => {
            p.check_against(data)?;
            let mut v = p.to_vec();
            for &(i, x) in &opts.fixed {
                v[i] = x;
            }
            v
        }
        None => default_init(data, &opts.fixed)?.to_vec(),
    };

    let mut best = fit_from(data, start.clone(), &free, opts);
    if opts.restarts > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        for _ in 0..opts.restarts {
            let perturbed: Vec<f64> = start
                .iter()
                .zip(&free)
                .map(|(&w, &f)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    if f {
                        w + 0.1 * w.abs().max(1.0) * z
                    } else {
                        w
                    }
                })
                .collect();
            let cand = fit_from(data, perturbed, &free, opts);
            best = pick_better(best, cand);
        }
    }
    best
}

fn outcome_rank(r: &Result<FitResult>) -> (u8, f64) {
    match r {
        Ok(f) => (2, f.loglik),
        Err(Error::FitNotConverged(f)) => (1, f.loglik),
        Err(_) => (0, f64::NEG_INFINITY),
    }
}

fn pick_better(a: Result<FitResult>, b: Result<FitResult>) -> Result<FitResult> {
    let (ra, la) = outcome_rank(&a);
    let (rb, lb) = outcome_rank(&b);
    if rb > ra || (rb == ra && lb > la) {
        b
    } else {
        a
    }
}

fn fit_from(data: &GroupedDataset, start: Vec<f64>, free: &[bool], opts: &FitOptions) -> Result<FitResult> {
    let (p, d, q) = (data.p(), data.d(), data.q());
    let omega = ParameterVector::from_slice(&start, p, d, q)?;
    omega.check_against(data)?;
    let mut beta = omega.beta;
    let mut theta = DVector::from_iterator(d + q, omega.alpha.iter().chain(omega.lambda.iter()).copied());
    let beta_idx: Vec<usize> = (0..p).filter(|&i| free[i]).collect();
    let theta_idx: Vec<usize> = (0..d + q).filter(|&i| free[p + i]).collect();

    let split = |t: &DVector<f64>| (t.rows(0, d).into_owned(), t.rows(d, q).into_owned());
    let (a0, l0) = split(&theta);
    let mut covs = build_covs(data, &a0, &l0, true)?;
    let mut ll = total_loglik(data, &covs, &beta);
    if !ll.is_finite() {
        return Err(Error::NonFinite);
    }
    let mut trace = vec![TraceEntry {
        iteration: 0,
        loglik: ll,
        step: 0.0,
        halvings: 0,
    }];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;

        // beta: generalized least squares given the current covariances
        let (mut s1, mut i11) = (DVector::zeros(p), DMatrix::zeros(p, p));
        let parts: Vec<_> = data
            .groups
            .par_iter()
            .zip(covs.par_iter())
            .map(|(g, c)| beta_part(g, c, &c.standardized(g, &beta)))
            .collect();
        for (s, i) in parts {
            s1 += s;
            i11 += i;
        }
        let db = spd_solve(
            &i11.select_rows(&beta_idx).select_columns(&beta_idx),
            &DVector::from_iterator(beta_idx.len(), beta_idx.iter().map(|&i| s1[i])),
        )?;
        let mut step = 0.0f64;
        for (a, &i) in beta_idx.iter().enumerate() {
            beta[i] += db[a];
            step = step.max(db[a].abs());
        }
        let ll_beta = total_loglik(data, &covs, &beta);
        ll = if ll_beta.is_finite() { ll_beta.max(ll) } else { ll };

        // (alpha, lambda): scoring step on the joint block
        let asm = assemble(data, &covs, &beta, false);
        let mut k = DMatrix::zeros(d + q, d + q);
        k.view_mut((0, 0), (d, d)).copy_from(&asm.info.i22);
        k.view_mut((d, d), (q, q)).copy_from(&asm.info.i33);
        k.view_mut((0, d), (d, q)).copy_from(&asm.info.i23);
        k.view_mut((d, 0), (q, d)).copy_from(&asm.info.i23.transpose());
        let st = asm.s.rows(p, d + q);
        let dt = spd_solve(
            &k.select_rows(&theta_idx).select_columns(&theta_idx),
            &DVector::from_iterator(theta_idx.len(), theta_idx.iter().map(|&i| st[i])),
        )?;
        let tiny = dt.amax() < opts.tol;
        let mut scale = 1.0;
        let mut halvings = 0;
        let mut accepted = None;
        while halvings <= opts.max_halvings {
            let mut trial = theta.clone();
            for (a, &i) in theta_idx.iter().enumerate() {
                trial[i] += scale * dt[a];
            }
            let (ta, tl) = split(&trial);
            if let Ok(tc) = build_covs(data, &ta, &tl, false) {
                let tll = total_loglik(data, &tc, &beta);
                // A full step below `tol` changes the likelihood by less than
                // rounding error, so the ascent test cannot judge it.
                if tll.is_finite() && (tll >= ll || tiny) {
                    accepted = Some((trial, tc, tll));
                    break;
                }
            }
            scale *= 0.5;
            halvings += 1;
        }
        let rebuilt = match accepted {
            Some((trial, tc, tll)) => {
                let dmax = (&trial - &theta).amax();
                step = step.max(dmax);
                theta = trial;
                ll = tll;
                Some(tc)
            }
            None => None,
        };
        if let Some(tc) = rebuilt {
            covs = tc
                .into_par_iter()
                .map(GroupCov::with_jacobian)
                .collect::<Result<Vec<_>>>()?;
        }
        trace.push(TraceEntry {
            iteration: iterations,
            loglik: ll,
            step,
            halvings,
        });
        if step < opts.tol {
            let s = assemble(data, &covs, &beta, false).s;
            let norm = masked_norm(&s, free);
            if norm < opts.score_tol * (1.0 + ll.abs()) {
                converged = true;
                break;
            }
            if accepted_none(&trace) {
                break;
            }
        }
    }

    let final_asm = assemble(data, &covs, &beta, false);
    let score_norm = masked_norm(&final_asm.s, free);
    let information = final_asm.info;
    let cov = information.covariance(free)?;
    let std_errors = (0..p + d + q)
        .map(|i| if free[i] { cov[(i, i)].max(0.0).sqrt() } else { f64::NAN })
        .collect();
    let (alpha, lambda) = split(&theta);
    let result = FitResult {
        params: ParameterVector { beta, alpha, lambda },
        loglik: ll,
        information,
        std_errors,
        free: free.to_vec(),
        labels: data.coefficient_labels(),
        iterations,
        converged,
        score_norm,
        trace,
        n_groups: data.n_groups(),
        n_obs: data.n_obs(),
        fingerprint: data.fingerprint(),
    };
    if converged {
        Ok(result)
    } else {
        Err(Error::FitNotConverged(Box::new(result)))
    }
}

/// True when the last iteration moved nothing: further iterations would
/// repeat it exactly.
fn accepted_none(trace: &[TraceEntry]) -> bool {
    trace.last().is_some_and(|t| t.step == 0.0)
}

fn masked_norm(s: &DVector<f64>, free: &[bool]) -> f64 {
    s.iter()
        .zip(free)
        .filter(|(_, f)| **f)
        .fold(0.0f64, |acc, (v, _)| acc.max(v.abs()))
}
