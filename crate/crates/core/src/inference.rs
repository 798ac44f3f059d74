//! Likelihood ratio and Wald tests, information criteria and the empirical
//! correlogram of standardized residuals.

use std::collections::BTreeSet;
use std::io::Write;

use serde::Serialize;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{Error, Result};
use crate::likelihood::FitResult;
use crate::model::csv::format_full;
use crate::model::{predict_structures, CovariateValue, GroupedDataset, ParameterVector};

/// Relative slack below zero tolerated for a likelihood ratio statistic.
pub const LRT_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LrtResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Upper tail `P(X > x)` of the chi-square distribution.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    if df == 0 {
        return if x > 0.0 { 0.0 } else { 1.0 };
    }
    if x <= 0.0 {
        return 1.0;
    }
    gamma_ur(df as f64 / 2.0, x / 2.0)
}

pub fn chi2_cdf(x: f64, df: usize) -> f64 {
    if df == 0 {
        return if x >= 0.0 { 1.0 } else { 0.0 };
    }
    if x <= 0.0 {
        return 0.0;
    }
    gamma_lr(df as f64 / 2.0, x / 2.0)
}

/// Likelihood ratio test of `null` within `full`.
///
/// Nesting is checked structurally: both fits must come from the same data,
/// and every coefficient estimated under the null must be estimated under
/// the full model.
pub fn lrt(full: &FitResult, null: &FitResult) -> Result<LrtResult> {
    if full.fingerprint != null.fingerprint {
        return Err(Error::NotNested("the fits were computed on different data".into()));
    }
    let free_labels = |f: &FitResult| -> BTreeSet<String> {
        f.labels
            .iter()
            .zip(&f.free)
            .filter(|(_, free)| **free)
            .map(|(l, _)| l.to_string())
            .collect()
    };
    let (lf, ln) = (free_labels(full), free_labels(null));
    if let Some(extra) = ln.difference(&lf).next() {
        return Err(Error::NotNested(format!("null coefficient `{extra}` is not estimated by the full model")));
    }
    let df = lf.len() - ln.len();
    let mut statistic = 2.0 * (full.loglik - null.loglik);
    if statistic < 0.0 {
        if statistic < -LRT_SLACK * (1.0 + full.loglik.abs()) {
            return Err(Error::NegativeStatistic(statistic));
        }
        statistic = 0.0;
    }
    Ok(LrtResult {
        statistic,
        df,
        p_value: chi2_sf(statistic, df),
    })
}

/// `(-2 l + 2 k) / n` with `k` the number of estimated coefficients and `n`
/// the number of groups.
pub fn aic(fit: &FitResult, n: usize) -> f64 {
    (-2.0 * fit.loglik + 2.0 * fit.n_free() as f64) / n as f64
}

/// `(-2 l + k log N) / n` with `N` the number of observations.
pub fn bic(fit: &FitResult, n: usize) -> f64 {
    (-2.0 * fit.loglik + fit.n_free() as f64 * (fit.n_obs as f64).ln()) / n as f64
}

/// Two-sided normal p-value of `z`.
pub fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Wald statistic and two-sided p-value for coefficient `index`.
pub fn wald(fit: &FitResult, index: usize) -> Result<(f64, f64)> {
    let se = fit.std_errors.get(index).copied().unwrap_or(f64::NAN);
    if !(se > 0.0 && se.is_finite()) {
        return Err(Error::DegenerateSE { index });
    }
    let z = fit.estimates()[index] / se;
    Ok((z, normal_two_sided(z)))
}

/// One stratum `[lo, hi)` of the correlogram.
#[derive(Debug, Clone, Serialize)]
pub struct Stratum {
    pub lo: f64,
    pub hi: f64,
    /// Average product over every eligible pair in the stratum; NaN when
    /// empty.
    pub mean: f64,
    pub pairs: usize,
    /// Per-group averages, for groups with at least one pair here.
    pub group_values: Vec<(String, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelogramTable {
    pub covariate: String,
    pub strata: Vec<Stratum>,
    /// Non-fatal notes, such as empty strata.
    pub warnings: Vec<String>,
}

impl CorrelogramTable {
    pub fn total_pairs(&self) -> usize {
        self.strata.iter().map(|s| s.pairs).sum()
    }

    pub fn means(&self) -> Vec<f64> {
        self.strata.iter().map(|s| s.mean).collect()
    }

    /// Columns `stratum_lo, stratum_hi, group_id, value`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::Parse {
            line: 0,
            message: e.to_string(),
        };
        w.write_record(["stratum_lo", "stratum_hi", "group_id", "value"]).map_err(to_err)?;
        for s in &self.strata {
            for (g, v) in &s.group_values {
                w.write_record([format_full(s.lo), format_full(s.hi), g.clone(), format_full(*v)])
                    .map_err(to_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn covariate_values(data: &GroupedDataset, covariate: &str) -> Result<Vec<Vec<f64>>> {
    data.groups
        .iter()
        .map(|g| {
            g.records
                .iter()
                .map(|r| match r.covariates.get(covariate) {
                    Some(CovariateValue::Numeric(v)) => Ok(*v),
                    Some(CovariateValue::Categorical(_)) => Err(Error::InconsistentTypes(covariate.into())),
                    None => Err(Error::MissingCovariate {
                        name: covariate.into(),
                        group: g.id.clone(),
                    }),
                })
                .collect()
        })
        .collect()
}

/// `k` equal-count bins of `values` as half-open intervals, the last one
/// open to infinity. Tied quantiles are merged.
pub fn quantile_strata(values: &[f64], k: usize) -> Vec<(f64, f64)> {
    if values.is_empty() || k == 0 {
        return vec![(0.0, f64::INFINITY)];
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut cuts = vec![v[0]];
    for i in 1..k {
        let c = v[(i * v.len()) / k];
        if c > *cuts.last().unwrap() {
            cuts.push(c);
        }
    }
    let mut out: Vec<(f64, f64)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
    out.push((*cuts.last().unwrap(), f64::INFINITY));
    out
}

/// Correlogram at the fitted coefficients of `fit`.
pub fn gzt_correlogram(data: &GroupedDataset, fit: &FitResult, covariate: &str, strata: Option<&[(f64, f64)]>) -> Result<CorrelogramTable> {
    correlogram_at(data, &fit.params, covariate, strata)
}

/// Averages of products of standardized residuals `(y - mu) / sigma` over
/// pairs whose `|c_j - c_k|` falls in each stratum. Without explicit strata,
/// three equal-count bins are used.
pub fn correlogram_at(
    data: &GroupedDataset,
    params: &ParameterVector,
    covariate: &str,
    strata: Option<&[(f64, f64)]>,
) -> Result<CorrelogramTable> {
    let values = covariate_values(data, covariate)?;
    let structures = predict_structures(params, data)?;
    let mut pairs: Vec<(usize, f64, f64)> = Vec::new();
    for (gi, (g, s)) in data.groups.iter().zip(&structures).enumerate() {
        let e: Vec<f64> = (0..g.size()).map(|j| (g.y[j] - s.mu[j]) / s.sd[j]).collect();
        let c = &values[gi];
        for j in 1..g.size() {
            for k in 0..j {
                pairs.push((gi, (c[j] - c[k]).abs(), e[j] * e[k]));
            }
        }
    }
    let strata: Vec<(f64, f64)> = match strata {
        Some(s) => s.to_vec(),
        None => quantile_strata(&pairs.iter().map(|p| p.1).collect::<Vec<_>>(), 3),
    };
    for (i, &(lo, hi)) in strata.iter().enumerate() {
        if !(lo < hi) {
            return Err(Error::Config(format!("stratum {i} [{lo}, {hi}) is empty or reversed")));
        }
        if strata[..i].iter().any(|&(l, h)| lo < h && l < hi) {
            return Err(Error::Config(format!("stratum {i} [{lo}, {hi}) overlaps an earlier one")));
        }
    }

    let mut warnings = Vec::new();
    let mut out = Vec::with_capacity(strata.len());
    for &(lo, hi) in &strata {
        let mut sums = vec![(0.0, 0usize); data.n_groups()];
        let mut total = 0.0;
        let mut count = 0;
        for &(gi, diff, prod) in &pairs {
            if diff >= lo && diff < hi {
                sums[gi].0 += prod;
                sums[gi].1 += 1;
                total += prod;
                count += 1;
            }
        }
        if count == 0 {
            warnings.push(format!("stratum [{lo}, {hi}) holds no pairs"));
        }
        out.push(Stratum {
            lo,
            hi,
            mean: if count > 0 { total / count as f64 } else { f64::NAN },
            pairs: count,
            group_values: data
                .groups
                .iter()
                .zip(&sums)
                .filter(|(_, s)| s.1 > 0)
                .map(|(g, s)| (g.id.clone(), s.0 / s.1 as f64))
                .collect(),
        });
    }
    Ok(CorrelogramTable {
        covariate: covariate.into(),
        strata: out,
        warnings,
    })
}

/// Kolmogorov-Smirnov statistic `sup |F_n - F|`.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = sample.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        d.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Asymptotic p-value of the one-sample KS statistic `d` at sample size `n`
/// (Stephens' small-sample adjustment).
pub fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        p += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}
