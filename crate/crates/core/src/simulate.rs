//! Reproducible data generators.
//!
//! All randomness comes from `ChaCha8Rng` seeded through
//! `SeedableRng::seed_from_u64`; replication `r` of a battery uses seed
//! `seed ^ r`. Replications run in parallel and are collected in index order,
//! so results do not depend on the thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::{lrt, LrtResult};
use crate::likelihood::{fit, FitOptions, FitResult};
use crate::matcalc::{matrix_log, CorrelationMatrix, SymmetricMatrix};
use crate::model::csv::CsvLayout;
use crate::model::{build_dataset, predict_structures, GroupedDataset, ModelSpec, ObservationRecord, PairCovariateRule, ParameterVector};

pub type SimRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum ErrorKind {
    Gaussian,
    /// Multivariate t with the given degrees of freedom, scaled so its
    /// covariance equals the model covariance. Requires `df > 2`.
    StudentT(f64),
    /// Multivariate t with the model covariance as its scale matrix, so the
    /// covariance is inflated by `df / (df - 2)`. Requires `df > 0`.
    StudentTScale(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Study2Case {
    /// Random school and class intercepts, 2 classes of 5.
    I,
    /// The matrix-log model with class membership and `|t_k - t_k'|`.
    II,
    /// Random intercepts plus AR(1)-type within-class errors.
    III,
    /// Random intercepts plus ARCH(1) within-class errors.
    IV,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Family {
    Exchangeable,
    Ar1,
    /// Lag-one band, zero beyond.
    Banded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DesignKind {
    Study1,
    Study2(Study2Case),
    /// Study 2 case I data used for likelihood ratio calibration.
    Study3,
    Family { family: Family, rho: f64, m: usize },
    /// Every group holds classes of the listed sizes; correlation
    /// `gamma = alpha0 + alpha1 * same_class`, constant log-variance.
    Block { sizes: Vec<usize>, alpha: [f64; 2], log_variance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimDesign {
    pub kind: DesignKind,
    pub n: usize,
    pub seed: u64,
    pub errors: ErrorKind,
}

impl SimDesign {
    pub fn new(kind: DesignKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            seed,
            errors: ErrorKind::Gaussian,
        }
    }

    pub fn with_errors(mut self, errors: ErrorKind) -> Self {
        self.errors = errors;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::BadDesign("n must be positive".into()));
        }
        match self.errors {
            ErrorKind::StudentT(df) if !(df > 2.0 && df.is_finite()) => {
                return Err(Error::BadDesign(format!("t errors need df > 2, got {df}")));
            }
            ErrorKind::StudentTScale(df) if !(df > 0.0 && df.is_finite()) => {
                return Err(Error::BadDesign(format!("t errors need df > 0, got {df}")));
            }
            _ => {}
        }
        match &self.kind {
            DesignKind::Family { rho, m, .. } => {
                if *m < 1 || !(rho.abs() < 1.0) {
                    return Err(Error::BadDesign(format!("family needs m >= 1 and |rho| < 1, got m={m}, rho={rho}")));
                }
            }
            DesignKind::Block { sizes, .. } => {
                if sizes.is_empty() || sizes.contains(&0) {
                    return Err(Error::BadDesign("block sizes must be positive".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

impl fmt::Display for SimDesign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} n={} seed={} errors={:?}", self.kind, self.n, self.seed, self.errors)
    }
}

/// A generated dataset with its generating values.
#[derive(Debug, Clone)]
pub struct SimData {
    pub dataset: GroupedDataset,
    /// Generating coefficients; NaN where the design lies outside the model
    /// class.
    pub truth: ParameterVector,
    pub true_means: Vec<DVector<f64>>,
    pub true_covs: Vec<DMatrix<f64>>,
    pub layout: CsvLayout,
}

pub const STUDY1_BETA: [f64; 3] = [1.0, -0.5, 0.5];
pub const STUDY1_ALPHA: [f64; 3] = [0.3, -0.2, 0.3];
pub const STUDY1_LAMBDA: [f64; 3] = [-0.5, 0.5, -0.3];
pub const STUDY2_BETA: [f64; 3] = [1.0, -0.5, 0.5];
pub const STUDY2_ALPHA: [f64; 3] = [0.2, 0.3, -0.2];
pub const STUDY2_LAMBDA0: f64 = 1.0;

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn rules(v: &[&str]) -> Vec<PairCovariateRule> {
    v.iter().map(|s| PairCovariateRule::parse(s).expect("static rule")).collect()
}

/// Model specification matching each design.
pub fn design_spec(kind: &DesignKind) -> ModelSpec {
    let xs = strings(&["intercept", "x1", "x2"]);
    match kind {
        DesignKind::Study1 => ModelSpec {
            mean: xs.clone(),
            variance: xs,
            correlation: rules(&["intercept", "diff:u", "sqdiff:u"]),
            subgroup_levels: vec![],
        },
        DesignKind::Study2(Study2Case::II) => ModelSpec {
            mean: xs,
            variance: strings(&["intercept"]),
            correlation: rules(&["intercept", "same_subgroup:class", "absdiff:t"]),
            subgroup_levels: strings(&["class"]),
        },
        DesignKind::Study2(_) | DesignKind::Study3 => ModelSpec {
            mean: xs,
            variance: strings(&["intercept"]),
            correlation: rules(&["intercept", "same_subgroup:class"]),
            subgroup_levels: strings(&["class"]),
        },
        DesignKind::Family { .. } => ModelSpec {
            mean: strings(&["intercept"]),
            variance: strings(&["intercept"]),
            correlation: rules(&["intercept", "lag:t"]),
            subgroup_levels: vec![],
        },
        DesignKind::Block { .. } => ModelSpec {
            mean: strings(&["intercept"]),
            variance: strings(&["intercept"]),
            correlation: rules(&["intercept", "same_subgroup:class"]),
            subgroup_levels: strings(&["class"]),
        },
    }
}

/// Correlation matrix of a standard family.
pub fn family_correlation(family: Family, rho: f64, m: usize) -> Result<CorrelationMatrix> {
    let r = DMatrix::from_fn(m, m, |j, k| {
        let lag = j.abs_diff(k);
        match (lag, family) {
            (0, _) => 1.0,
            (_, Family::Exchangeable) => rho,
            (_, Family::Ar1) => rho.powi(lag as i32),
            (1, Family::Banded) => rho,
            _ => 0.0,
        }
    });
    CorrelationMatrix::from_dense(&r).map_err(|e| Error::BadDesign(format!("{family:?}({rho}) at m={m}: {e}")))
}

/// Random correlation matrix: a normalized Gram matrix of `m x 2m` standard
/// normal entries.
pub fn random_correlation<R: Rng>(m: usize, rng: &mut R) -> CorrelationMatrix {
    loop {
        let a = DMatrix::from_fn(m, 2 * m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let s = &a * a.transpose();
        let r = DMatrix::from_fn(m, m, |j, k| {
            if j == k {
                1.0
            } else {
                s[(j, k)] / (s[(j, j)] * s[(k, k)]).sqrt()
            }
        });
        if let Ok(c) = CorrelationMatrix::from_dense(&r) {
            return c;
        }
    }
}

/// `count` rows drawn from `N(0, D R D)`.
pub fn gaussian_correlated<R: Rng>(r: &CorrelationMatrix, sd: &DVector<f64>, count: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let m = r.dim();
    if sd.len() != m {
        return Err(Error::DimensionMismatch {
            what: "standard deviations",
            expected: m,
            got: sd.len(),
        });
    }
    let l = r
        .to_dense()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?
        .unpack();
    let mut out = DMatrix::zeros(count, m);
    let mut z = DVector::zeros(m);
    for i in 0..count {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let x = &l * &z;
        for j in 0..m {
            out[(i, j)] = sd[j] * x[j];
        }
    }
    Ok(out)
}

fn draw_errors<R: Rng>(cov: &DMatrix<f64>, kind: ErrorKind, rng: &mut R) -> Result<DVector<f64>> {
    let m = cov.nrows();
    let l = cov
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { min_eigenvalue: f64::NAN })?
        .unpack();
    let z = DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let e = l * z;
    Ok(match kind {
        ErrorKind::Gaussian => e,
        ErrorKind::StudentT(df) => {
            let w: f64 = ChiSquared::new(df).expect("df > 2").sample(rng);
            e * ((df - 2.0) / w).sqrt()
        }
        ErrorKind::StudentTScale(df) => {
            let w: f64 = ChiSquared::new(df).expect("df > 0").sample(rng);
            e * (df / w).sqrt()
        }
    })
}

fn bivariate_x<R: Rng>(rng: &mut R) -> (f64, f64) {
    let z1: f64 = rng.sample(StandardNormal);
    let z2: f64 = rng.sample(StandardNormal);
    (z1, 0.5 * z1 + 0.75f64.sqrt() * z2)
}

/// Class sizes for the Study 2 designs.
fn class_sizes<R: Rng>(case: Study2Case, rng: &mut R) -> Vec<usize> {
    match case {
        Study2Case::I => vec![5, 5],
        _ => {
            let classes = rng.random_range(2..=4);
            let b = Binomial::new(4, 0.8).expect("valid binomial");
            (0..classes).map(|_| 1 + b.sample(rng) as usize).collect()
        }
    }
}

/// Random school and class intercepts plus `within` on each class block.
fn nested_cov(sizes: &[usize], within: impl Fn(usize) -> DMatrix<f64>) -> DMatrix<f64> {
    let m: usize = sizes.iter().sum();
    let mut cov = DMatrix::from_element(m, m, 1.0);
    let mut at = 0;
    for &s in sizes {
        let block = within(s);
        for j in 0..s {
            for k in 0..s {
                cov[(at + j, at + k)] += 1.0 + block[(j, k)];
            }
        }
        at += s;
    }
    cov
}

fn ar_within(s: usize) -> DMatrix<f64> {
    DMatrix::from_fn(s, s, |j, k| if j == k { 1.0 } else { 0.85 * 0.6f64.powi(j.abs_diff(k) as i32) })
}

/// ARCH(1) innovations `sigma^2_{k+1} = 1 + 0.5 e_k^2`, started at the
/// stationary variance 2.
fn arch_errors<R: Rng>(s: usize, rng: &mut R) -> Vec<f64> {
    let mut var: f64 = 2.0;
    let mut out = Vec::with_capacity(s);
    for _ in 0..s {
        let z: f64 = rng.sample(StandardNormal);
        let e = var.sqrt() * z;
        out.push(e);
        var = 1.0 + 0.5 * e * e;
    }
    out
}

/// Matrix-log coefficients `(alpha0, alpha1)` of the correlation of a
/// random-intercept design with classes `sizes`, read off `log R` at a
/// between-class pair and a within-class pair.
fn nested_alpha(cov: &DMatrix<f64>, sizes: &[usize]) -> Result<[f64; 2]> {
    let sd = cov.diagonal().map(f64::sqrt);
    let r = DMatrix::from_fn(cov.nrows(), cov.ncols(), |j, k| cov[(j, k)] / (sd[j] * sd[k]));
    let g = matrix_log(&SymmetricMatrix::from_dense_symmetrized(&r))?;
    let first = sizes[0];
    let between = g.get(first, 0);
    let within = if first > 1 { g.get(1, 0) } else { f64::NAN };
    Ok([between, within - between])
}

struct GroupDraw {
    records: Vec<ObservationRecord>,
    /// Error covariance; used for sampling unless `explicit_errors` is set.
    cov: Option<DMatrix<f64>>,
    explicit_errors: Option<Vec<f64>>,
}

/// Generates one dataset.
pub fn generate(design: &SimDesign) -> Result<SimData> {
    design.validate()?;
    let mut rng = rng_from_seed(design.seed);
    let spec = design_spec(&design.kind);
    let mut draws = Vec::with_capacity(design.n);

    for i in 0..design.n {
        let gid = format!("g{i:04}");
        let draw = match &design.kind {
            DesignKind::Study1 => {
                let m = 1 + Binomial::new(6, 0.8).expect("valid binomial").sample(&mut rng) as usize;
                let records = (0..m)
                    .map(|_| {
                        let (x1, x2) = bivariate_x(&mut rng);
                        let u: f64 = rng.random();
                        ObservationRecord::new(gid.clone(), 0.0)
                            .with_numeric("x1", x1)
                            .with_numeric("x2", x2)
                            .with_numeric("u", u)
                    })
                    .collect();
                GroupDraw {
                    records,
                    cov: None,
                    explicit_errors: None,
                }
            }
            DesignKind::Study2(_) | DesignKind::Study3 => {
                let case = match &design.kind {
                    DesignKind::Study2(c) => *c,
                    _ => Study2Case::I,
                };
                let sizes = class_sizes(case, &mut rng);
                let mut records = Vec::new();
                for (c, &s) in sizes.iter().enumerate() {
                    let class = format!("c{c}");
                    for _ in 0..s {
                        let (x1, x2) = bivariate_x(&mut rng);
                        let t: f64 = rng.random();
                        records.push(
                            ObservationRecord::new(gid.clone(), 0.0)
                                .with_subgroups(&[&class])
                                .with_numeric("x1", x1)
                                .with_numeric("x2", x2)
                                .with_numeric("t", t),
                        );
                    }
                }
                match case {
                    Study2Case::I => GroupDraw {
                        records,
                        cov: Some(nested_cov(&sizes, |s| DMatrix::identity(s, s))),
                        explicit_errors: None,
                    },
                    Study2Case::II => GroupDraw {
                        records,
                        cov: None,
                        explicit_errors: None,
                    },
                    Study2Case::III => GroupDraw {
                        records,
                        cov: Some(nested_cov(&sizes, ar_within)),
                        explicit_errors: None,
                    },
                    Study2Case::IV => {
                        let u: f64 = rng.sample(StandardNormal);
                        let mut e = Vec::new();
                        for &s in &sizes {
                            let v: f64 = rng.sample(StandardNormal);
                            e.extend(arch_errors(s, &mut rng).into_iter().map(|a| u + v + a));
                        }
                        GroupDraw {
                            records,
                            cov: Some(nested_cov(&sizes, |s| DMatrix::identity(s, s) * 2.0)),
                            explicit_errors: Some(e),
                        }
                    }
                }
            }
            DesignKind::Family { m, .. } => GroupDraw {
                records: (0..*m)
                    .map(|j| ObservationRecord::new(gid.clone(), 0.0).with_numeric("t", j as f64))
                    .collect(),
                cov: None,
                explicit_errors: None,
            },
            DesignKind::Block { sizes, .. } => GroupDraw {
                records: sizes
                    .iter()
                    .enumerate()
                    .flat_map(|(c, &s)| {
                        let class = format!("c{c}");
                        let gid = gid.clone();
                        (0..s).map(move |_| ObservationRecord::new(gid.clone(), 0.0).with_subgroups(&[&class]))
                    })
                    .collect(),
                cov: None,
                explicit_errors: None,
            },
        };
        draws.push(draw);
    }

    // Designs inside the model class take their covariance from the model.
    let skeleton: Vec<ObservationRecord> = draws.iter().flat_map(|d| d.records.iter().cloned()).collect();
    let data0 = build_dataset(&skeleton, &spec)?;
    let (p, d, q) = (data0.p(), data0.d(), data0.q());
    let nan = f64::NAN;
    let truth = match &design.kind {
        DesignKind::Study1 => ParameterVector::new(STUDY1_BETA.to_vec(), STUDY1_ALPHA.to_vec(), STUDY1_LAMBDA.to_vec()),
        DesignKind::Study2(Study2Case::II) => {
            ParameterVector::new(STUDY2_BETA.to_vec(), STUDY2_ALPHA.to_vec(), vec![STUDY2_LAMBDA0])
        }
        DesignKind::Study2(Study2Case::I) | DesignKind::Study3 => {
            let cov = draws[0].cov.as_ref().expect("case I covariance");
            let alpha = nested_alpha(cov, &[5, 5])?;
            ParameterVector::new(STUDY2_BETA.to_vec(), alpha.to_vec(), vec![3f64.ln()])
        }
        DesignKind::Study2(_) => ParameterVector::new(STUDY2_BETA.to_vec(), vec![nan; d], vec![nan; q]),
        DesignKind::Family { family, rho, m } => {
            let alpha = if *family == Family::Exchangeable && *m > 1 {
                let r = family_correlation(*family, *rho, *m)?;
                let g = matrix_log(r.as_symmetric())?;
                vec![g.get(1, 0), 0.0]
            } else {
                vec![nan; d]
            };
            ParameterVector::new(vec![0.0; p], alpha, vec![0.0; q])
        }
        DesignKind::Block { alpha, log_variance, .. } => {
            ParameterVector::new(vec![0.0; p], alpha.to_vec(), vec![*log_variance])
        }
    };
    let model_based = matches!(
        design.kind,
        DesignKind::Study1 | DesignKind::Study2(Study2Case::II) | DesignKind::Block { .. }
    );
    let structures = if model_based {
        Some(predict_structures(&truth, &data0)?)
    } else {
        None
    };

    let mut records = Vec::with_capacity(skeleton.len());
    let mut true_means = Vec::with_capacity(design.n);
    let mut true_covs = Vec::with_capacity(design.n);
    for (i, (draw, g)) in draws.into_iter().zip(&data0.groups).enumerate() {
        let mean = &g.x * truth.beta.map(|b| if b.is_nan() { 0.0 } else { b });
        let cov = match (&design.kind, &structures, draw.cov) {
            (_, Some(s), _) => s[i].covariance(),
            (_, None, Some(c)) => c,
            (DesignKind::Family { family, rho, m }, None, None) => family_correlation(*family, *rho, *m)?.to_dense(),
            _ => unreachable!("every design yields a covariance"),
        };
        let e = match draw.explicit_errors {
            Some(e) => DVector::from_vec(e),
            None => draw_errors(&cov, design.errors, &mut rng)?,
        };
        for (j, mut r) in draw.records.into_iter().enumerate() {
            r.response = mean[j] + e[j];
            records.push(r);
        }
        true_means.push(mean);
        true_covs.push(cov);
    }
    let dataset = build_dataset(&records, &spec)?;
    let mut layout = CsvLayout::new("y");
    layout.subgroups = spec.subgroup_levels.clone();
    Ok(SimData {
        dataset,
        truth,
        true_means,
        true_covs,
        layout,
    })
}

/// Writes the generated records as CSV.
pub fn write_dataset<W: Write>(writer: W, sim: &SimData) -> Result<()> {
    let records: Vec<ObservationRecord> = sim.dataset.groups.iter().flat_map(|g| g.records.iter().cloned()).collect();
    crate::model::csv::write_records(writer, &records, &sim.layout)
}

#[derive(Serialize)]
struct TruthFile<'a> {
    design: String,
    n: usize,
    seed: u64,
    errors: String,
    model: TruthModel<'a>,
    truth: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct TruthModel<'a> {
    response: &'a str,
    subgroups: &'a [String],
    mean: &'a [String],
    variance: &'a [String],
    correlation: Vec<&'a str>,
}

/// TOML sidecar with the design and the generating coefficients.
pub fn truth_toml(design: &SimDesign, sim: &SimData) -> Result<String> {
    let labels = sim.dataset.coefficient_labels();
    let truth = labels.iter().map(|l| l.to_string()).zip(sim.truth.to_vec()).collect();
    let spec = &sim.dataset.spec;
    let file = TruthFile {
        design: format!("{:?}", design.kind),
        n: design.n,
        seed: design.seed,
        errors: format!("{:?}", design.errors),
        model: TruthModel {
            response: &sim.layout.response,
            subgroups: &spec.subgroup_levels,
            mean: &spec.mean,
            variance: &spec.variance,
            correlation: spec.correlation.iter().map(|r| r.name.as_str()).collect(),
        },
        truth,
    };
    toml::to_string(&file).map_err(|e| Error::Config(e.to_string()))
}

/// Runs `f(seed ^ r, r)` for `r in 0..reps` in parallel, in index order.
pub fn replicate<T, F>(reps: usize, seed: u64, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64, usize) -> T + Sync,
{
    (0..reps).into_par_iter().map(|r| f(seed ^ r as u64, r)).collect()
}

/// `(1/n) sum ||X_a (beta_hat - beta)||` and
/// `(1/n) sum ||Sigma_hat_a - Sigma_a||_F`.
pub fn error_norms(fit: &FitResult, sim: &SimData) -> Result<(f64, f64)> {
    let structures = predict_structures(&fit.params, &sim.dataset)?;
    let n = sim.dataset.n_groups() as f64;
    let mut mu = 0.0;
    let mut sigma = 0.0;
    for ((g, s), (m0, c0)) in sim.dataset.groups.iter().zip(&structures).zip(sim.true_means.iter().zip(&sim.true_covs)) {
        mu += (&g.x * &fit.params.beta - m0).norm();
        sigma += (s.covariance() - c0).norm();
    }
    Ok((mu / n, sigma / n))
}

/// Summary of a parameter-recovery battery.
#[derive(Debug, Clone, Serialize)]
pub struct RecoverySummary {
    pub labels: Vec<String>,
    /// Mean absolute deviation from the truth per coefficient.
    pub mad: Vec<f64>,
    pub mean_norm: f64,
    pub cov_norm: f64,
    /// Fraction of replications whose 95% Wald interval covers the truth.
    pub coverage: Vec<f64>,
    pub fitted: usize,
    pub failures: usize,
}

/// Fits `reps` datasets drawn from `design` (seed `design.seed ^ r`).
pub fn recovery_battery(design: &SimDesign, reps: usize, opts: &FitOptions) -> Result<RecoverySummary> {
    design.validate()?;
    let runs = replicate(reps, design.seed, |seed, _| -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, f64, f64)> {
        let d = SimDesign { seed, ..design.clone() };
        let sim = generate(&d)?;
        let res = fit(&sim.dataset, None, opts)?;
        let (mu, sigma) = error_norms(&res, &sim)?;
        Ok((res.estimates(), res.std_errors.clone(), sim.truth.to_vec(), mu, sigma))
    });
    let labels = generate(design)?.dataset.coefficient_labels().iter().map(|l| l.to_string()).collect::<Vec<_>>();
    let k = labels.len();
    let mut mad = vec![0.0; k];
    let mut coverage = vec![0.0; k];
    let (mut mean_norm, mut cov_norm) = (0.0, 0.0);
    let mut fitted = 0;
    for (est, se, truth, mu, sigma) in runs.iter().flatten() {
        fitted += 1;
        for j in 0..k {
            mad[j] += (est[j] - truth[j]).abs();
            if (est[j] - truth[j]).abs() <= 1.959_963_984_540_054 * se[j] {
                coverage[j] += 1.0;
            }
        }
        mean_norm += mu;
        cov_norm += sigma;
    }
    if fitted == 0 {
        return Err(Error::BadDesign("no replication could be fitted".into()));
    }
    let f = fitted as f64;
    Ok(RecoverySummary {
        labels,
        mad: mad.into_iter().map(|v| v / f).collect(),
        mean_norm: mean_norm / f,
        cov_norm: cov_norm / f,
        coverage: coverage.into_iter().map(|v| v / f).collect(),
        fitted,
        failures: reps - fitted,
    })
}

/// `(flat index, value)` pairs fixing every correlation coefficient at the
/// truth.
pub fn fix_alpha_at_truth(sim: &SimData) -> Vec<(usize, f64)> {
    let p = sim.dataset.p();
    sim.truth.alpha.iter().enumerate().map(|(j, &a)| (p + j, a)).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct LrtBattery {
    pub statistics: Vec<f64>,
    pub df: usize,
    pub failures: usize,
}

/// Likelihood ratio statistics for `H0: alpha = alpha_true` on `reps`
/// datasets from `design` (an interior null, `df = d`). Failed fits are
/// counted and skipped.
pub fn study3_lrt_battery(reps: usize, design: &SimDesign) -> Result<LrtBattery> {
    design.validate()?;
    let runs = replicate(reps, design.seed, |seed, _| -> Result<LrtResult> {
        let sim = generate(&SimDesign { seed, ..design.clone() })?;
        let opts = FitOptions::default();
        let full = fit(&sim.dataset, None, &opts)?;
        let null_opts = FitOptions {
            fixed: fix_alpha_at_truth(&sim),
            ..opts
        };
        let null = fit(&sim.dataset, Some(&full.params), &null_opts)?;
        lrt(&full, &null)
    });
    let mut statistics = Vec::with_capacity(reps);
    let mut df = 0;
    for r in runs.iter().flatten() {
        statistics.push(r.statistic);
        df = r.df;
    }
    Ok(LrtBattery {
        failures: reps - statistics.len(),
        statistics,
        df,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar1_family_matches_closed_form() {
        let r = family_correlation(Family::Ar1, 0.5, 3).unwrap();
        let want = [[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]];
        for j in 0..3 {
            for k in 0..3 {
                assert_eq!(r.get(j, k), want[j][k]);
            }
        }
        let b = family_correlation(Family::Banded, 0.0, 4).unwrap();
        assert_eq!(b.to_dense(), DMatrix::identity(4, 4));
        assert!(family_correlation(Family::Banded, 0.9, 6).is_err());
    }

    #[test]
    fn study1_sizes_follow_the_binomial_law() {
        let sim = generate(&SimDesign::new(DesignKind::Study1, 400, 3)).unwrap();
        let sizes: Vec<usize> = sim.dataset.groups.iter().map(|g| g.size()).collect();
        assert!(sizes.iter().all(|&m| (1..=7).contains(&m)));
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
        // 1 + 6 * 0.8, sd of the mean about 0.05
        assert!((mean - 5.8).abs() < 0.2, "{mean}");
        assert_eq!(sim.dataset.n_params(), 9);
    }

    #[test]
    fn seeds_determine_output() {
        let d = SimDesign::new(DesignKind::Study2(Study2Case::II), 20, 42);
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_dataset(&mut a, &generate(&d).unwrap()).unwrap();
        write_dataset(&mut b, &generate(&d).unwrap()).unwrap();
        assert_eq!(a, b);
        let mut c = Vec::new();
        write_dataset(&mut c, &generate(&SimDesign { seed: 43, ..d }).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn case_one_truth_reproduces_the_nested_correlation() {
        let sim = generate(&SimDesign::new(DesignKind::Study3, 3, 1)).unwrap();
        let s = predict_structures(&sim.truth, &sim.dataset).unwrap();
        let cov = s[0].covariance();
        assert!((cov.clone() - &sim.true_covs[0]).amax() < 1e-9);
        assert!((cov[(1, 0)] - 2.0).abs() < 1e-9);
        assert!((cov[(5, 0)] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gaussian_sampler_matches_target_correlation() {
        let r = CorrelationMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, 0.8, 0.8, 1.0])).unwrap();
        let sd = DVector::from_vec(vec![1.0, 2.0]);
        let x = gaussian_correlated(&r, &sd, 200_000, &mut rng_from_seed(5)).unwrap();
        let c = x.transpose() * &x / 200_000.0;
        let rho = c[(0, 1)] / (c[(0, 0)] * c[(1, 1)]).sqrt();
        assert!((rho - 0.8).abs() < 0.005);
        assert!((c[(1, 1)] - 4.0).abs() < 0.05);
    }

    #[test]
    fn t_error_covariances() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let mut rng = rng_from_seed(9);
        let mut acc = DMatrix::zeros(2, 2);
        let n = 200_000;
        for _ in 0..n {
            let e = draw_errors(&cov, ErrorKind::StudentT(5.0), &mut rng).unwrap();
            acc += &e * e.transpose();
        }
        acc /= n as f64;
        assert!((&acc - &cov).amax() < 0.06);

        let mut acc = DMatrix::zeros(2, 2);
        for _ in 0..n {
            let e = draw_errors(&cov, ErrorKind::StudentTScale(5.0), &mut rng).unwrap();
            acc += &e * e.transpose();
        }
        acc /= n as f64;
        assert!((acc - &cov * (5.0 / 3.0)).amax() < 0.1);
    }

    #[test]
    fn bad_designs_are_rejected() {
        assert!(matches!(generate(&SimDesign::new(DesignKind::Study1, 0, 1)), Err(Error::BadDesign(_))));
        let t = SimDesign::new(DesignKind::Study1, 5, 1).with_errors(ErrorKind::StudentT(2.0));
        assert!(matches!(generate(&t), Err(Error::BadDesign(_))));
        let t = SimDesign::new(DesignKind::Study1, 5, 1).with_errors(ErrorKind::StudentTScale(0.0));
        assert!(matches!(generate(&t), Err(Error::BadDesign(_))));
        let fam = DesignKind::Family {
            family: Family::Ar1,
            rho: 1.0,
            m: 3,
        };
        assert!(matches!(generate(&SimDesign::new(fam, 5, 1)), Err(Error::BadDesign(_))));
    }

    #[test]
    fn truth_sidecar_lists_every_coefficient() {
        let d = SimDesign::new(DesignKind::Study1, 5, 1);
        let sim = generate(&d).unwrap();
        let text = truth_toml(&d, &sim).unwrap();
        let parsed: toml::Table = toml::from_str(&text).unwrap();
        let truth = parsed["truth"].as_table().unwrap();
        assert_eq!(truth.len(), 9);
        assert_eq!(truth["matlogcorr.intercept"].as_float(), Some(0.3));
    }
}
