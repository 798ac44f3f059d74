//! Grouped data and the three design matrices: mean `X_i`, log-variance
//! `Z_i` and pair-level `W_i` whose rows follow `vecl` order over the
//! within-group record order.

pub mod config;
pub mod csv;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::hash::{DefaultHasher, Hash, Hasher};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gzt::{gzt_inverse, GztVector};
use crate::matcalc::{pair_count, vecl_pairs, CorrelationMatrix};

/// Reserved term name for a column of ones.
pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq)]
pub enum CovariateValue {
    Numeric(f64),
    Categorical(String),
}

impl fmt::Display for CovariateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovariateValue::Numeric(v) => write!(f, "{v}"),
            CovariateValue::Categorical(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRecord {
    pub group_id: String,
    /// Nested cluster keys, outermost first, aligned with
    /// [`ModelSpec::subgroup_levels`].
    pub subgroup_ids: Vec<String>,
    pub response: f64,
    pub covariates: BTreeMap<String, CovariateValue>,
}

impl ObservationRecord {
    pub fn new(group_id: impl Into<String>, response: f64) -> Self {
        Self {
            group_id: group_id.into(),
            subgroup_ids: Vec::new(),
            response,
            covariates: BTreeMap::new(),
        }
    }

    pub fn with_subgroups(mut self, ids: &[&str]) -> Self {
        self.subgroup_ids = ids.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_numeric(mut self, name: &str, value: f64) -> Self {
        self.covariates
            .insert(name.to_string(), CovariateValue::Numeric(value));
        self
    }

    pub fn with_categorical(mut self, name: &str, value: &str) -> Self {
        self.covariates.insert(
            name.to_string(),
            CovariateValue::Categorical(value.to_string()),
        );
        self
    }

    fn numeric(&self, name: &str) -> Result<f64> {
        match self.covariates.get(name) {
            Some(CovariateValue::Numeric(v)) => Ok(*v),
            Some(CovariateValue::Categorical(_)) => Err(Error::InconsistentTypes(name.into())),
            None => Err(Error::MissingCovariate {
                name: name.into(),
                group: self.group_id.clone(),
            }),
        }
    }
}

/// How a pair-level covariate is built from observations `j > k` of a group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairRuleKind {
    Intercept,
    /// 1 when both observations share the named subgroup level.
    SameSubgroup(String),
    /// `|c_j - c_k|`.
    AbsDifference(String),
    /// `c_j - c_k` with `j` the later record; the only order-dependent rule.
    Difference(String),
    /// `(c_j - c_k)^2`.
    SquaredDifference(String),
    /// `c_j * c_k`.
    SignedProduct(String),
    /// `|rank_j - rank_k|` where ranks order the group by the covariate
    /// (ties broken by record order).
    Lag(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCovariateRule {
    pub kind: PairRuleKind,
    pub name: String,
}

impl PairCovariateRule {
    pub fn intercept() -> Self {
        Self {
            kind: PairRuleKind::Intercept,
            name: INTERCEPT.into(),
        }
    }

    pub fn same_subgroup(level: &str) -> Self {
        Self::from_kind(PairRuleKind::SameSubgroup(level.into()))
    }

    pub fn from_kind(kind: PairRuleKind) -> Self {
        let name = match &kind {
            PairRuleKind::Intercept => INTERCEPT.to_string(),
            PairRuleKind::SameSubgroup(c) => format!("same_subgroup:{c}"),
            PairRuleKind::AbsDifference(c) => format!("absdiff:{c}"),
            PairRuleKind::Difference(c) => format!("diff:{c}"),
            PairRuleKind::SquaredDifference(c) => format!("sqdiff:{c}"),
            PairRuleKind::SignedProduct(c) => format!("product:{c}"),
            PairRuleKind::Lag(c) => format!("lag:{c}"),
        };
        Self { kind, name }
    }

    /// Parses `kind:covariate` strings such as `same_subgroup:class` or
    /// `absdiff:mathkind`, or the bare word `intercept`.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if spec == INTERCEPT {
            return Ok(Self::intercept());
        }
        let (kind, arg) = spec
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("pair rule `{spec}` is not `kind:covariate`")))?;
        let arg = arg.trim().to_string();
        if arg.is_empty() {
            return Err(Error::Config(format!("pair rule `{spec}` names no covariate")));
        }
        let kind = match kind.trim() {
            "same_subgroup" | "same" => PairRuleKind::SameSubgroup(arg),
            "absdiff" | "abs_difference" => PairRuleKind::AbsDifference(arg),
            "diff" | "difference" => PairRuleKind::Difference(arg),
            "sqdiff" | "squared_difference" => PairRuleKind::SquaredDifference(arg),
            "product" | "signed_product" => PairRuleKind::SignedProduct(arg),
            "lag" => PairRuleKind::Lag(arg),
            other => return Err(Error::Config(format!("unknown pair rule kind `{other}`"))),
        };
        Ok(Self::from_kind(kind))
    }
}

/// Declarative model: which covariates enter each regression.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub mean: Vec<String>,
    pub variance: Vec<String>,
    pub correlation: Vec<PairCovariateRule>,
    /// Names of the nested cluster levels carried in
    /// [`ObservationRecord::subgroup_ids`].
    pub subgroup_levels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GroupData {
    pub id: String,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// `m_i(m_i-1)/2 x d`, rows in `vecl` order.
    pub w: DMatrix<f64>,
    pub records: Vec<ObservationRecord>,
}

impl GroupData {
    pub fn size(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone)]
pub struct GroupedDataset {
    pub groups: Vec<GroupData>,
    pub mean_names: Vec<String>,
    pub variance_names: Vec<String>,
    pub pair_names: Vec<String>,
    pub spec: ModelSpec,
}

impl GroupedDataset {
    /// Assembles a dataset from prebuilt design matrices.
    pub fn from_groups(
        groups: Vec<GroupData>,
        mean_names: Vec<String>,
        variance_names: Vec<String>,
        pair_names: Vec<String>,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (p, q, d) = (mean_names.len(), variance_names.len(), pair_names.len());
        for g in &groups {
            let m = g.size();
            if m == 0 {
                return Err(Error::EmptyGroup(g.id.clone()));
            }
            let checks = [
                ("mean design rows", m, g.x.nrows()),
                ("mean design columns", p, g.x.ncols()),
                ("variance design rows", m, g.z.nrows()),
                ("variance design columns", q, g.z.ncols()),
                ("pair design rows", pair_count(m), g.w.nrows()),
                ("pair design columns", d, g.w.ncols()),
            ];
            for (what, expected, got) in checks {
                if expected != got {
                    return Err(Error::DimensionMismatch { what, expected, got });
                }
            }
            if g.y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput(format!("response of group `{}`", g.id)));
            }
        }
        Ok(Self {
            groups,
            mean_names,
            variance_names,
            pair_names,
            spec: ModelSpec::default(),
        })
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn n_obs(&self) -> usize {
        self.groups.iter().map(GroupData::size).sum()
    }

    pub fn p(&self) -> usize {
        self.mean_names.len()
    }

    pub fn q(&self) -> usize {
        self.variance_names.len()
    }

    pub fn d(&self) -> usize {
        self.pair_names.len()
    }

    pub fn n_params(&self) -> usize {
        self.p() + self.d() + self.q()
    }

    /// Coefficient labels in parameter order `(beta, alpha, lambda)`.
    pub fn coefficient_labels(&self) -> Vec<CoefficientLabel> {
        let mk = |block, names: &[String]| {
            names
                .iter()
                .map(move |n| CoefficientLabel {
                    block,
                    name: n.clone(),
                })
                .collect::<Vec<_>>()
        };
        let mut out = mk(Block::Mean, &self.mean_names);
        out.extend(mk(Block::MatLogCorr, &self.pair_names));
        out.extend(mk(Block::LogVariance, &self.variance_names));
        out
    }

    /// Hash of group ids, sizes and responses; identifies the data a fit saw.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for g in &self.groups {
            g.id.hash(&mut h);
            g.size().hash(&mut h);
            for v in g.y.iter() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Block {
    Mean,
    MatLogCorr,
    LogVariance,
}

impl Block {
    pub fn as_str(&self) -> &'static str {
        match self {
            Block::Mean => "mean",
            Block::MatLogCorr => "matlogcorr",
            Block::LogVariance => "logvariance",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mean" => Some(Block::Mean),
            "matlogcorr" => Some(Block::MatLogCorr),
            "logvariance" => Some(Block::LogVariance),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoefficientLabel {
    pub block: Block,
    pub name: String,
}

impl fmt::Display for CoefficientLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block.as_str(), self.name)
    }
}

/// `omega = (beta', alpha', lambda')'`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub lambda: DVector<f64>,
}

impl ParameterVector {
    pub fn new(beta: Vec<f64>, alpha: Vec<f64>, lambda: Vec<f64>) -> Self {
        Self {
            beta: DVector::from_vec(beta),
            alpha: DVector::from_vec(alpha),
            lambda: DVector::from_vec(lambda),
        }
    }

    pub fn zeros(p: usize, d: usize, q: usize) -> Self {
        Self::new(vec![0.0; p], vec![0.0; d], vec![0.0; q])
    }

    pub fn len(&self) -> usize {
        self.beta.len() + self.alpha.len() + self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.beta
            .iter()
            .chain(self.alpha.iter())
            .chain(self.lambda.iter())
            .copied()
            .collect()
    }

    pub fn from_slice(values: &[f64], p: usize, d: usize, q: usize) -> Result<Self> {
        if values.len() != p + d + q {
            return Err(Error::DimensionMismatch {
                what: "parameter vector",
                expected: p + d + q,
                got: values.len(),
            });
        }
        Ok(Self::new(
            values[..p].to_vec(),
            values[p..p + d].to_vec(),
            values[p + d..].to_vec(),
        ))
    }

    pub fn check_against(&self, data: &GroupedDataset) -> Result<()> {
        let checks = [
            ("beta", data.p(), self.beta.len()),
            ("alpha", data.d(), self.alpha.len()),
            ("lambda", data.q(), self.lambda.len()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(Error::DimensionMismatch { what, expected, got });
            }
        }
        if self.to_vec().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput("parameter vector".into()));
        }
        Ok(())
    }
}

enum TermKind {
    Intercept,
    Numeric(String),
    Dummies(String, Vec<String>),
}

fn classify_terms(
    terms: &[String],
    records: &[ObservationRecord],
    categorical_levels: &BTreeMap<String, BTreeSet<String>>,
) -> Result<(Vec<TermKind>, Vec<String>)> {
    let mut kinds = Vec::with_capacity(terms.len());
    let mut names = Vec::new();
    for t in terms {
        if t == INTERCEPT {
            kinds.push(TermKind::Intercept);
            names.push(INTERCEPT.to_string());
        } else if let Some(levels) = categorical_levels.get(t) {
            // Drop the first level in lexical order.
            let kept: Vec<String> = levels.iter().skip(1).cloned().collect();
            names.extend(kept.iter().map(|l| format!("{t}[{l}]")));
            kinds.push(TermKind::Dummies(t.clone(), kept));
        } else {
            if let Some(r) = records.iter().find(|r| !r.covariates.contains_key(t)) {
                return Err(Error::MissingCovariate {
                    name: t.clone(),
                    group: r.group_id.clone(),
                });
            }
            kinds.push(TermKind::Numeric(t.clone()));
            names.push(t.clone());
        }
    }
    Ok((kinds, names))
}

fn design_matrix(terms: &[TermKind], ncols: usize, records: &[&ObservationRecord]) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(records.len(), ncols);
    for (row, rec) in records.iter().enumerate() {
        let mut col = 0;
        for t in terms {
            match t {
                TermKind::Intercept => {
                    out[(row, col)] = 1.0;
                    col += 1;
                }
                TermKind::Numeric(name) => {
                    out[(row, col)] = rec.numeric(name)?;
                    col += 1;
                }
                TermKind::Dummies(name, kept) => {
                    let level = match rec.covariates.get(name) {
                        Some(CovariateValue::Categorical(l)) => l,
                        Some(_) => return Err(Error::InconsistentTypes(name.clone())),
                        None => {
                            return Err(Error::MissingCovariate {
                                name: name.clone(),
                                group: rec.group_id.clone(),
                            })
                        }
                    };
                    for l in kept {
                        out[(row, col)] = if l == level { 1.0 } else { 0.0 };
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn pair_design(
    rules: &[PairCovariateRule],
    subgroup_levels: &[String],
    records: &[&ObservationRecord],
) -> Result<DMatrix<f64>> {
    let m = records.len();
    let mut out = DMatrix::zeros(pair_count(m), rules.len());
    for (c, rule) in rules.iter().enumerate() {
        let values: Option<Vec<f64>> = match &rule.kind {
            PairRuleKind::Intercept | PairRuleKind::SameSubgroup(_) => None,
            PairRuleKind::AbsDifference(v)
            | PairRuleKind::Difference(v)
            | PairRuleKind::SquaredDifference(v)
            | PairRuleKind::SignedProduct(v)
            | PairRuleKind::Lag(v) => Some(records.iter().map(|r| r.numeric(v)).collect::<Result<_>>()?),
        };
        let level = match &rule.kind {
            PairRuleKind::SameSubgroup(level) => Some(
                subgroup_levels
                    .iter()
                    .position(|l| l == level)
                    .ok_or_else(|| Error::MissingCovariate {
                        name: level.clone(),
                        group: records[0].group_id.clone(),
                    })?,
            ),
            _ => None,
        };
        if let Some(idx) = level {
            if let Some(r) = records.iter().find(|r| r.subgroup_ids.len() <= idx) {
                return Err(Error::MissingCovariate {
                    name: subgroup_levels[idx].clone(),
                    group: r.group_id.clone(),
                });
            }
        }
        let ranks = match (&rule.kind, &values) {
            (PairRuleKind::Lag(_), Some(v)) => {
                let mut order: Vec<usize> = (0..m).collect();
                order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
                let mut rank = vec![0.0; m];
                for (pos, &i) in order.iter().enumerate() {
                    rank[i] = pos as f64;
                }
                Some(rank)
            }
            _ => None,
        };
        for (row, (j, k)) in vecl_pairs(m).enumerate() {
            out[(row, c)] = match &rule.kind {
                PairRuleKind::Intercept => 1.0,
                PairRuleKind::SameSubgroup(_) => {
                    let idx = level.unwrap();
                    if records[j].subgroup_ids[idx] == records[k].subgroup_ids[idx] {
                        1.0
                    } else {
                        0.0
                    }
                }
                PairRuleKind::AbsDifference(_) => {
                    let v = values.as_ref().unwrap();
                    (v[j] - v[k]).abs()
                }
                PairRuleKind::Difference(_) => {
                    let v = values.as_ref().unwrap();
                    v[j] - v[k]
                }
                PairRuleKind::SquaredDifference(_) => {
                    let v = values.as_ref().unwrap();
                    (v[j] - v[k]).powi(2)
                }
                PairRuleKind::SignedProduct(_) => {
                    let v = values.as_ref().unwrap();
                    v[j] * v[k]
                }
                PairRuleKind::Lag(_) => {
                    let r = ranks.as_ref().unwrap();
                    (r[j] - r[k]).abs()
                }
            };
        }
    }
    Ok(out)
}

/// Builds one [`GroupData`] per distinct `group_id`, in order of first
/// appearance. Categorical covariates are dummy coded against their first
/// level in lexical order.
pub fn build_dataset(records: &[ObservationRecord], spec: &ModelSpec) -> Result<GroupedDataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let mut categorical_levels: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut numeric_names: BTreeSet<String> = BTreeSet::new();
    for r in records {
        if !r.response.is_finite() {
            return Err(Error::NonFiniteInput(format!("response in group `{}`", r.group_id)));
        }
        for (name, v) in &r.covariates {
            match v {
                CovariateValue::Numeric(x) => {
                    if !x.is_finite() {
                        return Err(Error::NonFiniteInput(format!("covariate `{name}`")));
                    }
                    numeric_names.insert(name.clone());
                }
                CovariateValue::Categorical(l) => {
                    categorical_levels
                        .entry(name.clone())
                        .or_default()
                        .insert(l.clone());
                }
            }
        }
    }
    if let Some(name) = numeric_names
        .iter()
        .find(|n| categorical_levels.contains_key(*n))
    {
        return Err(Error::InconsistentTypes(name.clone()));
    }

    let (mean_terms, mean_names) = classify_terms(&spec.mean, records, &categorical_levels)?;
    let (var_terms, variance_names) = classify_terms(&spec.variance, records, &categorical_levels)?;
    let pair_names: Vec<String> = spec.correlation.iter().map(|r| r.name.clone()).collect();

    let mut order: Vec<&str> = Vec::new();
    let mut members: BTreeMap<&str, Vec<&ObservationRecord>> = BTreeMap::new();
    for r in records {
        let entry = members.entry(r.group_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(r.group_id.as_str());
        }
        entry.push(r);
    }

    let mut groups = Vec::with_capacity(order.len());
    for id in order {
        let recs = &members[id];
        if recs.is_empty() {
            return Err(Error::EmptyGroup(id.to_string()));
        }
        groups.push(GroupData {
            id: id.to_string(),
            y: DVector::from_iterator(recs.len(), recs.iter().map(|r| r.response)),
            x: design_matrix(&mean_terms, mean_names.len(), recs)?,
            z: design_matrix(&var_terms, variance_names.len(), recs)?,
            w: pair_design(&spec.correlation, &spec.subgroup_levels, recs)?,
            records: recs.iter().map(|r| (*r).clone()).collect(),
        });
    }

    let mut data = GroupedDataset::from_groups(groups, mean_names, variance_names, pair_names)?;
    data.spec = spec.clone();
    Ok(data)
}

/// Mean, standard deviations and correlation matrix of one group.
#[derive(Debug, Clone)]
pub struct GroupStructure {
    pub mu: DVector<f64>,
    pub sd: DVector<f64>,
    pub corr: CorrelationMatrix,
}

impl GroupStructure {
    /// `D R D`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let r = self.corr.to_dense();
        DMatrix::from_fn(r.nrows(), r.ncols(), |j, k| self.sd[j] * r[(j, k)] * self.sd[k])
    }
}

pub fn predict_group(params: &ParameterVector, g: &GroupData) -> Result<GroupStructure> {
    let mu = &g.x * &params.beta;
    let sd = (&g.z * &params.lambda).map(|v| (0.5 * v).exp());
    let corr = if g.size() == 1 {
        CorrelationMatrix::identity(1)
    } else {
        let gamma = &g.w * &params.alpha;
        gzt_inverse(&GztVector::new(gamma.iter().copied().collect())?)?
    };
    Ok(GroupStructure { mu, sd, corr })
}

/// `mu_i = X_i beta`, `D_i = diag(exp(Z_i lambda / 2))`,
/// `R_i = gzt_inverse(W_i alpha)` for every group.
pub fn predict_structures(params: &ParameterVector, data: &GroupedDataset) -> Result<Vec<GroupStructure>> {
    params.check_against(data)?;
    data.groups.iter().map(|g| predict_group(params, g)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(mean: &[&str], variance: &[&str], corr: &[&str]) -> ModelSpec {
        ModelSpec {
            mean: mean.iter().map(|s| s.to_string()).collect(),
            variance: variance.iter().map(|s| s.to_string()).collect(),
            correlation: corr.iter().map(|s| PairCovariateRule::parse(s).unwrap()).collect(),
            subgroup_levels: vec!["class".into()],
        }
    }

    #[test]
    fn intercept_pair_rule_on_two_records() {
        let recs = vec![ObservationRecord::new("a", 1.0), ObservationRecord::new("a", 2.0)];
        let d = build_dataset(&recs, &spec(&["intercept"], &["intercept"], &["intercept"])).unwrap();
        assert_eq!(d.n_groups(), 1);
        assert_eq!(d.groups[0].w, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn same_subgroup_coding() {
        let recs: Vec<_> = ["A", "A", "B"]
            .iter()
            .map(|c| ObservationRecord::new("school", 0.0).with_subgroups(&[c]))
            .collect();
        let d = build_dataset(
            &recs,
            &spec(&["intercept"], &["intercept"], &["intercept", "same_subgroup:class"]),
        )
        .unwrap();
        // pairs (1,0), (2,0), (2,1)
        let w = &d.groups[0].w;
        assert_eq!(w.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0]);
        assert_eq!(w.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(w.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0]);
        assert_eq!(d.pair_names, vec!["intercept", "same_subgroup:class"]);
    }

    #[test]
    fn difference_rules() {
        let recs: Vec<_> = [0.2, 0.5, 0.9]
            .iter()
            .map(|t| ObservationRecord::new("g", 0.0).with_numeric("t", *t))
            .collect();
        let d = build_dataset(
            &recs,
            &spec(&["intercept"], &["intercept"], &["absdiff:t", "diff:t", "sqdiff:t", "product:t", "lag:t"]),
        )
        .unwrap();
        let w = &d.groups[0].w;
        let want_abs = [0.3, 0.7, 0.4];
        for r in 0..3 {
            assert_abs_diff_eq!(w[(r, 0)], want_abs[r], epsilon = 1e-15);
            assert_abs_diff_eq!(w[(r, 1)], want_abs[r], epsilon = 1e-15);
            assert_abs_diff_eq!(w[(r, 2)], want_abs[r] * want_abs[r], epsilon = 1e-15);
        }
        assert_abs_diff_eq!(w[(0, 3)], 0.1, epsilon = 1e-15);
        assert_eq!(w.column(4).iter().copied().collect::<Vec<_>>(), vec![1.0, 2.0, 1.0]);
    }

    #[test]
    fn categorical_dummies_drop_first_lexical_level() {
        let recs = vec![
            ObservationRecord::new("g1", 1.0).with_categorical("sex", "m"),
            ObservationRecord::new("g1", 2.0).with_categorical("sex", "f"),
            ObservationRecord::new("g2", 3.0).with_categorical("sex", "x"),
        ];
        let d = build_dataset(&recs, &spec(&["intercept", "sex"], &["intercept"], &[])).unwrap();
        assert_eq!(d.mean_names, vec!["intercept", "sex[m]", "sex[x]"]);
        assert_eq!(d.groups[0].x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 0.0]);
        assert_eq!(d.groups[0].x.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0]);
        assert_eq!(d.groups[1].x.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 1.0]);
        // group order is first appearance
        assert_eq!(d.groups[0].id, "g1");
    }

    #[test]
    fn build_errors() {
        let s = spec(&["intercept", "x"], &["intercept"], &[]);
        assert!(matches!(build_dataset(&[], &s), Err(Error::EmptyDataset)));
        let missing = vec![ObservationRecord::new("g", 1.0)];
        assert!(matches!(build_dataset(&missing, &s), Err(Error::MissingCovariate { .. })));
        let mixed = vec![
            ObservationRecord::new("g", 1.0).with_numeric("x", 1.0),
            ObservationRecord::new("g", 1.0).with_categorical("x", "a"),
        ];
        assert!(matches!(build_dataset(&mixed, &s), Err(Error::InconsistentTypes(_))));
        let no_sub = vec![ObservationRecord::new("g", 1.0), ObservationRecord::new("g", 1.0)];
        let s2 = spec(&["intercept"], &["intercept"], &["same_subgroup:class"]);
        assert!(matches!(build_dataset(&no_sub, &s2), Err(Error::MissingCovariate { .. })));
        assert!(PairCovariateRule::parse("bogus:x").is_err());
        assert!(PairCovariateRule::parse("absdiff").is_err());
    }

    #[test]
    fn singleton_groups_have_no_pair_rows() {
        let recs = vec![ObservationRecord::new("a", 1.0), ObservationRecord::new("b", 2.0)];
        let d = build_dataset(&recs, &spec(&["intercept"], &["intercept"], &["intercept"])).unwrap();
        assert_eq!(d.groups[0].w.nrows(), 0);
        assert_eq!(d.groups[0].w.ncols(), 1);
        let s = predict_structures(&ParameterVector::new(vec![0.0], vec![0.7], vec![0.0]), &d).unwrap();
        assert_eq!(s[0].corr.dim(), 1);
    }

    #[test]
    fn predict_trivial_structures() {
        let recs: Vec<_> = (0..4)
            .map(|j| ObservationRecord::new("g", j as f64).with_numeric("x", j as f64))
            .collect();
        let d = build_dataset(&recs, &spec(&["intercept", "x"], &["intercept"], &["intercept"])).unwrap();
        let s = predict_structures(&ParameterVector::new(vec![1.0, 2.0], vec![0.0], vec![0.0]), &d).unwrap();
        assert!(s[0]
            .corr
            .as_symmetric()
            .max_abs_diff(&crate::matcalc::SymmetricMatrix::identity(4))
            < 1e-15);
        assert!(s[0].sd.iter().all(|&v| v == 1.0));
        assert_eq!(s[0].mu[3], 7.0);
        let bad = ParameterVector::new(vec![1.0], vec![0.0], vec![0.0]);
        assert!(matches!(predict_structures(&bad, &d), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn blocked_coding_gives_blocked_correlation() {
        // Two classes of sizes 2 and 3 in one school.
        let recs: Vec<_> = ["a", "a", "b", "b", "b"]
            .iter()
            .map(|c| ObservationRecord::new("s", 0.0).with_subgroups(&[c]))
            .collect();
        let d = build_dataset(
            &recs,
            &spec(&["intercept"], &["intercept"], &["intercept", "same_subgroup:class"]),
        )
        .unwrap();
        let s = predict_structures(&ParameterVector::new(vec![0.0], vec![0.2, 0.3], vec![0.0]), &d).unwrap();
        let r = &s[0].corr;
        // Within the size-3 block all entries agree.
        assert_abs_diff_eq!(r.get(3, 2), r.get(4, 2), epsilon = 1e-10);
        assert_abs_diff_eq!(r.get(4, 3), r.get(4, 2), epsilon = 1e-10);
        // Between-block entries are constant.
        let between = r.get(2, 0);
        for (j, k) in [(2, 1), (3, 0), (3, 1), (4, 0), (4, 1)] {
            assert_abs_diff_eq!(r.get(j, k), between, epsilon = 1e-10);
        }
        assert!(r.get(1, 0) > between);
    }
}
