//! TOML run configuration.
//!
//! ```toml
//! data = "students.csv"
//! response = "score"
//! group = "school"
//! subgroups = ["class"]
//! mean = ["intercept", "sex"]
//! variance = ["intercept"]
//! correlation = ["intercept", "same_subgroup:class"]
//! output = "out"
//!
//! [fit]
//! max_iter = 500
//! tol = 1e-7
//! restarts = 0
//! seed = 1
//!
//! [fix]
//! "matlogcorr.intercept" = 0.2
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::FitOptions;
use crate::model::csv::CsvLayout;
use crate::model::{CoefficientLabel, GroupedDataset, ModelSpec, PairCovariateRule};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSection {
    pub max_iter: Option<usize>,
    pub tol: Option<f64>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub data: Option<PathBuf>,
    pub response: String,
    #[serde(default = "default_group")]
    pub group: String,
    #[serde(default)]
    pub subgroups: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default = "intercept_only")]
    pub mean: Vec<String>,
    #[serde(default = "intercept_only")]
    pub variance: Vec<String>,
    #[serde(default = "intercept_only")]
    pub correlation: Vec<String>,
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub fit: FitSection,
    /// Coefficients held at a given value, keyed by `block.name` labels.
    #[serde(default)]
    pub fix: BTreeMap<String, f64>,
}

fn default_group() -> String {
    "group".into()
}

fn intercept_only() -> Vec<String> {
    vec![crate::model::INTERCEPT.into()]
}

impl ModelConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data` path is resolved against the
    /// file's directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let (Some(data), Some(dir)) = (&cfg.data, path.parent()) {
            if data.is_relative() {
                cfg.data = Some(dir.join(data));
            }
        }
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if let Some(tol) = self.fit.tol {
            if !(tol > 0.0 && tol.is_finite()) {
                return Err(Error::Config(format!("fit.tol must be positive, got {tol}")));
            }
        }
        if self.fit.max_iter == Some(0) {
            return Err(Error::Config("fit.max_iter must be at least 1".into()));
        }
        for rule in &self.correlation {
            PairCovariateRule::parse(rule)?;
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec {
            mean: self.mean.clone(),
            variance: self.variance.clone(),
            correlation: self
                .correlation
                .iter()
                .map(|r| PairCovariateRule::parse(r))
                .collect::<Result<_>>()?,
            subgroup_levels: self.subgroups.clone(),
        })
    }

    pub fn csv_layout(&self) -> CsvLayout {
        CsvLayout {
            group: self.group.clone(),
            subgroups: self.subgroups.clone(),
            response: self.response.clone(),
            categorical: self.categorical.clone(),
        }
    }

    pub fn fit_options(&self) -> FitOptions {
        let d = FitOptions::default();
        FitOptions {
            max_iter: self.fit.max_iter.unwrap_or(d.max_iter),
            tol: self.fit.tol.unwrap_or(d.tol),
            restarts: self.fit.restarts.unwrap_or(d.restarts),
            seed: self.fit.seed.unwrap_or(d.seed),
            ..d
        }
    }

    /// Resolves the `[fix]` table against the dataset's coefficient labels,
    /// returning `(flat index, value)` pairs.
    pub fn fixed_coefficients(&self, data: &GroupedDataset) -> Result<Vec<(usize, f64)>> {
        let labels: Vec<String> = data.coefficient_labels().iter().map(CoefficientLabel::to_string).collect();
        self.fix
            .iter()
            .map(|(name, v)| {
                labels
                    .iter()
                    .position(|l| l == name)
                    .map(|i| (i, *v))
                    .ok_or_else(|| Error::Config(format!("[fix] refers to unknown coefficient `{name}`")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PairRuleKind;

    #[test]
    fn parses_full_config() {
        let cfg = ModelConfig::from_toml_str(
            r#"
            data = "d.csv"
            response = "y"
            subgroups = ["class"]
            mean = ["intercept", "x"]
            correlation = ["intercept", "same_subgroup:class", "absdiff:t"]
            [fit]
            max_iter = 50
            tol = 1e-8
            [fix]
            "matlogcorr.intercept" = 0.5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.group, "group");
        assert_eq!(cfg.variance, vec!["intercept"]);
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.correlation[1].kind, PairRuleKind::SameSubgroup("class".into()));
        let opts = cfg.fit_options();
        assert_eq!(opts.max_iter, 50);
        assert_eq!(opts.tol, 1e-8);
        assert_eq!(cfg.fix["matlogcorr.intercept"], 0.5);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(matches!(
            ModelConfig::from_toml_str("response = \"y\"\n[fit]\ntol = -1.0\n"),
            Err(Error::Config(_))
        ));
        assert!(ModelConfig::from_toml_str("response = \"y\"\nbogus = 1\n").is_err());
        assert!(ModelConfig::from_toml_str("mean = [\"x\"]\n").is_err());
        assert!(ModelConfig::from_toml_str("response = \"y\"\ncorrelation = [\"nonsense:x\"]\n").is_err());
    }
}
