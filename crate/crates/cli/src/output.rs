use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::json;
use zcorr::inference::{aic, bic, wald};
use zcorr::model::config::{FitSection, ModelConfig};
use zcorr::model::csv::format_full;
use zcorr::simulate::SimData;
use zcorr::{Error, FitResult, LrtResult, Result};

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("writing CSV: {e}"))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Config(format!("writing JSON: {e}"))
}

/// `(z, p)` or NaNs for fixed and degenerate coefficients.
fn wald_or_nan(fit: &FitResult, i: usize) -> (f64, f64) {
    wald(fit, i).unwrap_or((f64::NAN, f64::NAN))
}

pub fn write_estimates(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["coefficient", "block", "estimate", "std_error", "z", "p"]).map_err(csv_err)?;
    let est = fit.estimates();
    for (i, label) in fit.labels.iter().enumerate() {
        let (z, p) = wald_or_nan(fit, i);
        w.write_record([
            label.name.clone(),
            label.block.as_str().to_string(),
            format_full(est[i]),
            format_full(fit.std_errors[i]),
            format_full(z),
            format_full(p),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(path: &Path, fit: &FitResult) -> Result<()> {
    let summary = json!({
        "loglik": fit.loglik,
        "aic": aic(fit, fit.n_groups),
        "bic": bic(fit, fit.n_groups),
        "iterations": fit.iterations,
        "converged": fit.converged,
        "score_norm": fit.score_norm,
        "n_groups": fit.n_groups,
        "n_obs": fit.n_obs,
        "n_free": fit.n_free(),
    });
    fs::write(path, serde_json::to_string_pretty(&summary).map_err(json_err)?)?;
    Ok(())
}

pub fn write_trace(path: &Path, fit: &FitResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for entry in &fit.trace {
        w.serialize(entry).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lrt(path: &Path, res: &LrtResult, full: &FitResult, restricted: &FitResult) -> Result<()> {
    let report = json!({
        "statistic": res.statistic,
        "df": res.df,
        "p_value": res.p_value,
        "loglik_full": full.loglik,
        "loglik_null": restricted.loglik,
        "converged_full": full.converged,
        "converged_null": restricted.converged,
    });
    fs::write(path, serde_json::to_string_pretty(&report).map_err(json_err)?)?;
    Ok(())
}

/// Human-readable rendering of the estimates.
pub fn estimates_table(fit: &FitResult, response: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "response {response}: {} groups, {} observations, loglik {:.4}, {} iterations{}",
        fit.n_groups,
        fit.n_obs,
        fit.loglik,
        fit.iterations,
        if fit.converged { "" } else { " (NOT CONVERGED)" }
    );
    let _ = writeln!(s, "{:<32} {:>11} {:>10} {:>8} {:>9}", "coefficient", "estimate", "std.err", "z", "p");
    let est = fit.estimates();
    for (i, label) in fit.labels.iter().enumerate() {
        let (z, p) = wald_or_nan(fit, i);
        if fit.free[i] {
            let _ = writeln!(s, "{:<32} {:>11.5} {:>10.5} {:>8.2} {:>9.2e}", label.to_string(), est[i], fit.std_errors[i], z, p);
        } else {
            let _ = writeln!(s, "{:<32} {:>11.5} {:>10}", label.to_string(), est[i], "fixed");
        }
    }
    s
}

/// A fit config matching a generated dataset.
pub fn model_config(sim: &SimData, data_file: &str) -> Result<String> {
    let spec = &sim.dataset.spec;
    let cfg = ModelConfig {
        data: Some(data_file.into()),
        response: sim.layout.response.clone(),
        group: sim.layout.group.clone(),
        subgroups: sim.layout.subgroups.clone(),
        categorical: sim.layout.categorical.clone(),
        mean: spec.mean.clone(),
        variance: spec.variance.clone(),
        correlation: spec.correlation.iter().map(|r| r.name.clone()).collect(),
        output: Some("fit".into()),
        fit: FitSection::default(),
        fix: Default::default(),
    };
    toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))
}
