use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Deserialize;
use zcorr::diagnostics::{run_selfcheck, SelfcheckOptions};
use zcorr::inference::{gzt_correlogram, lrt as lrt_test};
use zcorr::likelihood::fit as fit_model;
use zcorr::model::config::ModelConfig;
use zcorr::model::csv::read_records_path;
use zcorr::simulate::{generate, truth_toml, write_dataset, DesignKind, ErrorKind, SimDesign, Study2Case};
use zcorr::{build_dataset, Error, FitOptions, FitResult, GroupedDataset, ParameterVector, Result};

use crate::output;
use crate::{DesignArg, Overrides};

/// Maps a failure to the documented exit status.
pub fn exit_code(e: &Error) -> ExitCode {
    match e {
        Error::FitNotConverged(_) => ExitCode::from(2),
        Error::Config(_)
        | Error::Parse { .. }
        | Error::Io(_)
        | Error::MissingCovariate { .. }
        | Error::EmptyGroup(_)
        | Error::EmptyDataset
        | Error::InconsistentTypes(_)
        | Error::NonFiniteInput(_)
        | Error::BadDesign(_)
        | Error::NotNested(_)
        | Error::DimensionMismatch { .. } => ExitCode::from(1),
        _ => ExitCode::from(3),
    }
}

struct Loaded {
    cfg: ModelConfig,
    data: GroupedDataset,
    opts: FitOptions,
    out: PathBuf,
}

fn load(config: &Path, overrides: &Overrides) -> Result<Loaded> {
    let mut cfg = ModelConfig::from_path(config)?;
    if let Some(d) = &overrides.data {
        cfg.data = Some(d.clone());
    }
    match (&overrides.out, &cfg.output, config.parent()) {
        (Some(o), _, _) => cfg.output = Some(o.clone()),
        (None, Some(o), Some(dir)) if o.is_relative() => cfg.output = Some(dir.join(o)),
        _ => {}
    }
    if let Some(s) = overrides.seed {
        cfg.fit.seed = Some(s);
    }
    let path = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Config("no data file: set `data` in the config or pass --data".into()))?;
    let records = read_records_path(&path, &cfg.csv_layout())?;
    let data = build_dataset(&records, &cfg.model_spec()?)?;
    let opts = FitOptions {
        fixed: cfg.fixed_coefficients(&data)?,
        ..cfg.fit_options()
    };
    let out = cfg.output.clone().unwrap_or_else(|| PathBuf::from("zcorr-out"));
    Ok(Loaded { cfg, data, opts, out })
}

/// Fits, keeping the partial result of a fit that ran out of iterations.
fn fit_keep_partial(data: &GroupedDataset, init: Option<&ParameterVector>, opts: &FitOptions) -> Result<FitResult> {
    match fit_model(data, init, opts) {
        Ok(r) => Ok(r),
        Err(Error::FitNotConverged(r)) => Ok(*r),
        Err(e) => Err(e),
    }
}

#[derive(Deserialize)]
struct EstimateRow {
    coefficient: String,
    block: String,
    estimate: f64,
}

fn read_init(path: &Path, data: &GroupedDataset) -> Result<ParameterVector> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut values = BTreeMap::new();
    for (i, row) in rdr.deserialize::<EstimateRow>().enumerate() {
        let row = row.map_err(|e| Error::Parse {
            line: i as u64 + 2,
            message: e.to_string(),
        })?;
        values.insert(format!("{}.{}", row.block, row.coefficient), row.estimate);
    }
    let labels = data.coefficient_labels();
    if values.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} holds {} coefficients, the model has {}",
            path.display(),
            values.len(),
            labels.len()
        )));
    }
    let flat = labels
        .iter()
        .map(|l| {
            values
                .get(&l.to_string())
                .copied()
                .ok_or_else(|| Error::Config(format!("{} has no row for `{l}`", path.display())))
        })
        .collect::<Result<Vec<_>>>()?;
    ParameterVector::from_slice(&flat, data.p(), data.d(), data.q())
}

fn status(res: &FitResult) -> ExitCode {
    if res.converged {
        ExitCode::SUCCESS
    } else {
        eprintln!("warning: fit did not converge after {} iterations", res.iterations);
        ExitCode::from(2)
    }
}

pub fn fit(config: &Path, init: Option<&Path>, overrides: &Overrides) -> Result<ExitCode> {
    let l = load(config, overrides)?;
    let start = init.map(|p| read_init(p, &l.data)).transpose()?;
    let res = fit_keep_partial(&l.data, start.as_ref(), &l.opts)?;
    fs::create_dir_all(&l.out)?;
    output::write_estimates(&l.out.join("estimates.csv"), &res)?;
    output::write_summary(&l.out.join("fit.json"), &res)?;
    output::write_trace(&l.out.join("trace.csv"), &res)?;
    print!("{}", output::estimates_table(&res, &l.cfg.response));
    Ok(status(&res))
}

pub fn lrt(full: &Path, null: &Path, overrides: &Overrides) -> Result<ExitCode> {
    let f = load(full, overrides)?;
    let n = load(null, overrides)?;
    let full_fit = fit_keep_partial(&f.data, None, &f.opts)?;
    let null_fit = fit_keep_partial(&n.data, None, &n.opts)?;
    if !full_fit.converged || !null_fit.converged {
        eprintln!("warning: a fit did not converge; the statistic is not reliable");
    }
    let res = lrt_test(&full_fit, &null_fit)?;
    println!("statistic {}  df {}  p-value {}", res.statistic, res.df, res.p_value);
    fs::create_dir_all(&f.out)?;
    output::write_lrt(&f.out.join("lrt.json"), &res, &full_fit, &null_fit)?;
    Ok(if full_fit.converged && null_fit.converged {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn parse_strata(spec: &str) -> Result<Vec<(f64, f64)>> {
    spec.split(',')
        .map(|part| {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("stratum `{part}` is not of the form lo:hi")))?;
            let num = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad stratum bound `{s}`")))
            };
            Ok((num(lo)?, num(hi)?))
        })
        .collect()
}

pub fn correlogram(config: &Path, covariate: &str, strata: Option<&str>, overrides: &Overrides) -> Result<ExitCode> {
    let l = load(config, overrides)?;
    let strata = strata.map(parse_strata).transpose()?;
    let res = fit_keep_partial(&l.data, None, &l.opts)?;
    let table = gzt_correlogram(&l.data, &res, covariate, strata.as_deref())?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&l.out)?;
    table.write_csv(fs::File::create(l.out.join("correlogram.csv"))?)?;
    for s in &table.strata {
        println!("[{}, {})  pairs {:>6}  mean {:.4}", s.lo, s.hi, s.pairs, s.mean);
    }
    Ok(status(&res))
}

fn design_kind(d: DesignArg) -> DesignKind {
    match d {
        DesignArg::Study1 => DesignKind::Study1,
        DesignArg::Study2I => DesignKind::Study2(Study2Case::I),
        DesignArg::Study2Ii => DesignKind::Study2(Study2Case::II),
        DesignArg::Study2Iii => DesignKind::Study2(Study2Case::III),
        DesignArg::Study2Iv => DesignKind::Study2(Study2Case::IV),
        DesignArg::Study3 => DesignKind::Study3,
    }
}

pub fn simulate(design: DesignArg, n: usize, seed: u64, t_df: Option<f64>, out: &Path) -> Result<ExitCode> {
    let mut d = SimDesign::new(design_kind(design), n, seed);
    if let Some(df) = t_df {
        d = d.with_errors(ErrorKind::StudentT(df));
    }
    let sim = generate(&d)?;
    fs::create_dir_all(out)?;
    write_dataset(fs::File::create(out.join("data.csv"))?, &sim)?;
    fs::write(out.join("truth.toml"), truth_toml(&d, &sim)?)?;
    fs::write(out.join("model.toml"), output::model_config(&sim, "data.csv")?)?;
    println!(
        "wrote {} groups ({} observations) to {}",
        sim.dataset.n_groups(),
        sim.dataset.n_obs(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn selfcheck(seed: u64) -> Result<ExitCode> {
    let items = run_selfcheck(SelfcheckOptions {
        seed,
        ..Default::default()
    });
    for it in &items {
        println!("{:<30} {}  {}", it.name, if it.passed { "PASS" } else { "FAIL" }, it.detail);
    }
    Ok(if items.iter().all(|i| i.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(3)
    })
}
