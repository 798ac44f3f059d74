use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn zcorr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zcorr")).args(args).output().expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("fit.json")).unwrap()).unwrap()
}

/// Rows of `estimates.csv` as `(block.coefficient, estimate)`.
fn estimates(dir: &Path) -> Vec<(String, f64)> {
    let mut rdr = csv::Reader::from_path(dir.join("estimates.csv")).unwrap();
    rdr.records()
        .map(|r| {
            let r = r.unwrap();
            (format!("{}.{}", &r[1], &r[0]), r[2].parse().unwrap())
        })
        .collect()
}

/// Deterministic pseudo-normal values without an RNG dependency.
fn iid_values(n: usize) -> Vec<f64> {
    let mut state: u64 = 0x2545_f491_4f6c_dd1d;
    (0..n)
        .map(|_| {
            let mut s = 0.0;
            for _ in 0..12 {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                s += (state >> 11) as f64 / (1u64 << 53) as f64;
            }
            2.0 + 1.5 * (s - 6.0)
        })
        .collect()
}

fn write_iid(dir: &Path) -> Vec<f64> {
    let y = iid_values(90);
    let mut text = String::from("group,y\n");
    for (i, v) in y.iter().enumerate() {
        text.push_str(&format!("g{},{v}\n", i / 3));
    }
    fs::write(dir.join("iid.csv"), text).unwrap();
    y
}

fn simulate(dir: &Path, design: &str, n: &str, seed: &str) -> PathBuf {
    let out = dir.join(format!("{design}-{seed}"));
    let o = zcorr(&["simulate", "--design", design, "--n", n, "--seed", seed, "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn intercept_only_fit_recovers_sample_variance() {
    let tmp = TempDir::new().unwrap();
    let y = write_iid(tmp.path());
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    // With the correlation held at zero the estimates are closed form.
    fs::write(
        tmp.path().join("iid.toml"),
        "data = \"iid.csv\"\nresponse = \"y\"\n[fix]\n\"matlogcorr.intercept\" = 0.0\n",
    )
    .unwrap();
    let out = tmp.path().join("fixed");
    let o = zcorr(&["fit", "--config", arg(&tmp.path().join("iid.toml")), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = estimates(&out);
    assert!((est[0].1 - mean).abs() < 1e-8);
    assert!((est[2].1 - var.ln()).abs() < 1e-8, "{} vs {}", est[2].1, var.ln());

    // Free correlation: close to the same values for independent data.
    fs::write(tmp.path().join("free.toml"), "data = \"iid.csv\"\nresponse = \"y\"\n").unwrap();
    let out = tmp.path().join("free");
    let o = zcorr(&["fit", "--config", arg(&tmp.path().join("free.toml")), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let est = estimates(&out);
    assert!((est[2].1 - var.ln()).abs() < 0.1);
    assert_eq!(summary(&out)["converged"], true);
}

#[test]
fn malformed_csv_reports_the_line() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("bad.csv"), "group,y\ng1,1.0\ng1,oops\n").unwrap();
    fs::write(tmp.path().join("m.toml"), "data = \"bad.csv\"\nresponse = \"y\"\n").unwrap();
    let o = zcorr(&["fit", "--config", arg(&tmp.path().join("m.toml")), "--out", arg(tmp.path())]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn bad_usage_exits_one() {
    assert_eq!(zcorr(&["fit"]).status.code(), Some(1));
    assert_eq!(zcorr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(zcorr(&["--help"]).status.code(), Some(0));
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("m.toml"), "response = \"y\"\n").unwrap();
    let o = zcorr(&["fit", "--config", arg(&tmp.path().join("m.toml"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn study2_fit_refit_and_lrt() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), "study2-i", "40", "11");
    let cfg = sim.join("model.toml");
    let fit_dir = tmp.path().join("fit");
    let o = zcorr(&["fit", "--config", arg(&cfg), "--out", arg(&fit_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let labels: Vec<String> = estimates(&fit_dir).into_iter().map(|e| e.0).collect();
    assert!(labels.contains(&"matlogcorr.intercept".to_string()));
    assert!(labels.contains(&"matlogcorr.same_subgroup:class".to_string()));
    assert!(fs::read_to_string(fit_dir.join("trace.csv")).unwrap().starts_with("iteration,loglik,step,halvings"));

    // starting from the estimates converges almost at once
    let refit = tmp.path().join("refit");
    let o = zcorr(&["fit", "--config", arg(&cfg), "--init", arg(&fit_dir.join("estimates.csv")), "--out", arg(&refit)]);
    assert!(o.status.success());
    assert!(summary(&refit)["iterations"].as_u64().unwrap() <= 2);

    // a null without the class effect: one parameter fewer, strongly rejected
    let text = fs::read_to_string(&cfg).unwrap();
    let null_text = text.replace("correlation = [\"intercept\", \"same_subgroup:class\"]", "correlation = [\"intercept\"]");
    assert_ne!(text, null_text);
    let null_cfg = sim.join("null.toml");
    fs::write(&null_cfg, null_text).unwrap();
    let lrt_dir = tmp.path().join("lrt");
    let o = zcorr(&["lrt", "--full", arg(&cfg), "--null", arg(&null_cfg), "--out", arg(&lrt_dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(lrt_dir.join("lrt.json")).unwrap()).unwrap();
    assert_eq!(report["df"], 1);
    assert!(report["p_value"].as_f64().unwrap() < 1e-3);

    // identical models
    let o = zcorr(&["lrt", "--full", arg(&cfg), "--null", arg(&cfg), "--out", arg(&lrt_dir)]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(lrt_dir.join("lrt.json")).unwrap()).unwrap();
    assert_eq!(report["df"], 0);
    assert_eq!(report["p_value"], 1.0);

    // reversed roles are not nested
    let o = zcorr(&["lrt", "--full", arg(&null_cfg), "--null", arg(&cfg), "--out", arg(&lrt_dir)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not nested"));
}

#[test]
fn non_convergence_still_writes_artifacts() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), "study1", "30", "2");
    let cfg = sim.join("model.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("[fit]", "[fit]\nmax_iter = 1");
    fs::write(&cfg, text).unwrap();
    let out = tmp.path().join("out");
    let o = zcorr(&["fit", "--config", arg(&cfg), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(summary(&out)["converged"], false);
    assert!(out.join("estimates.csv").exists() && out.join("trace.csv").exists());
}

#[test]
fn outputs_are_deterministic() {
    let tmp = TempDir::new().unwrap();
    let a = simulate(tmp.path(), "study1", "25", "5");
    let b = tmp.path().join("again");
    let o = zcorr(&["simulate", "--design", "study1", "--n", "25", "--seed", "5", "--out", arg(&b)]);
    assert!(o.status.success());
    assert_eq!(fs::read(a.join("data.csv")).unwrap(), fs::read(b.join("data.csv")).unwrap());
    assert_eq!(fs::read(a.join("truth.toml")).unwrap(), fs::read(b.join("truth.toml")).unwrap());

    let (o1, o2) = (tmp.path().join("f1"), tmp.path().join("f2"));
    zcorr(&["fit", "--config", arg(&a.join("model.toml")), "--out", arg(&o1)]);
    zcorr(&["--threads", "1", "fit", "--config", arg(&b.join("model.toml")), "--out", arg(&o2)]);
    assert_eq!(fs::read(o1.join("estimates.csv")).unwrap(), fs::read(o2.join("estimates.csv")).unwrap());
}

#[test]
fn correlogram_writes_strata() {
    let tmp = TempDir::new().unwrap();
    let sim = simulate(tmp.path(), "study2-ii", "30", "4");
    let out = tmp.path().join("cg");
    let o = zcorr(&["correlogram", "--config", arg(&sim.join("model.toml")), "--covariate", "t", "--strata", "0:0.3,0.3:inf", "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("correlogram.csv")).unwrap();
    assert!(text.lines().count() >= 3, "{text}");
}

#[test]
fn selfcheck_passes() {
    let o = zcorr(&["selfcheck"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(text.matches("PASS").count(), 6, "{text}");
}
