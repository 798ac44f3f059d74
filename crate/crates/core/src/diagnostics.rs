//! Built-in numerical self-checks: inverse round trips, the AR(+-0.5)
//! Jacobian reference values, the two-dimensional Fisher z reduction, order
//! invariance and the analytic score against finite differences.

use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::gzt::{gzt_forward, gzt_inverse, permute, JacobianOptions, JacobianWorkspace};
use crate::likelihood::{log_likelihood, score};
use crate::matcalc::{eigh, CorrelationMatrix, EigenDecomposition};
use crate::model::ParameterVector;
use crate::simulate::{family_correlation, generate, random_correlation, rng_from_seed, DesignKind, Family, SimDesign};

/// Published `d vecl(R) / d gamma` at the 3x3 AR(0.5) matrix, three decimals.
pub const AR05_JACOBIAN: [[f64; 3]; 3] = [[0.736, 0.188, 0.014], [0.188, 0.910, 0.188], [0.014, 0.188, 0.736]];

/// Tolerance for comparison with the three-decimal reference values.
pub const REFERENCE_TOL: f64 = 5e-4;

#[derive(Debug, Clone, Serialize)]
pub struct CheckItem {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SelfcheckOptions {
    /// Jacobian settings under test; the default is the production setting.
    pub jacobian: JacobianOptions,
    pub seed: u64,
}

fn jacobian_with(r: &CorrelationMatrix, opts: JacobianOptions) -> crate::Result<DMatrix<f64>> {
    let eig = eigh(r.as_symmetric())?;
    let log_eigen = EigenDecomposition {
        eigenvalues: eig.eigenvalues.map(f64::ln),
        eigenvectors: eig.eigenvectors,
    };
    Ok(JacobianWorkspace::from_log_eigen(&log_eigen, opts)?.jacobian())
}

fn item(name: &'static str, result: crate::Result<(bool, String)>) -> CheckItem {
    match result {
        Ok((passed, detail)) => CheckItem { name, passed, detail },
        Err(e) => CheckItem {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn check_round_trip(seed: u64) -> crate::Result<(bool, String)> {
    let mut rng = rng_from_seed(seed);
    let mut worst = 0.0f64;
    for m in 2..=10 {
        for _ in 0..10 {
            let r = random_correlation(m, &mut rng);
            let back = gzt_inverse(&gzt_forward(&r)?)?;
            worst = worst.max((back.to_dense() - r.to_dense()).amax());
        }
    }
    Ok((worst <= 1e-8, format!("max error {worst:.2e} over 90 matrices")))
}

fn check_reference_jacobian(opts: JacobianOptions) -> crate::Result<(bool, String)> {
    let j = jacobian_with(&family_correlation(Family::Ar1, 0.5, 3)?, opts)?;
    let mut worst = 0.0f64;
    for (a, row) in AR05_JACOBIAN.iter().enumerate() {
        for (b, want) in row.iter().enumerate() {
            worst = worst.max((j[(a, b)] - want).abs());
        }
    }
    Ok((worst <= REFERENCE_TOL, format!("max deviation {worst:.2e}")))
}

fn check_negative_pattern(opts: JacobianOptions) -> crate::Result<(bool, String)> {
    let j = jacobian_with(&family_correlation(Family::Ar1, -0.5, 3)?, opts)?;
    let mut ok = true;
    for (a, row) in AR05_JACOBIAN.iter().enumerate() {
        for (b, want) in row.iter().enumerate() {
            let sign = if (a + b) % 2 == 0 { 1.0 } else { -1.0 };
            ok &= j[(a, b)].signum() == sign && (j[(a, b)].abs() - want).abs() <= REFERENCE_TOL;
        }
    }
    Ok((ok, "signs [[+,-,+],[-,+,-],[+,-,+]]".into()))
}

fn check_fisher_z() -> crate::Result<(bool, String)> {
    let mut worst = 0.0f64;
    for i in -99..=99 {
        let rho = i as f64 / 100.0;
        let r = CorrelationMatrix::from_dense(&DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]))?;
        worst = worst.max((gzt_forward(&r)?.values()[0] - rho.atanh()).abs());
    }
    Ok((worst <= 1e-12, format!("max |gamma - atanh(rho)| {worst:.2e}")))
}

fn check_order_invariance(seed: u64) -> crate::Result<(bool, String)> {
    let mut rng = rng_from_seed(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let m = rng.random_range(2..=8);
        let r = random_correlation(m, &mut rng);
        let mut perm: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let g = crate::matcalc::vecl_inverse(gzt_forward(&r)?.values(), &vec![0.0; m])?;
        let lhs = crate::matcalc::vecl(&crate::matcalc::SymmetricMatrix::from_dense_symmetrized(&DMatrix::from_fn(m, m, |a, b| {
            g.get(perm[a], perm[b])
        })));
        let rhs = gzt_forward(&permute(&r, &perm)?)?;
        let d = lhs.iter().zip(rhs.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    Ok((worst <= 1e-10, format!("max discrepancy {worst:.2e}")))
}

/// Largest `|fd - s| / max(|s|, 1)` over coefficients.
fn check_score(seed: u64) -> crate::Result<(bool, String)> {
    let sim = generate(&SimDesign::new(DesignKind::Study1, 5, seed))?;
    let data = &sim.dataset;
    let (p, d, q) = (data.p(), data.d(), data.q());
    let mut rng = rng_from_seed(seed ^ 0xfd);
    let w: Vec<f64> = sim.truth.to_vec().iter().map(|v| v + 0.2 * (rng.random::<f64>() - 0.5)).collect();
    let at = |v: &[f64]| ParameterVector::from_slice(v, p, d, q);
    let s = score(&at(&w)?, data)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..w.len() {
        let mut up = w.clone();
        let mut dn = w.clone();
        up[i] += h;
        dn[i] -= h;
        let fd = (log_likelihood(&at(&up)?, data)? - log_likelihood(&at(&dn)?, data)?) / (2.0 * h);
        worst = worst.max((fd - s[i]).abs() / s[i].abs().max(1.0));
    }
    Ok((worst <= 1e-5, format!("max relative error {worst:.2e}")))
}

/// Runs every check. All pass on a correct build.
pub fn run_selfcheck(opts: SelfcheckOptions) -> Vec<CheckItem> {
    vec![
        item("round trip", check_round_trip(opts.seed)),
        item("AR(0.5) Jacobian", check_reference_jacobian(opts.jacobian)),
        item("AR(-0.5) Jacobian", check_negative_pattern(opts.jacobian)),
        item("Fisher z at m=2", check_fisher_z()),
        item("order invariance", check_order_invariance(opts.seed)),
        item("score vs finite differences", check_score(opts.seed)),
    ]
}
