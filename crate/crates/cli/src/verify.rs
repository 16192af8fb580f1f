//! Invariant battery behind `memport verify`.
//!
//! Model-dependent checks use the configured model, or the built-in
//! two-asset fixture when none is given. Monte Carlo checks derive their
//! seeds from `--seed`.

use memport::fixtures;
use memport::kernels::{alpha_star_j, variance_ratio_f};
use memport::riccati::{asymptotic_diagnostics, DEFAULT_STEPS_PER_UNIT_TIME};
use memport::simulate::{
    cameron_martin_closed_form, mc_cameron_martin, CmComponent, CmProblem, NoiseSimulator, PathConfig, XiScheme,
    CM_STEPS_PER_UNIT_TIME,
};
use memport::stats::mean_var;
use memport::strategy::{
    benchmark_threshold, growth_rate_j, infinite_horizon_identities, mgf_lambda, rate_function_i,
    FiniteHorizonPolicy, StationaryPolicy,
};
use memport::{CoefficientCurves, MemoryParams, PowerUtility};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Model, SCHEMA_VERSION};
use crate::error::CliResult;
use crate::manifest::Output;
use crate::VerifyArgs;

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub pass: bool,
    /// Measured quantity compared against `tolerance`.
    pub value: f64,
    pub tolerance: f64,
    pub detail: String,
}

fn row(name: &'static str, value: f64, tolerance: f64, detail: String) -> CheckRow {
    CheckRow {
        name,
        pass: value <= tolerance,
        value,
        tolerance,
        detail,
    }
}

struct Ctx {
    params: MemoryParams,
    curves: CoefficientCurves,
    seed: u64,
}

type CheckFn = fn(&Ctx) -> memport::Result<CheckRow>;

const CHECKS: &[(&str, CheckFn)] = &[
    ("kernel-identity", kernel_identity),
    ("merton-growth", merton_growth),
    ("merton-value", merton_value),
    ("two-route-growth", two_route_growth),
    ("infinite-horizon-identities", identities),
    ("riccati-asymptotics", riccati_asymptotics),
    ("cameron-martin-cosh", cameron_martin_cosh),
    ("cameron-martin-mc", cameron_martin_mc),
    ("benchmark-slope", benchmark_slope),
    ("rate-function-shape", rate_function_shape),
    ("noise-variance-law", noise_variance),
];

fn kernel_identity(ctx: &Ctx) -> memport::Result<CheckRow> {
    let base = [(0.5, 0.5), (0.086, 0.305), (3.0, 0.01), (0.0, 0.4), (20.0, 7.0)];
    let mut sets: Vec<(f64, f64)> = base.to_vec();
    sets.extend(ctx.params.p().iter().copied().zip(ctx.params.q().iter().copied()));
    let mut worst = 0.0f64;
    for (p, q) in sets {
        let m = MemoryParams::new(vec![p], vec![q])?;
        for k in 0..1000 {
            let t = 50.0 * k as f64 / 999.0;
            worst = worst.max((m.kernel_k(0, t, t)? - m.kernel_l_diag(0, t)?).abs());
        }
    }
    Ok(row("kernel-identity", worst, 1e-12, "max |k(t,t) - l(t)| on a 1000-point grid".into()))
}

const MERTON_LAMBDAS: [&[f64]; 3] = [&[0.4], &[0.3, -0.2], &[0.25, 0.1, 0.35]];

fn merton_growth(_: &Ctx) -> memport::Result<CheckRow> {
    let mut worst = 0.0f64;
    for lam in MERTON_LAMBDAS {
        let (params, curves) = fixtures::merton(lam.len(), 0.03, lam)?;
        let norm2: f64 = lam.iter().map(|l| l * l).sum();
        for alpha in [-1.0, 0.5] {
            let rep = growth_rate_j(&params, &curves, &PowerUtility::new(alpha)?)?;
            let exact = 0.03 + norm2 / (2.0 * (1.0 - alpha));
            worst = worst.max((rep.j_via_g - exact).abs()).max((rep.j_via_fg - exact).abs());
        }
    }
    Ok(row("merton-growth", worst, 1e-10, "|J - Merton| for p=0, n<=3, alpha in {-1, 0.5}".into()))
}

fn merton_value(_: &Ctx) -> memport::Result<CheckRow> {
    let mut worst = 0.0f64;
    let (x, t) = (1.7f64, 4.0);
    for lam in MERTON_LAMBDAS {
        let (params, curves) = fixtures::merton(lam.len(), 0.03, lam)?;
        let norm2: f64 = lam.iter().map(|l| l * l).sum();
        for alpha in [-1.0, 0.5] {
            let u = PowerUtility::new(alpha)?;
            let v = FiniteHorizonPolicy::solve(&params, &curves, &u, t, DEFAULT_STEPS_PER_UNIT_TIME)?.value_function(x)?;
            let exact = x.powf(alpha) * (alpha * (0.03 + norm2 / (2.0 * (1.0 - alpha))) * t).exp() / alpha;
            worst = worst.max(((v - exact) / exact).abs());
        }
    }
    Ok(row("merton-value", worst, 1e-8, "relative value-function error for p=0, T=4".into()))
}

/// Seeded admissible single-asset tuples `(p, q, lambda_bar, alpha)`.
fn sweep(seed: u64) -> memport::Result<Vec<(MemoryParams, CoefficientCurves, PowerUtility)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..200)
        .map(|_| {
            let p = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..2.0) };
            let q = rng.random_range(0.05..1.5);
            let lam = rng.random_range(-1.0..1.0);
            let lower = alpha_star_j(p, q).max(-6.0) + 1e-3;
            let alpha = loop {
                let a = rng.random_range(lower..1.0 - 1e-3);
                if a.abs() > 1e-3 {
                    break a;
                }
            };
            let params = MemoryParams::new(vec![p], vec![q])?;
            let curves = CoefficientCurves::constant(0.02, &DMatrix::from_element(1, 1, 0.3), &[lam])?;
            Ok((params, curves, PowerUtility::new(alpha)?))
        })
        .collect()
}

fn admissible_alphas(params: &MemoryParams) -> Vec<f64> {
    let star = memport::kernels::alpha_star(params);
    [-1.0, 0.5].into_iter().filter(|&a| a > star).collect()
}

fn two_route_growth(ctx: &Ctx) -> memport::Result<CheckRow> {
    let mut worst = 0.0f64;
    for (p, c, u) in sweep(ctx.seed)? {
        worst = worst.max(growth_rate_j(&p, &c, &u)?.route_gap);
    }
    for a in admissible_alphas(&ctx.params) {
        worst = worst.max(growth_rate_j(&ctx.params, &ctx.curves, &PowerUtility::new(a)?)?.route_gap);
    }
    Ok(row("two-route-growth", worst, 1e-9, "max |J_g - J_FG| over 200 tuples and the model".into()))
}

fn identities(ctx: &Ctx) -> memport::Result<CheckRow> {
    let mut worst = 0.0f64;
    for (p, c, u) in sweep(ctx.seed)? {
        worst = worst.max(infinite_horizon_identities(&p, &c, &u)?.max_residual);
    }
    Ok(row("infinite-horizon-identities", worst, 1e-9, "max steady-state identity residual".into()))
}

fn riccati_asymptotics(ctx: &Ctx) -> memport::Result<CheckRow> {
    let mut worst = 0.0f64;
    let mut decreasing = true;
    for alpha in admissible_alphas(&ctx.params) {
        let u = PowerUtility::new(alpha)?;
        let steady = StationaryPolicy::new(&ctx.params, &ctx.curves, &u)?;
        let family = [25.0, 50.0, 100.0, 200.0]
            .iter()
            .map(|&t| FiniteHorizonPolicy::solve(&ctx.params, &ctx.curves, &u, t, DEFAULT_STEPS_PER_UNIT_TIME))
            .collect::<memport::Result<Vec<_>>>()?;
        for (j, s) in steady.steady().iter().enumerate() {
            let rs: Vec<_> = family.iter().map(|f| f.riccati(j).clone()).collect();
            let vs: Vec<_> = family.iter().map(|f| f.linear(j).clone()).collect();
            for rep in [
                asymptotic_diagnostics(&rs, s.r_bar, 0.25, 0.25, 1e-5)?,
                asymptotic_diagnostics(&vs, s.v_bar, 0.25, 0.25, 1e-5)?,
            ] {
                decreasing &= rep.decreasing;
                worst = worst.max(rep.entries.last().map_or(f64::INFINITY, |e| e.sup_deviation));
            }
        }
    }
    let mut r = row(
        "riccati-asymptotics",
        worst,
        1e-5,
        format!("sup deviation on [T/4, 3T/4] at T=200; decreasing in T: {decreasing}"),
    );
    r.pass &= decreasing;
    Ok(r)
}

fn cameron_martin_cosh(_: &Ctx) -> memport::Result<CheckRow> {
    let q: f64 = 1.5;
    let prob = CmProblem {
        components: vec![CmComponent::constant(0.0, 0.0, 1.0, q, 0.0)],
        start: 0.5,
        horizon: 2.0,
        xi_start: vec![0.0],
    };
    let cf = cameron_martin_closed_form(&prob, CM_STEPS_PER_UNIT_TIME)?;
    let exact = (q.sqrt() * 1.5).cosh().powf(-0.5);
    Ok(row(
        "cameron-martin-cosh",
        (cf.value - exact).abs(),
        1e-6,
        "closed form vs (cosh sqrt(Q)(T-t))^(-1/2)".into(),
    ))
}

fn cameron_martin_mc(ctx: &Ctx) -> memport::Result<CheckRow> {
    let prob = CmProblem {
        components: vec![CmComponent::constant(0.3, -0.5, 0.7, 0.8, 0.2)],
        start: 0.0,
        horizon: 1.5,
        xi_start: vec![0.4],
    };
    let cf = cameron_martin_closed_form(&prob, CM_STEPS_PER_UNIT_TIME)?;
    let mc = mc_cameron_martin(&prob, 384, 20_000, ctx.seed.wrapping_add(17))?;
    let z = (cf.value - mc.mean) / mc.std_error;
    Ok(row(
        "cameron-martin-mc",
        z.abs(),
        3.0,
        format!("closed form {:.6} vs MC {:.6} (SE {:.1e}), |z|", cf.value, mc.mean, mc.std_error),
    ))
}

fn benchmark_slope(ctx: &Ctx) -> memport::Result<CheckRow> {
    let c_bar = benchmark_threshold(&ctx.params, &ctx.curves)?;
    let (a, h) = (1e-5, 1e-6);
    let fd = (mgf_lambda(&ctx.params, &ctx.curves, a + h)? - mgf_lambda(&ctx.params, &ctx.curves, a - h)?) / (2.0 * h);
    Ok(row(
        "benchmark-slope",
        ((fd - c_bar) / c_bar).abs(),
        1e-3,
        format!("relative gap of Lambda'(0+) to cbar={c_bar:.6}"),
    ))
}

fn rate_function_shape(ctx: &Ctx) -> memport::Result<CheckRow> {
    let c_bar = benchmark_threshold(&ctx.params, &ctx.curves)?;
    let mut bad = 0usize;
    for k in 0..20 {
        if rate_function_i(&ctx.params, &ctx.curves, c_bar - 0.05 * k as f64)?.rate != 0.0 {
            bad += 1;
        }
    }
    let mut prev = 0.0;
    for k in 1..=30 {
        let r = rate_function_i(&ctx.params, &ctx.curves, c_bar + 0.02 * k as f64)?.rate;
        if !(r < prev) {
            bad += 1;
        }
        prev = r;
    }
    Ok(row(
        "rate-function-shape",
        bad as f64,
        0.0,
        "grid points violating I=0 below cbar or I<0 decreasing above".into(),
    ))
}

fn noise_variance(ctx: &Ctx) -> memport::Result<CheckRow> {
    let t = 5.0;
    let n = ctx.params.n();
    let cfg = PathConfig::new(t, 64, 20_000, ctx.seed.wrapping_add(40)).with_scheme(XiScheme::Exact);
    let (_, ys) = NoiseSimulator::new(&ctx.params, &cfg)?.terminal_states();
    let mut worst = 0.0f64;
    for j in 0..n {
        let y: Vec<f64> = ys.iter().skip(j).step_by(n).copied().collect();
        let (m, var) = mean_var(&y);
        let sq: Vec<f64> = y.iter().map(|v| (v - m).powi(2)).collect();
        let (_, v4) = mean_var(&sq);
        let se = (v4 / y.len() as f64).sqrt() / t;
        let f = variance_ratio_f(ctx.params.p()[j], ctx.params.q()[j], t)?;
        worst = worst.max(((var / t - f) / se).abs());
    }
    Ok(row("noise-variance-law", worst, 3.0, "max |z| of Var Y_j(5)/5 against f(5)".into()))
}

#[derive(Serialize)]
struct VerifyReport {
    schema_version: u32,
    seed: u64,
    model: &'static str,
    checks: Vec<CheckRow>,
    failed: usize,
}

pub fn run(a: &VerifyArgs, model: Option<&Model>, out: &mut Output) -> CliResult<()> {
    let (params, curves) = match model {
        Some(m) => (m.params.clone(), m.curves.clone()),
        None => fixtures::two_asset(),
    };
    let ctx = Ctx {
        params,
        curves,
        seed: a.seed,
    };
    let mut rows = Vec::new();
    for (name, check) in CHECKS {
        if a.filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let r = check(&ctx).unwrap_or_else(|e| CheckRow {
            name,
            pass: false,
            value: f64::NAN,
            tolerance: f64::NAN,
            detail: format!("error: {e}"),
        });
        eprintln!(
            "{:<4}  {:<28}  {:>10.3e}  tol {:>8.1e}  {}",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.value,
            r.tolerance,
            r.detail
        );
        rows.push(r);
    }
    let failed = rows.iter().filter(|r| !r.pass).count();
    out.failures = failed;
    out.steps.insert("checks".into(), rows.len() as u64);
    out.write_json(
        "verify-report.json",
        &VerifyReport {
            schema_version: SCHEMA_VERSION,
            seed: a.seed,
            model: if model.is_some() { "config" } else { "two-asset fixture" },
            checks: rows,
            failed,
        },
    )
}
