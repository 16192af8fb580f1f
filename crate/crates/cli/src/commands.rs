//! Subcommand bodies. Each writes its files through [`Output`].

use memport::estimate::{
    fit_parameters, ingest_prices_file, sample_lag_covariance, write_pair_curves, FitOptions, FitResult,
    LagCovarianceTable,
};
use memport::kernels::alpha_star;
use memport::riccati::{existence_branch, Branch, RiccatiInstance};
use memport::simulate::{
    mc_growth_rate, mc_ldp_probability, mc_power_utility, write_path_csv, GrowthEstimate, LdpEstimate, NoiseSimulator,
    PathConfig, PowerUtilityEstimate, WealthSimulator, WealthStrategy,
};
use memport::stats::{mean_var, trapezoid_uniform};
use memport::strategy::{
    alpha_curve, benchmark_threshold, growth_rate_j, rate_curve, rate_function_i, write_csv, FiniteHorizonPolicy,
    GrowthReport, StationaryPolicy,
};
use memport::PowerUtility;
use serde::Serialize;

use crate::config::{Model, SCHEMA_VERSION};
use crate::error::{CliError, CliResult};
use crate::manifest::Output;
use crate::{verify, Command, EstimateArgs, GrowthArgs, SimulateArgs, SolveArgs, StrategyArg};

pub fn dispatch(cmd: &Command, model: Option<&Model>, out: &mut Output) -> CliResult<()> {
    let need = || model.ok_or_else(|| CliError::Config("a model configuration is required".into()));
    match cmd {
        Command::Solve(a) => solve(a, need()?, out),
        Command::Growth(a) => growth(a, need()?, out),
        Command::Simulate(a) => simulate(a, need()?, out),
        Command::Verify(a) => verify::run(a, model, out),
        Command::Estimate(a) => estimate(a, out),
        Command::Replay(_) => Err(CliError::Config("a manifest cannot record a replay".into())),
    }
}

fn utility(alpha: f64) -> CliResult<PowerUtility> {
    PowerUtility::new(alpha).map_err(|e| CliError::Config(e.to_string()))
}

fn branch_summary(model: &Model, u: &PowerUtility) -> String {
    let names: Vec<String> = (0..model.params.n())
        .map(|j| match existence_branch(&model.params, u, j, RiccatiInstance::ValueFunction) {
            Ok(Branch::Linear) => format!("asset {}: linear (p=0)", j + 1),
            Ok(Branch::Nonnegative) => format!("asset {}: nonnegative solution (alpha<0)", j + 1),
            Ok(Branch::Shifted) => format!("asset {}: solution above the lower curve (p>0, 0<alpha<1)", j + 1),
            Err(e) => format!("asset {}: {e}", j + 1),
        })
        .collect();
    format!(
        "finite-horizon solve failed for alpha={} (alpha*={:.6}; {})",
        u.alpha(),
        alpha_star(&model.params),
        names.join("; ")
    )
}

#[derive(Serialize)]
struct MertonCheck {
    value: f64,
    relative_error: f64,
}

#[derive(Serialize)]
struct SolveReport {
    schema_version: u32,
    alpha: f64,
    beta: f64,
    horizon: f64,
    steps_per_unit_time: usize,
    x0: f64,
    /// `None` when not representable; see `log_alpha_value`.
    value: Option<f64>,
    log_alpha_value: f64,
    log_discount: f64,
    g_integrals: Vec<f64>,
    branches: Vec<Branch>,
    merton: Option<MertonCheck>,
}

fn solve(a: &SolveArgs, model: &Model, out: &mut Output) -> CliResult<()> {
    let u = utility(a.alpha)?;
    if !(a.horizon > 0.0 && a.horizon.is_finite()) {
        return Err(CliError::Config(format!("--horizon must be positive, got {}", a.horizon)));
    }
    if a.steps == 0 {
        return Err(CliError::Config("--steps must be positive".into()));
    }
    let policy = FiniteHorizonPolicy::solve(&model.params, &model.curves, &u, a.horizon, a.steps).map_err(|e| {
        match e {
            memport::Error::InvalidParameter(_) => CliError::Config(e.to_string()),
            source => CliError::Solver {
                context: branch_summary(model, &u),
                source,
            },
        }
    })?;
    let log_alpha_value = policy.log_alpha_value(a.x0).map_err(|e| CliError::Config(e.to_string()))?;
    let value = policy.value_function(a.x0).ok();
    let merton = (model.config.is_constant() && model.params.p().iter().all(|&p| p == 0.0)).then(|| {
        let lam2: f64 = model.config.lambda_bar.iter().map(|l| l * l).sum();
        let j = model.config.rbar + lam2 / (2.0 * (1.0 - a.alpha));
        let m = a.x0.powf(a.alpha) * (a.alpha * j * a.horizon).exp() / a.alpha;
        MertonCheck {
            value: m,
            relative_error: value.map_or(f64::NAN, |v| ((v - m) / m).abs()),
        }
    });
    out.steps.insert("riccati_nodes".into(), policy.grid().len() as u64);
    out.write_csv("solve-grids.csv", |w| policy.write_grids_csv(w))?;
    out.write_csv("solve-policy.csv", |w| write_policy_csv(w, &policy))?;
    out.write_json(
        "solve-value.json",
        &SolveReport {
            schema_version: SCHEMA_VERSION,
            alpha: a.alpha,
            beta: u.beta(),
            horizon: a.horizon,
            steps_per_unit_time: a.steps,
            x0: a.x0,
            value,
            log_alpha_value,
            log_discount: policy.log_discount(),
            g_integrals: policy.g_integrals()?,
            branches: policy.branches().to_vec(),
            merton,
        },
    )
}

/// Exposure `theta_j = c_j + d_j xi_j` on the policy grid.
fn write_policy_csv(w: &mut Vec<u8>, policy: &FiniteHorizonPolicy) -> memport::Result<()> {
    use std::io::Write;
    let n = policy.params().n();
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|j| format!("c_{j}")));
    header.extend((1..=n).map(|j| format!("d_{j}")));
    writeln!(w, "{}", header.join(","))?;
    for &t in policy.grid() {
        let e = policy.exposure_coefficients(t)?;
        let row: Vec<String> = std::iter::once(t)
            .chain(e.intercept.iter().copied())
            .chain(e.slope.iter().copied())
            .map(|v| v.to_string())
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct GrowthFile {
    schema_version: u32,
    alpha_star: f64,
    c_bar: f64,
    reports: Vec<GrowthReport>,
}

fn growth(a: &GrowthArgs, model: &Model, out: &mut Output) -> CliResult<()> {
    let alphas = match (&a.alpha, &a.alpha_grid) {
        (Some(x), _) => vec![*x],
        (None, Some(g)) if !g.is_empty() => g.clone(),
        _ => return Err(CliError::Config("give --alpha or a non-empty --alpha-grid".into())),
    };
    let (params, curves) = (&model.params, &model.curves);
    let reports = alphas
        .iter()
        .map(|&x| Ok(growth_rate_j(params, curves, &utility(x)?)?))
        .collect::<CliResult<Vec<_>>>()?;
    let c_bar = benchmark_threshold(params, curves)?;
    let cs = a
        .c_grid
        .clone()
        .unwrap_or_else(|| (-10..=20).map(|k| c_bar + 0.02 * k as f64).collect());
    let alpha_rows = alpha_curve(params, curves, &alphas)?;
    let rate_rows = rate_curve(params, curves, &cs)?;
    out.write_json(
        "growth-report.json",
        &GrowthFile {
            schema_version: SCHEMA_VERSION,
            alpha_star: alpha_star(params),
            c_bar,
            reports,
        },
    )?;
    out.write_csv("growth-alpha.csv", |w| write_csv(w, &alpha_rows))?;
    out.write_csv("growth-rate.csv", |w| write_csv(w, &rate_rows))
}

#[derive(Serialize)]
struct RateSummary {
    /// Sample mean of `log X(T) / T`.
    mean: f64,
    sd: f64,
    std_error: f64,
}

#[derive(Serialize)]
struct Comparison {
    closed_form: &'static str,
    value: f64,
    estimate: f64,
    std_error: f64,
    z: Option<f64>,
    consistent: bool,
}

#[derive(Serialize)]
struct LdpReport {
    estimate: LdpEstimate,
    rate_function: f64,
}

#[derive(Serialize)]
struct SimulateReport {
    schema_version: u32,
    strategy: StrategyArg,
    alpha: f64,
    horizon: f64,
    steps: usize,
    n_paths: usize,
    seed: u64,
    scheme: memport::simulate::XiScheme,
    x0: f64,
    log_growth: RateSummary,
    power_utility: PowerUtilityEstimate,
    growth: GrowthEstimate,
    ldp: Option<LdpReport>,
    comparison: Comparison,
}

fn z_comparison(closed_form: &'static str, value: f64, estimate: f64, std_error: f64) -> Comparison {
    // rounding-level spread counts as a deterministic outcome
    let scale = 1e-12 * value.abs().max(1.0);
    let z = (std_error > scale).then(|| (estimate - value) / std_error);
    let consistent = match z {
        Some(z) => z.abs() <= 3.0,
        None => (estimate - value).abs() <= scale,
    };
    Comparison {
        closed_form,
        value,
        estimate,
        std_error,
        z,
        consistent,
    }
}

fn simulate(a: &SimulateArgs, model: &Model, out: &mut Output) -> CliResult<()> {
    let (params, curves) = (&model.params, &model.curves);
    let u = utility(a.alpha)?;
    let t = a.horizon;
    let steps = a.steps.unwrap_or_else(|| PathConfig::default_steps(t));
    let cfg = PathConfig::new(t, steps, a.paths, a.seed).with_scheme(a.scheme.into());
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    if !(a.x0 > 0.0) {
        return Err(CliError::Config(format!("--x0 must be positive, got {}", a.x0)));
    }
    let finite = match a.strategy {
        StrategyArg::P1 => Some(
            FiniteHorizonPolicy::solve(params, curves, &u, t, memport::riccati::DEFAULT_STEPS_PER_UNIT_TIME).map_err(
                |source| CliError::Solver {
                    context: branch_summary(model, &u),
                    source,
                },
            )?,
        ),
        _ => None,
    };
    let stationary = match a.strategy {
        StrategyArg::P2 => Some(StationaryPolicy::new(params, curves, &u)?),
        _ => None,
    };
    let strategy = match (a.strategy, &finite, &stationary) {
        (StrategyArg::P1, Some(f), _) => WealthStrategy::FiniteHorizon(f),
        (StrategyArg::P2, _, Some(s)) => WealthStrategy::Stationary(s),
        (StrategyArg::Log, ..) => WealthStrategy::LogOptimal,
        _ => WealthStrategy::None,
    };
    let sim = NoiseSimulator::new(params, &cfg)?;
    let wealth = WealthSimulator::new(&sim, curves, a.x0)?;
    let outcome = wealth.run(&[strategy])?.remove(0);
    let log_x = &outcome.log_wealth;

    let rates: Vec<f64> = log_x.iter().map(|l| l / t).collect();
    let (mean, var) = mean_var(&rates);
    let log_growth = RateSummary {
        mean,
        sd: var.sqrt(),
        std_error: (var / rates.len() as f64).sqrt(),
    };
    let power_utility = mc_power_utility(log_x, a.alpha)?;
    let growth = mc_growth_rate(log_x, a.alpha, t, a.resamples, 0.95, a.seed)?;
    let ldp = a
        .c
        .map(|c| -> CliResult<LdpReport> {
            Ok(LdpReport {
                estimate: mc_ldp_probability(log_x, c, t)?,
                rate_function: rate_function_i(params, curves, c)?.rate,
            })
        })
        .transpose()?;

    let comparison = match (a.strategy, &finite) {
        (StrategyArg::P1, Some(f)) => {
            let v = f.value_function(a.x0)?;
            z_comparison("value_function", v, power_utility.mean, power_utility.std_error)
        }
        (StrategyArg::P2, _) => {
            let j = growth_rate_j(params, curves, &u)?.j_via_fg;
            Comparison {
                closed_form: "growth_rate_j",
                value: j,
                estimate: growth.estimate,
                std_error: growth.std_error,
                z: (growth.std_error > 0.0).then(|| (growth.estimate - j) / growth.std_error),
                consistent: growth.ci_low <= j && j <= growth.ci_high,
            }
        }
        (StrategyArg::Log, _) => z_comparison(
            "benchmark_threshold",
            benchmark_threshold(params, curves)?,
            log_growth.mean,
            log_growth.std_error,
        ),
        _ => {
            let r: Vec<f64> = sim.grid().iter().map(|&s| curves.r(s)).collect();
            let riskless = (a.x0.ln() + trapezoid_uniform(&r, sim.dt())) / t;
            z_comparison("riskless_growth", riskless, log_growth.mean, log_growth.std_error)
        }
    };

    out.steps.insert("time_steps".into(), steps as u64);
    out.steps.insert("paths".into(), a.paths as u64);
    for i in 0..a.write_paths.min(a.paths) {
        let noise = sim.path(i);
        let path = wealth.wealth_path(&noise, strategy)?;
        out.write_csv(&format!("simulate-path-{i}.csv"), |w| write_path_csv(w, &noise, &path))?;
    }
    out.write_json(
        "simulate-estimates.json",
        &SimulateReport {
            schema_version: SCHEMA_VERSION,
            strategy: a.strategy,
            alpha: a.alpha,
            horizon: t,
            steps,
            n_paths: a.paths,
            seed: a.seed,
            scheme: cfg.scheme,
            x0: a.x0,
            log_growth,
            power_utility,
            growth,
            ldp,
            comparison,
        },
    )
}

#[derive(Serialize)]
struct EstimateReport {
    schema_version: u32,
    n_assets: usize,
    n_obs: usize,
    max_lag: usize,
    fit: FitResult,
}

fn estimate(a: &EstimateArgs, out: &mut Output) -> CliResult<()> {
    let prices = ingest_prices_file(&a.prices)?;
    let table = sample_lag_covariance(&prices, a.max_lag)?;
    let opts = FitOptions {
        starts: a.starts,
        seed: a.seed,
        max_iterations: a.max_iterations,
        ..FitOptions::default()
    };
    let fit = fit_parameters(&table, &opts)?;
    let fitted = LagCovarianceTable::from_model(&fit.sigma, &fit.params()?, a.max_lag)?;
    out.steps.insert("iterations".into(), fit.convergence.iterations as u64);
    out.steps.insert("starts".into(), fit.starts.len() as u64);
    for (i, j) in table.pairs() {
        out.write_csv(&format!("estimate-curve-{}{}.csv", i + 1, j + 1), |w| {
            write_pair_curves(w, &table, &fitted, i, j)
        })?;
    }
    out.write_json(
        "estimate-fit.json",
        &EstimateReport {
            schema_version: SCHEMA_VERSION,
            n_assets: prices.n_assets(),
            n_obs: prices.n_obs(),
            max_lag: a.max_lag,
            fit,
        },
    )
}
