//! Seeded Monte Carlo simulation of the memory state `xi`, the noise `Y` and
//! log-wealth, with estimators for the three optimization criteria and a
//! check of the Cameron–Martin type exponential-quadratic formula.
//!
//! Path `i` draws from its own ChaCha8 stream (`seed`, stream `i`), so results
//! do not depend on the number of worker threads.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::l_raw;
use crate::model::{CoefficientCurves, MemoryParams};
use crate::riccati::{
    solve_backward_linear_on, solve_backward_riccati, BackwardGridSolution, ScalarRiccatiProblem, TimeFn,
};
use crate::stats::{mean_var, pairwise_sum, percentile_sorted, simpson, trapezoid_uniform};
use crate::strategy::{AffineExposure, FiniteHorizonPolicy, StationaryPolicy};

/// Default cap on stored path values (`(steps + 1) * n * paths`).
pub const DEFAULT_MAX_STORED_VALUES: usize = 1 << 27;
/// Exceedance count below which the large-deviation estimate carries a warning.
pub const MIN_EXCEEDANCES: usize = 100;
/// Simpson panels per step for the exact-Gaussian covariances.
const EXACT_PANELS: usize = 16;
/// Default grid resolution of the closed-form exponential-quadratic solve.
pub const CM_STEPS_PER_UNIT_TIME: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XiScheme {
    /// Exact decay of the mean, left-point noise loading.
    #[default]
    ExactMean,
    Euler,
    /// Exact joint Gaussian transition of `(B, xi, Y)` over each step.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub horizon: f64,
    pub steps: usize,
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheme: XiScheme,
    #[serde(default = "default_budget")]
    pub max_stored_values: usize,
}

fn default_budget() -> usize {
    DEFAULT_MAX_STORED_VALUES
}

impl PathConfig {
    pub fn new(horizon: f64, steps: usize, n_paths: usize, seed: u64) -> Self {
        Self {
            horizon,
            steps,
            n_paths,
            seed,
            scheme: XiScheme::ExactMean,
            max_stored_values: DEFAULT_MAX_STORED_VALUES,
        }
    }

    pub fn with_scheme(mut self, scheme: XiScheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// Default step count for a horizon: `2^10` up to `T = 10`, `2^13` beyond.
    pub fn default_steps(horizon: f64) -> usize {
        if horizon <= 10.0 {
            1 << 10
        } else {
            1 << 13
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {}", self.horizon)));
        }
        if self.steps == 0 || self.n_paths == 0 {
            return Err(Error::InvalidParameter("steps and n_paths must be positive".into()));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

/// One simulated path of the noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub grid: Arc<Vec<f64>>,
    n: usize,
    /// `steps x n`, row per step.
    pub db: Vec<f64>,
    /// `(steps + 1) x n`.
    pub xi: Vec<f64>,
    /// `(steps + 1) x n`.
    pub y: Vec<f64>,
}

impl NoisePath {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn xi_at(&self, k: usize) -> &[f64] {
        &self.xi[k * self.n..(k + 1) * self.n]
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.n..(k + 1) * self.n]
    }

    pub fn db_at(&self, k: usize) -> &[f64] {
        &self.db[k * self.n..(k + 1) * self.n]
    }
}

/// Random inputs of one step for all assets.
struct StepDraw {
    db: Vec<f64>,
    nxi: Vec<f64>,
    ny: Vec<f64>,
}

impl StepDraw {
    fn new(n: usize) -> Self {
        Self {
            db: vec![0.0; n],
            nxi: vec![0.0; n],
            ny: vec![0.0; n],
        }
    }
}

/// Lower Cholesky factor of a 3x3 covariance, tolerating rank deficiency.
fn cholesky3(c: [[f64; 3]; 3]) -> [f64; 6] {
    let mut l = [[0.0f64; 3]; 3];
    let scale = c[0][0].abs().max(c[1][1].abs()).max(c[2][2].abs());
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = c[i][i] - s;
                l[i][i] = if d > 1e-14 * scale { d.sqrt() } else { 0.0 };
            } else if l[j][j] > 0.0 {
                l[i][j] = (c[i][j] - s) / l[j][j];
            }
        }
    }
    [l[0][0], l[1][0], l[1][1], l[2][0], l[2][1], l[2][2]]
}

/// Generator of seeded noise paths for one parameter set.
pub struct NoiseSimulator {
    params: MemoryParams,
    config: PathConfig,
    grid: Arc<Vec<f64>>,
    dt: f64,
    decay: Vec<f64>,
    /// `(1 - e^{-kappa dt}) / kappa`.
    mean_integral: Vec<f64>,
    /// `l_j(t_k)`, `steps x n`.
    loading: Vec<f64>,
    /// Cholesky factors for [`XiScheme::Exact`], `steps x n`.
    exact: Vec<[f64; 6]>,
}

impl NoiseSimulator {
    pub fn new(params: &MemoryParams, config: &PathConfig) -> Result<Self> {
        config.validate()?;
        let n = params.n();
        let steps = config.steps;
        let dt = config.dt();
        let mut grid: Vec<f64> = (0..=steps).map(|k| k as f64 * dt).collect();
        grid[steps] = config.horizon;
        let kappa: Vec<f64> = params.p().iter().zip(params.q()).map(|(p, q)| p + q).collect();
        let decay = kappa.iter().map(|k| (-k * dt).exp()).collect();
        let mean_integral = kappa.iter().map(|k| -(-k * dt).exp_m1() / k).collect();
        let mut loading = Vec::with_capacity(steps * n);
        for &t in &grid[..steps] {
            for j in 0..n {
                loading.push(l_raw(params.p()[j], params.q()[j], t));
            }
        }
        let mut exact = Vec::new();
        if config.scheme == XiScheme::Exact {
            exact.reserve(steps * n);
            for k in 0..steps {
                let (t0, t1) = (grid[k], grid[k + 1]);
                for j in 0..n {
                    let (p, q, kap) = (params.p()[j], params.q()[j], kappa[j]);
                    if p == 0.0 {
                        exact.push([(t1 - t0).sqrt(), 0.0, 0.0, 0.0, 0.0, 0.0]);
                        continue;
                    }
                    let phi_xi = |s: f64| (-kap * (t1 - s)).exp() * l_raw(p, q, s);
                    let phi_y = |s: f64| -(-kap * (t1 - s)).exp_m1() * l_raw(p, q, s) / kap;
                    let int = |f: &dyn Fn(f64) -> f64| simpson(f, t0, t1, EXACT_PANELS);
                    let c01 = int(&phi_xi);
                    let c02 = int(&phi_y);
                    let c11 = int(&|s| phi_xi(s).powi(2));
                    let c12 = int(&|s| phi_xi(s) * phi_y(s));
                    let c22 = int(&|s| phi_y(s).powi(2));
                    exact.push(cholesky3([[t1 - t0, c01, c02], [c01, c11, c12], [c02, c12, c22]]));
                }
            }
        }
        Ok(Self {
            params: params.clone(),
            config: config.clone(),
            grid: Arc::new(grid),
            dt,
            decay,
            mean_integral,
            loading,
            exact,
        })
    }

    pub fn config(&self) -> &PathConfig {
        &self.config
    }

    pub fn params(&self) -> &MemoryParams {
        &self.params
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    fn rng(&self, path: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(path as u64);
        rng
    }

    fn draw(&self, k: usize, rng: &mut ChaCha8Rng, out: &mut StepDraw) {
        let n = self.params.n();
        let sdt = self.dt.sqrt();
        match self.config.scheme {
            XiScheme::Exact => {
                for j in 0..n {
                    let c = &self.exact[k * n + j];
                    let z0: f64 = rng.sample(StandardNormal);
                    let (z1, z2): (f64, f64) = if c[2] == 0.0 && c[5] == 0.0 && c[1] == 0.0 {
                        (0.0, 0.0)
                    } else {
                        (rng.sample(StandardNormal), rng.sample(StandardNormal))
                    };
                    out.db[j] = c[0] * z0;
                    out.nxi[j] = c[1] * z0 + c[2] * z1;
                    out.ny[j] = c[3] * z0 + c[4] * z1 + c[5] * z2;
                }
            }
            _ => {
                for j in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    out.db[j] = sdt * z;
                }
            }
        }
    }

    fn advance(&self, k: usize, d: &StepDraw, xi: &mut [f64], y: &mut [f64]) {
        let n = self.params.n();
        for j in 0..n {
            let x0 = xi[j];
            match self.config.scheme {
                XiScheme::ExactMean => {
                    y[j] += d.db[j] - x0 * self.dt;
                    xi[j] = self.decay[j] * x0 + self.loading[k * n + j] * d.db[j];
                }
                XiScheme::Euler => {
                    let kappa = self.params.p()[j] + self.params.q()[j];
                    y[j] += d.db[j] - x0 * self.dt;
                    xi[j] = x0 - kappa * x0 * self.dt + self.loading[k * n + j] * d.db[j];
                }
                XiScheme::Exact => {
                    y[j] += d.db[j] - x0 * self.mean_integral[j] - d.ny[j];
                    xi[j] = self.decay[j] * x0 + d.nxi[j];
                }
            }
        }
    }

    /// Full path `i`.
    pub fn path(&self, i: usize) -> NoisePath {
        let n = self.params.n();
        let steps = self.config.steps;
        let mut rng = self.rng(i);
        let mut draw = StepDraw::new(n);
        let mut xi = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut out = NoisePath {
            grid: Arc::clone(&self.grid),
            n,
            db: Vec::with_capacity(steps * n),
            xi: Vec::with_capacity((steps + 1) * n),
            y: Vec::with_capacity((steps + 1) * n),
        };
        out.xi.extend_from_slice(&xi);
        out.y.extend_from_slice(&y);
        for k in 0..steps {
            self.draw(k, &mut rng, &mut draw);
            self.advance(k, &draw, &mut xi, &mut y);
            out.db.extend_from_slice(&draw.db);
            out.xi.extend_from_slice(&xi);
            out.y.extend_from_slice(&y);
        }
        out
    }

    /// All paths, subject to the storage budget.
    pub fn paths(&self) -> Result<Vec<NoisePath>> {
        let need = (self.config.steps + 1) * self.params.n() * self.config.n_paths * 3;
        if need > self.config.max_stored_values {
            return Err(Error::InvalidParameter(format!(
                "storing {} paths needs {need} values, budget is {}",
                self.config.n_paths, self.config.max_stored_values
            )));
        }
        Ok((0..self.config.n_paths).into_par_iter().map(|i| self.path(i)).collect())
    }

    /// Terminal `(xi(T), Y(T))` of every path, each `n_paths x n`.
    pub fn terminal_states(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.params.n();
        let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..self.config.n_paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = self.rng(i);
                let mut draw = StepDraw::new(n);
                let mut xi = vec![0.0; n];
                let mut y = vec![0.0; n];
                for k in 0..self.config.steps {
                    self.draw(k, &mut rng, &mut draw);
                    self.advance(k, &draw, &mut xi, &mut y);
                }
                (xi, y)
            })
            .collect();
        let mut xs = Vec::with_capacity(n * per_path.len());
        let mut ys = Vec::with_capacity(n * per_path.len());
        for (x, y) in per_path {
            xs.extend(x);
            ys.extend(y);
        }
        (xs, ys)
    }
}

/// Which strategy produced a wealth path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyTag {
    FiniteHorizon,
    Stationary,
    LogOptimal,
    None,
    Custom,
}

/// Portfolio fractions as a function of time and memory state.
pub type WeightFn = dyn Fn(f64, &[f64]) -> Result<DVector<f64>> + Send + Sync;

/// A trading rule for the wealth simulator.
#[derive(Clone, Copy)]
pub enum WealthStrategy<'a> {
    FiniteHorizon(&'a FiniteHorizonPolicy),
    Stationary(&'a StationaryPolicy),
    LogOptimal,
    None,
    Custom(&'a WeightFn),
}

impl WealthStrategy<'_> {
    pub fn tag(&self) -> StrategyTag {
        match self {
            Self::FiniteHorizon(_) => StrategyTag::FiniteHorizon,
            Self::Stationary(_) => StrategyTag::Stationary,
            Self::LogOptimal => StrategyTag::LogOptimal,
            Self::None => StrategyTag::None,
            Self::Custom(_) => StrategyTag::Custom,
        }
    }
}

/// Strategy resolved on the simulation grid.
enum ExposurePlan<'a> {
    /// `theta_j = c[k,j] + d[k,j] xi_j`, both `steps x n`.
    Affine { intercept: Vec<f64>, slope: Vec<f64> },
    Zero,
    Custom(&'a WeightFn),
}

/// Deterministic market inputs on the simulation grid.
struct MarketGrid {
    /// `lambda(t_k)`, `steps x n`.
    lambda: Vec<f64>,
    /// Trapezoid `int_{t_k}^{t_{k+1}} r`.
    r_increment: Vec<f64>,
    /// `sigma'(t_k)`, only needed for custom weights.
    sigma_t: Vec<DMatrix<f64>>,
}

impl MarketGrid {
    fn new(curves: &CoefficientCurves, grid: &[f64], need_sigma: bool) -> Result<Self> {
        let steps = grid.len() - 1;
        let mut lambda = Vec::with_capacity(steps * curves.n());
        for &t in &grid[..steps] {
            lambda.extend(curves.risk_premium(t)?.iter());
        }
        let r_increment = (0..steps)
            .map(|k| 0.5 * (grid[k + 1] - grid[k]) * (curves.r(grid[k]) + curves.r(grid[k + 1])))
            .collect();
        let sigma_t = if need_sigma {
            grid[..steps].iter().map(|&t| curves.sigma(t).transpose()).collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            lambda,
            r_increment,
            sigma_t,
        })
    }
}

fn affine_plan(grid: &[f64], coef: impl Fn(f64) -> Result<AffineExposure>) -> Result<ExposurePlan<'static>> {
    let steps = grid.len() - 1;
    let mut intercept = Vec::new();
    let mut slope = Vec::new();
    for &t in &grid[..steps] {
        let a = coef(t)?;
        intercept.extend(a.intercept);
        slope.extend(a.slope);
    }
    Ok(ExposurePlan::Affine { intercept, slope })
}

fn build_plan<'a>(
    strategy: &WealthStrategy<'a>,
    curves: &CoefficientCurves,
    grid: &[f64],
) -> Result<ExposurePlan<'a>> {
    match strategy {
        WealthStrategy::FiniteHorizon(p) => {
            if (p.horizon() - grid[grid.len() - 1]).abs() > 1e-9 * p.horizon() {
                return Err(Error::InvalidParameter(format!(
                    "finite-horizon policy for T={} used on a simulation horizon {}",
                    p.horizon(),
                    grid[grid.len() - 1]
                )));
            }
            affine_plan(grid, |t| p.exposure_coefficients(t))
        }
        WealthStrategy::Stationary(p) => affine_plan(grid, |t| p.exposure_coefficients(t)),
        WealthStrategy::LogOptimal => affine_plan(grid, |t| {
            let lam = curves.risk_premium(t)?;
            Ok(AffineExposure {
                intercept: lam.iter().copied().collect(),
                slope: vec![-1.0; curves.n()],
            })
        }),
        WealthStrategy::None => Ok(ExposurePlan::Zero),
        WealthStrategy::Custom(f) => Ok(ExposurePlan::Custom(*f)),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Checkpoint {
    pub time: f64,
    pub log_wealth: Vec<f64>,
}

/// Log-wealth of every path under one strategy.
#[derive(Debug, Clone, Serialize)]
pub struct WealthOutcome {
    pub tag: StrategyTag,
    pub log_wealth: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
}

/// One wealth path, for plotting.
#[derive(Debug, Clone, Serialize)]
pub struct WealthPath {
    pub tag: StrategyTag,
    pub log_wealth: Vec<f64>,
}

/// Simulates log-wealth for several strategies on the same noise paths.
pub struct WealthSimulator<'a> {
    noise: &'a NoiseSimulator,
    curves: &'a CoefficientCurves,
    x: f64,
    checkpoints: Vec<usize>,
}

impl<'a> WealthSimulator<'a> {
    pub fn new(noise: &'a NoiseSimulator, curves: &'a CoefficientCurves, x: f64) -> Result<Self> {
        if !(x > 0.0) {
            return Err(Error::InvalidParameter(format!("initial wealth must be positive, got {x}")));
        }
        if curves.n() != noise.params.n() {
            return Err(Error::InvalidParameter("curves and memory parameters disagree on n".into()));
        }
        Ok(Self {
            noise,
            curves,
            x,
            checkpoints: Vec::new(),
        })
    }

    /// Also record log-wealth at these times (rounded to the grid).
    pub fn with_checkpoints(mut self, times: &[f64]) -> Result<Self> {
        let dt = self.noise.dt;
        let steps = self.noise.config.steps;
        self.checkpoints = times
            .iter()
            .map(|&t| {
                let k = (t / dt).round();
                if !(k >= 0.0 && k as usize <= steps) {
                    return Err(Error::Domain(format!("checkpoint {t} outside the simulation horizon")));
                }
                Ok(k as usize)
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }

    fn plans(&self, strategies: &[WealthStrategy<'a>]) -> Result<(MarketGrid, Vec<ExposurePlan<'a>>)> {
        let need_sigma = strategies.iter().any(|s| matches!(s, WealthStrategy::Custom(_)));
        let market = MarketGrid::new(self.curves, &self.noise.grid, need_sigma)?;
        let plans = strategies
            .iter()
            .map(|s| build_plan(s, self.curves, &self.noise.grid))
            .collect::<Result<Vec<_>>>()?;
        Ok((market, plans))
    }

    /// Log-wealth increment of step `k` for one plan.
    #[allow(clippy::too_many_arguments)]
    fn increment(
        &self,
        plan: &ExposurePlan,
        market: &MarketGrid,
        k: usize,
        xi: &[f64],
        db: &[f64],
        theta: &mut [f64],
    ) -> Result<f64> {
        let n = xi.len();
        let dt = self.noise.dt;
        match plan {
            ExposurePlan::Zero => return Ok(market.r_increment[k]),
            ExposurePlan::Affine { intercept, slope } => {
                for j in 0..n {
                    theta[j] = intercept[k * n + j] + slope[k * n + j] * xi[j];
                }
            }
            ExposurePlan::Custom(f) => {
                let pi = f(self.noise.grid[k], xi)?;
                let th = &market.sigma_t[k] * pi;
                theta.copy_from_slice(th.as_slice());
            }
        }
        let mut drift = 0.0;
        let mut norm2 = 0.0;
        let mut diffusion = 0.0;
        for j in 0..n {
            drift += theta[j] * (market.lambda[k * n + j] - xi[j]);
            norm2 += theta[j] * theta[j];
            diffusion += theta[j] * db[j];
        }
        Ok(market.r_increment[k] + (drift - 0.5 * norm2) * dt + diffusion)
    }

    /// Terminal (and checkpoint) log-wealth for every strategy, coupled
    /// through common noise.
    pub fn run(&self, strategies: &[WealthStrategy<'a>]) -> Result<Vec<WealthOutcome>> {
        let (market, plans) = self.plans(strategies)?;
        let n = self.noise.params.n();
        let s_count = strategies.len();
        let steps = self.noise.config.steps;
        let n_cp = self.checkpoints.len();
        let per_path: Vec<Result<Vec<f64>>> = (0..self.noise.config.n_paths)
            .into_par_iter()
            .map(|i| {
                let mut rng = self.noise.rng(i);
                let mut draw = StepDraw::new(n);
                let mut xi = vec![0.0; n];
                let mut y = vec![0.0; n];
                let mut theta = vec![0.0; n];
                let mut logx = vec![self.x.ln(); s_count];
                // [terminal..., checkpoint 0..., checkpoint 1..., ...]
                let mut out = vec![0.0; s_count * (1 + n_cp)];
                let record = |k: usize, logx: &[f64], out: &mut [f64]| {
                    for (c, &kc) in self.checkpoints.iter().enumerate() {
                        if kc == k {
                            out[s_count * (1 + c)..s_count * (2 + c)].copy_from_slice(logx);
                        }
                    }
                };
                record(0, &logx, &mut out);
                for k in 0..steps {
                    self.noise.draw(k, &mut rng, &mut draw);
                    for (s, plan) in plans.iter().enumerate() {
                        logx[s] += self.increment(plan, &market, k, &xi, &draw.db, &mut theta)?;
                    }
                    self.noise.advance(k, &draw, &mut xi, &mut y);
                    record(k + 1, &logx, &mut out);
                }
                for v in &logx {
                    if !v.is_finite() {
                        return Err(Error::NonFinite { t: self.noise.config.horizon });
                    }
                }
                out[..s_count].copy_from_slice(&logx);
                Ok(out)
            })
            .collect();
        let per_path = per_path.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(strategies
            .iter()
            .enumerate()
            .map(|(s, strat)| WealthOutcome {
                tag: strat.tag(),
                log_wealth: per_path.iter().map(|row| row[s]).collect(),
                checkpoints: self
                    .checkpoints
                    .iter()
                    .enumerate()
                    .map(|(c, &k)| Checkpoint {
                        time: self.noise.grid[k],
                        log_wealth: per_path.iter().map(|row| row[s_count * (1 + c) + s]).collect(),
                    })
                    .collect(),
            })
            .collect())
    }

    /// Log-wealth along one recorded noise path.
    pub fn wealth_path(&self, noise: &NoisePath, strategy: WealthStrategy<'a>) -> Result<WealthPath> {
        let (market, plans) = self.plans(&[strategy])?;
        let n = noise.n();
        let mut theta = vec![0.0; n];
        let mut logx = Vec::with_capacity(noise.grid.len());
        let mut acc = self.x.ln();
        logx.push(acc);
        for k in 0..noise.grid.len() - 1 {
            acc += self.increment(&plans[0], &market, k, noise.xi_at(k), noise.db_at(k), &mut theta)?;
            logx.push(acc);
        }
        Ok(WealthPath {
            tag: strategy.tag(),
            log_wealth: logx,
        })
    }
}

/// Path dump with columns `t, xi_1.., Y_1.., logX`.
pub fn write_path_csv<W: std::io::Write>(w: W, noise: &NoisePath, wealth: &WealthPath) -> Result<()> {
    let n = noise.n();
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|j| format!("xi_{j}")));
    header.extend((1..=n).map(|j| format!("Y_{j}")));
    header.push("logX".into());
    wtr.write_record(&header)?;
    for (k, t) in noise.grid.iter().enumerate() {
        let mut row = vec![format!("{t}")];
        row.extend(noise.xi_at(k).iter().map(|v| format!("{v}")));
        row.extend(noise.y_at(k).iter().map(|v| format!("{v}")));
        row.push(format!("{}", wealth.log_wealth[k]));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct PowerUtilityEstimate {
    pub alpha: f64,
    pub n_paths: usize,
    /// Mean of `X^alpha / alpha`.
    pub mean: f64,
    pub std_error: f64,
    /// `log` of the mean of `X^alpha`.
    pub log_moment: f64,
}

/// Shift `m = max alpha log X` and w_i = exp(alpha log X_i - m).
fn scaled_moments(log_x: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let m = log_x.iter().map(|l| alpha * l).fold(f64::NEG_INFINITY, f64::max);
    let w = log_x.iter().map(|l| (alpha * l - m).exp()).collect();
    (m, w)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha < 1.0) || alpha == 0.0 || !alpha.is_finite() {
        return Err(Error::InvalidParameter(format!("alpha={alpha} must lie in (-inf, 1) without 0")));
    }
    Ok(())
}

/// Monte Carlo estimate of `(1/alpha) E[X(T)^alpha]` by log-sum-exp.
pub fn mc_power_utility(log_x: &[f64], alpha: f64) -> Result<PowerUtilityEstimate> {
    check_alpha(alpha)?;
    if log_x.is_empty() {
        return Err(Error::InvalidParameter("no paths supplied".into()));
    }
    let (m, w) = scaled_moments(log_x, alpha);
    let (mw, vw) = mean_var(&w);
    let log_moment = m + mw.ln();
    let scale = m.exp();
    let mean = scale * mw / alpha;
    let std_error = scale * (vw / w.len() as f64).sqrt() / alpha.abs();
    if !mean.is_finite() || !std_error.is_finite() {
        return Err(Error::Overflow(format!(
            "E[X^alpha] = exp({log_moment}) is outside the floating-point range"
        )));
    }
    Ok(PowerUtilityEstimate {
        alpha,
        n_paths: log_x.len(),
        mean,
        std_error,
        log_moment,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthEstimate {
    pub alpha: f64,
    pub horizon: f64,
    pub n_paths: usize,
    /// `(1/(alpha T)) log` of the mean of `X^alpha`.
    pub estimate: f64,
    /// Delta-method standard error.
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub ci_level: f64,
    pub bootstrap_resamples: usize,
    /// Second-order estimate of `E[estimate] - (1/(alpha T)) log E[X^alpha]`,
    /// negative by Jensen's inequality for the logarithm.
    pub jensen_bias: f64,
}

/// Growth-rate estimate with a percentile bootstrap confidence interval.
pub fn mc_growth_rate(
    log_x: &[f64],
    alpha: f64,
    horizon: f64,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<GrowthEstimate> {
    check_alpha(alpha)?;
    if log_x.is_empty() || !(horizon > 0.0) || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter("growth estimate needs paths, T > 0 and a level in (0,1)".into()));
    }
    let n = log_x.len();
    let (m, w) = scaled_moments(log_x, alpha);
    let (mw, vw) = mean_var(&w);
    let at = alpha * horizon;
    let estimate = (m + mw.ln()) / at;
    let cv2 = vw / (mw * mw);
    let std_error = (cv2 / n as f64).sqrt() / at.abs();
    let jensen_bias = -0.5 * cv2 / n as f64 / at;
    let mut stats: Vec<f64> = (0..resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let picks: Vec<f64> = (0..n).map(|_| w[rng.random_range(0..n)]).collect();
            (m + (pairwise_sum(&picks) / n as f64).ln()) / at
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    let (ci_low, ci_high) = if resamples > 0 {
        (percentile_sorted(&stats, tail), percentile_sorted(&stats, 1.0 - tail))
    } else {
        (estimate, estimate)
    };
    if !estimate.is_finite() {
        return Err(Error::Overflow("growth estimate is not finite".into()));
    }
    Ok(GrowthEstimate {
        alpha,
        horizon,
        n_paths: n,
        estimate,
        std_error,
        ci_low,
        ci_high,
        ci_level: level,
        bootstrap_resamples: resamples,
        jensen_bias,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LdpEstimate {
    pub c: f64,
    pub horizon: f64,
    pub n_paths: usize,
    pub exceedances: usize,
    /// `P(X(T) >= e^{cT})`.
    pub probability: f64,
    pub std_error: f64,
    /// `(1/T) log probability` (`-inf` with no exceedance).
    pub rate: f64,
    pub warning: Option<String>,
}

/// Indicator-mean estimate of the outperformance probability.
pub fn mc_ldp_probability(log_x: &[f64], c: f64, horizon: f64) -> Result<LdpEstimate> {
    if log_x.is_empty() || !(horizon > 0.0) {
        return Err(Error::InvalidParameter("ldp estimate needs paths and T > 0".into()));
    }
    let n = log_x.len();
    let level = c * horizon;
    let exceedances = log_x.iter().filter(|&&l| l >= level).count();
    let probability = exceedances as f64 / n as f64;
    let std_error = (probability * (1.0 - probability) / n as f64).sqrt();
    let rate = probability.ln() / horizon;
    let warning = (exceedances < MIN_EXCEEDANCES).then(|| {
        format!("only {exceedances} of {n} paths exceeded the threshold; the rate estimate is unreliable")
    });
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(LdpEstimate {
        c,
        horizon,
        n_paths: n,
        exceedances,
        probability,
        std_error,
        rate,
        warning,
    })
}

/// One scalar component of `d xi = [a + b xi] dt + c dB` with the quadratic
/// functional `(1/2) Q xi^2 + h xi`.
#[derive(Clone)]
pub struct CmComponent {
    pub a: TimeFn,
    pub b: TimeFn,
    pub c: TimeFn,
    pub q: TimeFn,
    pub h: TimeFn,
}

impl CmComponent {
    pub fn constant(a: f64, b: f64, c: f64, q: f64, h: f64) -> Self {
        use crate::riccati::constant_fn;
        Self {
            a: constant_fn(a),
            b: constant_fn(b),
            c: constant_fn(c),
            q: constant_fn(q),
            h: constant_fn(h),
        }
    }
}

/// `E[exp{-int_t^T ((1/2) xi' Q xi + h' xi) ds} | xi(t) = xi_t]` for
/// diagonal coefficients.
#[derive(Clone)]
pub struct CmProblem {
    pub components: Vec<CmComponent>,
    pub start: f64,
    pub horizon: f64,
    pub xi_start: Vec<f64>,
}

impl CmProblem {
    fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.components.len() != self.xi_start.len() {
            return Err(Error::InvalidParameter("one initial state per component is required".into()));
        }
        if !(self.horizon > self.start) {
            return Err(Error::InvalidParameter(format!(
                "need start < horizon, got [{}, {}]",
                self.start, self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CmClosedForm {
    pub value: f64,
    pub log_value: f64,
    pub log_components: Vec<f64>,
}

/// One grid-solution pair `(R, v)` per component.
pub fn cm_solutions(
    problem: &CmProblem,
    steps_per_unit_time: usize,
) -> Result<Vec<(BackwardGridSolution, BackwardGridSolution)>> {
    problem.validate()?;
    problem
        .components
        .iter()
        .map(|comp| {
            let c = Arc::clone(&comp.c);
            let quad: TimeFn = Arc::new(move |t| c(t) * c(t));
            let rp = ScalarRiccatiProblem::new(quad, Arc::clone(&comp.b), Arc::clone(&comp.q), problem.horizon)
                .with_start(problem.start);
            let r = solve_backward_riccati(&rp, steps_per_unit_time)?;
            let v = solve_backward_linear_on(
                |t| (comp.c)(t).powi(2) * r.interpolate(t) - (comp.b)(t),
                |t| -((comp.h)(t) + r.interpolate(t) * (comp.a)(t)),
                problem.start,
                problem.horizon,
                steps_per_unit_time,
            )?;
            Ok((r, v))
        })
        .collect()
}

/// Closed-form value `exp[v xi - (1/2) R xi^2 + (1/2) int (c^2 v^2 + 2 a v - c^2 R)]`.
pub fn cameron_martin_closed_form(problem: &CmProblem, steps_per_unit_time: usize) -> Result<CmClosedForm> {
    let sols = cm_solutions(problem, steps_per_unit_time)?;
    let mut log_components = Vec::with_capacity(sols.len());
    for ((r, v), (comp, &x0)) in sols.iter().zip(problem.components.iter().zip(&problem.xi_start)) {
        let integrand: Vec<f64> = r
            .grid()
            .iter()
            .zip(r.values())
            .zip(v.values())
            .map(|((&t, &rv), &vv)| {
                let c2 = (comp.c)(t).powi(2);
                c2 * vv * vv + 2.0 * (comp.a)(t) * vv - c2 * rv
            })
            .collect();
        let integral = trapezoid_uniform(&integrand, r.step());
        log_components.push(v.values()[0] * x0 - 0.5 * r.values()[0] * x0 * x0 + 0.5 * integral);
    }
    let log_value: f64 = log_components.iter().sum();
    Ok(CmClosedForm {
        value: log_value.exp(),
        log_value,
        log_components,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

/// Euler simulation of `xi` from `xi_t` with trapezoid quadrature of the functional.
pub fn mc_cameron_martin(problem: &CmProblem, steps: usize, n_paths: usize, seed: u64) -> Result<McEstimate> {
    problem.validate()?;
    if steps == 0 || n_paths == 0 {
        return Err(Error::InvalidParameter("steps and n_paths must be positive".into()));
    }
    let n = problem.components.len();
    let dt = (problem.horizon - problem.start) / steps as f64;
    let sdt = dt.sqrt();
    let times: Vec<f64> = (0..=steps).map(|k| problem.start + k as f64 * dt).collect();
    // coefficient tables: a, b, c, Q, h per node and component
    let table = |f: &dyn Fn(&CmComponent) -> &TimeFn| -> Vec<f64> {
        times
            .iter()
            .flat_map(|&t| problem.components.iter().map(move |c| f(c)(t)))
            .collect()
    };
    let (a, b, c, q, h) = (
        table(&|c| &c.a),
        table(&|c| &c.b),
        table(&|c| &c.c),
        table(&|c| &c.q),
        table(&|c| &c.h),
    );
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut xi = problem.xi_start.clone();
            let integrand = |k: usize, xi: &[f64]| -> f64 {
                (0..n)
                    .map(|j| 0.5 * q[k * n + j] * xi[j] * xi[j] + h[k * n + j] * xi[j])
                    .sum()
            };
            let mut prev = integrand(0, &xi);
            let mut acc = 0.0;
            for k in 0..steps {
                for j in 0..n {
                    let z: f64 = rng.sample(StandardNormal);
                    let idx = k * n + j;
                    xi[j] += (a[idx] + b[idx] * xi[j]) * dt + c[idx] * sdt * z;
                }
                let next = integrand(k + 1, &xi);
                acc += 0.5 * dt * (prev + next);
                prev = next;
            }
            (-acc).exp()
        })
        .collect();
    let (mean, var) = mean_var(&samples);
    Ok(McEstimate {
        mean,
        std_error: (var / n_paths as f64).sqrt(),
        n_paths,
    })
}
