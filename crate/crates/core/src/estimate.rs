//! Estimation of `(sigma, p, q)` from daily closing prices through the term
//! structure of lag-`t` log-return covariances.
//!
//! Units follow the usual desk convention: time in trading days, covariances
//! in percent squared per annum.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{f_raw, f_with_gradient};
use crate::model::MemoryParams;
use crate::simulate::{NoiseSimulator, PathConfig, XiScheme};

pub const TRADING_DAYS: f64 = 252.0;
pub const PERCENT_SQUARED: f64 = 100.0 * 100.0;
/// Lower bound of `q` in the reparameterization `q = Q_FLOOR + w^2`.
pub const Q_FLOOR: f64 = 1e-6;
pub const DEFAULT_STARTS: usize = 16;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;
pub const DEFAULT_GRADIENT_TOLERANCE: f64 = 1e-8;

pub const IDENTIFIABILITY_NOTE: &str = "the lag covariances depend on sigma only through \
sigma diag(f) sigma'; columns of sigma (with their p, q) are determined up to sign and order, \
reported in canonical form: descending p, largest-magnitude entry of each column positive";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub names: Vec<String>,
    pub dates: Option<Vec<String>>,
    /// `N x n`, one row per trading day.
    pub prices: DMatrix<f64>,
}

impl PriceSeries {
    pub fn new(names: Vec<String>, dates: Option<Vec<String>>, prices: DMatrix<f64>) -> Result<Self> {
        if names.len() != prices.ncols() {
            return Err(Error::InvalidParameter("one name per price column required".into()));
        }
        if let Some(d) = &dates {
            if d.len() != prices.nrows() {
                return Err(Error::InvalidParameter("one date per row required".into()));
            }
        }
        for (row, r) in prices.row_iter().enumerate() {
            if let Some(x) = r.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
                return Err(Error::Parse {
                    row: row + 1,
                    message: format!("price {x} is not strictly positive"),
                });
            }
        }
        Ok(Self { names, dates, prices })
    }

    pub fn n_assets(&self) -> usize {
        self.prices.ncols()
    }

    pub fn n_obs(&self) -> usize {
        self.prices.nrows()
    }
}

/// Reads `date,asset1,...` (date column optional) price CSV. Rows are
/// numbered from 1, not counting the header.
pub fn ingest_prices<R: Read>(reader: R) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let has_date = header.first().is_some_and(|h| h.eq_ignore_ascii_case("date"));
    let names: Vec<String> = header[usize::from(has_date)..].to_vec();
    let n = names.len();
    if n == 0 {
        return Err(Error::Parse {
            row: 0,
            message: "header names no price columns".into(),
        });
    }
    let mut values = Vec::new();
    let mut dates = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let row = idx + 1;
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse {
                row,
                message: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        if has_date {
            dates.push(rec[0].to_string());
        }
        for (name, field) in names.iter().zip(rec.iter().skip(usize::from(has_date))) {
            if field.is_empty() {
                return Err(Error::Parse {
                    row,
                    message: format!("missing price for {name}"),
                });
            }
            let x: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                message: format!("cannot parse price {field:?} for {name}"),
            })?;
            if !(x > 0.0) || !x.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("price {x} for {name} is not strictly positive"),
                });
            }
            values.push(x);
        }
    }
    let n_obs = values.len() / n;
    if n_obs < 3 {
        return Err(Error::Degenerate(format!(
            "price series has {n_obs} rows; at least 3 are needed for one lag"
        )));
    }
    PriceSeries::new(names, has_date.then_some(dates), DMatrix::from_row_slice(n_obs, n, &values))
}

pub fn ingest_prices_file(path: &Path) -> Result<PriceSeries> {
    ingest_prices(std::fs::File::open(path)?)
}

/// Lag covariance curves for `t = 1..=M`, stored for `i <= j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagCovarianceTable {
    pub n: usize,
    pub max_lag: usize,
    /// Number of price observations behind a sample table.
    pub n_obs: Option<usize>,
    /// `values[t-1][pair_index(i, j)]`.
    pub values: Vec<Vec<f64>>,
}

fn pair_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    i * n - i * (i + 1) / 2 + j
}

impl LagCovarianceTable {
    pub fn get(&self, i: usize, j: usize, t: usize) -> f64 {
        self.values[t - 1][pair_index(self.n, i, j)]
    }

    pub fn matrix(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j, t))
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        (0..self.n).flat_map(|i| (i..self.n).map(move |j| (i, j))).collect()
    }

    pub fn curve(&self, i: usize, j: usize) -> Vec<f64> {
        (1..=self.max_lag).map(|t| self.get(i, j, t)).collect()
    }

    /// Model curves `V(t)` for `t = 1..=M`.
    pub fn from_model(sigma: &DMatrix<f64>, params: &MemoryParams, max_lag: usize) -> Result<Self> {
        let n = params.n();
        if sigma.nrows() != n || sigma.ncols() != n {
            return Err(Error::InvalidParameter("sigma must be n x n".into()));
        }
        let values = (1..=max_lag)
            .map(|t| {
                let v = model_lag_covariance(sigma, params.p(), params.q(), t as f64);
                (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(i, j)| v[(i, j)]).collect()
            })
            .collect();
        Ok(Self {
            n,
            max_lag,
            n_obs: None,
            values,
        })
    }

    /// Elementwise map, keeping the layout.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            values: self.values.iter().map(|row| row.iter().map(|&x| f(x)).collect()).collect(),
            ..self.clone()
        }
    }
}

/// Sample lag covariances `v_ij(t)` of lag-`t` log returns.
pub fn sample_lag_covariance(prices: &PriceSeries, max_lag: usize) -> Result<LagCovarianceTable> {
    let big_n = prices.n_obs();
    let n = prices.n_assets();
    if max_lag == 0 {
        return Err(Error::InvalidParameter("max lag must be at least 1".into()));
    }
    if max_lag + 1 >= big_n {
        return Err(Error::Degenerate(format!(
            "max lag {max_lag} needs more than {} observations, series has {big_n}",
            max_lag + 1
        )));
    }
    let logs = prices.prices.map(f64::ln);
    let values = (1..=max_lag)
        .map(|t| {
            let m = big_n - t;
            let u = DMatrix::from_fn(m, n, |r, i| logs[(r + t, i)] - logs[(r, i)]);
            let means: Vec<f64> = (0..n).map(|i| u.column(i).mean()).collect();
            let centered = DMatrix::from_fn(m, n, |r, i| u[(r, i)] - means[i]);
            let scale = PERCENT_SQUARED * TRADING_DAYS / (t as f64 * (big_n - t - 1) as f64);
            let mut row = Vec::with_capacity(n * (n + 1) / 2);
            for i in 0..n {
                for j in i..n {
                    row.push(scale * centered.column(i).dot(&centered.column(j)));
                }
            }
            row
        })
        .collect();
    Ok(LagCovarianceTable {
        n,
        max_lag,
        n_obs: Some(big_n),
        values,
    })
}

/// `V(t) = sigma diag(f(t; p_m, q_m)) sigma'`.
pub fn model_lag_covariance(sigma: &DMatrix<f64>, p: &[f64], q: &[f64], t: f64) -> DMatrix<f64> {
    let f = DVector::from_iterator(p.len(), p.iter().zip(q).map(|(&p, &q)| f_raw(p, q, t)));
    let scaled = DMatrix::from_fn(sigma.nrows(), sigma.ncols(), |i, m| sigma[(i, m)] * f[m]);
    let v = &scaled * sigma.transpose();
    (&v + v.transpose()) * 0.5
}

/// Signed square root `sign(x) sqrt(|x|)`.
pub fn ssr(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x.signum() * x.abs().sqrt()
    }
}

pub fn ssr_transform(table: &LagCovarianceTable) -> LagCovarianceTable {
    table.map(ssr)
}

/// Plot data `t, d_ij, D_ij` for one pair.
pub fn write_pair_curves<W: std::io::Write>(
    w: W,
    sample: &LagCovarianceTable,
    fitted: &LagCovarianceTable,
    i: usize,
    j: usize,
) -> Result<()> {
    if sample.max_lag != fitted.max_lag || sample.n != fitted.n {
        return Err(Error::InvalidParameter("sample and fitted tables differ in shape".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["t", &format!("d_{}{}", i + 1, j + 1), &format!("D_{}{}", i + 1, j + 1)])?;
    for t in 1..=sample.max_lag {
        wtr.write_record([
            t.to_string(),
            ssr(sample.get(i, j, t)).to_string(),
            ssr(fitted.get(i, j, t)).to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub starts: usize,
    pub seed: u64,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Per-lag weights of the squared residuals; `None` is the plain sum.
    pub lag_weights: Option<Vec<f64>>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            starts: DEFAULT_STARTS,
            seed: 0,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            gradient_tolerance: DEFAULT_GRADIENT_TOLERANCE,
            lag_weights: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StartReport {
    pub index: usize,
    pub initial_objective: f64,
    pub objective: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    /// Largest residual-scaled gradient component at the returned point.
    pub gradient_norm: f64,
    pub converged: bool,
    pub best_start: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub sigma: DMatrix<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub objective: f64,
    pub convergence: ConvergenceReport,
    pub starts: Vec<StartReport>,
    pub identifiability: String,
}

impl FitResult {
    pub fn params(&self) -> Result<MemoryParams> {
        MemoryParams::new(self.p.clone(), self.q.clone())
    }
}

/// Sum of squared residuals over `t` and all ordered pairs `(i, j)`.
pub fn objective(table: &LagCovarianceTable, sigma: &DMatrix<f64>, p: &[f64], q: &[f64]) -> f64 {
    objective_weighted(table, sigma, p, q, None)
}

fn objective_weighted(
    table: &LagCovarianceTable,
    sigma: &DMatrix<f64>,
    p: &[f64],
    q: &[f64],
    weights: Option<&[f64]>,
) -> f64 {
    (1..=table.max_lag)
        .map(|t| {
            let w = weights.map_or(1.0, |w| w[t - 1]);
            let v = model_lag_covariance(sigma, p, q, t as f64);
            let s = table.matrix(t);
            w * (v - s).iter().map(|x| x * x).sum::<f64>()
        })
        .sum()
}

/// Unconstrained coordinates `[sigma row-major, u, w]` with `p = u^2`, `q = Q_FLOOR + w^2`.
#[derive(Debug, Clone)]
struct Point {
    n: usize,
    theta: DVector<f64>,
}

impl Point {
    fn from_params(sigma: &DMatrix<f64>, p: &[f64], q: &[f64]) -> Self {
        let n = p.len();
        let mut theta = DVector::zeros(n * n + 2 * n);
        for i in 0..n {
            for m in 0..n {
                theta[i * n + m] = sigma[(i, m)];
            }
            theta[n * n + i] = p[i].max(0.0).sqrt();
            theta[n * n + n + i] = (q[i] - Q_FLOOR).max(0.0).sqrt();
        }
        Self { n, theta }
    }

    fn sigma(&self) -> DMatrix<f64> {
        let n = self.n;
        DMatrix::from_fn(n, n, |i, m| self.theta[i * n + m])
    }

    fn p(&self) -> Vec<f64> {
        (0..self.n).map(|m| self.theta[self.n * self.n + m].powi(2)).collect()
    }

    fn q(&self) -> Vec<f64> {
        (0..self.n).map(|m| Q_FLOOR + self.theta[self.n * self.n + self.n + m].powi(2)).collect()
    }
}

/// Residuals and Jacobian in `theta`.
struct Linearization {
    residual: DVector<f64>,
    jacobian: DMatrix<f64>,
    /// `r . dr/dp_m` and `r . dr/dq_m`, for the curvature correction.
    natural_gradient: Vec<f64>,
}

fn linearize(table: &LagCovarianceTable, point: &Point, weights: Option<&[f64]>) -> Linearization {
    let n = point.n;
    let sigma = point.sigma();
    let (p, q) = (point.p(), point.q());
    let rows = table.max_lag * n * n;
    let cols = n * n + 2 * n;
    let mut residual = DVector::zeros(rows);
    let mut jacobian = DMatrix::zeros(rows, cols);
    let mut natural_gradient = vec![0.0; 2 * n];
    for t in 1..=table.max_lag {
        let sw = weights.map_or(1.0, |w| w[t - 1].sqrt());
        let fg: Vec<(f64, f64, f64)> = (0..n).map(|m| f_with_gradient(p[m], q[m], t as f64)).collect();
        for i in 0..n {
            for j in 0..n {
                let row = ((t - 1) * n + i) * n + j;
                let v: f64 = (0..n).map(|m| sigma[(i, m)] * sigma[(j, m)] * fg[m].0).sum();
                let r = sw * (v - table.get(i, j, t));
                residual[row] = r;
                for m in 0..n {
                    jacobian[(row, i * n + m)] += sw * sigma[(j, m)] * fg[m].0;
                    jacobian[(row, j * n + m)] += sw * sigma[(i, m)] * fg[m].0;
                    let ss = sw * sigma[(i, m)] * sigma[(j, m)];
                    let (dp, dq) = (ss * fg[m].1, ss * fg[m].2);
                    jacobian[(row, n * n + m)] = dp * 2.0 * point.theta[n * n + m];
                    jacobian[(row, n * n + n + m)] = dq * 2.0 * point.theta[n * n + n + m];
                    natural_gradient[m] += dp * r;
                    natural_gradient[n + m] += dq * r;
                }
            }
        }
    }
    Linearization {
        residual,
        jacobian,
        natural_gradient,
    }
}

/// `|g|_inf / (|r| max_k |J_k|)`: invariant to the scale of the data, and
/// vanishing along directions whose influence on the fit dies out.
fn scaled_gradient(lin: &Linearization, g: &DVector<f64>) -> f64 {
    let rn = lin.residual.norm();
    let jmax = lin.jacobian.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if rn == 0.0 || jmax == 0.0 {
        return 0.0;
    }
    g.amax() / (rn * jmax)
}

fn local_fit(table: &LagCovarianceTable, start: Point, opts: &FitOptions, index: usize) -> (Point, StartReport) {
    let n = start.n;
    let weights = opts.lag_weights.as_deref();
    let exact_fit = 1e-14 * table.values.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let mut point = start;
    let mut lin = linearize(table, &point, weights);
    let mut obj = lin.residual.norm_squared();
    let initial_objective = obj;
    let mut mu = 1e-3;
    let mut nu = 2.0;
    let mut iterations = 0;
    let mut grad = f64::INFINITY;
    let mut converged = false;
    while iterations < opts.max_iterations {
        let g = lin.jacobian.tr_mul(&lin.residual);
        grad = scaled_gradient(&lin, &g);
        if grad <= opts.gradient_tolerance || lin.residual.norm() <= exact_fit {
            converged = true;
            break;
        }
        let mut h = lin.jacobian.tr_mul(&lin.jacobian);
        // curvature of p = u^2, q = eps + w^2 along the residual
        for (k, gn) in (n * n..n * n + 2 * n).zip(&lin.natural_gradient) {
            h[(k, k)] += (2.0 * gn).max(0.0);
        }
        let dmax = h.diagonal().max().max(f64::MIN_POSITIVE);
        let mut accepted = false;
        while mu < 1e20 {
            let mut a = h.clone();
            for k in 0..a.nrows() {
                a[(k, k)] += mu * h[(k, k)].max(1e-12 * dmax);
            }
            let Some(ch) = a.cholesky() else {
                mu *= nu;
                nu *= 2.0;
                continue;
            };
            let step = ch.solve(&(-&g));
            let trial = Point {
                n,
                theta: &point.theta + &step,
            };
            let trial_lin = linearize(table, &trial, weights);
            let trial_obj = trial_lin.residual.norm_squared();
            let predicted = -(2.0 * g.dot(&step) + step.dot(&(&h * &step)));
            if trial_obj.is_finite() && trial_obj < obj {
                let rho = if predicted > 0.0 { (obj - trial_obj) / predicted } else { 1.0 };
                mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                point = trial;
                lin = trial_lin;
                obj = trial_obj;
                accepted = true;
                break;
            }
            mu *= nu;
            nu *= 2.0;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    if !converged {
        let g = lin.jacobian.tr_mul(&lin.residual);
        grad = scaled_gradient(&lin, &g);
        converged = grad <= opts.gradient_tolerance;
    }
    let report = StartReport {
        index,
        initial_objective,
        objective: objective_weighted(table, &point.sigma(), &point.p(), &point.q(), weights),
        iterations,
        gradient_norm: grad,
        converged,
    };
    (point, report)
}

/// Factor `L` with `L L' = m`, by Cholesky or, failing that, a clipped eigendecomposition.
fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = m.clone().cholesky() {
        return ch.l();
    }
    let eig = m.clone().symmetric_eigen();
    let top = eig.eigenvalues.max().max(1e-12);
    let root = eig.eigenvalues.map(|l| l.max(1e-8 * top).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&root)
}

fn start_point(table: &LagCovarianceTable, factor: &DMatrix<f64>, seed: u64, index: usize) -> Point {
    let n = table.n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.5)).collect();
    let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.5)).collect();
    let m = table.max_lag as f64;
    let sigma = DMatrix::from_fn(n, n, |i, k| factor[(i, k)] / f_raw(p[k], q[k], m).sqrt());
    Point::from_params(&sigma, &p, &q)
}

/// Columns by descending `p`, each column's largest-magnitude entry positive.
pub fn canonicalize(sigma: &DMatrix<f64>, p: &[f64], q: &[f64]) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = p.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut out = DMatrix::zeros(sigma.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        let col = sigma.column(src);
        let lead = col.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        out.set_column(dst, &(col * sign));
    }
    (out, order.iter().map(|&k| p[k]).collect(), order.iter().map(|&k| q[k]).collect())
}

/// Multi-start damped Gauss–Newton fit of `(sigma, p, q)`.
pub fn fit_parameters(table: &LagCovarianceTable, opts: &FitOptions) -> Result<FitResult> {
    if table.max_lag < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 lags, got {}", table.max_lag)));
    }
    if table.n == 0 || opts.starts == 0 {
        return Err(Error::InvalidParameter("need n >= 1 and at least one start".into()));
    }
    if let Some(w) = &opts.lag_weights {
        if w.len() != table.max_lag || w.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::InvalidParameter("one nonnegative weight per lag required".into()));
        }
    }
    let factor = psd_factor(&table.matrix(table.max_lag));
    let runs: Vec<(Point, StartReport)> = (0..opts.starts)
        .into_par_iter()
        .map(|k| local_fit(table, start_point(table, &factor, opts.seed, k), opts, k))
        .collect();
    let best = runs
        .iter()
        .filter(|(_, r)| r.converged)
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.1.index.cmp(&b.1.index)));
    let starts: Vec<StartReport> = runs.iter().map(|(_, r)| r.clone()).collect();
    let Some((point, report)) = best else {
        let detail = starts
            .iter()
            .map(|r| format!("start {}: objective {:.6e}, gradient {:.3e}, {} iterations", r.index, r.objective, r.gradient_norm, r.iterations))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Convergence(format!(
            "no start reached gradient norm {:e}: {detail}",
            opts.gradient_tolerance
        )));
    };
    let (sigma, p, q) = canonicalize(&point.sigma(), &point.p(), &point.q());
    Ok(FitResult {
        sigma,
        p,
        q,
        objective: report.objective,
        convergence: ConvergenceReport {
            iterations: report.iterations,
            gradient_norm: report.gradient_norm,
            converged: true,
            best_start: report.index,
        },
        starts,
        identifiability: IDENTIFIABILITY_NOTE.to_string(),
    })
}

/// Daily prices `s_i(m) = s0 exp(sum_j sigma_ij Y_j(m) + drift_i m)`, with
/// `sigma` in percent per annum and `Y` sampled exactly at whole days.
pub fn synthetic_prices(
    sigma_pct: &DMatrix<f64>,
    params: &MemoryParams,
    n_days: usize,
    seed: u64,
    replicate: usize,
) -> Result<PriceSeries> {
    let n = params.n();
    if sigma_pct.nrows() != n || sigma_pct.ncols() != n || n_days < 3 {
        return Err(Error::InvalidParameter("sigma must be n x n and n_days >= 3".into()));
    }
    let steps = n_days - 1;
    let config = PathConfig::new(steps as f64, steps, replicate + 1, seed).with_scheme(XiScheme::Exact);
    let path = NoiseSimulator::new(params, &config)?.path(replicate);
    let sigma = sigma_pct / (100.0 * TRADING_DAYS.sqrt());
    let drift: Vec<f64> = (0..n).map(|i| 0.08 / TRADING_DAYS - 0.5 * sigma.row(i).norm_squared()).collect();
    let prices = DMatrix::from_fn(n_days, n, |m, i| {
        let y = path.y_at(m);
        let x: f64 = (0..n).map(|j| sigma[(i, j)] * y[j]).sum::<f64>() + drift[i] * m as f64;
        100.0 * x.exp()
    });
    PriceSeries::new((1..=n).map(|i| format!("asset{i}")).collect(), None, prices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{reference_memory, reference_sigma};

    #[test]
    fn ingest_round_trip_and_errors() {
        let csv = "date,a,b\n2020-01-01,1.0,2.0\n2020-01-02,1.1,2.1\n2020-01-03,1.2,2.0\n";
        let s = ingest_prices(csv.as_bytes()).unwrap();
        assert_eq!((s.n_assets(), s.n_obs()), (2, 3));
        assert_eq!(s.dates.as_ref().unwrap()[2], "2020-01-03");
        let no_date = ingest_prices("a\n1\n2\n3\n".as_bytes()).unwrap();
        assert!(no_date.dates.is_none());
        let mut bad = String::from("date,a\n");
        for k in 1..=20 {
            bad.push_str(&format!("d{k},{}\n", if k == 17 { 0.0 } else { 1.0 + k as f64 }));
        }
        match ingest_prices(bad.as_bytes()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 17),
            other => panic!("{other:?}"),
        }
        assert!(matches!(ingest_prices("date,a\n".as_bytes()), Err(Error::Degenerate(_))));
        assert!(matches!(ingest_prices("date,a\nx,\ny,2\nz,3\n".as_bytes()), Err(Error::Parse { row: 1, .. })));
        assert!(matches!(ingest_prices("date,a\nx,1,3\n".as_bytes()), Err(Error::Parse { row: 1, .. })));
    }

    fn series(prices: Vec<f64>, n: usize) -> PriceSeries {
        let rows = prices.len() / n;
        PriceSeries::new(
            (0..n).map(|i| i.to_string()).collect(),
            None,
            DMatrix::from_row_slice(rows, n, &prices),
        )
        .unwrap()
    }

    #[test]
    fn lag_covariance_trivial_cases() {
        let flat = series(vec![5.0; 40], 2);
        let t = sample_lag_covariance(&flat, 5).unwrap();
        assert!(t.values.iter().flatten().all(|v| *v == 0.0));
        let expo = series((0..30).map(|m| (0.01 * m as f64).exp()).collect(), 1);
        let t = sample_lag_covariance(&expo, 5).unwrap();
        assert!(t.values.iter().flatten().all(|v| v.abs() < 1e-20));
        assert!(matches!(sample_lag_covariance(&expo, 29), Err(Error::Degenerate(_))));
    }

    #[test]
    fn lag_covariance_scale_invariant_and_symmetric() {
        let s = synthetic_prices(&reference_sigma(), &reference_memory(), 400, 3, 0).unwrap();
        let scaled = PriceSeries::new(s.names.clone(), None, &s.prices * 7.5).unwrap();
        let a = sample_lag_covariance(&s, 10).unwrap();
        let b = sample_lag_covariance(&scaled, 10).unwrap();
        for (x, y) in a.values.iter().flatten().zip(b.values.iter().flatten()) {
            assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0));
        }
        assert_eq!(a.get(0, 2, 3), a.get(2, 0, 3));
        assert!((0..3).all(|i| a.get(i, i, 4) >= 0.0));
    }

    #[test]
    fn model_curves() {
        let sigma = reference_sigma();
        let m = reference_memory();
        let v1 = model_lag_covariance(&sigma, m.p(), m.q(), 1.0);
        let v100 = model_lag_covariance(&sigma, m.p(), m.q(), 100.0);
        assert!((&v1 - v1.transpose()).amax() < 1e-12);
        for i in 0..3 {
            assert!(v1[(i, i)] > v100[(i, i)]);
        }
        let flat = MemoryParams::memoryless(vec![0.1; 3]).unwrap();
        let ss = &sigma * sigma.transpose();
        for t in [0.5, 3.0, 80.0] {
            assert!((model_lag_covariance(&sigma, flat.p(), flat.q(), t) - &ss).amax() < 1e-10);
        }
    }

    #[test]
    fn ssr_values() {
        assert_eq!(ssr(0.0), 0.0);
        assert_eq!(ssr(-4.0), -2.0);
        assert_eq!(ssr(9.0), 3.0);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let table = LagCovarianceTable::from_model(&reference_sigma(), &reference_memory(), 12).unwrap();
        let sigma = DMatrix::from_row_slice(3, 3, &[20.0, -5.0, 3.0, 10.0, 15.0, 2.0, 1.0, -2.0, 18.0]);
        let point = Point::from_params(&sigma, &[0.1, 0.3, 0.05], &[0.2, 0.07, 0.15]);
        let lin = linearize(&table, &point, None);
        for k in 0..point.theta.len() {
            let h = 1e-5 * point.theta[k].abs().max(1e-2);
            let mut up = point.clone();
            up.theta[k] += h;
            let mut dn = point.clone();
            dn.theta[k] -= h;
            let fd = (linearize(&table, &up, None).residual - linearize(&table, &dn, None).residual) / (2.0 * h);
            let col = lin.jacobian.column(k);
            let err = (&fd - col).amax();
            assert!(err <= 1e-6 * col.amax().max(1e-300), "param {k}: {err} vs {}", col.amax());
        }
    }

    #[test]
    fn exact_curve_inversion_single_asset() {
        let sigma = DMatrix::from_element(1, 1, 25.0);
        let truth = MemoryParams::new(vec![0.12], vec![0.08]).unwrap();
        let table = LagCovarianceTable::from_model(&sigma, &truth, 60).unwrap();
        let fit = fit_parameters(&table, &FitOptions::default()).unwrap();
        let rel = |a: f64, b: f64| ((a - b) / b).abs();
        assert!(rel(fit.sigma[(0, 0)].powi(2), 625.0) < 1e-4, "{fit:?}");
        assert!(rel(fit.p[0], 0.12) < 1e-4 && rel(fit.q[0], 0.08) < 1e-4, "{fit:?}");
    }

    #[test]
    fn canonical_form_and_objective_invariance() {
        let sigma = reference_sigma();
        let m = reference_memory();
        let table = LagCovarianceTable::from_model(&sigma, &m, 10).unwrap();
        let mut flipped = sigma.clone();
        flipped.column_mut(1).neg_mut();
        flipped.swap_columns(0, 2);
        let (p, q) = (vec![0.076, 0.261, 0.086], vec![0.098, 0.044, 0.305]);
        assert!(objective(&table, &flipped, &p, &q) < 1e-18);
        let (cs, cp, cq) = canonicalize(&flipped, &p, &q);
        let (rs, rp, rq) = canonicalize(&sigma, m.p(), m.q());
        assert_eq!((cp, cq), (rp, rq));
        assert!((cs - rs).amax() < 1e-15);
    }

    #[test]
    fn fit_is_deterministic() {
        let s = synthetic_prices(&reference_sigma(), &reference_memory(), 600, 11, 0).unwrap();
        let table = sample_lag_covariance(&s, 20).unwrap();
        let opts = FitOptions {
            starts: 4,
            seed: 5,
            ..FitOptions::default()
        };
        let a = fit_parameters(&table, &opts).unwrap();
        let b = fit_parameters(&table, &opts).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.objective, b.objective);
        assert!(a.starts.iter().all(|r| a.objective <= r.initial_objective));
    }
}
