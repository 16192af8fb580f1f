//! Python bindings: `import memport`.
//!
//! Reports come back as plain dicts and lists; matrices as lists of rows.

use memport::estimate::{self, FitOptions};
use memport::kernels;
use memport::simulate::{self, NoiseSimulator, PathConfig, WealthSimulator, WealthStrategy, XiScheme};
use memport::strategy::{self, FiniteHorizonPolicy, StationaryPolicy};
use memport::{CoefficientCurves, MemoryParams, PowerUtility};
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

create_exception!(memport, MemportError, PyException);

fn err(e: memport::Error) -> PyErr {
    MemportError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, item) in map {
                dict.set_item(k, to_py(py, item)?)?;
            }
            dict.into_any()
        }
    })
}

/// Serializes a report into Python objects. Non-finite floats become `None`.
fn report<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| MemportError::new_err(e.to_string()))?;
    to_py(py, &v)
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(MemportError::new_err("expected a non-empty square matrix given as rows"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn utility(alpha: f64) -> PyResult<PowerUtility> {
    PowerUtility::new(alpha).map_err(err)
}

fn scheme(name: &str) -> PyResult<XiScheme> {
    match name {
        "exact" => Ok(XiScheme::Exact),
        "exact_mean" => Ok(XiScheme::ExactMean),
        "euler" => Ok(XiScheme::Euler),
        other => Err(MemportError::new_err(format!("unknown scheme {other:?}"))),
    }
}

/// Memory parameters plus deterministic market coefficients.
#[pyclass(module = "memport", frozen)]
struct Model {
    params: MemoryParams,
    curves: CoefficientCurves,
}

#[pymethods]
impl Model {
    /// Constant coefficients: riskless rate `r`, risk premium `lam`.
    #[new]
    fn new(p: Vec<f64>, q: Vec<f64>, sigma: Vec<Vec<f64>>, r: f64, lam: Vec<f64>) -> PyResult<Self> {
        let params = MemoryParams::new(p, q).map_err(err)?;
        let curves = CoefficientCurves::constant(r, &matrix(&sigma)?, &lam).map_err(err)?;
        Ok(Self { params, curves })
    }

    /// Coefficients relaxing from `(r0, lam0)` toward `(rbar, lambda_bar)` at `rate`.
    #[staticmethod]
    #[allow(clippy::too_many_arguments)]
    fn relaxing(
        p: Vec<f64>,
        q: Vec<f64>,
        sigma: Vec<Vec<f64>>,
        r0: f64,
        rbar: f64,
        lam0: Vec<f64>,
        lambda_bar: Vec<f64>,
        rate: f64,
    ) -> PyResult<Self> {
        let params = MemoryParams::new(p, q).map_err(err)?;
        let curves = CoefficientCurves::relaxing(r0, rbar, &lam0, &lambda_bar, &matrix(&sigma)?, rate).map_err(err)?;
        Ok(Self { params, curves })
    }

    #[getter]
    fn n(&self) -> usize {
        self.params.n()
    }

    #[getter]
    fn p(&self) -> Vec<f64> {
        self.params.p().to_vec()
    }

    #[getter]
    fn q(&self) -> Vec<f64> {
        self.params.q().to_vec()
    }

    /// `-inf` when every `p_j <= 2 q_j`.
    fn alpha_star(&self) -> f64 {
        kernels::alpha_star(&self.params)
    }

    fn risk_premium(&self, t: f64) -> PyResult<Vec<f64>> {
        Ok(self.curves.risk_premium(t).map_err(err)?.iter().copied().collect())
    }

    /// Growth rate report: `j_via_g`, `j_via_fg`, `route_gap`, per-asset data.
    fn growth_rate<'py>(&self, py: Python<'py>, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
        let rep = strategy::growth_rate_j(&self.params, &self.curves, &utility(alpha)?).map_err(err)?;
        report(py, &rep)
    }

    fn benchmark_threshold(&self) -> PyResult<f64> {
        strategy::benchmark_threshold(&self.params, &self.curves).map_err(err)
    }

    fn mgf_lambda(&self, alpha: f64) -> PyResult<f64> {
        strategy::mgf_lambda(&self.params, &self.curves, alpha).map_err(err)
    }

    /// `(I(c), alpha(c))`; the maximizer is `None` for `c <= cbar`.
    fn rate_function(&self, c: f64) -> PyResult<(f64, Option<f64>)> {
        let r = strategy::rate_function_i(&self.params, &self.curves, c).map_err(err)?;
        Ok((r.rate, r.maximizer))
    }

    #[pyo3(signature = (alpha, horizon, steps_per_unit_time = memport::riccati::DEFAULT_STEPS_PER_UNIT_TIME))]
    fn solve(&self, alpha: f64, horizon: f64, steps_per_unit_time: usize) -> PyResult<FinitePolicy> {
        let inner = FiniteHorizonPolicy::solve(&self.params, &self.curves, &utility(alpha)?, horizon, steps_per_unit_time)
            .map_err(err)?;
        Ok(FinitePolicy { inner })
    }

    fn stationary(&self, alpha: f64) -> PyResult<Stationary> {
        let inner = StationaryPolicy::new(&self.params, &self.curves, &utility(alpha)?).map_err(err)?;
        Ok(Stationary { inner })
    }

    /// Terminal log-wealth of `paths` simulated paths.
    ///
    /// `strategy` is `"p1"` (finite horizon), `"p2"` (stationary), `"log"` or `"none"`.
    #[pyo3(signature = (strategy, horizon, paths, seed, alpha = 0.5, steps = None, scheme = "exact", x0 = 1.0))]
    #[allow(clippy::too_many_arguments)]
    fn simulate_log_wealth(
        &self,
        py: Python<'_>,
        strategy: &str,
        horizon: f64,
        paths: usize,
        seed: u64,
        alpha: f64,
        steps: Option<usize>,
        scheme: &str,
        x0: f64,
    ) -> PyResult<Vec<f64>> {
        let cfg = PathConfig::new(horizon, steps.unwrap_or_else(|| PathConfig::default_steps(horizon)), paths, seed)
            .with_scheme(self::scheme(scheme)?);
        let u = utility(alpha)?;
        py.detach(|| -> PyResult<Vec<f64>> {
            let finite;
            let stationary;
            let rule = match strategy {
                "p1" => {
                    finite = FiniteHorizonPolicy::solve(
                        &self.params,
                        &self.curves,
                        &u,
                        horizon,
                        memport::riccati::DEFAULT_STEPS_PER_UNIT_TIME,
                    )
                    .map_err(err)?;
                    WealthStrategy::FiniteHorizon(&finite)
                }
                "p2" => {
                    stationary = StationaryPolicy::new(&self.params, &self.curves, &u).map_err(err)?;
                    WealthStrategy::Stationary(&stationary)
                }
                "log" => WealthStrategy::LogOptimal,
                "none" => WealthStrategy::None,
                other => return Err(MemportError::new_err(format!("unknown strategy {other:?}"))),
            };
            let sim = NoiseSimulator::new(&self.params, &cfg).map_err(err)?;
            let mut out = WealthSimulator::new(&sim, &self.curves, x0)
                .map_err(err)?
                .run(&[rule])
                .map_err(err)?;
            Ok(out.remove(0).log_wealth)
        })
    }
}

#[pyclass(module = "memport", name = "FiniteHorizonPolicy", frozen)]
struct FinitePolicy {
    inner: FiniteHorizonPolicy,
}

#[pymethods]
impl FinitePolicy {
    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid().to_vec()
    }

    /// Grid values of `R_j(.;T)`.
    fn riccati(&self, j: usize) -> PyResult<Vec<f64>> {
        self.check(j)?;
        Ok(self.inner.riccati(j).values().to_vec())
    }

    /// Grid values of `v_j(.;T)`.
    fn linear(&self, j: usize) -> PyResult<Vec<f64>> {
        self.check(j)?;
        Ok(self.inner.linear(j).values().to_vec())
    }

    fn value_function(&self, x: f64) -> PyResult<f64> {
        self.inner.value_function(x).map_err(err)
    }

    fn log_alpha_value(&self, x: f64) -> PyResult<f64> {
        self.inner.log_alpha_value(x).map_err(err)
    }

    fn weights(&self, t: f64, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.weights(t, &xi).map_err(err)?.iter().copied().collect())
    }
}

impl FinitePolicy {
    fn check(&self, j: usize) -> PyResult<()> {
        if j >= self.inner.params().n() {
            return Err(MemportError::new_err(format!("asset index {j} out of range")));
        }
        Ok(())
    }
}

#[pyclass(module = "memport", name = "StationaryPolicy", frozen)]
struct Stationary {
    inner: StationaryPolicy,
}

#[pymethods]
impl Stationary {
    fn weights(&self, t: f64, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.weights(t, &xi).map_err(err)?.iter().copied().collect())
    }

    /// Per-asset steady constants (`r_bar`, `v_bar`, `gap`, ...).
    fn steady<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        report(py, &self.inner.steady())
    }
}

/// Variance ratio `f(t; p, q) = Var Y(t) / t`.
#[pyfunction]
fn variance_ratio_f(p: f64, q: f64, t: f64) -> PyResult<f64> {
    kernels::variance_ratio_f(p, q, t).map_err(err)
}

/// Growth-rate estimate with bootstrap CI from terminal log-wealth.
#[pyfunction]
#[pyo3(signature = (log_x, alpha, horizon, resamples = 200, level = 0.95, seed = 0))]
fn mc_growth_rate<'py>(
    py: Python<'py>,
    log_x: Vec<f64>,
    alpha: f64,
    horizon: f64,
    resamples: usize,
    level: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let g = simulate::mc_growth_rate(&log_x, alpha, horizon, resamples, level, seed).map_err(err)?;
    report(py, &g)
}

#[pyfunction]
fn mc_power_utility<'py>(py: Python<'py>, log_x: Vec<f64>, alpha: f64) -> PyResult<Bound<'py, PyAny>> {
    report(py, &simulate::mc_power_utility(&log_x, alpha).map_err(err)?)
}

/// Synthetic daily prices (rows are days) from volatilities in percent per annum.
#[pyfunction]
#[pyo3(signature = (sigma_pct, p, q, n_days, seed, replicate = 0))]
fn synthetic_prices(
    sigma_pct: Vec<Vec<f64>>,
    p: Vec<f64>,
    q: Vec<f64>,
    n_days: usize,
    seed: u64,
    replicate: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let params = MemoryParams::new(p, q).map_err(err)?;
    let s = estimate::synthetic_prices(&matrix(&sigma_pct)?, &params, n_days, seed, replicate).map_err(err)?;
    Ok(rows(&s.prices))
}

/// Fits `(sigma, p, q)` to a price CSV; returns the fit report as a dict.
#[pyfunction]
#[pyo3(signature = (path, max_lag = 100, starts = estimate::DEFAULT_STARTS, seed = 0))]
fn fit_prices<'py>(py: Python<'py>, path: &str, max_lag: usize, starts: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let fit = py.detach(|| {
        let prices = estimate::ingest_prices_file(std::path::Path::new(path))?;
        let table = estimate::sample_lag_covariance(&prices, max_lag)?;
        estimate::fit_parameters(
            &table,
            &FitOptions {
                starts,
                seed,
                ..FitOptions::default()
            },
        )
    });
    let fit = fit.map_err(err)?;
    let d = report(py, &fit)?;
    d.set_item("sigma", rows(&fit.sigma))?;
    Ok(d)
}

#[pymodule]
#[pyo3(name = "memport")]
fn memport_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MemportError", m.py().get_type::<MemportError>())?;
    m.add_class::<Model>()?;
    m.add_class::<FinitePolicy>()?;
    m.add_class::<Stationary>()?;
    m.add_function(wrap_pyfunction!(variance_ratio_f, m)?)?;
    m.add_function(wrap_pyfunction!(mc_growth_rate, m)?)?;
    m.add_function(wrap_pyfunction!(mc_power_utility, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_prices, m)?)?;
    m.add_function(wrap_pyfunction!(fit_prices, m)?)?;
    Ok(())
}
