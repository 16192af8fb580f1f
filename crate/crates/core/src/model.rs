//! Model parameters: memory pairs, power utility and deterministic market
//! coefficient curves.

use nalgebra::{DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reciprocal condition number below which the volatility matrix is treated
/// as singular.
pub const SINGULAR_RCOND: f64 = 1e-12;

/// Discrepancy between the supplied long-run values and the curves above
/// which [`CoefficientCurves::validate_limits`] warns.
pub const LIMIT_TOLERANCE: f64 = 1e-6;

/// Per-asset memory parameters `(p_j, q_j)`.
///
/// `q_j > 0` is the memory decay and `p_j >= 0` the memory strength; with
/// `p_j = 0` the driving noise of asset `j` is a Brownian motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMemoryParams")]
pub struct MemoryParams {
    p: Vec<f64>,
    q: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMemoryParams {
    p: Vec<f64>,
    q: Vec<f64>,
}

impl TryFrom<RawMemoryParams> for MemoryParams {
    type Error = Error;
    fn try_from(raw: RawMemoryParams) -> Result<Self> {
        MemoryParams::new(raw.p, raw.q)
    }
}

impl MemoryParams {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::InvalidParameter("at least one asset is required".into()));
        }
        if p.len() != q.len() {
            return Err(Error::InvalidParameter(format!(
                "p has {} entries but q has {}",
                p.len(),
                q.len()
            )));
        }
        for (j, (&pj, &qj)) in p.iter().zip(&q).enumerate() {
            if !(qj.is_finite() && qj > 0.0) {
                return Err(Error::InvalidParameter(format!("q[{j}] = {qj} must be finite and > 0")));
            }
            if !(pj.is_finite() && pj >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "p[{j}] = {pj} must be finite and >= 0 (negative memory is not supported)"
                )));
            }
        }
        Ok(Self { p, q })
    }

    /// Memoryless model: every `p_j = 0`.
    pub fn memoryless(q: Vec<f64>) -> Result<Self> {
        let p = vec![0.0; q.len()];
        Self::new(p, q)
    }

    pub fn n(&self) -> usize {
        self.p.len()
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub(crate) fn check_asset(&self, j: usize) -> Result<()> {
        if j >= self.n() {
            return Err(Error::InvalidParameter(format!(
                "asset index {j} out of range for {} assets",
                self.n()
            )));
        }
        Ok(())
    }
}

/// Power utility `x^alpha / alpha` with its conjugate exponent
/// `beta = alpha / (alpha - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerUtility {
    alpha: f64,
    beta: f64,
}

impl PowerUtility {
    pub fn new(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha >= 1.0 || alpha == 0.0 {
            return Err(Error::InvalidParameter(format!(
                "utility exponent alpha={alpha} must lie in (-inf, 1) excluding 0"
            )));
        }
        Ok(Self {
            alpha,
            beta: alpha / (alpha - 1.0),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `beta (1 - beta)`, positive for `alpha < 0` and negative for `0 < alpha < 1`.
    pub fn beta_one_minus_beta(&self) -> f64 {
        self.beta * (1.0 - self.beta)
    }
}

/// A deterministic scalar function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarCurve {
    Constant { value: f64 },
    /// `limit + (start - limit) * exp(-rate * t)`.
    ExpDecay { start: f64, limit: f64, rate: f64 },
    /// Piecewise-linear interpolation, constant beyond the end knots.
    Table { times: Vec<f64>, values: Vec<f64> },
}

impl ScalarCurve {
    pub fn constant(value: f64) -> Self {
        ScalarCurve::Constant { value }
    }

    pub fn exp_decay(start: f64, limit: f64, rate: f64) -> Self {
        ScalarCurve::ExpDecay { start, limit, rate }
    }

    pub fn table(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        let curve = ScalarCurve::Table { times, values };
        curve.validate()?;
        Ok(curve)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScalarCurve::Constant { value } => finite("constant curve value", *value),
            ScalarCurve::ExpDecay { start, limit, rate } => {
                finite("curve start", *start)?;
                finite("curve limit", *limit)?;
                if !(rate.is_finite() && *rate >= 0.0) {
                    return Err(Error::InvalidParameter(format!("decay rate {rate} must be >= 0")));
                }
                Ok(())
            }
            ScalarCurve::Table { times, values } => {
                if times.is_empty() || times.len() != values.len() {
                    return Err(Error::InvalidParameter(
                        "table curve needs matching, non-empty times and values".into(),
                    ));
                }
                if times.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::InvalidParameter(
                        "table curve times must be strictly increasing".into(),
                    ));
                }
                for v in times.iter().chain(values) {
                    finite("table entry", *v)?;
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            ScalarCurve::Constant { value } => *value,
            ScalarCurve::ExpDecay { start, limit, rate } => limit + (start - limit) * (-rate * t).exp(),
            ScalarCurve::Table { times, values } => {
                if t <= times[0] {
                    return values[0];
                }
                let last = times.len() - 1;
                if t >= times[last] {
                    return values[last];
                }
                let k = times.partition_point(|&x| x <= t) - 1;
                let w = (t - times[k]) / (times[k + 1] - times[k]);
                values[k] + w * (values[k + 1] - values[k])
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            ScalarCurve::Constant { .. } => true,
            ScalarCurve::ExpDecay { start, limit, rate } => start == limit || *rate == 0.0,
            ScalarCurve::Table { values, .. } => values.iter().all(|v| *v == values[0]),
        }
    }

    /// Smallest value the curve attains on `[0, inf)`.
    fn infimum(&self) -> f64 {
        match self {
            ScalarCurve::Constant { value } => *value,
            ScalarCurve::ExpDecay { start, limit, .. } => start.min(*limit),
            ScalarCurve::Table { values, .. } => values.iter().copied().fold(f64::INFINITY, f64::min),
        }
    }
}

fn finite(what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be finite, got {v}")))
    }
}

/// LU factors of `sigma` and `sigma'` after the condition check.
#[derive(Debug, Clone)]
struct SigmaFactors {
    sigma: LU<f64, Dyn, Dyn>,
    sigma_t: LU<f64, Dyn, Dyn>,
}

impl SigmaFactors {
    fn new(m: &DMatrix<f64>, t: f64) -> Result<Self> {
        let rcond = reciprocal_condition(m);
        if !(rcond >= SINGULAR_RCOND) {
            return Err(Error::SingularMatrix { t, rcond });
        }
        Ok(Self {
            sigma: m.clone().lu(),
            sigma_t: m.transpose().lu(),
        })
    }
}

/// Ratio of smallest to largest singular value; zero for a zero matrix.
pub fn reciprocal_condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    if !(max > 0.0) {
        return 0.0;
    }
    sv.min() / max
}

/// Deterministic market coefficients: riskless rate `r(t)`, mean returns
/// `mu(t)`, volatility `sigma(t)` and their long-run values.
#[derive(Debug, Clone)]
pub struct CoefficientCurves {
    n: usize,
    r: ScalarCurve,
    mu: Vec<ScalarCurve>,
    /// Row-major `n x n`.
    sigma: Vec<ScalarCurve>,
    rbar: f64,
    lambda_bar: Vec<f64>,
    constant_sigma: Option<SigmaFactors>,
}

impl CoefficientCurves {
    pub fn new(
        r: ScalarCurve,
        mu: Vec<ScalarCurve>,
        sigma: Vec<ScalarCurve>,
        rbar: f64,
        lambda_bar: Vec<f64>,
    ) -> Result<Self> {
        let n = mu.len();
        if n == 0 {
            return Err(Error::InvalidParameter("at least one asset is required".into()));
        }
        if sigma.len() != n * n {
            return Err(Error::InvalidParameter(format!(
                "sigma needs {} row-major entries, got {}",
                n * n,
                sigma.len()
            )));
        }
        if lambda_bar.len() != n {
            return Err(Error::InvalidParameter(format!(
                "lambda_bar needs {n} entries, got {}",
                lambda_bar.len()
            )));
        }
        r.validate()?;
        for c in mu.iter().chain(&sigma) {
            c.validate()?;
        }
        if r.infimum() < 0.0 {
            return Err(Error::InvalidParameter("riskless rate r(t) must be >= 0".into()));
        }
        if !(rbar.is_finite() && rbar >= 0.0) {
            return Err(Error::InvalidParameter(format!("rbar={rbar} must be finite and >= 0")));
        }
        for v in &lambda_bar {
            finite("lambda_bar entry", *v)?;
        }
        let constant_sigma = if sigma.iter().all(ScalarCurve::is_constant) {
            let m = DMatrix::from_row_iterator(n, n, sigma.iter().map(|c| c.eval(0.0)));
            Some(SigmaFactors::new(&m, 0.0)?)
        } else {
            None
        };
        Ok(Self {
            n,
            r,
            mu,
            sigma,
            rbar,
            lambda_bar,
            constant_sigma,
        })
    }

    /// Constant coefficients parameterized by the risk premium:
    /// `mu = r 1 + sigma lambda`.
    pub fn constant(r: f64, sigma: &DMatrix<f64>, lambda: &[f64]) -> Result<Self> {
        Self::relaxing(r, r, lambda, lambda, sigma, 0.0)
    }

    /// Coefficients relaxing exponentially from `(r0, lambda0)` toward
    /// `(rbar, lambda_bar)` at `rate`, with constant `sigma`.
    pub fn relaxing(
        r0: f64,
        rbar: f64,
        lambda0: &[f64],
        lambda_bar: &[f64],
        sigma: &DMatrix<f64>,
        rate: f64,
    ) -> Result<Self> {
        let n = lambda_bar.len();
        if sigma.nrows() != n || sigma.ncols() != n || lambda0.len() != n {
            return Err(Error::InvalidParameter("dimension mismatch in relaxing curves".into()));
        }
        let l0 = DVector::from_column_slice(lambda0);
        let lb = DVector::from_column_slice(lambda_bar);
        let m0 = sigma * l0;
        let mb = sigma * lb;
        let curve = |start: f64, limit: f64| {
            if start == limit {
                ScalarCurve::constant(limit)
            } else {
                ScalarCurve::exp_decay(start, limit, rate)
            }
        };
        let r = curve(r0, rbar);
        let mu = (0..n).map(|i| curve(r0 + m0[i], rbar + mb[i])).collect();
        let sig = sigma
            .transpose()
            .iter()
            .map(|&v| ScalarCurve::constant(v))
            .collect();
        Self::new(r, mu, sig, rbar, lambda_bar.to_vec())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn rbar(&self) -> f64 {
        self.rbar
    }

    pub fn lambda_bar(&self) -> &[f64] {
        &self.lambda_bar
    }

    pub fn r_curve(&self) -> &ScalarCurve {
        &self.r
    }

    pub fn mu_curves(&self) -> &[ScalarCurve] {
        &self.mu
    }

    pub fn sigma_curves(&self) -> &[ScalarCurve] {
        &self.sigma
    }

    pub fn r(&self, t: f64) -> f64 {
        self.r.eval(t)
    }

    pub fn mu(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.n, self.mu.iter().map(|c| c.eval(t)))
    }

    pub fn sigma(&self, t: f64) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.n, self.n, self.sigma.iter().map(|c| c.eval(t)))
    }

    fn factors(&self, t: f64) -> Result<std::borrow::Cow<'_, SigmaFactors>> {
        match &self.constant_sigma {
            Some(f) => Ok(std::borrow::Cow::Borrowed(f)),
            None => Ok(std::borrow::Cow::Owned(SigmaFactors::new(&self.sigma(t), t)?)),
        }
    }

    /// Risk premium `lambda(t) = sigma(t)^{-1} [mu(t) - r(t) 1]`.
    pub fn risk_premium(&self, t: f64) -> Result<DVector<f64>> {
        let excess = self.mu(t).add_scalar(-self.r(t));
        let f = self.factors(t)?;
        f.sigma.solve(&excess).ok_or(Error::SingularMatrix { t, rcond: 0.0 })
    }

    /// Solves `sigma'(t) w = rhs`, turning noise exposures into portfolio fractions.
    pub fn solve_sigma_transpose(&self, t: f64, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let f = self.factors(t)?;
        f.sigma_t.solve(rhs).ok_or(Error::SingularMatrix { t, rcond: 0.0 })
    }

    /// Compares `(1/T) int_0^T r` and `lambda(T)` against `rbar` and
    /// `lambda_bar`, logging a warning when either gap exceeds
    /// [`LIMIT_TOLERANCE`].
    pub fn validate_limits(&self, horizon: f64) -> Result<LimitCheck> {
        if !(horizon > 0.0) {
            return Err(Error::Domain(format!("horizon {horizon} must be > 0")));
        }
        let panels = 4096;
        let h = horizon / panels as f64;
        let vals: Vec<f64> = (0..=panels).map(|k| self.r(k as f64 * h)).collect();
        let r_mean = crate::stats::trapezoid_uniform(&vals, h) / horizon;
        let lambda_end = self.risk_premium(horizon)?;
        let lambda_gap = lambda_end
            .iter()
            .zip(&self.lambda_bar)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let r_gap = (r_mean - self.rbar).abs();
        let consistent = r_gap <= LIMIT_TOLERANCE && lambda_gap <= LIMIT_TOLERANCE;
        if !consistent {
            log::warn!(
                "long-run values disagree with curves over horizon {horizon}: |mean r - rbar| = {r_gap:e}, max |lambda(T) - lambda_bar| = {lambda_gap:e}"
            );
        }
        Ok(LimitCheck {
            horizon,
            r_mean,
            r_gap,
            lambda_end: lambda_end.iter().copied().collect(),
            lambda_gap,
            consistent,
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitCheck {
    pub horizon: f64,
    pub r_mean: f64,
    pub r_gap: f64,
    pub lambda_end: Vec<f64>,
    pub lambda_gap: f64,
    pub consistent: bool,
}

/// Risk premium at time `t`.
pub fn risk_premium(curves: &CoefficientCurves, t: f64) -> Result<DVector<f64>> {
    curves.risk_premium(t)
}
