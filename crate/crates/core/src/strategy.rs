//! Optimal portfolios and their performance: the finite-horizon power-utility
//! problem, the stationary strategy maximizing the long-run growth rate
//! `J(alpha)`, and the large-deviations objects `Lambda(alpha)` and `I(c)`.
//!
//! Weights are returned as portfolio fractions `pi` of wealth. Internally the
//! strategies are expressed through the noise exposure `theta = sigma' pi`,
//! which is affine in the memory state `xi`: `theta_j = c_j(t) + d_j(t) xi_j`.

use std::sync::Arc;

use nalgebra::DVector;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{alpha_star, alpha_star_j, l_raw};
use crate::model::{CoefficientCurves, MemoryParams, PowerUtility};
use crate::riccati::{
    check_branch, constant_fn, existence_branch, solve_backward_linear, solve_backward_riccati, steady_linear,
    steady_riccati_root, BackwardGridSolution, Branch, RiccatiInstance, ScalarRiccatiProblem, TimeFn,
};
use crate::stats::trapezoid_uniform;

/// Endpoints of the open interval searched by the rate-function maximizer.
pub const ALPHA_EPS: f64 = 1e-9;

fn check_dims(params: &MemoryParams, curves: &CoefficientCurves) -> Result<()> {
    if params.n() != curves.n() {
        return Err(Error::InvalidParameter(format!(
            "memory parameters describe {} assets, coefficient curves {}",
            params.n(),
            curves.n()
        )));
    }
    Ok(())
}

fn check_xi(n: usize, xi: &[f64]) -> Result<()> {
    if xi.len() != n {
        return Err(Error::InvalidParameter(format!("memory state needs {n} entries, got {}", xi.len())));
    }
    Ok(())
}

/// Exposure coefficients `c`, `d` of `theta_j = c_j + d_j xi_j` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineExposure {
    pub intercept: Vec<f64>,
    pub slope: Vec<f64>,
}

impl AffineExposure {
    pub fn exposure(&self, xi: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.intercept.len(),
            self.intercept.iter().zip(&self.slope).zip(xi).map(|((c, d), x)| c + d * x),
        )
    }
}

/// Solution of the finite-horizon problem: per-asset grids `R_j(.;T)` and `v_j(.;T)`.
#[derive(Clone)]
pub struct FiniteHorizonPolicy {
    params: MemoryParams,
    curves: Arc<CoefficientCurves>,
    utility: PowerUtility,
    riccati: Vec<BackwardGridSolution>,
    linear: Vec<BackwardGridSolution>,
    branches: Vec<Branch>,
}

impl FiniteHorizonPolicy {
    pub fn solve(
        params: &MemoryParams,
        curves: &CoefficientCurves,
        utility: &PowerUtility,
        horizon: f64,
        steps_per_unit_time: usize,
    ) -> Result<Self> {
        check_dims(params, curves)?;
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        let curves = Arc::new(curves.clone());
        let beta = utility.beta();
        let bb = utility.beta_one_minus_beta();
        let mut riccati = Vec::with_capacity(params.n());
        let mut linear = Vec::with_capacity(params.n());
        let mut branches = Vec::with_capacity(params.n());
        for j in 0..params.n() {
            let (p, q) = (params.p()[j], params.q()[j]);
            let branch = existence_branch(params, utility, j, RiccatiInstance::ValueFunction)?;
            let quad: TimeFn = Arc::new(move |t| l_raw(p, q, t).powi(2));
            let lin: TimeFn = Arc::new(move |t| -(p + q) + beta * l_raw(p, q, t));
            let r = solve_backward_riccati(&ScalarRiccatiProblem::new(quad, lin, constant_fn(bb), horizon), steps_per_unit_time)?;
            check_branch(branch, &r, |t| {
                let l = l_raw(p, q, t);
                (-(p + q) + beta * l) / (l * l)
            })?;
            // surface singular volatility as its own error before the linear solve
            for &t in r.grid() {
                curves.risk_premium(t)?;
            }
            let lam = |t: f64| curves.risk_premium(t).map(|v| v[j]).unwrap_or(f64::NAN);
            let v = solve_backward_linear(
                |t| {
                    let l = l_raw(p, q, t);
                    l * l * r.interpolate(t) + (p + q) - beta * l
                },
                |t| {
                    let l = l_raw(p, q, t);
                    let lj = lam(t);
                    bb * lj + beta * l * lj * r.interpolate(t)
                },
                horizon,
                steps_per_unit_time,
            )?;
            riccati.push(r);
            linear.push(v);
            branches.push(branch);
        }
        Ok(Self {
            params: params.clone(),
            curves,
            utility: *utility,
            riccati,
            linear,
            branches,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.riccati[0].horizon()
    }

    pub fn grid(&self) -> &[f64] {
        self.riccati[0].grid()
    }

    pub fn utility(&self) -> &PowerUtility {
        &self.utility
    }

    pub fn params(&self) -> &MemoryParams {
        &self.params
    }

    pub fn curves(&self) -> &CoefficientCurves {
        &self.curves
    }

    pub fn riccati(&self, j: usize) -> &BackwardGridSolution {
        &self.riccati[j]
    }

    pub fn linear(&self, j: usize) -> &BackwardGridSolution {
        &self.linear[j]
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let big_t = self.horizon();
        if !(t >= 0.0 && t <= big_t * (1.0 + 1e-12)) {
            return Err(Error::Domain(format!("time {t} outside [0, {big_t}]")));
        }
        Ok(())
    }

    pub fn exposure_coefficients(&self, t: f64) -> Result<AffineExposure> {
        self.check_time(t)?;
        let lambda = self.curves.risk_premium(t)?;
        let one_minus_beta = 1.0 - self.utility.beta();
        let n = self.params.n();
        let mut intercept = Vec::with_capacity(n);
        let mut slope = Vec::with_capacity(n);
        for j in 0..n {
            let l = l_raw(self.params.p()[j], self.params.q()[j], t);
            intercept.push(one_minus_beta * lambda[j] + l * self.linear[j].interpolate(t));
            slope.push(-one_minus_beta - l * self.riccati[j].interpolate(t));
        }
        Ok(AffineExposure { intercept, slope })
    }

    /// Optimal fractions `(sigma')^{-1}[(1-beta)(lambda - xi) - l R xi + l v]`.
    pub fn weights(&self, t: f64, xi: &[f64]) -> Result<DVector<f64>> {
        check_xi(self.params.n(), xi)?;
        let theta = self.exposure_coefficients(t)?.exposure(xi);
        self.curves.solve_sigma_transpose(t, &theta)
    }

    /// `g_j(t_k;T)` on the policy grid.
    pub fn g_grid(&self, j: usize) -> Result<Vec<f64>> {
        self.params.check_asset(j)?;
        let (p, q) = (self.params.p()[j], self.params.q()[j]);
        let beta = self.utility.beta();
        let bb = self.utility.beta_one_minus_beta();
        self.grid()
            .iter()
            .zip(self.riccati[j].values())
            .zip(self.linear[j].values())
            .map(|((&t, &r), &v)| {
                let l = l_raw(p, q, t);
                let lam = self.curves.risk_premium(t)?[j];
                let rho = -beta * l * lam;
                Ok(v * v * l * l + 2.0 * rho * v - l * l * r - bb * lam * lam)
            })
            .collect()
    }

    /// Trapezoid integrals `int_0^T g_j(t;T) dt`.
    pub fn g_integrals(&self) -> Result<Vec<f64>> {
        let h = self.riccati[0].step();
        (0..self.params.n())
            .map(|j| Ok(trapezoid_uniform(&self.g_grid(j)?, h)))
            .collect()
    }

    /// `int_0^T r(t) dt` on the policy grid.
    pub fn log_discount(&self) -> f64 {
        let vals: Vec<f64> = self.grid().iter().map(|&t| self.curves.r(t)).collect();
        trapezoid_uniform(&vals, self.riccati[0].step())
    }

    /// `log(alpha V(T))`, finite even when `V(T)` itself is not representable.
    pub fn log_alpha_value(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::InvalidParameter(format!("initial wealth must be positive, got {x}")));
        }
        let alpha = self.utility.alpha();
        let gsum: f64 = self.g_integrals()?.iter().sum();
        Ok(alpha * (x.ln() + self.log_discount()) + 0.5 * (1.0 - alpha) * gsum)
    }

    /// Value function `V(T) = (1/alpha)[x S_0(T)]^alpha exp[(1-alpha)/2 sum_j int g_j]`.
    pub fn value_function(&self, x: f64) -> Result<f64> {
        let la = self.log_alpha_value(x)?;
        let v = la.exp() / self.utility.alpha();
        if !v.is_finite() {
            return Err(Error::Overflow(format!("value function exp({la}) / alpha is not representable")));
        }
        Ok(v)
    }

    /// CSV with columns `t, R_1..R_n, v_1..v_n`.
    pub fn write_grids_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let n = self.params.n();
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|j| format!("R_{j}")));
        header.extend((1..=n).map(|j| format!("v_{j}")));
        wtr.write_record(&header)?;
        for (k, t) in self.grid().iter().enumerate() {
            let mut row = vec![format!("{t}")];
            row.extend(self.riccati.iter().map(|s| format!("{}", s.values()[k])));
            row.extend(self.linear.iter().map(|s| format!("{}", s.values()[k])));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Steady quantities of one asset under the stationary strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyAsset {
    pub p: f64,
    pub q: f64,
    pub lambda_bar: f64,
    /// `bbar_j = -(1-beta) p_j - q_j`.
    pub b_bar: f64,
    pub r_bar: f64,
    pub v_bar: f64,
    /// Spectral gap `K_j`.
    pub gap: f64,
    /// `rhobar_j = -beta p_j lambdabar_j`.
    pub rho_bar: f64,
}

impl SteadyAsset {
    fn new(p: f64, q: f64, lambda_bar: f64, utility: &PowerUtility) -> Result<Self> {
        let beta = utility.beta();
        let bb = utility.beta_one_minus_beta();
        let b_bar = -(p + q) + beta * p;
        let root = steady_riccati_root(p * p, b_bar, bb)?;
        let rho_bar = -beta * p * lambda_bar;
        let v_bar = steady_linear(b_bar - p * p * root.value, bb * lambda_bar - root.value * rho_bar)?;
        Ok(Self {
            p,
            q,
            lambda_bar,
            b_bar,
            r_bar: root.value,
            v_bar,
            gap: root.spectral_gap,
            rho_bar,
        })
    }

    /// `gbar_j = vbar^2 p^2 + 2 rhobar vbar - p^2 Rbar - beta(1-beta) lambdabar^2`.
    pub fn g_bar(&self, utility: &PowerUtility) -> f64 {
        let p2 = self.p * self.p;
        self.v_bar * self.v_bar * p2 + 2.0 * self.rho_bar * self.v_bar - p2 * self.r_bar
            - utility.beta_one_minus_beta() * self.lambda_bar * self.lambda_bar
    }
}

/// The stationary strategy built from the steady states `(Rbar_j, vbar_j)`.
#[derive(Clone)]
pub struct StationaryPolicy {
    params: MemoryParams,
    curves: Arc<CoefficientCurves>,
    utility: PowerUtility,
    steady: Vec<SteadyAsset>,
}

impl StationaryPolicy {
    pub fn new(params: &MemoryParams, curves: &CoefficientCurves, utility: &PowerUtility) -> Result<Self> {
        check_dims(params, curves)?;
        let steady = (0..params.n())
            .map(|j| SteadyAsset::new(params.p()[j], params.q()[j], curves.lambda_bar()[j], utility))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params: params.clone(),
            curves: Arc::new(curves.clone()),
            utility: *utility,
            steady,
        })
    }

    pub fn steady(&self) -> &[SteadyAsset] {
        &self.steady
    }

    pub fn utility(&self) -> &PowerUtility {
        &self.utility
    }

    pub fn params(&self) -> &MemoryParams {
        &self.params
    }

    pub fn curves(&self) -> &CoefficientCurves {
        &self.curves
    }

    pub fn exposure_coefficients(&self, t: f64) -> Result<AffineExposure> {
        let lambda = self.curves.risk_premium(t)?;
        let one_minus_beta = 1.0 - self.utility.beta();
        let intercept = self
            .steady
            .iter()
            .enumerate()
            .map(|(j, s)| one_minus_beta * lambda[j] + s.p * s.v_bar)
            .collect();
        let slope = self.steady.iter().map(|s| -one_minus_beta - s.p * s.r_bar).collect();
        Ok(AffineExposure { intercept, slope })
    }

    /// `(sigma')^{-1}[(1-beta)(lambda - xi) - p Rbar xi + p vbar]`.
    pub fn weights(&self, t: f64, xi: &[f64]) -> Result<DVector<f64>> {
        check_xi(self.params.n(), xi)?;
        let theta = self.exposure_coefficients(t)?.exposure(xi);
        self.curves.solve_sigma_transpose(t, &theta)
    }
}

/// Log-optimal fractions `(sigma')^{-1}[lambda(t) - xi]`.
pub fn log_optimal_weights(curves: &CoefficientCurves, t: f64, xi: &[f64]) -> Result<DVector<f64>> {
    check_xi(curves.n(), xi)?;
    let lambda = curves.risk_premium(t)?;
    let theta = lambda - DVector::from_column_slice(xi);
    curves.solve_sigma_transpose(t, &theta)
}

fn spread(p: f64, q: f64, alpha: f64) -> f64 {
    let s = p + q;
    (1.0 - alpha) * s * s + alpha * p * (p + 2.0 * q)
}

/// `F_j(alpha)`.
pub fn growth_term_f(p: f64, q: f64, lambda_bar: f64, alpha: f64) -> f64 {
    let s = p + q;
    s * s * lambda_bar * lambda_bar * alpha / spread(p, q, alpha)
}

/// `G_j(alpha)`.
pub fn growth_term_g(p: f64, q: f64, alpha: f64) -> f64 {
    (p + q) - q * alpha - ((1.0 - alpha) * spread(p, q, alpha)).sqrt()
}

fn growth_term_f_slope(p: f64, q: f64, lambda_bar: f64, alpha: f64) -> f64 {
    let s = p + q;
    let a = s * s * lambda_bar * lambda_bar;
    let d = spread(p, q, alpha);
    a / d + a * alpha * q * q / (d * d)
}

fn growth_term_g_slope(p: f64, q: f64, alpha: f64) -> f64 {
    let d = spread(p, q, alpha);
    let w = 1.0 - alpha;
    -q + 0.5 * d.sqrt() / w.sqrt() + 0.5 * q * q * w.sqrt() / d.sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct AssetGrowth {
    #[serde(flatten)]
    pub steady: SteadyAsset,
    pub g_bar: f64,
    pub f_term: f64,
    pub g_term: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub alpha: f64,
    pub alpha_star: f64,
    pub rbar: f64,
    pub assets: Vec<AssetGrowth>,
    /// `rbar + (1-alpha)/(2 alpha) sum_j gbar_j`.
    pub j_via_g: f64,
    /// `rbar + (1/(2 alpha)) sum_j (F_j + G_j)`.
    pub j_via_fg: f64,
    pub route_gap: f64,
    /// `Lambda(alpha) = alpha J(alpha)`, when `0 < alpha < 1`.
    pub lambda: Option<f64>,
    pub c_bar: f64,
}

fn check_admissible(params: &MemoryParams, alpha: f64) -> Result<f64> {
    let star = alpha_star(params);
    if !(alpha < 1.0) || alpha == 0.0 || alpha <= star {
        return Err(Error::Admissibility { alpha, alpha_star: star });
    }
    Ok(star)
}

/// Optimal growth rate `J(alpha)` by both closed-form routes.
pub fn growth_rate_j(params: &MemoryParams, curves: &CoefficientCurves, utility: &PowerUtility) -> Result<GrowthReport> {
    check_dims(params, curves)?;
    let alpha = utility.alpha();
    let alpha_star = check_admissible(params, alpha)?;
    let policy = StationaryPolicy::new(params, curves, utility)?;
    let assets: Vec<AssetGrowth> = policy
        .steady
        .iter()
        .map(|s| AssetGrowth {
            steady: *s,
            g_bar: s.g_bar(utility),
            f_term: growth_term_f(s.p, s.q, s.lambda_bar, alpha),
            g_term: growth_term_g(s.p, s.q, alpha),
        })
        .collect();
    let rbar = curves.rbar();
    let gsum: f64 = assets.iter().map(|a| a.g_bar).sum();
    let fgsum: f64 = assets.iter().map(|a| a.f_term + a.g_term).sum();
    let j_via_g = rbar + (1.0 - alpha) / (2.0 * alpha) * gsum;
    let j_via_fg = rbar + fgsum / (2.0 * alpha);
    Ok(GrowthReport {
        alpha,
        alpha_star,
        rbar,
        assets,
        j_via_g,
        j_via_fg,
        route_gap: (j_via_g - j_via_fg).abs(),
        lambda: (alpha > 0.0).then_some(alpha * j_via_fg),
        c_bar: benchmark_threshold(params, curves)?,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityAsset {
    pub d_bar: f64,
    pub q_coef: f64,
    pub h_bar: f64,
    pub gamma_bar: f64,
    pub u_bar: f64,
    pub m_bar: f64,
    pub f_bar: f64,
    pub residual_u: f64,
    pub residual_m: f64,
    pub residual_f: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityReport {
    pub alpha: f64,
    pub assets: Vec<IdentityAsset>,
    pub max_residual: f64,
}

/// Verification-side steady constants and the residuals of
/// `Ubar = (1-alpha) Rbar`, `mbar = (1-alpha) vbar`, `fbar = (1-alpha) gbar`.
pub fn infinite_horizon_identities(
    params: &MemoryParams,
    curves: &CoefficientCurves,
    utility: &PowerUtility,
) -> Result<IdentityReport> {
    check_dims(params, curves)?;
    let alpha = utility.alpha();
    check_admissible(params, alpha)?;
    let beta = utility.beta();
    let policy = StationaryPolicy::new(params, curves, utility)?;
    let mut assets = Vec::with_capacity(params.n());
    for s in &policy.steady {
        let p2 = s.p * s.p;
        let d_bar = s.b_bar - alpha * p2 * s.r_bar;
        let w = 1.0 - alpha;
        let q_coef = beta * (1.0 - w * w * p2 * s.r_bar * s.r_bar);
        let h_bar = alpha * (alpha - 1.0) * p2 * s.r_bar * s.v_bar - beta * s.lambda_bar;
        let gamma_bar = s.rho_bar + alpha * p2 * s.v_bar;
        let root = steady_riccati_root(p2, d_bar, q_coef)?;
        let u_bar = root.value;
        let m_bar = steady_linear(d_bar - p2 * u_bar, -(h_bar + u_bar * gamma_bar))?;
        let u_const = alpha * (alpha - 1.0) * (p2 * s.v_bar * s.v_bar - (1.0 - beta).powi(2) * s.lambda_bar.powi(2));
        let f_bar = p2 * m_bar * m_bar + 2.0 * gamma_bar * m_bar - p2 * u_bar + u_const;
        assets.push(IdentityAsset {
            d_bar,
            q_coef,
            h_bar,
            gamma_bar,
            u_bar,
            m_bar,
            f_bar,
            residual_u: u_bar - w * s.r_bar,
            residual_m: m_bar - w * s.v_bar,
            residual_f: f_bar - w * s.g_bar(utility),
        });
    }
    let max_residual = assets
        .iter()
        .flat_map(|a| [a.residual_u, a.residual_m, a.residual_f])
        .fold(0.0f64, |m, r| m.max(r.abs()));
    Ok(IdentityReport {
        alpha,
        assets,
        max_residual,
    })
}

/// Exact `E[X(T)^alpha]` under the stationary strategy at a finite horizon.
#[derive(Debug, Clone, Serialize)]
pub struct StationaryMoment {
    pub alpha: f64,
    pub horizon: f64,
    /// `log E[X(T)^alpha]`.
    pub log_moment: f64,
    /// `(1/(alpha T)) log E[X(T)^alpha]`.
    pub growth: f64,
    pub f_integrals: Vec<f64>,
}

/// Solves the verification Riccati/linear pair `(U_j, m_j)` on `[0, T]` and
/// returns `[x S_0(T)]^alpha exp[(1/2) sum_j int f_j]` in log form.
pub fn stationary_power_moment(
    params: &MemoryParams,
    curves: &CoefficientCurves,
    utility: &PowerUtility,
    horizon: f64,
    x: f64,
    steps_per_unit_time: usize,
) -> Result<StationaryMoment> {
    if !(x > 0.0) {
        return Err(Error::InvalidParameter(format!("initial wealth must be positive, got {x}")));
    }
    let alpha = utility.alpha();
    let beta = utility.beta();
    let policy = StationaryPolicy::new(params, curves, utility)?;
    let reference = if alpha > 0.0 {
        Some(FiniteHorizonPolicy::solve(params, curves, utility, horizon, steps_per_unit_time)?)
    } else {
        None
    };
    let curves = Arc::new(curves.clone());
    let mut f_integrals = Vec::with_capacity(params.n());
    let mut grid_h = 0.0;
    let mut r_grid = Vec::new();
    for (j, s) in policy.steady.iter().enumerate() {
        let branch = existence_branch(params, utility, j, RiccatiInstance::Verification)?;
        let (p, q, rb, vb) = (s.p, s.q, s.r_bar, s.v_bar);
        let w = 1.0 - alpha;
        let q_coef = beta * (1.0 - w * w * p * p * rb * rb);
        let d_of = move |t: f64| -(p + q) + beta * l_raw(p, q, t) - alpha * p * rb * l_raw(p, q, t);
        let quad: TimeFn = Arc::new(move |t| l_raw(p, q, t).powi(2));
        let u = solve_backward_riccati(
            &ScalarRiccatiProblem::new(quad, Arc::new(d_of), constant_fn(q_coef), horizon),
            steps_per_unit_time,
        )?;
        match (&reference, branch) {
            (Some(fh), Branch::Shifted) => {
                let r = fh.riccati(j);
                check_branch(Branch::Shifted, &u, |t| w * r.interpolate(t))?;
            }
            (_, b) => check_branch(b, &u, |_| 0.0)?,
        }
        let lam = |t: f64| curves.risk_premium(t).map(|v| v[j]).unwrap_or(f64::NAN);
        let h_of = |t: f64| alpha * (alpha - 1.0) * p * p * rb * vb - beta * lam(t);
        let gamma_of = |t: f64| {
            let l = l_raw(p, q, t);
            -beta * l * lam(t) + alpha * p * l * vb
        };
        let m = solve_backward_linear(
            |t| l_raw(p, q, t).powi(2) * u.interpolate(t) - d_of(t),
            |t| -(h_of(t) + u.interpolate(t) * gamma_of(t)),
            horizon,
            steps_per_unit_time,
        )?;
        let f_vals: Vec<f64> = u
            .grid()
            .iter()
            .zip(u.values())
            .zip(m.values())
            .map(|((&t, &uv), &mv)| {
                let l = l_raw(p, q, t);
                let lj = lam(t);
                let u_t = alpha * (alpha - 1.0) * (p * p * vb * vb - (1.0 - beta).powi(2) * lj * lj);
                l * l * mv * mv + 2.0 * gamma_of(t) * mv - l * l * uv + u_t
            })
            .collect();
        grid_h = u.step();
        if r_grid.is_empty() {
            r_grid = u.grid().iter().map(|&t| curves.r(t)).collect();
        }
        let integral = trapezoid_uniform(&f_vals, grid_h);
        if !integral.is_finite() {
            return Err(Error::NonFinite { t: 0.0 });
        }
        f_integrals.push(integral);
    }
    let log_s0 = trapezoid_uniform(&r_grid, grid_h);
    let log_moment = alpha * (x.ln() + log_s0) + 0.5 * f_integrals.iter().sum::<f64>();
    Ok(StationaryMoment {
        alpha,
        horizon,
        log_moment,
        growth: log_moment / (alpha * horizon),
        f_integrals,
    })
}

fn check_unit_interval(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("Lambda is defined on (0, 1), got alpha={alpha}")));
    }
    Ok(())
}

/// `Lambda(alpha) = rbar alpha + (1/2) sum_j [F_j(alpha) + G_j(alpha)]` on `(0, 1)`.
pub fn mgf_lambda(params: &MemoryParams, curves: &CoefficientCurves, alpha: f64) -> Result<f64> {
    check_dims(params, curves)?;
    check_unit_interval(alpha)?;
    let sum: f64 = (0..params.n())
        .map(|j| {
            let (p, q) = (params.p()[j], params.q()[j]);
            growth_term_f(p, q, curves.lambda_bar()[j], alpha) + growth_term_g(p, q, alpha)
        })
        .sum();
    Ok(curves.rbar() * alpha + 0.5 * sum)
}

/// `Lambda'(alpha)`, differentiated in closed form.
pub fn mgf_lambda_slope(params: &MemoryParams, curves: &CoefficientCurves, alpha: f64) -> Result<f64> {
    check_dims(params, curves)?;
    check_unit_interval(alpha)?;
    let sum: f64 = (0..params.n())
        .map(|j| {
            let (p, q) = (params.p()[j], params.q()[j]);
            growth_term_f_slope(p, q, curves.lambda_bar()[j], alpha) + growth_term_g_slope(p, q, alpha)
        })
        .sum();
    Ok(curves.rbar() + 0.5 * sum)
}

/// `cbar = rbar + (1/4) sum_j p_j^2/(p_j+q_j) + (1/2) |lambdabar|^2`.
pub fn benchmark_threshold(params: &MemoryParams, curves: &CoefficientCurves) -> Result<f64> {
    check_dims(params, curves)?;
    let memory: f64 = params.p().iter().zip(params.q()).map(|(p, q)| p * p / (p + q)).sum();
    let lam2: f64 = curves.lambda_bar().iter().map(|l| l * l).sum();
    Ok(curves.rbar() + 0.25 * memory + 0.5 * lam2)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct RatePoint {
    pub c: f64,
    /// `I(c) <= 0`.
    pub rate: f64,
    /// `alpha(c)` solving `Lambda'(alpha) = c`, when `c > cbar`.
    pub maximizer: Option<f64>,
}

/// Root of `Lambda'(alpha) = d` in `(0, 1)` for `d > cbar`, by bisection on
/// the increasing slope.
pub fn alpha_for_slope(params: &MemoryParams, curves: &CoefficientCurves, d: f64) -> Result<f64> {
    let (mut lo, mut hi) = (ALPHA_EPS, 1.0 - ALPHA_EPS);
    let s_lo = mgf_lambda_slope(params, curves, lo)?;
    let s_hi = mgf_lambda_slope(params, curves, hi)?;
    if !(s_hi > d) {
        return Err(Error::Convergence(format!(
            "slope {s_hi} at alpha={hi} does not exceed target {d}; bracket failed"
        )));
    }
    if s_lo >= d {
        return Ok(lo);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if mgf_lambda_slope(params, curves, mid)? < d {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Large-deviations rate `I(c) = -sup_{alpha in (0,1)} [alpha c - Lambda(alpha)]`.
pub fn rate_function_i(params: &MemoryParams, curves: &CoefficientCurves, c: f64) -> Result<RatePoint> {
    let c_bar = benchmark_threshold(params, curves)?;
    if !c.is_finite() {
        return Err(Error::InvalidParameter(format!("threshold c must be finite, got {c}")));
    }
    if c <= c_bar {
        return Ok(RatePoint { c, rate: 0.0, maximizer: None });
    }
    let alpha = alpha_for_slope(params, curves, c)?;
    let sup = alpha * c - mgf_lambda(params, curves, alpha)?;
    Ok(RatePoint {
        c,
        rate: -sup.max(0.0),
        maximizer: Some(alpha),
    })
}

/// Stationary strategy for exponent `alpha(c + 1/m)`, nearly optimal for the
/// outperformance problem at threshold `c >= cbar`.
pub fn nearly_optimal_sequence(
    params: &MemoryParams,
    curves: &CoefficientCurves,
    c: f64,
    m: u32,
) -> Result<(f64, StationaryPolicy)> {
    let c_bar = benchmark_threshold(params, curves)?;
    if !(c >= c_bar) {
        return Err(Error::InvalidParameter(format!("threshold c={c} is below cbar={c_bar}")));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("sequence index m must be positive".into()));
    }
    let alpha = alpha_for_slope(params, curves, c + 1.0 / m as f64)?;
    let policy = StationaryPolicy::new(params, curves, &PowerUtility::new(alpha)?)?;
    Ok((alpha, policy))
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct AlphaCurvePoint {
    pub alpha: f64,
    pub j: f64,
    pub route_gap: f64,
    pub lambda: Option<f64>,
    pub lambda_slope: Option<f64>,
}

/// `J`, `Lambda` and `Lambda'` over a grid of exponents.
pub fn alpha_curve(params: &MemoryParams, curves: &CoefficientCurves, alphas: &[f64]) -> Result<Vec<AlphaCurvePoint>> {
    alphas
        .iter()
        .map(|&alpha| {
            let report = growth_rate_j(params, curves, &PowerUtility::new(alpha)?)?;
            let slope = if alpha > 0.0 {
                Some(mgf_lambda_slope(params, curves, alpha)?)
            } else {
                None
            };
            Ok(AlphaCurvePoint {
                alpha,
                j: report.j_via_fg,
                route_gap: report.route_gap,
                lambda: report.lambda,
                lambda_slope: slope,
            })
        })
        .collect()
}

pub fn rate_curve(params: &MemoryParams, curves: &CoefficientCurves, cs: &[f64]) -> Result<Vec<RatePoint>> {
    cs.iter().map(|&c| rate_function_i(params, curves, c)).collect()
}

pub fn write_csv<W: std::io::Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    for row in rows {
        wtr.serialize(row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Per-asset admissibility thresholds, handy for reports.
pub fn alpha_star_per_asset(params: &MemoryParams) -> Vec<f64> {
    params.p().iter().zip(params.q()).map(|(&p, &q)| alpha_star_j(p, q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn merton(n: usize, r: f64, lambda: &[f64]) -> (MemoryParams, CoefficientCurves) {
        let params = MemoryParams::memoryless(vec![0.4; n]).unwrap();
        let curves = CoefficientCurves::constant(r, &DMatrix::identity(n, n), lambda).unwrap();
        (params, curves)
    }

    fn two_asset() -> (MemoryParams, CoefficientCurves) {
        let params = MemoryParams::new(vec![0.5, 0.0], vec![0.5, 0.3]).unwrap();
        let sigma = DMatrix::from_row_slice(2, 2, &[0.25, 0.05, -0.04, 0.2]);
        let curves = CoefficientCurves::relaxing(0.03, 0.02, &[0.4, 0.1], &[0.3, 0.2], &sigma, 0.5).unwrap();
        (params, curves)
    }

    #[test]
    fn merton_growth_and_value() {
        let (params, curves) = merton(1, 0.0, &[1.0]);
        let report = growth_rate_j(&params, &curves, &PowerUtility::new(0.5).unwrap()).unwrap();
        assert!((report.j_via_fg - 1.0).abs() < 1e-12);
        assert!((report.j_via_g - 1.0).abs() < 1e-12);
        assert_eq!(report.assets[0].g_term, 0.0);

        let (params, curves) = merton(2, 0.0, &[0.0, 0.0]);
        let u = PowerUtility::new(-1.0).unwrap();
        let policy = FiniteHorizonPolicy::solve(&params, &curves, &u, 3.0, 64).unwrap();
        assert!((policy.value_function(2.0).unwrap() - 2f64.powf(-1.0) / -1.0).abs() < 1e-14);
    }

    #[test]
    fn terminal_and_memoryless_weights() {
        let (params, curves) = merton(2, 0.01, &[0.3, -0.2]);
        let u = PowerUtility::new(0.5).unwrap();
        let policy = FiniteHorizonPolicy::solve(&params, &curves, &u, 4.0, 64).unwrap();
        let w = policy.weights(1.0, &[0.0, 0.0]).unwrap();
        assert!((w[0] - 0.6).abs() < 1e-14 && (w[1] + 0.4).abs() < 1e-14);
        assert!(policy.weights(5.0, &[0.0, 0.0]).is_err());
        let (params, curves) = two_asset();
        let policy = FiniteHorizonPolicy::solve(&params, &curves, &u, 4.0, 64).unwrap();
        let xi = [0.1, -0.3];
        let at_t = policy.weights(4.0, &xi).unwrap();
        let lam = curves.risk_premium(4.0).unwrap();
        let theta = DVector::from_iterator(2, (0..2).map(|j| (1.0 - u.beta()) * (lam[j] - xi[j])));
        let expected = curves.sigma(4.0).transpose().lu().solve(&theta).unwrap();
        assert!((at_t - expected).norm() < 1e-13);
    }

    #[test]
    fn weights_match_direct_formula() {
        let (params, curves) = two_asset();
        let u = PowerUtility::new(-1.0).unwrap();
        let policy = FiniteHorizonPolicy::solve(&params, &curves, &u, 6.0, 64).unwrap();
        let w = policy.weights(0.0, &[0.0, 0.0]).unwrap();
        let lam0 = curves.risk_premium(0.0).unwrap();
        let mut rhs = DVector::zeros(2);
        for j in 0..2 {
            let l0 = params.kernel_l_diag(j, 0.0).unwrap();
            rhs[j] = (1.0 - u.beta()) * lam0[j] + l0 * policy.linear(j).values()[0];
        }
        let expected = curves.sigma(0.0).transpose().try_inverse().unwrap() * rhs;
        assert!((w - expected).norm() < 1e-12);
    }

    #[test]
    fn branches_hold_on_both_signs() {
        let (params, curves) = two_asset();
        for alpha in [-3.0, -0.5, 0.3, 0.9] {
            let u = PowerUtility::new(alpha).unwrap();
            let policy = FiniteHorizonPolicy::solve(&params, &curves, &u, 10.0, 64).unwrap();
            assert_eq!(policy.branches()[1], Branch::Linear);
            let b = if alpha < 0.0 { Branch::Nonnegative } else { Branch::Shifted };
            assert_eq!(policy.branches()[0], b);
        }
    }

    #[test]
    fn stationary_matches_long_horizon_limit() {
        let (params, _) = two_asset();
        let sigma = DMatrix::from_row_slice(2, 2, &[0.25, 0.05, -0.04, 0.2]);
        let curves = CoefficientCurves::constant(0.02, &sigma, &[0.3, 0.2]).unwrap();
        let u = PowerUtility::new(-1.0).unwrap();
        let fh = FiniteHorizonPolicy::solve(&params, &curves, &u, 200.0, 64).unwrap();
        let st = StationaryPolicy::new(&params, &curves, &u).unwrap();
        let xi = [0.05, 0.0];
        let gap = (fh.weights(10.0, &xi).unwrap() - st.weights(10.0, &xi).unwrap()).amax();
        assert!(gap < 1e-4, "{gap}");
    }

    #[test]
    fn steady_linear_two_routes() {
        let (params, curves) = two_asset();
        for alpha in [-4.0, -0.7, 0.2, 0.8] {
            let u = PowerUtility::new(alpha).unwrap();
            let st = StationaryPolicy::new(&params, &curves, &u).unwrap();
            for s in st.steady() {
                let closed = u.beta() * s.lambda_bar * (1.0 - u.beta() + s.p * s.r_bar) / s.gap;
                assert!((closed - s.v_bar).abs() < 1e-12);
                let residual = (s.b_bar - s.p * s.p * s.r_bar) * s.v_bar + u.beta_one_minus_beta() * s.lambda_bar
                    - s.r_bar * s.rho_bar;
                assert!(residual.abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_optimal_limit() {
        let (params, curves) = two_asset();
        let xi = [0.2, -0.1];
        let lo = log_optimal_weights(&curves, 1.5, &xi).unwrap();
        let st = StationaryPolicy::new(&params, &curves, &PowerUtility::new(1e-8).unwrap()).unwrap();
        assert!((st.weights(1.5, &xi).unwrap() - &lo).amax() < 1e-6);
        let lam = curves.risk_premium(1.5).unwrap();
        assert!(log_optimal_weights(&curves, 1.5, lam.as_slice()).unwrap().amax() == 0.0);
    }

    #[test]
    fn identities_hold() {
        let params = MemoryParams::new(vec![1.0], vec![1.0]).unwrap();
        let curves = CoefficientCurves::constant(0.0, &DMatrix::identity(1, 1), &[1.0]).unwrap();
        let rep = infinite_horizon_identities(&params, &curves, &PowerUtility::new(0.5).unwrap()).unwrap();
        assert!(rep.max_residual < 1e-10, "{rep:?}");
        let (params, curves) = merton(2, 0.01, &[0.3, 0.5]);
        let rep = infinite_horizon_identities(&params, &curves, &PowerUtility::new(-2.0).unwrap()).unwrap();
        assert!(rep.max_residual < 1e-15);
    }

    #[test]
    fn admissibility_is_enforced() {
        let params = MemoryParams::new(vec![0.3], vec![0.1]).unwrap();
        let curves = CoefficientCurves::constant(0.0, &DMatrix::identity(1, 1), &[0.2]).unwrap();
        let err = growth_rate_j(&params, &curves, &PowerUtility::new(-11.001).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Admissibility { .. }));
        assert!(growth_rate_j(&params, &curves, &PowerUtility::new(-10.9).unwrap()).is_ok());
    }

    #[test]
    fn finite_moment_tends_to_growth_rate() {
        let (params, curves) = two_asset();
        let u = PowerUtility::new(0.4).unwrap();
        let j = growth_rate_j(&params, &curves, &u).unwrap().j_via_fg;
        let gaps: Vec<f64> = [25.0, 50.0, 100.0]
            .iter()
            .map(|&t| (stationary_power_moment(&params, &curves, &u, t, 1.0, 64).unwrap().growth - j).abs())
            .collect();
        assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
        // the value function route converges to the same limit
        let fh: Vec<f64> = [25.0, 100.0]
            .iter()
            .map(|&t| {
                let pol = FiniteHorizonPolicy::solve(&params, &curves, &u, t, 64).unwrap();
                (pol.log_alpha_value(1.0).unwrap() / (u.alpha() * t) - j).abs()
            })
            .collect();
        assert!(fh[1] < fh[0] && fh[1] < 2e-3, "{fh:?}");
    }

    #[test]
    fn lambda_slope_at_zero_is_cbar() {
        let (params, curves) = two_asset();
        let c_bar = benchmark_threshold(&params, &curves).unwrap();
        let h = 1e-5;
        let (a, b) = (mgf_lambda(&params, &curves, 2.0 * h).unwrap(), mgf_lambda(&params, &curves, h).unwrap());
        let fd0 = (b - 0.0) / h;
        assert!((fd0 - c_bar).abs() < 1e-3 * c_bar);
        assert!(((a - b) / h - mgf_lambda_slope(&params, &curves, 1.5 * h).unwrap()).abs() < 1e-6);
        assert!((mgf_lambda_slope(&params, &curves, 1e-12).unwrap() - c_bar).abs() < 1e-9);
        assert!(mgf_lambda(&params, &curves, 0.0).is_err());
    }

    #[test]
    fn merton_rate_function_matches_grid_search() {
        let (params, curves) = merton(2, 0.02, &[0.3, 0.1]);
        let c_bar = benchmark_threshold(&params, &curves).unwrap();
        let lam2 = 0.1;
        for dc in [0.01, 0.2, 1.5] {
            let c = c_bar + dc;
            let pt = rate_function_i(&params, &curves, c).unwrap();
            let obj = |a: f64| a * c - (0.02 * a + lam2 * a / (2.0 * (1.0 - a)));
            // coarse grid, then golden refinement of the best cell
            let n = 20_000;
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for k in 1..n {
                let v = obj(k as f64 / n as f64);
                if v > best {
                    best = v;
                    arg = k;
                }
            }
            let (mut lo, mut hi) = ((arg - 1) as f64 / n as f64, (arg + 1) as f64 / n as f64);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..200 {
                let (x1, x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
                if obj(x1) > obj(x2) {
                    hi = x2;
                } else {
                    lo = x1;
                }
            }
            let brute = -obj(0.5 * (lo + hi));
            assert!((pt.rate - brute).abs() < 1e-8, "{} vs {brute}", pt.rate);
            let closed = 1.0 - (lam2 / (2.0 * (c - 0.02))).sqrt();
            assert!((pt.maximizer.unwrap() - closed).abs() < 1e-8);
        }
        assert_eq!(rate_function_i(&params, &curves, c_bar).unwrap().rate, 0.0);
        assert_eq!(rate_function_i(&params, &curves, c_bar - 1.0).unwrap().rate, 0.0);
    }

    #[test]
    fn nearly_optimal_roots() {
        let (params, curves) = two_asset();
        let c_bar = benchmark_threshold(&params, &curves).unwrap();
        let (a1, _) = nearly_optimal_sequence(&params, &curves, c_bar, 1).unwrap();
        assert!((mgf_lambda_slope(&params, &curves, a1).unwrap() - (c_bar + 1.0)).abs() < 1e-8);
        let alphas: Vec<f64> = (1..6)
            .map(|m| nearly_optimal_sequence(&params, &curves, c_bar + 0.1, m).unwrap().0)
            .collect();
        assert!(alphas.windows(2).all(|w| w[1] < w[0]));
        assert!(nearly_optimal_sequence(&params, &curves, c_bar - 0.1, 1).is_err());
    }

    #[test]
    fn slope_asymptotics_near_one() {
        let probe = |params: &MemoryParams, curves: &CoefficientCurves, a: f64| {
            let h = 1e-3 * (1.0 - a);
            (mgf_lambda(params, curves, a + h).unwrap() - mgf_lambda(params, curves, a - h).unwrap()) / (2.0 * h)
        };
        // all p > 0: slope ~ (1-alpha)^{-1/2}
        let params = MemoryParams::new(vec![0.6, 0.9], vec![0.2, 0.1]).unwrap();
        let curves = CoefficientCurves::constant(0.01, &DMatrix::identity(2, 2), &[0.2, 0.1]).unwrap();
        let ratio = probe(&params, &curves, 1.0 - 1e-4) / probe(&params, &curves, 1.0 - 1e-2);
        assert!((ratio / 10.0 - 1.0).abs() < 0.2, "{ratio}");
        // some p = 0: slope ~ (1-alpha)^{-2}
        let params = MemoryParams::new(vec![0.6, 0.0], vec![0.2, 0.1]).unwrap();
        let ratio = probe(&params, &curves, 1.0 - 1e-4) / probe(&params, &curves, 1.0 - 1e-2);
        assert!((ratio / 1e4 - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn csv_export() {
        let (params, curves) = two_asset();
        let rows = alpha_curve(&params, &curves, &[-1.0, 0.5]).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("alpha,j,route_gap,lambda,lambda_slope\n-1.0,"));
        let policy = FiniteHorizonPolicy::solve(&params, &curves, &PowerUtility::new(0.5).unwrap(), 1.0, 8).unwrap();
        let mut buf = Vec::new();
        policy.write_grids_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("t,R_1,R_2,v_1,v_2\n"));
    }

    fn sweep_case() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>, f64)> {
        (1usize..4).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..2.0], n),
                proptest::collection::vec(0.02f64..1.5, n),
                proptest::collection::vec(-1.0f64..1.0, n),
                prop_oneof![-8.0f64..-0.01, 0.01f64..0.99],
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn two_routes_and_identities((p, q, lb, alpha) in sweep_case()) {
            let n = p.len();
            let params = MemoryParams::new(p, q).unwrap();
            prop_assume!(alpha > alpha_star(&params));
            let curves = CoefficientCurves::constant(0.01, &DMatrix::identity(n, n), &lb).unwrap();
            let u = PowerUtility::new(alpha).unwrap();
            let rep = growth_rate_j(&params, &curves, &u).unwrap();
            prop_assert!(rep.route_gap <= 1e-9);
            let ids = infinite_horizon_identities(&params, &curves, &u).unwrap();
            prop_assert!(ids.max_residual <= 1e-9, "{:?}", ids);
        }

        #[test]
        fn lambda_convex_rate_nonincreasing(p in 0.0f64..2.0, q in 0.05f64..1.0, lb in -0.5f64..0.5) {
            let params = MemoryParams::new(vec![p], vec![q]).unwrap();
            let curves = CoefficientCurves::constant(0.01, &DMatrix::identity(1, 1), &[lb]).unwrap();
            let h = 1e-3;
            let vals: Vec<f64> = (1..1000).map(|k| mgf_lambda(&params, &curves, k as f64 * h).unwrap()).collect();
            for w in vals.windows(3) {
                prop_assert!(w[0] - 2.0 * w[1] + w[2] >= -1e-10);
            }
            let c_bar = benchmark_threshold(&params, &curves).unwrap();
            let mut prev = 0.0;
            for k in 0..20 {
                let i = rate_function_i(&params, &curves, c_bar - 0.5 + 0.1 * k as f64).unwrap().rate;
                prop_assert!(i <= 0.0 && i <= prev + 1e-14);
                prev = i;
            }
        }

        #[test]
        fn memoryless_boundary_continuity(q in 0.05f64..1.0, lb in -0.5f64..0.5, alpha in prop_oneof![-3.0f64..-0.1, 0.1f64..0.9]) {
            let curves = CoefficientCurves::constant(0.0, &DMatrix::identity(1, 1), &[lb]).unwrap();
            let u = PowerUtility::new(alpha).unwrap();
            let a = growth_rate_j(&MemoryParams::new(vec![0.0], vec![q]).unwrap(), &curves, &u).unwrap();
            let b = growth_rate_j(&MemoryParams::new(vec![1e-10], vec![q]).unwrap(), &curves, &u).unwrap();
            prop_assert!((a.j_via_fg - b.j_via_fg).abs() <= 1e-6);
            let (ra, rb) = (a.assets[0].steady.r_bar, b.assets[0].steady.r_bar);
            prop_assert!((ra - rb).abs() <= 1e-6 * (1.0 + ra.abs()));
        }
    }
}
