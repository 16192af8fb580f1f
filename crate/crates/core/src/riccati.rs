//! Backward scalar Riccati and linear ODEs with zero terminal data.
//!
//! Riccati form: `R'(t) = a1(t) R^2 - 2 a2(t) R - a3(t)`, `R(T) = 0`, i.e.
//! `R' - a1 R^2 + 2 a2 R + a3 = 0`.
//! Linear form: `v'(t) = b1(t) v - b2(t)`, `v(T) = 0`.
//!
//! Both are integrated backward from `T` with the classical fourth-order
//! Runge–Kutta scheme on a uniform grid, so that solutions sharing a horizon
//! and resolution share their mesh.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::alpha_star_j;
use crate::model::{MemoryParams, PowerUtility};

/// Grid resolution used when none is given.
pub const DEFAULT_STEPS_PER_UNIT_TIME: usize = 64;
/// Magnitude beyond which a backward solution is declared to have blown up.
pub const DEFAULT_BLOW_UP_BOUND: f64 = 1e8;
/// Root residual tolerance for steady states.
pub const STEADY_RESIDUAL_TOL: f64 = 1e-12;
/// Below this quadratic coefficient the steady equation is treated as linear.
pub const LINEAR_SWITCH: f64 = 1e-14;
/// Slack allowed in pointwise branch checks.
pub const BRANCH_SLACK: f64 = 1e-9;
/// Default PASS threshold of [`asymptotic_diagnostics`].
pub const DEFAULT_ASYMPTOTIC_TOL: f64 = 1e-5;

/// A coefficient `t -> a(t)`.
pub type TimeFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

pub fn constant_fn(value: f64) -> TimeFn {
    Arc::new(move |_| value)
}

/// Limits of the Riccati coefficients as `t -> inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiccatiLimits {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
}

#[derive(Clone)]
pub struct ScalarRiccatiProblem {
    /// `a1(t) >= 0`.
    pub quadratic: TimeFn,
    pub linear: TimeFn,
    pub constant: TimeFn,
    /// Left end of the solution interval, usually 0.
    pub start: f64,
    pub horizon: f64,
    pub limits: Option<RiccatiLimits>,
    pub blow_up_bound: f64,
}

impl ScalarRiccatiProblem {
    pub fn new(quadratic: TimeFn, linear: TimeFn, constant: TimeFn, horizon: f64) -> Self {
        Self {
            quadratic,
            linear,
            constant,
            start: 0.0,
            horizon,
            limits: None,
            blow_up_bound: DEFAULT_BLOW_UP_BOUND,
        }
    }

    pub fn constant_coefficients(a1: f64, a2: f64, a3: f64, horizon: f64) -> Self {
        let mut p = Self::new(constant_fn(a1), constant_fn(a2), constant_fn(a3), horizon);
        p.limits = Some(RiccatiLimits { a1, a2, a3 });
        p
    }

    pub fn with_start(mut self, start: f64) -> Self {
        self.start = start;
        self
    }

    pub fn with_limits(mut self, limits: RiccatiLimits) -> Self {
        self.limits = Some(limits);
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon > self.start) || !self.horizon.is_finite() || !self.start.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "backward problem needs start < horizon, got [{}, {}]",
                self.start, self.horizon
            )));
        }
        if let Some(l) = self.limits {
            if !(l.a1 > 0.0) || !(l.a2 * l.a2 + l.a1 * l.a3 > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "asymptotic limits need a1 > 0 and a2^2 + a1 a3 > 0, got {l:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Solution values on a uniform grid `t_0 < ... < t_K = T`, in forward order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackwardGridSolution {
    grid: Vec<f64>,
    values: Vec<f64>,
    /// Time derivative at each node, taken from the right-hand side.
    #[serde(skip)]
    slopes: Vec<f64>,
}

impl BackwardGridSolution {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn start(&self) -> f64 {
        self.grid[0]
    }

    pub fn horizon(&self) -> f64 {
        *self.grid.last().unwrap()
    }

    pub fn terminal_value(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }

    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Cubic Hermite interpolation using the node derivatives, so that
    /// lookups between nodes keep the fourth-order accuracy of the solve.
    /// `t` is clamped to the grid.
    pub fn interpolate(&self, t: f64) -> f64 {
        let k_max = self.grid.len() - 1;
        let t0 = self.grid[0];
        let h = (self.horizon() - t0) / k_max as f64;
        let pos = ((t - t0) / h).clamp(0.0, k_max as f64);
        let k = (pos.floor() as usize).min(k_max - 1);
        let w = pos - k as f64;
        let w2 = w * w;
        let w3 = w2 * w;
        (2.0 * w3 - 3.0 * w2 + 1.0) * self.values[k]
            + (w3 - 2.0 * w2 + w) * h * self.slopes[k]
            + (3.0 * w2 - 2.0 * w3) * self.values[k + 1]
            + (w3 - w2) * h * self.slopes[k + 1]
    }

    /// Interpolated value, rejecting times outside the grid.
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let tol = 1e-12 * self.horizon().abs().max(1.0);
        if t < self.start() - tol || t > self.horizon() + tol || !t.is_finite() {
            return Err(Error::Domain(format!(
                "time {t} outside solution interval [{}, {}]",
                self.start(),
                self.horizon()
            )));
        }
        Ok(self.interpolate(t))
    }

    /// Two-column CSV `t,value`.
    pub fn write_csv<W: std::io::Write>(&self, w: W, value_name: &str) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", value_name])?;
        for (t, v) in self.grid.iter().zip(&self.values) {
            wtr.write_record([format!("{t}"), format!("{v}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Uniform grid on `[start, horizon]` with at least one step.
fn uniform_grid(start: f64, horizon: f64, steps_per_unit_time: usize) -> Vec<f64> {
    let k = (((horizon - start) * steps_per_unit_time as f64).ceil() as usize).max(1);
    let h = (horizon - start) / k as f64;
    let mut grid: Vec<f64> = (0..=k).map(|i| start + i as f64 * h).collect();
    grid[k] = horizon;
    grid
}

/// Integrates `y' = rhs(t, y)` backward from `y(horizon) = 0`.
fn integrate_backward<F>(
    mut rhs: F,
    start: f64,
    horizon: f64,
    steps_per_unit_time: usize,
    bound: f64,
) -> Result<BackwardGridSolution>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    if steps_per_unit_time == 0 {
        return Err(Error::InvalidParameter("steps_per_unit_time must be positive".into()));
    }
    let grid = uniform_grid(start, horizon, steps_per_unit_time);
    let k_max = grid.len() - 1;
    let h = (horizon - start) / k_max as f64;
    let mut values = vec![0.0; k_max + 1];
    let mut slopes = vec![0.0; k_max + 1];
    let mut y = 0.0;
    slopes[k_max] = rhs(horizon, y)?;
    for k in (0..k_max).rev() {
        let t = grid[k + 1];
        let tm = t - 0.5 * h;
        let tn = grid[k];
        let k1 = -slopes[k + 1];
        let k2 = -rhs(tm, y + 0.5 * h * k1)?;
        let k3 = -rhs(tm, y + 0.5 * h * k2)?;
        let k4 = -rhs(tn, y + h * k3)?;
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !y.is_finite() {
            return Err(Error::NonFinite { t: tn });
        }
        if y.abs() > bound {
            return Err(Error::BlowUp { t: tn, value: y, bound });
        }
        values[k] = y;
        slopes[k] = rhs(tn, y)?;
    }
    Ok(BackwardGridSolution { grid, values, slopes })
}

/// Solves `R' = a1 R^2 - 2 a2 R - a3`, `R(T) = 0` backward.
pub fn solve_backward_riccati(
    problem: &ScalarRiccatiProblem,
    steps_per_unit_time: usize,
) -> Result<BackwardGridSolution> {
    problem.validate()?;
    let (a1, a2, a3) = (&problem.quadratic, &problem.linear, &problem.constant);
    integrate_backward(
        |t, r| {
            let q = a1(t);
            if q < 0.0 {
                return Err(Error::InvalidParameter(format!("quadratic coefficient a1({t}) = {q} < 0")));
            }
            Ok(q * r * r - 2.0 * a2(t) * r - a3(t))
        },
        problem.start,
        problem.horizon,
        steps_per_unit_time,
        problem.blow_up_bound,
    )
}

/// Solves `v' = b1 v - b2`, `v(T) = 0` backward on `[0, T]`.
pub fn solve_backward_linear<B1, B2>(
    b1: B1,
    b2: B2,
    horizon: f64,
    steps_per_unit_time: usize,
) -> Result<BackwardGridSolution>
where
    B1: Fn(f64) -> f64,
    B2: Fn(f64) -> f64,
{
    solve_backward_linear_on(b1, b2, 0.0, horizon, steps_per_unit_time)
}

/// [`solve_backward_linear`] on `[start, horizon]`.
pub fn solve_backward_linear_on<B1, B2>(
    b1: B1,
    b2: B2,
    start: f64,
    horizon: f64,
    steps_per_unit_time: usize,
) -> Result<BackwardGridSolution>
where
    B1: Fn(f64) -> f64,
    B2: Fn(f64) -> f64,
{
    if !(horizon > start) {
        return Err(Error::InvalidParameter(format!(
            "backward problem needs start < horizon, got [{start}, {horizon}]"
        )));
    }
    integrate_backward(
        |t, v| Ok(b1(t) * v - b2(t)),
        start,
        horizon,
        steps_per_unit_time,
        f64::INFINITY,
    )
}

/// Fixed point of a Riccati equation with its spectral gap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SteadyRoot {
    /// Larger (or unique) root of `a1 x^2 - 2 a2 x - a3 = 0`.
    pub value: f64,
    /// `sqrt(a2^2 + a1 a3)`, or `|a2|` in the linear case.
    pub spectral_gap: f64,
}

/// Larger root of `a1 x^2 - 2 a2 x - a3 = 0`; the unique root `-a3/(2 a2)`
/// when `a1` vanishes.
pub fn steady_riccati_root(a1: f64, a2: f64, a3: f64) -> Result<SteadyRoot> {
    if !(a1 >= 0.0) || !a2.is_finite() || !a3.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "steady equation needs a1 >= 0 and finite coefficients, got ({a1}, {a2}, {a3})"
        )));
    }
    if a1 < LINEAR_SWITCH {
        if a2 == 0.0 {
            return Err(Error::Degenerate("steady equation with a1 = a2 = 0 has no unique root".into()));
        }
        return Ok(SteadyRoot {
            value: -a3 / (2.0 * a2),
            spectral_gap: a2.abs(),
        });
    }
    let disc = a2 * a2 + a1 * a3;
    if !(disc > 0.0) {
        return Err(Error::Discriminant(disc));
    }
    let k = disc.sqrt();
    let value = if a2 >= 0.0 { (a2 + k) / a1 } else { a3 / (k - a2) };
    Ok(SteadyRoot { value, spectral_gap: k })
}

/// Solves `minus_gap * v + forcing = 0`, i.e. `v = forcing / gap`.
pub fn steady_linear(minus_gap: f64, forcing: f64) -> Result<f64> {
    if !(minus_gap < 0.0) {
        return Err(Error::Degenerate(format!(
            "linear steady state needs a negative coefficient, got {minus_gap}"
        )));
    }
    Ok(forcing / -minus_gap)
}

/// Which solution of a Riccati equation is meant, and how it is checked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `p_j = 0`: the equation is linear.
    Linear,
    /// `alpha < 0`: the unique nonnegative solution.
    Nonnegative,
    /// `p_j > 0`, `0 < alpha < 1`: the unique solution above a known lower curve.
    Shifted,
}

/// The two Riccati families appearing in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RiccatiInstance {
    /// Value-function equation for `R_j`.
    ValueFunction,
    /// Verification equation for `U_j` under the stationary strategy.
    Verification,
}

pub fn existence_branch(
    params: &MemoryParams,
    utility: &PowerUtility,
    j: usize,
    instance: RiccatiInstance,
) -> Result<Branch> {
    params.check_asset(j)?;
    let (p, q) = (params.p()[j], params.q()[j]);
    let alpha = utility.alpha();
    if instance == RiccatiInstance::Verification {
        let star = alpha_star_j(p, q);
        if alpha <= star {
            return Err(Error::Admissibility { alpha, alpha_star: star });
        }
    }
    Ok(if p == 0.0 {
        Branch::Linear
    } else if alpha < 0.0 {
        Branch::Nonnegative
    } else {
        Branch::Shifted
    })
}

/// Post-hoc check of a solution against its branch. `lower` is the lower
/// curve for [`Branch::Shifted`].
pub fn check_branch<L: Fn(f64) -> f64>(
    branch: Branch,
    solution: &BackwardGridSolution,
    lower: L,
) -> Result<()> {
    match branch {
        Branch::Linear => Ok(()),
        Branch::Nonnegative => {
            for (t, v) in solution.grid().iter().zip(solution.values()) {
                if *v < -BRANCH_SLACK {
                    return Err(Error::BranchViolation {
                        t: *t,
                        detail: format!("expected a nonnegative solution, found {v}"),
                    });
                }
            }
            Ok(())
        }
        Branch::Shifted => {
            for (t, v) in solution.grid().iter().zip(solution.values()) {
                let floor = lower(*t);
                if v - floor < -BRANCH_SLACK {
                    return Err(Error::BranchViolation {
                        t: *t,
                        detail: format!("solution {v} below its lower curve {floor}"),
                    });
                }
            }
            Ok(())
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonDeviation {
    pub horizon: f64,
    /// `sup |x(t;T) - target|` over `[delta T, (1 - epsilon) T]`.
    pub sup_deviation: f64,
    /// `sup |x(t;T)|` over the whole grid.
    pub sup_abs: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticReport {
    pub target: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    pub entries: Vec<HorizonDeviation>,
    /// Window mean of the longest-horizon solution.
    pub plateau_estimate: f64,
    pub decreasing: bool,
    /// Largest `sup |x|` over all horizons, the empirical boundedness witness.
    pub bound: f64,
    pub pass: bool,
}

/// Window deviation of a family of finite-horizon solutions from their
/// steady state. PASS requires strictly decreasing deviations (or deviations
/// already at rounding level) and a longest-horizon deviation below
/// `tolerance`.
pub fn asymptotic_diagnostics(
    family: &[BackwardGridSolution],
    target: f64,
    delta: f64,
    epsilon: f64,
    tolerance: f64,
) -> Result<AsymptoticReport> {
    if !(delta > 0.0 && epsilon > 0.0 && delta + epsilon < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "window needs delta, epsilon > 0 and delta + epsilon < 1, got ({delta}, {epsilon})"
        )));
    }
    if family.len() < 2 {
        return Err(Error::InvalidParameter("at least two horizons are required".into()));
    }
    let mut sorted: Vec<&BackwardGridSolution> = family.iter().collect();
    sorted.sort_by(|a, b| a.horizon().total_cmp(&b.horizon()));
    let floor = 1e-13 * (1.0 + target.abs());
    let mut entries = Vec::with_capacity(sorted.len());
    for sol in &sorted {
        let big_t = sol.horizon();
        let (lo, hi) = (delta * big_t, (1.0 - epsilon) * big_t);
        let sup_deviation = sol
            .grid()
            .iter()
            .zip(sol.values())
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .fold(0.0f64, |m, (_, v)| m.max((v - target).abs()));
        entries.push(HorizonDeviation {
            horizon: big_t,
            sup_deviation,
            sup_abs: sol.max_abs(),
        });
    }
    let decreasing = entries
        .windows(2)
        .all(|w| w[1].sup_deviation < w[0].sup_deviation || w[1].sup_deviation <= floor);
    let last = sorted.last().unwrap();
    let big_t = last.horizon();
    let window: Vec<f64> = last
        .grid()
        .iter()
        .zip(last.values())
        .filter(|(t, _)| **t >= delta * big_t && **t <= (1.0 - epsilon) * big_t)
        .map(|(_, v)| *v)
        .collect();
    let plateau_estimate = crate::stats::mean(&window);
    let bound = entries.iter().fold(0.0f64, |m, e| m.max(e.sup_abs));
    let pass = decreasing && entries.last().unwrap().sup_deviation <= tolerance;
    Ok(AsymptoticReport {
        target,
        delta,
        epsilon,
        tolerance,
        entries,
        plateau_estimate,
        decreasing,
        bound,
        pass,
    })
}
