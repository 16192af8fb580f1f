//! Model configuration files (TOML).
//!
//! ```toml
//! schema_version = 1
//! n = 2
//! p = [0.5, 0.0]
//! q = [0.5, 0.3]
//! sigma = [0.25, 0.05, -0.04, 0.2]   # row-major n x n
//! rbar = 0.02
//! lambda_bar = [0.3, 0.2]
//!
//! [curves]
//! family = "relaxing"                # "constant" (default), "relaxing" or "table"
//! r0 = 0.03
//! lambda0 = [0.4, 0.1]
//! rate = 0.5
//! ```
//!
//! A `table` family lists knot `times`, riskless rates `r` and one row of
//! risk premia per asset in `lambda`; interpolation is linear and constant
//! beyond the end knots. Mean returns are `r + sigma lambda` at every knot.

use std::path::Path;

use memport::{CoefficientCurves, MemoryParams, ScalarCurve};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    pub n: usize,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub sigma: Vec<f64>,
    pub rbar: f64,
    pub lambda_bar: Vec<f64>,
    #[serde(default)]
    pub curves: CurveSpec,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveSpec {
    /// `r = rbar`, `lambda = lambda_bar` at all times.
    #[default]
    Constant,
    /// Exponential relaxation from `(r0, lambda0)` toward the long-run values.
    Relaxing { r0: f64, lambda0: Vec<f64>, rate: f64 },
    Table {
        times: Vec<f64>,
        r: Vec<f64>,
        lambda: Vec<Vec<f64>>,
    },
}

/// Validated model ready for the library.
pub struct Model {
    pub config: ModelConfig,
    pub params: MemoryParams,
    pub curves: CoefficientCurves,
}

impl ModelConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn build(&self) -> CliResult<Model> {
        let n = self.n;
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if n == 0 {
            return Err(CliError::Config("n must be at least 1".into()));
        }
        for (name, len, want) in [
            ("p", self.p.len(), n),
            ("q", self.q.len(), n),
            ("sigma", self.sigma.len(), n * n),
            ("lambda_bar", self.lambda_bar.len(), n),
        ] {
            if len != want {
                return Err(CliError::Config(format!("{name} has {len} entries, expected {want} for n={n}")));
            }
        }
        let invalid = |e: memport::Error| CliError::Config(e.to_string());
        let params = MemoryParams::new(self.p.clone(), self.q.clone()).map_err(invalid)?;
        let sigma = DMatrix::from_row_slice(n, n, &self.sigma);
        let curves = match &self.curves {
            CurveSpec::Constant => CoefficientCurves::constant(self.rbar, &sigma, &self.lambda_bar),
            CurveSpec::Relaxing { r0, lambda0, rate } => {
                if lambda0.len() != n {
                    return Err(CliError::Config(format!("curves.lambda0 needs {n} entries")));
                }
                CoefficientCurves::relaxing(*r0, self.rbar, lambda0, &self.lambda_bar, &sigma, *rate)
            }
            CurveSpec::Table { times, r, lambda } => table_curves(n, &sigma, times, r, lambda, self)?,
        };
        let curves = curves.map_err(invalid)?;
        Ok(Model {
            config: self.clone(),
            params,
            curves,
        })
    }

    /// True when every coefficient is constant in time.
    pub fn is_constant(&self) -> bool {
        matches!(self.curves, CurveSpec::Constant)
    }
}

fn table_curves(
    n: usize,
    sigma: &DMatrix<f64>,
    times: &[f64],
    r: &[f64],
    lambda: &[Vec<f64>],
    cfg: &ModelConfig,
) -> CliResult<memport::Result<CoefficientCurves>> {
    if r.len() != times.len() || lambda.len() != n || lambda.iter().any(|row| row.len() != times.len()) {
        return Err(CliError::Config(format!(
            "table curves need r and {n} lambda rows with one value per knot ({} knots)",
            times.len()
        )));
    }
    let build = || -> memport::Result<CoefficientCurves> {
        let r_curve = ScalarCurve::table(times.to_vec(), r.to_vec())?;
        let mu = (0..n)
            .map(|i| {
                let vals = (0..times.len())
                    .map(|k| r[k] + (0..n).map(|j| sigma[(i, j)] * lambda[j][k]).sum::<f64>())
                    .collect();
                ScalarCurve::table(times.to_vec(), vals)
            })
            .collect::<memport::Result<Vec<_>>>()?;
        let sig = cfg.sigma.iter().map(|&v| ScalarCurve::constant(v)).collect();
        CoefficientCurves::new(r_curve, mu, sig, cfg.rbar, cfg.lambda_bar.clone())
    };
    Ok(build())
}
