//! Bias correction by extrapolation: run the stratified estimator over a
//! grid of strata counts J, regress the estimate (and its variance) on
//! 1/J by ordinary least squares, and report the intercepts at 1/J = 0.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::pipeline::{estimate_once, EstimationOptions, StratifyMethod};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub r2: f64,
}

/// Closed-form simple OLS of y on x, for the 1/J extrapolation.
pub fn ols_intercept_at_zero(points: &[(f64, f64)]) -> Result<LineFit> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return Err(Error::Degenerate("need at least 2 grid points".into()));
    }
    let distinct_x = {
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs.dedup();
        xs.len()
    };
    if distinct_x < 2 {
        return Err(Error::Degenerate("degenerate grid: fewer than 2 distinct x".into()));
    }
    let xbar = points.iter().map(|p| p.0).sum::<f64>() / n;
    let ybar = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - xbar) * (p.1 - ybar)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - xbar) * (p.0 - xbar)).sum();
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let syy: f64 = points.iter().map(|p| (p.1 - ybar) * (p.1 - ybar)).sum();
    let r2 = if syy > 0.0 { slope * slope * sxx / syy } else { 1.0 };
    Ok(LineFit { intercept, slope, r2 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridPoint {
    /// The J (or bin count, for CEM) requested for this grid entry.
    pub requested: usize,
    /// Strata actually retained after pruning; the regression abscissa.
    pub realized_j: usize,
    pub tau_hat: f64,
    pub var_hat: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtrapolationResult {
    pub points: Vec<GridPoint>,
    pub tau_fit: LineFit,
    pub var_fit: LineFit,
    pub tau_corrected: f64,
    pub var_corrected: f64,
    pub se_corrected: f64,
    /// Set when the variance intercept came out negative and was clamped.
    pub var_clamped: bool,
    pub warnings: Vec<String>,
}

/// OLS step over already-computed grid points (also usable to replay
/// recorded (J, tau, var) values).
pub fn extrapolate_points(points: Vec<GridPoint>, mut warnings: Vec<String>) -> Result<ExtrapolationResult> {
    let tau_pts: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (1.0 / p.realized_j as f64, p.tau_hat))
        .collect();
    let var_pts: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (1.0 / p.realized_j as f64, p.var_hat))
        .collect();
    let tau_fit = ols_intercept_at_zero(&tau_pts)?;
    let var_fit = ols_intercept_at_zero(&var_pts)?;
    let var_clamped = var_fit.intercept < 0.0;
    if var_clamped {
        warnings.push("negative variance intercept clamped to zero".into());
    }
    let var_corrected = var_fit.intercept.max(0.0);
    Ok(ExtrapolationResult {
        points,
        tau_fit,
        var_fit,
        tau_corrected: tau_fit.intercept,
        var_corrected,
        se_corrected: var_corrected.sqrt(),
        var_clamped,
        warnings,
    })
}

/// Run the estimator across the grid and extrapolate. Per-point seeds
/// derive from `master_seed` by grid index unless `shared_seed` is set.
/// Grid points that yield no estimable strata are dropped with a warning;
/// fewer than two survivors is an error.
pub fn run_grid(
    d: &Dataset,
    method: &StratifyMethod,
    grid: &[usize],
    opts: &EstimationOptions,
    master_seed: u64,
    shared_seed: bool,
) -> Result<ExtrapolationResult> {
    if grid.len() < 2 {
        return Err(Error::Degenerate("grid needs at least 2 values".into()));
    }
    if let Some(&bad) = grid.iter().find(|&&j| j < 1 || j > d.n()) {
        return Err(Error::Config(format!("grid value {bad} infeasible for n = {}", d.n())));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut warnings = Vec::new();
    for (i, &j) in grid.iter().enumerate() {
        let seed = if shared_seed {
            master_seed
        } else {
            derive_seed(master_seed, i as u64)
        };
        match estimate_once(d, method, j, seed, opts) {
            Ok((est, pruned)) => {
                let realized = pruned.j();
                if realized != j {
                    warnings.push(format!(
                        "grid point {j}: realized {realized} strata after pruning"
                    ));
                }
                points.push(GridPoint {
                    requested: j,
                    realized_j: realized,
                    tau_hat: est.tau_hat,
                    var_hat: est.var_hat,
                    seed,
                });
            }
            Err(Error::Degenerate(msg)) => {
                warnings.push(format!("grid point {j} dropped: {msg}"));
            }
            Err(e) => return Err(e),
        }
    }
    if points.len() < 2 {
        return Err(Error::Degenerate(
            "fewer than 2 grid points survived estimation".into(),
        ));
    }
    extrapolate_points(points, warnings)
}
