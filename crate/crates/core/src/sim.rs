//! Monte Carlo generator and study runner. Synthetic designs draw
//! confounders from a known law, assign treatment by a (clamped) logistic
//! model in the confounders, and build outcomes from declared potential
//! outcome surfaces, so the true average effect is available in closed
//! form (or by large-sample quadrature for the smooth preset). The runner
//! aggregates bias, RMSE, SE calibration, CI coverage, and a normality
//! check of the standardized estimates across replicates.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cem::CoarsenRule;
use crate::dataset::{ColumnKind, Dataset};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::extrapolate::run_grid;
use crate::kmeans::Init;
use crate::matrix::Matrix;
use crate::pipeline::{estimate_once, EstimationOptions, StratifyMethod};

/// Propensity clamp enforcing positivity in the generator.
const POSITIVITY_EPS: f64 = 0.01;
const QUADRATURE_DRAWS: usize = 500_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "law")]
pub enum ConfounderLaw {
    /// iid standard normal columns.
    Gaussian,
    /// iid uniform(0, 1) columns.
    Uniform,
    /// Gaussian columns followed by `binary` Bernoulli(1/2) columns.
    MixedWithBinary { binary: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "surface")]
pub enum Surface {
    Linear {
        intercept: f64,
        coefs: Vec<f64>,
    },
    /// Piecewise-constant over the cross product of per-column cut bins;
    /// `levels` indexes cells in mixed radix with column 0 most
    /// significant. Cut bins use the (lo, hi] convention.
    Piecewise {
        cuts: Vec<Vec<f64>>,
        levels: Vec<f64>,
    },
    /// Fixed nonlinear preset: sum of sin(2 x_j) + 0.5 x_j^2 over columns.
    SmoothNonlinear { shift: f64 },
}

impl Surface {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            Surface::Linear { intercept, coefs } => {
                intercept + coefs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
            }
            Surface::Piecewise { cuts, levels } => levels[piecewise_cell(cuts, x)],
            Surface::SmoothNonlinear { shift } => {
                shift + x.iter().map(|v| (2.0 * v).sin() + 0.5 * v * v).sum::<f64>()
            }
        }
    }
}

fn piecewise_cell(cuts: &[Vec<f64>], x: &[f64]) -> usize {
    let mut cell = 0usize;
    for (j, col_cuts) in cuts.iter().enumerate() {
        let code = col_cuts.iter().filter(|&&c| x[j] > c).count();
        cell = cell * (col_cuts.len() + 1) + code;
    }
    cell
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Logistic {
    pub intercept: f64,
    pub coefs: Vec<f64>,
}

impl Logistic {
    fn propensity(&self, x: &[f64]) -> f64 {
        let lin = self.intercept + self.coefs.iter().zip(x).map(|(c, v)| c * v).sum::<f64>();
        let e = 1.0 / (1.0 + (-lin).exp());
        e.clamp(POSITIVITY_EPS, 1.0 - POSITIVITY_EPS)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub p: usize,
    pub law: ConfounderLaw,
    pub mu0: Surface,
    pub mu1: Surface,
    pub propensity: Logistic,
    pub noise_sd: f64,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(Error::Config("need n >= 2 and p >= 1".into()));
        }
        if let ConfounderLaw::MixedWithBinary { binary } = self.law {
            if binary > self.p {
                return Err(Error::Config("more binary columns than p".into()));
            }
        }
        for s in [&self.mu0, &self.mu1] {
            match s {
                Surface::Linear { coefs, .. } => {
                    if coefs.len() != self.p {
                        return Err(Error::Config("surface coefficient length != p".into()));
                    }
                }
                Surface::Piecewise { cuts, levels } => {
                    if cuts.len() != self.p {
                        return Err(Error::Config("piecewise cuts length != p".into()));
                    }
                    let cells: usize = cuts.iter().map(|c| c.len() + 1).product();
                    if levels.len() != cells {
                        return Err(Error::Config(format!(
                            "piecewise needs {cells} levels, got {}",
                            levels.len()
                        )));
                    }
                }
                Surface::SmoothNonlinear { .. } => {}
            }
        }
        if self.propensity.coefs.len() != self.p {
            return Err(Error::Config("propensity coefficient length != p".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(Error::Config("noise_sd must be >= 0".into()));
        }
        Ok(())
    }

    fn column_kind(&self, j: usize) -> ColumnKind {
        match self.law {
            ConfounderLaw::MixedWithBinary { binary } if j >= self.p - binary => {
                ColumnKind::Categorical
            }
            _ => ColumnKind::Continuous,
        }
    }

    fn column_mean(&self, j: usize) -> f64 {
        match self.column_kind(j) {
            ColumnKind::Categorical => 0.5,
            ColumnKind::Continuous => match self.law {
                ConfounderLaw::Uniform => 0.5,
                _ => 0.0,
            },
        }
    }

    /// Probability mass of each cut bin for column `j`.
    fn column_bin_probs(&self, j: usize, cuts: &[f64]) -> Vec<f64> {
        let bins = cuts.len() + 1;
        match self.column_kind(j) {
            ColumnKind::Categorical => {
                let mut probs = vec![0.0; bins];
                for v in [0.0, 1.0] {
                    let code = cuts.iter().filter(|&&c| v > c).count();
                    probs[code] += 0.5;
                }
                probs
            }
            ColumnKind::Continuous => {
                let cdf = |v: f64| -> f64 {
                    match self.law {
                        ConfounderLaw::Uniform => v.clamp(0.0, 1.0),
                        _ => Normal::new(0.0, 1.0).unwrap().cdf(v),
                    }
                };
                let mut probs = Vec::with_capacity(bins);
                let mut lo = f64::NEG_INFINITY;
                for &c in cuts {
                    probs.push(cdf(c) - cdf(lo));
                    lo = c;
                }
                probs.push(1.0 - cdf(lo));
                probs
            }
        }
    }

    /// Implied true average effect: exact for linear surfaces and for
    /// piecewise surfaces sharing a partition, large-sample quadrature
    /// otherwise.
    pub fn true_tau(&self) -> Result<f64> {
        self.validate()?;
        match (&self.mu0, &self.mu1) {
            (
                Surface::Linear { intercept: i0, coefs: c0 },
                Surface::Linear { intercept: i1, coefs: c1 },
            ) => {
                let mut tau = i1 - i0;
                for j in 0..self.p {
                    tau += (c1[j] - c0[j]) * self.column_mean(j);
                }
                Ok(tau)
            }
            (
                Surface::Piecewise { cuts: k0, levels: l0 },
                Surface::Piecewise { cuts: k1, levels: l1 },
            ) if k0 == k1 => {
                // analytic mixture sum over the shared cell partition
                let mut cell_probs = vec![1.0];
                for (j, cuts) in k0.iter().enumerate() {
                    let col = self.column_bin_probs(j, cuts);
                    let mut next = Vec::with_capacity(cell_probs.len() * col.len());
                    for &cp in &cell_probs {
                        for &bp in &col {
                            next.push(cp * bp);
                        }
                    }
                    cell_probs = next;
                }
                Ok(cell_probs
                    .iter()
                    .enumerate()
                    .map(|(c, &p)| p * (l1[c] - l0[c]))
                    .sum())
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(0x07ea_17a0);
                let mut total = 0.0;
                let mut row = vec![0.0; self.p];
                for _ in 0..QUADRATURE_DRAWS {
                    self.draw_row(&mut row, &mut rng);
                    total += self.mu1.eval(&row) - self.mu0.eval(&row);
                }
                Ok(total / QUADRATURE_DRAWS as f64)
            }
        }
    }

    fn draw_row(&self, row: &mut [f64], rng: &mut ChaCha8Rng) {
        for j in 0..self.p {
            row[j] = match self.column_kind(j) {
                ColumnKind::Categorical => {
                    if rng.gen::<f64>() < 0.5 {
                        1.0
                    } else {
                        0.0
                    }
                }
                ColumnKind::Continuous => match self.law {
                    ConfounderLaw::Uniform => rng.gen::<f64>(),
                    _ => StandardNormal.sample(rng),
                },
            };
        }
    }
}

/// One synthetic draw: X per the law, T | X logistic, Y = mu_T(X) + noise.
/// Deterministic in (cfg, rep_seed). Returns the dataset and true tau.
pub fn generate(cfg: &SimConfig, rep_seed: u64) -> Result<(Dataset, f64)> {
    cfg.validate()?;
    let true_tau = cfg.true_tau()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rep_seed);
    let mut rows = Vec::with_capacity(cfg.n);
    let mut y = Vec::with_capacity(cfg.n);
    let mut t = Vec::with_capacity(cfg.n);
    let mut row = vec![0.0; cfg.p];
    for _ in 0..cfg.n {
        cfg.draw_row(&mut row, &mut rng);
        let e = cfg.propensity.propensity(&row);
        let treated = rng.gen::<f64>() < e;
        let mu = if treated {
            cfg.mu1.eval(&row)
        } else {
            cfg.mu0.eval(&row)
        };
        let noise: f64 = StandardNormal.sample(&mut rng);
        y.push(mu + cfg.noise_sd * noise);
        t.push(treated as u8);
        rows.push(row.clone());
    }
    let kinds: Vec<ColumnKind> = (0..cfg.p).map(|j| cfg.column_kind(j)).collect();
    let d = Dataset::from_parts(y, t, Matrix::from_rows(&rows), &kinds)?;
    Ok((d, true_tau))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McConfig {
    pub method: StratifyMethod,
    /// Stratum-count knob (K for clustering, bins for CEM).
    pub size: usize,
    /// When set, each replicate runs the whole 1/J grid and the corrected
    /// estimate; headline statistics then describe the corrected estimator.
    pub grid: Option<Vec<usize>>,
    pub opts: EstimationOptions,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JCurvePoint {
    pub requested: usize,
    pub mean_realized_j: f64,
    pub mean_tau: f64,
    pub bias: f64,
    pub emp_sd: f64,
    /// Monte Carlo standard error of the bias estimate.
    pub mc_se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McReport {
    pub reps_requested: usize,
    pub reps_failed: usize,
    pub true_tau: f64,
    pub mean_tau: f64,
    pub bias: f64,
    pub emp_sd: f64,
    pub rmse: f64,
    /// Mean of the per-replicate estimated SEs (None in grid mode).
    pub mean_se: Option<f64>,
    /// 95% Wald CI coverage (None in grid mode).
    pub coverage: Option<f64>,
    pub ks_stat: Option<f64>,
    pub ks_pass: Option<bool>,
    /// Var[mu1(X) - mu0(X)] on a fresh large sample.
    pub sigma2_oracle: f64,
    pub per_j: Option<Vec<JCurvePoint>>,
}

struct RepOutcome {
    tau: f64,
    se: f64,
    ci: (f64, f64),
    per_j: Option<Vec<(usize, usize, f64)>>, // (requested, realized, tau)
}

/// One replicate's headline estimate, for plot-ready exports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepEstimate {
    pub rep: usize,
    pub tau_hat: f64,
    pub se: f64,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}

/// One-sample Kolmogorov-Smirnov distance to N(0, 1); passes when the
/// distance is under the asymptotic 1% critical value 1.63 / sqrt(m).
pub fn normality_check(standardized: &[f64]) -> Result<(f64, bool)> {
    let m = standardized.len();
    if m < 500 {
        return Err(Error::Config(format!(
            "normality check needs >= 500 values, got {m}"
        )));
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut sorted = standardized.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut d = 0.0f64;
    for (i, &z) in sorted.iter().enumerate() {
        let f = normal.cdf(z);
        let hi = (i + 1) as f64 / m as f64 - f;
        let lo = f - i as f64 / m as f64;
        d = d.max(hi).max(lo);
    }
    Ok((d, d < 1.63 / (m as f64).sqrt()))
}

/// Replicated generate -> stratify -> prune -> estimate study. Per-rep
/// seeds derive from the master seed by replicate index; replicates run in
/// parallel and aggregation is index-ordered, so the report is identical
/// across thread counts.
pub fn run_mc(cfg: &SimConfig, mc: &McConfig, reps: usize, master_seed: u64) -> Result<McReport> {
    run_mc_detailed(cfg, mc, reps, master_seed).map(|(report, _)| report)
}

/// `run_mc` plus the per-replicate estimates (successful replicates only,
/// indexed by replicate number).
pub fn run_mc_detailed(
    cfg: &SimConfig,
    mc: &McConfig,
    reps: usize,
    master_seed: u64,
) -> Result<(McReport, Vec<RepEstimate>)> {
    if reps < 1 {
        return Err(Error::Config("reps must be >= 1".into()));
    }
    cfg.validate()?;
    let true_tau = cfg.true_tau()?;

    let outcomes: Vec<Option<RepOutcome>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let rep_seed = derive_seed(master_seed, r as u64);
            let Ok((d, _)) = generate(cfg, rep_seed) else {
                return None;
            };
            let stage_seed = derive_seed(rep_seed, 1);
            match &mc.grid {
                None => match estimate_once(&d, &mc.method, mc.size, stage_seed, &mc.opts) {
                    Ok((est, _)) => Some(RepOutcome {
                        tau: est.tau_hat,
                        se: est.se,
                        ci: est.ci,
                        per_j: None,
                    }),
                    Err(_) => None,
                },
                Some(grid) => {
                    match run_grid(&d, &mc.method, grid, &mc.opts, stage_seed, false) {
                        Ok(res) => Some(RepOutcome {
                            tau: res.tau_corrected,
                            se: res.se_corrected,
                            ci: (f64::NAN, f64::NAN),
                            per_j: Some(
                                res.points
                                    .iter()
                                    .map(|p| (p.requested, p.realized_j, p.tau_hat))
                                    .collect(),
                            ),
                        }),
                        Err(_) => None,
                    }
                }
            }
        })
        .collect();

    let per_rep: Vec<RepEstimate> = outcomes
        .iter()
        .enumerate()
        .filter_map(|(r, o)| {
            o.as_ref().map(|o| RepEstimate {
                rep: r,
                tau_hat: o.tau,
                se: o.se,
            })
        })
        .collect();
    let ok: Vec<&RepOutcome> = outcomes.iter().flatten().collect();
    let reps_failed = reps - ok.len();
    if ok.is_empty() {
        return Err(Error::Degenerate("every replicate failed".into()));
    }

    let taus: Vec<f64> = ok.iter().map(|o| o.tau).collect();
    let (mean_tau, emp_sd) = mean_sd(&taus);
    let bias = mean_tau - true_tau;
    let rmse = (taus.iter().map(|t| (t - true_tau) * (t - true_tau)).sum::<f64>()
        / taus.len() as f64)
        .sqrt();

    let grid_mode = mc.grid.is_some();
    let (mean_se, coverage, ks_stat, ks_pass) = if grid_mode {
        (None, None, None, None)
    } else {
        let ses: Vec<f64> = ok.iter().map(|o| o.se).collect();
        let covered = ok
            .iter()
            .filter(|o| o.ci.0 <= true_tau && true_tau <= o.ci.1)
            .count();
        let standardized: Vec<f64> = ok
            .iter()
            .filter(|o| o.se > 0.0)
            .map(|o| (o.tau - true_tau) / o.se)
            .collect();
        let (ks_stat, ks_pass) = match normality_check(&standardized) {
            Ok((d, pass)) => (Some(d), Some(pass)),
            Err(_) => (None, None),
        };
        (
            Some(ses.iter().sum::<f64>() / ses.len() as f64),
            Some(covered as f64 / ok.len() as f64),
            ks_stat,
            ks_pass,
        )
    };

    let per_j = if grid_mode {
        let grid = mc.grid.as_ref().unwrap();
        let mut curve = Vec::with_capacity(grid.len());
        for &j in grid {
            let mut taus_j = Vec::new();
            let mut realized = Vec::new();
            for o in &ok {
                if let Some(pj) = &o.per_j {
                    if let Some(&(_, rj, tau)) = pj.iter().find(|(req, _, _)| *req == j) {
                        taus_j.push(tau);
                        realized.push(rj as f64);
                    }
                }
            }
            if taus_j.is_empty() {
                continue;
            }
            let (m, sd) = mean_sd(&taus_j);
            curve.push(JCurvePoint {
                requested: j,
                mean_realized_j: realized.iter().sum::<f64>() / realized.len() as f64,
                mean_tau: m,
                bias: m - true_tau,
                emp_sd: sd,
                mc_se: sd / (taus_j.len() as f64).sqrt(),
            });
        }
        Some(curve)
    } else {
        None
    };

    // oracle effect-heterogeneity variance on a fresh large sample
    let sigma2_oracle = {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, u64::MAX - 1));
        let draws = 200_000;
        let mut row = vec![0.0; cfg.p];
        let mut effects = Vec::with_capacity(draws);
        for _ in 0..draws {
            cfg.draw_row(&mut row, &mut rng);
            effects.push(cfg.mu1.eval(&row) - cfg.mu0.eval(&row));
        }
        mean_sd(&effects).1.powi(2)
    };

    let report = McReport {
        reps_requested: reps,
        reps_failed,
        true_tau,
        mean_tau,
        bias,
        emp_sd,
        rmse,
        mean_se,
        coverage,
        ks_stat,
        ks_pass,
        sigma2_oracle,
        per_j,
    };
    Ok((report, per_rep))
}

/// Shipped scenario presets for the CLI and the study suite.
pub fn scenario(name: &str) -> Option<(SimConfig, McConfig)> {
    let uniform_piecewise = |effect: f64| SimConfig {
        n: 2000,
        p: 2,
        law: ConfounderLaw::Uniform,
        mu0: Surface::Piecewise {
            cuts: vec![vec![0.5], vec![0.5]],
            levels: vec![0.0, 1.0, 2.0, 3.0],
        },
        mu1: Surface::Piecewise {
            cuts: vec![vec![0.5], vec![0.5]],
            levels: vec![effect, 1.0 + effect, 2.0 + effect, 3.0 + effect],
        },
        propensity: Logistic {
            intercept: 0.0,
            coefs: vec![1.5, -1.0],
        },
        noise_sd: 1.0,
    };
    let aligned_cem = StratifyMethod::Cem {
        rules: Some(vec![
            CoarsenRule::Cutpoints(vec![0.5]),
            CoarsenRule::Cutpoints(vec![0.5]),
        ]),
    };
    let kmeans_fast = StratifyMethod::KMeans {
        init: Init::Kmeanspp,
        max_iter: 50,
        tol: 1e-8,
        restarts: 2,
    };
    match name {
        "null" => Some((
            SimConfig {
                n: 2000,
                p: 2,
                law: ConfounderLaw::Uniform,
                mu0: Surface::Linear {
                    intercept: 0.0,
                    coefs: vec![1.0, 1.0],
                },
                mu1: Surface::Linear {
                    intercept: 0.0,
                    coefs: vec![1.0, 1.0],
                },
                propensity: Logistic {
                    intercept: 0.0,
                    coefs: vec![1.0, -1.0],
                },
                noise_sd: 1.0,
            },
            McConfig {
                method: kmeans_fast,
                size: 16,
                grid: None,
                opts: EstimationOptions::default(),
            },
        )),
        "constant-effect" => Some((
            uniform_piecewise(2.0),
            McConfig {
                method: aligned_cem,
                size: 0,
                grid: None,
                opts: EstimationOptions::default(),
            },
        )),
        "aligned-piecewise" => Some((
            uniform_piecewise(2.0),
            McConfig {
                method: aligned_cem,
                size: 0,
                grid: None,
                opts: EstimationOptions::default(),
            },
        )),
        "smooth-linear" => Some((
            SimConfig {
                n: 2000,
                p: 2,
                law: ConfounderLaw::Gaussian,
                mu0: Surface::Linear {
                    intercept: 0.0,
                    coefs: vec![1.0, 1.0],
                },
                mu1: Surface::Linear {
                    intercept: 2.0,
                    coefs: vec![1.0, 1.0],
                },
                propensity: Logistic {
                    intercept: 0.0,
                    coefs: vec![1.0, 0.5],
                },
                noise_sd: 1.0,
            },
            McConfig {
                method: kmeans_fast,
                size: 16,
                grid: None,
                opts: EstimationOptions::default(),
            },
        )),
        _ => None,
    }
}
