//! One-shot pipeline: build strata with a chosen method, prune, summarize,
//! estimate. The extrapolation grid, the Monte Carlo harness and the CLI
//! all route through here.

use serde::{Deserialize, Serialize};

use crate::cem::{
    coarsen_column, exact_match_strata, prune, sturges_bins, CoarsenRule, Estimand, PrunePolicy,
};
use crate::dataset::{ColumnKind, Dataset, StrataAssignment};
use crate::error::{Error, Result};
use crate::estimator::{
    estimate_ace, estimate_acet, summarize_strata, Estimate, VariancePolicy, WeightMode,
};
use crate::kmeans::{fit_kmeans, Init, KMeansConfig};
use crate::rf::{rf_strata, ForestConfig, ProximityMode};

/// Stratification method, minus the stratum-count knob (supplied per call
/// so the same spec can sweep a grid).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum StratifyMethod {
    /// Coarsened exact matching. With explicit per-column rules the size
    /// knob is ignored; otherwise continuous columns get equal-width bins
    /// (`size` bins, or Sturges when size = 0) and categorical columns
    /// match on identity.
    Cem { rules: Option<Vec<CoarsenRule>> },
    KMeans {
        init: Init,
        max_iter: usize,
        tol: f64,
        restarts: usize,
    },
    Rf {
        n_trees: usize,
        mtry: Option<usize>,
        min_leaf: usize,
        max_depth: Option<usize>,
        proximity_mode: ProximityMode,
    },
}

impl StratifyMethod {
    pub fn cem_auto() -> Self {
        StratifyMethod::Cem { rules: None }
    }

    pub fn kmeans_default() -> Self {
        StratifyMethod::KMeans {
            init: Init::Kmeanspp,
            max_iter: 100,
            tol: 1e-8,
            restarts: 10,
        }
    }

    pub fn rf_default(n_trees: usize) -> Self {
        StratifyMethod::Rf {
            n_trees,
            mtry: None,
            min_leaf: 1,
            max_depth: None,
            proximity_mode: ProximityMode::Oob,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StratifyMethod::Cem { .. } => "cem",
            StratifyMethod::KMeans { .. } => "kmeans",
            StratifyMethod::Rf { .. } => "rf",
        }
    }
}

/// Build (unpruned) strata. For k-means and forests `size` is the cluster
/// count; for CEM it is the per-continuous-column bin count (0 = Sturges),
/// with the realized stratum count emergent from matching.
pub fn stratify(
    d: &Dataset,
    method: &StratifyMethod,
    size: usize,
    seed: u64,
) -> Result<StrataAssignment> {
    match method {
        StratifyMethod::Cem { rules } => {
            let kinds = d.confounder_kinds();
            let rules: Vec<CoarsenRule> = match rules {
                Some(r) => {
                    if r.len() != d.p() {
                        return Err(Error::Config(format!(
                            "expected {} coarsening rules, got {}",
                            d.p(),
                            r.len()
                        )));
                    }
                    r.clone()
                }
                None => kinds
                    .iter()
                    .map(|k| match k {
                        ColumnKind::Continuous => CoarsenRule::EqualWidth {
                            bins: if size == 0 { sturges_bins(d.n()) } else { size },
                        },
                        ColumnKind::Categorical => CoarsenRule::CategoricalIdentity,
                    })
                    .collect(),
            };
            let mut codes = Vec::with_capacity(d.p());
            for j in 0..d.p() {
                codes.push(coarsen_column(&d.x.column(j), kinds[j], &rules[j])?);
            }
            Ok(exact_match_strata(&codes, &d.t))
        }
        StratifyMethod::KMeans {
            init,
            max_iter,
            tol,
            restarts,
        } => {
            let cfg = KMeansConfig {
                k: size,
                seed,
                init: *init,
                max_iter: *max_iter,
                tol: *tol,
                restarts: *restarts,
            };
            let fit = fit_kmeans(&d.x, &cfg)?;
            Ok(fit.strata(&d.t))
        }
        StratifyMethod::Rf {
            n_trees,
            mtry,
            min_leaf,
            max_depth,
            proximity_mode,
        } => {
            let cfg = ForestConfig {
                n_trees: *n_trees,
                mtry: *mtry,
                min_leaf: *min_leaf,
                max_depth: *max_depth,
                seed,
                proximity_mode: *proximity_mode,
            };
            let (s, _) = rf_strata(&d.x, &d.confounder_kinds(), &cfg, size, &d.t)?;
            Ok(s)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimationOptions {
    pub estimand: Estimand,
    /// Divide weights by the full dataset size instead of the retained one.
    pub weight_total: bool,
    pub variance_policy: VariancePolicy,
    pub prune_policy: PrunePolicy,
    /// ACET only: conventional n_1j / n_1 stratum weights.
    pub conventional_att: bool,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            estimand: Estimand::Ace,
            weight_total: false,
            variance_policy: VariancePolicy::ZeroWithWarning,
            prune_policy: PrunePolicy::Drop,
            conventional_att: false,
        }
    }
}

/// Prune + summarize + estimate on already-built strata. Returns the
/// estimate (prune report attached) and the pruned assignment.
pub fn estimate_strata(
    d: &Dataset,
    s: &StrataAssignment,
    opts: &EstimationOptions,
) -> Result<(Estimate, StrataAssignment)> {
    let (pruned, report) = prune(s, &d.t, opts.estimand, opts.prune_policy)?;
    let summaries = summarize_strata(d, &pruned)?;
    let weight_mode = if opts.weight_total {
        WeightMode::Total(d.n())
    } else {
        WeightMode::Retained
    };
    let mut est = match opts.estimand {
        Estimand::Ace => estimate_ace(&summaries, weight_mode, opts.variance_policy)?,
        Estimand::Acet => estimate_acet(
            &summaries,
            weight_mode,
            opts.variance_policy,
            opts.conventional_att,
        )?,
    };
    est.prune_report = Some(report);
    Ok((est, pruned))
}

/// Full single-run pipeline: stratify at `size`, prune, estimate.
pub fn estimate_once(
    d: &Dataset,
    method: &StratifyMethod,
    size: usize,
    seed: u64,
    opts: &EstimationOptions,
) -> Result<(Estimate, StrataAssignment)> {
    let s = stratify(d, method, size, seed)?;
    estimate_strata(d, &s, opts)
}
