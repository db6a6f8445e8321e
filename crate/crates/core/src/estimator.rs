//! Stratified causal effect estimation. The ACE estimator weights
//! within-stratum treated-control mean differences by stratum share
//! n_j / n; its variance sums (n_j / n)^2 (s2_1j / n_1j + s2_0j / n_0j).
//! The ACET variant replaces the control mean by w_j * Ybar_0j with
//! w_j = (n_1j / n_1) / (n_0j / n_0). Inference is Wald with a normal
//! reference.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::cem::{Estimand, PruneReport};
use crate::dataset::{Dataset, StrataAssignment, UNASSIGNED};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumSummary {
    pub label: usize,
    pub n: usize,
    pub n1: usize,
    pub n0: usize,
    pub mean1: f64,
    pub mean0: f64,
    /// Sample variance (n - 1 denominator); `None` when the arm has a
    /// single observation.
    pub var1: Option<f64>,
    pub var0: Option<f64>,
    /// ACET weight ratio (n_1j / n_1) / (n_0j / n_0) over retained totals.
    pub w: f64,
}

/// How the weight denominator n is chosen: the retained (post-pruning)
/// sample size, so stratum weights sum to one, or the full pre-pruning
/// dataset size (reproduces analyses that divide by the original n).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "n")]
pub enum WeightMode {
    Retained,
    Total(usize),
}

/// Treatment of strata whose arm variance is undefined (singleton arm):
/// count the term as zero (with a warning), drop the stratum from the
/// estimate, or fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariancePolicy {
    ZeroWithWarning,
    DropStratum,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Estimate {
    pub estimand: Estimand,
    pub tau_hat: f64,
    pub var_hat: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
    pub ci: (f64, f64),
    pub weight_mode: WeightMode,
    pub strata: Vec<StratumSummary>,
    pub warnings: Vec<String>,
    pub prune_report: Option<PruneReport>,
}

fn mean_var(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, Some(ss / (n - 1) as f64))
}

/// Per-stratum arm means, sample variances, counts, and the ACET weight
/// ratio. Every retained stratum must contain both arms.
pub fn summarize_strata(d: &Dataset, s: &StrataAssignment) -> Result<Vec<StratumSummary>> {
    if s.labels.len() != d.n() {
        return Err(Error::Data("strata/dataset length mismatch".into()));
    }
    let n1_total: usize = s.counts.iter().map(|c| c.n1).sum();
    let n0_total: usize = s.counts.iter().map(|c| c.n0).sum();
    let mut per: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); s.j()];
    for (i, &l) in s.labels.iter().enumerate() {
        if l == UNASSIGNED {
            continue;
        }
        let (t_vals, c_vals) = &mut per[l as usize];
        if d.t[i] == 1 {
            t_vals.push(d.y[i]);
        } else {
            c_vals.push(d.y[i]);
        }
    }
    let mut out = Vec::with_capacity(s.j());
    for (j, (t_vals, c_vals)) in per.iter().enumerate() {
        if t_vals.is_empty() || c_vals.is_empty() {
            return Err(Error::Data(format!(
                "stratum {j} lacks a treatment arm; prune before summarizing"
            )));
        }
        let (mean1, var1) = mean_var(t_vals);
        let (mean0, var0) = mean_var(c_vals);
        let n1 = t_vals.len();
        let n0 = c_vals.len();
        let w = (n1 as f64 / n1_total as f64) / (n0 as f64 / n0_total as f64);
        out.push(StratumSummary {
            label: j,
            n: n1 + n0,
            n1,
            n0,
            mean1,
            mean0,
            var1,
            var0,
            w,
        });
    }
    Ok(out)
}

fn weight_denominator(summaries: &[StratumSummary], mode: WeightMode) -> f64 {
    match mode {
        WeightMode::Retained => summaries.iter().map(|s| s.n).sum::<usize>() as f64,
        WeightMode::Total(n) => n as f64,
    }
}

struct VarianceTerm {
    value: f64,
    undefined: bool,
}

fn variance_term(s: &StratumSummary, w_sq: f64) -> VarianceTerm {
    match (s.var1, s.var0) {
        (Some(v1), Some(v0)) => VarianceTerm {
            value: v1 / s.n1 as f64 + w_sq * v0 / s.n0 as f64,
            undefined: false,
        },
        (v1, v0) => VarianceTerm {
            value: v1.map_or(0.0, |v| v / s.n1 as f64)
                + v0.map_or(0.0, |v| w_sq * v / s.n0 as f64),
            undefined: true,
        },
    }
}

fn estimate_inner(
    estimand: Estimand,
    summaries: &[StratumSummary],
    weight_mode: WeightMode,
    policy: VariancePolicy,
    control_weight: impl Fn(&StratumSummary) -> f64,
    stratum_weight: impl Fn(&StratumSummary, f64) -> f64,
) -> Result<Estimate> {
    if summaries.is_empty() {
        return Err(Error::Degenerate("no strata to estimate from".into()));
    }
    let denom = weight_denominator(summaries, weight_mode);
    let mut warnings = Vec::new();
    let mut tau = 0.0;
    let mut var = 0.0;
    for s in summaries {
        let cw = control_weight(s);
        let term = variance_term(s, cw * cw);
        if term.undefined {
            match policy {
                VariancePolicy::Error => {
                    return Err(Error::Data(format!(
                        "stratum {} has an undefined arm variance under policy=error",
                        s.label
                    )))
                }
                VariancePolicy::DropStratum => {
                    warnings.push(format!(
                        "stratum {} dropped: undefined arm variance",
                        s.label
                    ));
                    continue;
                }
                VariancePolicy::ZeroWithWarning => {
                    warnings.push(format!(
                        "stratum {}: undefined arm variance treated as zero",
                        s.label
                    ));
                }
            }
        }
        let wj = stratum_weight(s, denom);
        tau += wj * (s.mean1 - cw * s.mean0);
        var += wj * wj * term.value;
    }
    let (z, p, ci) = wald_inference(tau, var, 0.05)?;
    if var == 0.0 {
        warnings.push("zero estimated variance; p-value is degenerate".into());
    }
    Ok(Estimate {
        estimand,
        tau_hat: tau,
        var_hat: var,
        se: var.sqrt(),
        z,
        p,
        ci,
        weight_mode,
        strata: summaries.to_vec(),
        warnings,
        prune_report: None,
    })
}

/// Average causal effect over all strata, weights n_j / n.
pub fn estimate_ace(
    summaries: &[StratumSummary],
    weight_mode: WeightMode,
    policy: VariancePolicy,
) -> Result<Estimate> {
    estimate_inner(
        Estimand::Ace,
        summaries,
        weight_mode,
        policy,
        |_| 1.0,
        |s, denom| s.n as f64 / denom,
    )
}

/// Average causal effect on the treated. With `conventional_att = false`
/// strata are weighted by n_j / n and controls by w_j (the printed form);
/// with `true` strata are weighted n_1j / n_1 with unweighted controls (the
/// conventional ATT form).
pub fn estimate_acet(
    summaries: &[StratumSummary],
    weight_mode: WeightMode,
    policy: VariancePolicy,
    conventional_att: bool,
) -> Result<Estimate> {
    if conventional_att {
        let n1_total: usize = summaries.iter().map(|s| s.n1).sum();
        estimate_inner(
            Estimand::Acet,
            summaries,
            weight_mode,
            policy,
            |_| 1.0,
            move |s, _| s.n1 as f64 / n1_total as f64,
        )
    } else {
        estimate_inner(
            Estimand::Acet,
            summaries,
            weight_mode,
            policy,
            |s| s.w,
            |s, denom| s.n as f64 / denom,
        )
    }
}

/// Wald statistic, two-sided normal p-value and (1 - alpha) CI. A zero
/// variance degenerates to p = 0 (p = 1 when tau is exactly zero).
pub fn wald_inference(tau: f64, var: f64, alpha: f64) -> Result<(f64, f64, (f64, f64))> {
    if var < 0.0 {
        return Err(Error::Data("negative variance".into()));
    }
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::Config("alpha must be in (0, 1)".into()));
    }
    let se = var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    if se == 0.0 {
        let (z, p) = if tau == 0.0 { (0.0, 1.0) } else { (f64::INFINITY * tau.signum(), 0.0) };
        return Ok((z, p, (tau, tau)));
    }
    let z = tau / se;
    let p = 2.0 * (1.0 - normal.cdf(z.abs()));
    let crit = normal.inverse_cdf(1.0 - alpha / 2.0);
    Ok((z, p, (tau - crit * se, tau + crit * se)))
}
