//! Report envelope: every command emits one JSON document embedding the
//! tool version, the fully resolved configuration, and every seed used, so
//! a run can be reproduced byte-for-byte.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use coarsen::estimator::Estimate;
use coarsen::extrapolate::ExtrapolationResult;
use coarsen::sim::McReport;
use coarsen::{Error, Result};

#[derive(Debug, Serialize)]
pub struct Report<T: Serialize> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub master_seed: u64,
    /// Per-stage seeds actually used (derived from the master seed).
    pub seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub result: T,
}

impl<T: Serialize> Report<T> {
    pub fn new(
        command: &'static str,
        master_seed: u64,
        seeds: BTreeMap<String, u64>,
        config: serde_json::Value,
        result: T,
    ) -> Self {
        Report {
            tool: "coarsen",
            version: env!("CARGO_PKG_VERSION"),
            command,
            master_seed,
            seeds,
            config,
            result,
        }
    }

    /// Serialize to the output path, or stdout when none is given.
    pub fn write(&self, out: Option<&Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
        match out {
            Some(path) => std::fs::write(path, json + "\n").map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            }),
            None => {
                let mut stdout = std::io::stdout().lock();
                writeln!(stdout, "{json}").map_err(|e| Error::Io {
                    path: "<stdout>".into(),
                    source: e,
                })
            }
        }
    }
}

/// Human-readable view of an estimate, printed when the JSON goes to a file.
pub fn print_estimate(est: &Estimate) {
    println!("estimand      {:?}", est.estimand);
    println!("tau_hat       {:.6e}", est.tau_hat);
    println!("se            {:.6e}", est.se);
    println!("z             {:.4}", est.z);
    println!("p             {:.4}", est.p);
    println!("ci95          [{:.6e}, {:.6e}]", est.ci.0, est.ci.1);
    println!("strata        {}", est.strata.len());
    if let Some(pr) = &est.prune_report {
        println!(
            "pruned        {} control-only, {} treated-only strata",
            pr.control_only_strata, pr.treated_only_strata
        );
    }
    for w in &est.warnings {
        println!("warning       {w}");
    }
}

pub fn print_extrapolation(res: &ExtrapolationResult) {
    println!("{:>10} {:>10} {:>14} {:>14}", "requested", "realized", "tau_hat", "var_hat");
    for p in &res.points {
        println!(
            "{:>10} {:>10} {:>14.6e} {:>14.6e}",
            p.requested, p.realized_j, p.tau_hat, p.var_hat
        );
    }
    println!("tau_corrected {:.6e} (slope {:.4e}, R2 {:.4})", res.tau_corrected, res.tau_fit.slope, res.tau_fit.r2);
    println!("var_corrected {:.6e} (R2 {:.4})", res.var_corrected, res.var_fit.r2);
    println!("se_corrected  {:.6e}", res.se_corrected);
    for w in &res.warnings {
        println!("warning       {w}");
    }
}

pub fn print_mc(report: &McReport) {
    println!("reps          {} ({} failed)", report.reps_requested, report.reps_failed);
    println!("true_tau      {:.6e}", report.true_tau);
    println!("mean_tau      {:.6e}", report.mean_tau);
    println!("bias          {:.6e}", report.bias);
    println!("emp_sd        {:.6e}", report.emp_sd);
    println!("rmse          {:.6e}", report.rmse);
    if let Some(se) = report.mean_se {
        println!("mean_se       {se:.6e}");
    }
    if let Some(cov) = report.coverage {
        println!("coverage      {cov:.4}");
    }
    if let (Some(ks), Some(pass)) = (report.ks_stat, report.ks_pass) {
        println!("ks            {:.4} ({})", ks, if pass { "pass" } else { "fail" });
    }
    println!("sigma2_oracle {:.6e}", report.sigma2_oracle);
    if let Some(curve) = &report.per_j {
        println!("{:>10} {:>12} {:>14} {:>14}", "requested", "realized_j", "bias", "emp_sd");
        for p in curve {
            println!(
                "{:>10} {:>12.1} {:>14.6e} {:>14.6e}",
                p.requested, p.mean_realized_j, p.bias, p.emp_sd
            );
        }
    }
}
