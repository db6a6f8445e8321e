//! Coarsened exact matching: per-column coarsening into a small number of
//! codes, exact matching on the full code tuple to form strata, and
//! pruning of strata that lack a treatment arm.
//!
//! Bin conventions, fixed for reproducibility: equal-width bins span
//! [min, max] of the column, left-closed with the final bin right-closed;
//! cutpoints c1 < ... < ck define the bins (-inf, c1], (c1, c2], ...,
//! (ck, inf).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{compact_strata, ColumnKind, StrataAssignment, StratumCounts, UNASSIGNED};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarsenRule {
    EqualWidth { bins: usize },
    Cutpoints(Vec<f64>),
    CategoricalIdentity,
    CategoricalGrouping(BTreeMap<i64, i64>),
}

/// Default bin count for automatic equal-width coarsening: ceil(log2(n)+1).
pub fn sturges_bins(n: usize) -> usize {
    ((n.max(1) as f64).log2() + 1.0).ceil() as usize
}

/// Apply one coarsening rule to one column, producing integer codes.
pub fn coarsen_column(values: &[f64], kind: ColumnKind, rule: &CoarsenRule) -> Result<Vec<i64>> {
    match (kind, rule) {
        (ColumnKind::Continuous, CoarsenRule::EqualWidth { bins }) => {
            if *bins < 1 {
                return Err(Error::Config("equal_width needs bins >= 1".into()));
            }
            let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if min == max {
                // degenerate constant column: everything in bin 0
                return Ok(vec![0; values.len()]);
            }
            let m = *bins as f64;
            let width = (max - min) / m;
            Ok(values
                .iter()
                .map(|&v| {
                    let b = ((v - min) / width).floor() as i64;
                    b.min(*bins as i64 - 1)
                })
                .collect())
        }
        (ColumnKind::Continuous, CoarsenRule::Cutpoints(cuts)) => {
            if cuts.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config("cutpoints must be strictly increasing".into()));
            }
            Ok(values
                .iter()
                .map(|&v| cuts.iter().filter(|&&c| v > c).count() as i64)
                .collect())
        }
        (ColumnKind::Categorical, CoarsenRule::CategoricalIdentity) => {
            Ok(values.iter().map(|&v| v as i64).collect())
        }
        (ColumnKind::Categorical, CoarsenRule::CategoricalGrouping(map)) => values
            .iter()
            .map(|&v| {
                let code = v as i64;
                map.get(&code).copied().ok_or_else(|| {
                    Error::Config(format!("grouping map does not cover level code {code}"))
                })
            })
            .collect(),
        _ => Err(Error::Config(
            "coarsening rule does not match column kind".into(),
        )),
    }
}

/// Exact matching on full coarsened tuples: two rows share a stratum iff
/// their code tuples are equal. Labels follow tuple lexicographic order.
pub fn exact_match_strata(code_columns: &[Vec<i64>], t: &[u8]) -> StrataAssignment {
    let n = t.len();
    assert!(code_columns.iter().all(|c| c.len() == n), "ragged code columns");
    let tuples: Vec<Vec<i64>> = (0..n)
        .map(|i| code_columns.iter().map(|c| c[i]).collect())
        .collect();
    // BTreeSet iteration is lexicographic over tuples; rank in that order.
    let distinct: BTreeSet<&Vec<i64>> = tuples.iter().collect();
    let lex: BTreeMap<&Vec<i64>, i64> = distinct
        .into_iter()
        .enumerate()
        .map(|(rank, tup)| (tup, rank as i64))
        .collect();
    let labels: Vec<i64> = tuples.iter().map(|tup| lex[tup]).collect();
    let j = lex.len();
    let mut counts = vec![StratumCounts { n: 0, n1: 0, n0: 0 }; j];
    for (i, &l) in labels.iter().enumerate() {
        let c = &mut counts[l as usize];
        c.n += 1;
        if t[i] == 1 {
            c.n1 += 1;
        } else {
            c.n0 += 1;
        }
    }
    StrataAssignment { labels, counts }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimand {
    Ace,
    Acet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrunePolicy {
    Drop,
    Error,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneReport {
    pub estimand: Estimand,
    pub policy: PrunePolicy,
    pub control_only_strata: usize,
    pub treated_only_strata: usize,
    pub dropped_treated_obs: usize,
    pub dropped_control_obs: usize,
    /// ACET only: treated-only strata were discarded, so the estimand now
    /// covers only treated units inside matched strata.
    pub estimand_restricted: bool,
}

/// Drop strata lacking a treatment arm. For ACE both single-arm kinds are
/// dropped (or raise, per policy); for ACET control-only strata are always
/// dropped and treated-only strata are dropped with the restriction flagged.
pub fn prune(
    s: &StrataAssignment,
    t: &[u8],
    estimand: Estimand,
    policy: PrunePolicy,
) -> Result<(StrataAssignment, PruneReport)> {
    assert_eq!(s.labels.len(), t.len());
    let mut control_only = 0usize;
    let mut treated_only = 0usize;
    let mut keep = vec![true; s.j()];
    for (j, c) in s.counts.iter().enumerate() {
        if c.n1 == 0 {
            control_only += 1;
            keep[j] = false;
        } else if c.n0 == 0 {
            treated_only += 1;
            keep[j] = false;
        }
    }

    if estimand == Estimand::Ace && policy == PrunePolicy::Error && (control_only + treated_only) > 0
    {
        return Err(Error::Data(format!(
            "{control_only} control-only and {treated_only} treated-only strata under policy=error"
        )));
    }

    if keep.iter().all(|&k| !k) {
        return Err(Error::Degenerate("no estimable strata survive pruning".into()));
    }

    let mut dropped_treated = 0usize;
    let mut dropped_control = 0usize;
    let raw: Vec<i64> = s
        .labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if l == UNASSIGNED || !keep[l as usize] {
                if l != UNASSIGNED {
                    if t[i] == 1 {
                        dropped_treated += 1;
                    } else {
                        dropped_control += 1;
                    }
                }
                UNASSIGNED
            } else {
                l
            }
        })
        .collect();
    let pruned = compact_strata(&raw, t);
    let report = PruneReport {
        estimand,
        policy,
        control_only_strata: control_only,
        treated_only_strata: treated_only,
        dropped_treated_obs: dropped_treated,
        dropped_control_obs: dropped_control,
        estimand_restricted: estimand == Estimand::Acet && treated_only > 0,
    };
    Ok((pruned, report))
}
