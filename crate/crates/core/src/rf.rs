//! Unsupervised random-forest stratification: synthesize a second class by
//! independent sampling from each column's empirical marginal, fit a CART
//! classification forest to real-vs-synthetic, read off the proximity
//! matrix between real rows, and Ward-cluster 1 - proximity into strata.
//!
//! Determinism contract: per-tree seeds derive from the master seed by tree
//! index and proximity accumulation runs in tree-index order, so the full
//! pipeline is bit-identical regardless of thread count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnKind, StrataAssignment};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::ward::ward_cut;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProximityMode {
    AllPairs,
    Oob,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features tried per split; defaults to ceil(sqrt(p)).
    pub mtry: Option<usize>,
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
    pub proximity_mode: ProximityMode,
}

impl ForestConfig {
    pub fn new(n_trees: usize, seed: u64) -> Self {
        ForestConfig {
            n_trees,
            mtry: None,
            min_leaf: 1,
            max_depth: None,
            seed,
            proximity_mode: ProximityMode::Oob,
        }
    }
}

/// Real rows first (class 1), synthetic rows after (class 0).
#[derive(Debug, Clone)]
pub struct AugmentedData {
    pub x: Matrix,
    pub labels: Vec<u8>,
}

/// Breiman's unsupervised-forest device: n synthetic rows, each column
/// drawn independently (with replacement) from that column's empirical
/// marginal in `x`.
pub fn synthesize_second_class(x: &Matrix, seed: u64) -> AugmentedData {
    let n = x.rows();
    let p = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).to_vec()).collect();
    for _ in 0..n {
        let mut row = Vec::with_capacity(p);
        for j in 0..p {
            let src = rng.gen_range(0..n);
            row.push(x.get(src, j));
        }
        rows.push(row);
    }
    let mut labels = vec![1u8; n];
    labels.extend(std::iter::repeat_n(0u8, n));
    AugmentedData {
        x: Matrix::from_rows(&rows),
        labels,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum SplitRule {
    /// Go left when value <= threshold.
    Numeric(f64),
    /// Go left when the level code is in the set (sorted).
    Categorical(Vec<i64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Node {
    Leaf { pred: u8 },
    Split { feature: usize, rule: SplitRule, left: usize, right: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Terminal node index for a feature row.
    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { .. } => return at,
                Node::Split { feature, rule, left, right } => {
                    let v = row[*feature];
                    let go_left = match rule {
                        SplitRule::Numeric(thr) => v <= *thr,
                        SplitRule::Categorical(set) => set.binary_search(&(v as i64)).is_ok(),
                    };
                    at = if go_left { *left } else { *right };
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        match self.nodes[self.leaf_of(row)] {
            Node::Leaf { pred } => pred,
            Node::Split { .. } => unreachable!(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forest {
    pub trees: Vec<Tree>,
    /// Per tree: out-of-bag flag for each training row.
    pub oob: Vec<Vec<bool>>,
    pub n_train: usize,
}

fn gini(n1: usize, n0: usize) -> f64 {
    let n = (n1 + n0) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p1 = n1 as f64 / n;
    let p0 = n0 as f64 / n;
    1.0 - p1 * p1 - p0 * p0
}

struct BestSplit {
    feature: usize,
    rule: SplitRule,
    decrease: f64,
}

/// Best Gini split for one feature over the rows of a node; numeric
/// features use midpoint thresholds, categorical features prefix splits of
/// levels ordered by class-1 rate.
fn best_split_for_feature(
    x: &Matrix,
    labels: &[u8],
    rows: &[usize],
    feature: usize,
    kind: ColumnKind,
    min_leaf: usize,
    parent_gini: f64,
) -> Option<(SplitRule, f64)> {
    let n = rows.len();
    let total1 = rows.iter().filter(|&&r| labels[r] == 1).count();
    let total0 = n - total1;

    match kind {
        ColumnKind::Continuous => {
            let mut vals: Vec<(f64, u8)> =
                rows.iter().map(|&r| (x.get(r, feature), labels[r])).collect();
            vals.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut left1 = 0usize;
            let mut left0 = 0usize;
            let mut best: Option<(f64, f64)> = None; // (threshold, decrease)
            for i in 0..n - 1 {
                if vals[i].1 == 1 {
                    left1 += 1;
                } else {
                    left0 += 1;
                }
                if vals[i].0 == vals[i + 1].0 {
                    continue;
                }
                let nl = i + 1;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let g = parent_gini
                    - (nl as f64 / n as f64) * gini(left1, left0)
                    - (nr as f64 / n as f64) * gini(total1 - left1, total0 - left0);
                if best.is_none_or(|(_, bd)| g > bd) {
                    best = Some(((vals[i].0 + vals[i + 1].0) / 2.0, g));
                }
            }
            best.map(|(thr, d)| (SplitRule::Numeric(thr), d))
        }
        ColumnKind::Categorical => {
            // per-level class counts
            let mut stats: std::collections::BTreeMap<i64, (usize, usize)> = Default::default();
            for &r in rows {
                let code = x.get(r, feature) as i64;
                let e = stats.entry(code).or_insert((0, 0));
                if labels[r] == 1 {
                    e.0 += 1;
                } else {
                    e.1 += 1;
                }
            }
            if stats.len() < 2 {
                return None;
            }
            // order levels by class-1 rate, code breaking ties
            let mut levels: Vec<(i64, usize, usize)> =
                stats.into_iter().map(|(c, (a, b))| (c, a, b)).collect();
            levels.sort_by(|a, b| {
                let ra = a.1 as f64 / (a.1 + a.2) as f64;
                let rb = b.1 as f64 / (b.1 + b.2) as f64;
                ra.partial_cmp(&rb).unwrap().then(a.0.cmp(&b.0))
            });
            let mut left1 = 0usize;
            let mut left0 = 0usize;
            let mut best: Option<(usize, f64)> = None; // (prefix length, decrease)
            for (i, lv) in levels.iter().take(levels.len() - 1).enumerate() {
                left1 += lv.1;
                left0 += lv.2;
                let nl = left1 + left0;
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let g = parent_gini
                    - (nl as f64 / n as f64) * gini(left1, left0)
                    - (nr as f64 / n as f64) * gini(total1 - left1, total0 - left0);
                if best.is_none_or(|(_, bd)| g > bd) {
                    best = Some((i + 1, g));
                }
            }
            best.map(|(prefix, d)| {
                let mut set: Vec<i64> = levels[..prefix].iter().map(|l| l.0).collect();
                set.sort_unstable();
                (SplitRule::Categorical(set), d)
            })
        }
    }
}

fn grow_tree(
    x: &Matrix,
    labels: &[u8],
    kinds: &[ColumnKind],
    boot_rows: Vec<usize>,
    mtry: usize,
    min_leaf: usize,
    max_depth: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Tree {
    let p = x.cols();
    let mut nodes: Vec<Node> = Vec::new();
    // (node index, rows, depth) work stack
    let mut stack: Vec<(usize, Vec<usize>, usize)> = Vec::new();
    nodes.push(Node::Leaf { pred: 0 });
    stack.push((0, boot_rows, 0));

    while let Some((at, rows, depth)) = stack.pop() {
        let n1 = rows.iter().filter(|&&r| labels[r] == 1).count();
        let n0 = rows.len() - n1;
        let majority = if n1 * 2 > rows.len() { 1 } else { 0 };
        let pure = n1 == 0 || n0 == 0;
        let depth_capped = max_depth.is_some_and(|d| depth >= d);
        if pure || rows.len() < 2 * min_leaf.max(1) || depth_capped {
            nodes[at] = Node::Leaf { pred: majority };
            continue;
        }

        // sample mtry features without replacement
        let mut feats: Vec<usize> = (0..p).collect();
        for i in 0..mtry.min(p) {
            let j = rng.gen_range(i..p);
            feats.swap(i, j);
        }
        let parent = gini(n1, n0);
        let mut best: Option<BestSplit> = None;
        for &f in feats.iter().take(mtry.min(p)) {
            if let Some((rule, d)) =
                best_split_for_feature(x, labels, &rows, f, kinds[f], min_leaf, parent)
            {
                let better = match &best {
                    None => d > 0.0,
                    Some(b) => d > b.decrease,
                };
                if better {
                    best = Some(BestSplit { feature: f, rule, decrease: d });
                }
            }
        }
        let Some(split) = best else {
            nodes[at] = Node::Leaf { pred: majority };
            continue;
        };

        let (mut left_rows, mut right_rows) = (Vec::new(), Vec::new());
        for &r in &rows {
            let v = x.get(r, split.feature);
            let go_left = match &split.rule {
                SplitRule::Numeric(thr) => v <= *thr,
                SplitRule::Categorical(set) => set.binary_search(&(v as i64)).is_ok(),
            };
            if go_left {
                left_rows.push(r);
            } else {
                right_rows.push(r);
            }
        }
        debug_assert!(!left_rows.is_empty() && !right_rows.is_empty());
        let li = nodes.len();
        nodes.push(Node::Leaf { pred: 0 });
        let ri = nodes.len();
        nodes.push(Node::Leaf { pred: 0 });
        nodes[at] = Node::Split {
            feature: split.feature,
            rule: split.rule,
            left: li,
            right: ri,
        };
        // push right first so left is processed first (cosmetic; ids are
        // assigned above, so traversal order does not affect the tree)
        stack.push((ri, right_rows, depth + 1));
        stack.push((li, left_rows, depth + 1));
    }
    Tree { nodes }
}

/// Fit a bootstrap CART ensemble classifying `labels` (two classes
/// required) from `x`. Column kinds pick the split search per feature.
pub fn fit_forest(
    x: &Matrix,
    labels: &[u8],
    kinds: &[ColumnKind],
    cfg: &ForestConfig,
) -> Result<Forest> {
    let n = x.rows();
    let p = x.cols();
    if labels.len() != n {
        return Err(Error::Data("labels length mismatch".into()));
    }
    if kinds.len() != p {
        return Err(Error::Data("column kinds length mismatch".into()));
    }
    if cfg.n_trees < 1 {
        return Err(Error::Config("n_trees must be >= 1".into()));
    }
    let has1 = labels.contains(&1);
    let has0 = labels.contains(&0);
    if !(has1 && has0) {
        return Err(Error::Data("both classes must be present".into()));
    }
    let mtry = cfg.mtry.unwrap_or_else(|| (p as f64).sqrt().ceil() as usize);
    if mtry < 1 || mtry > p {
        return Err(Error::Config(format!("mtry = {mtry} out of range 1..={p}")));
    }

    let fitted: Vec<(Tree, Vec<bool>)> = (0..cfg.n_trees)
        .into_par_iter()
        .map(|ti| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ti as u64));
            let mut inbag = vec![false; n];
            let mut boot = Vec::with_capacity(n);
            for _ in 0..n {
                let r = rng.gen_range(0..n);
                inbag[r] = true;
                boot.push(r);
            }
            let tree = grow_tree(
                x,
                labels,
                kinds,
                boot,
                mtry,
                cfg.min_leaf.max(1),
                cfg.max_depth,
                &mut rng,
            );
            let oob = inbag.iter().map(|&b| !b).collect();
            (tree, oob)
        })
        .collect();

    let mut trees = Vec::with_capacity(cfg.n_trees);
    let mut oob = Vec::with_capacity(cfg.n_trees);
    for (t, o) in fitted {
        trees.push(t);
        oob.push(o);
    }
    Ok(Forest { trees, oob, n_train: n })
}

impl Forest {
    /// Out-of-bag misclassification rate: each row is voted on only by
    /// trees whose bootstrap missed it; rows never out-of-bag are skipped.
    pub fn oob_error(&self, x: &Matrix, labels: &[u8]) -> f64 {
        let n = x.rows();
        let mut wrong = 0usize;
        let mut voted = 0usize;
        for i in 0..n {
            let mut v1 = 0usize;
            let mut v0 = 0usize;
            for (tree, oob) in self.trees.iter().zip(&self.oob) {
                if !oob[i] {
                    continue;
                }
                if tree.predict(x.row(i)) == 1 {
                    v1 += 1;
                } else {
                    v0 += 1;
                }
            }
            if v1 + v0 == 0 {
                continue;
            }
            voted += 1;
            let pred = if v1 > v0 { 1 } else { 0 };
            if pred != labels[i] {
                wrong += 1;
            }
        }
        if voted == 0 {
            return f64::NAN;
        }
        wrong as f64 / voted as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProximityMatrix {
    pub m: Matrix,
    pub mode: ProximityMode,
}

/// Proximity between the first `x.rows()` training rows (the real rows of
/// an augmented dataset). All-pairs: fraction of trees sharing a terminal
/// node. Oob: fraction among trees where both rows are out-of-bag, zero
/// when no such tree exists.
pub fn proximity(forest: &Forest, x: &Matrix, mode: ProximityMode) -> ProximityMatrix {
    let n = x.rows();
    assert!(n <= forest.n_train, "more rows than the forest was trained on");
    let leaves: Vec<Vec<usize>> = forest
        .trees
        .par_iter()
        .map(|t| (0..n).map(|i| t.leaf_of(x.row(i))).collect())
        .collect();

    let mut num = vec![0u32; n * n];
    let mut den = vec![0u32; n * n];
    for (ti, leaf) in leaves.iter().enumerate() {
        match mode {
            ProximityMode::AllPairs => {
                for i in 0..n {
                    for j in i..n {
                        if leaf[i] == leaf[j] {
                            num[i * n + j] += 1;
                        }
                        den[i * n + j] += 1;
                    }
                }
            }
            ProximityMode::Oob => {
                let oob = &forest.oob[ti];
                let oob_rows: Vec<usize> = (0..n).filter(|&i| oob[i]).collect();
                for (a, &i) in oob_rows.iter().enumerate() {
                    for &j in &oob_rows[a..] {
                        if leaf[i] == leaf[j] {
                            num[i * n + j] += 1;
                        }
                        den[i * n + j] += 1;
                    }
                }
            }
        }
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if den[i * n + j] > 0 {
                num[i * n + j] as f64 / den[i * n + j] as f64
            } else {
                0.0
            };
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    ProximityMatrix { m, mode }
}

/// Full unsupervised pipeline: synthesize -> fit -> proximity ->
/// Ward-cut at `k` strata. Returns the strata plus the proximity matrix
/// for auditing.
pub fn rf_strata(
    x: &Matrix,
    kinds: &[ColumnKind],
    cfg: &ForestConfig,
    k: usize,
    t: &[u8],
) -> Result<(StrataAssignment, ProximityMatrix)> {
    let aug = synthesize_second_class(x, derive_seed(cfg.seed, u64::MAX));
    let forest = fit_forest(&aug.x, &aug.labels, kinds, cfg)?;
    let prox = proximity(&forest, x, cfg.proximity_mode);
    let n = x.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                d.set(i, j, 1.0 - prox.m.get(i, j));
            }
        }
    }
    let strata = ward_cut(&d, k, t)?;
    Ok((strata, prox))
}
