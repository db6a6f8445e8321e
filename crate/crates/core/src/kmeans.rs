//! Lloyd's k-means with seeded k-means++ initialization, used to quantize
//! the confounder matrix into strata. Determinism contract: given the same
//! (data, config) the fit is identical, independent of thread count; ties
//! in nearest-center assignment break toward the lowest center index.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{compact_strata, StrataAssignment};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::matrix::{sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    Kmeanspp,
    RandomPoints,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub init: Init,
    pub max_iter: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            init: Init::Kmeanspp,
            max_iter: 100,
            tol: 1e-8,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansFit {
    pub centers: Matrix,
    pub labels: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn strata(&self, t: &[u8]) -> StrataAssignment {
        let raw: Vec<i64> = self.labels.iter().map(|&l| l as i64).collect();
        compact_strata(&raw, t)
    }
}

fn init_centers(x: &Matrix, k: usize, init: Init, rng: &mut ChaCha8Rng) -> Matrix {
    let n = x.rows();
    let p = x.cols();
    let mut centers = Matrix::zeros(k, p);
    match init {
        Init::RandomPoints => {
            // sample k distinct rows (partial Fisher-Yates on indices)
            let mut idx: Vec<usize> = (0..n).collect();
            for c in 0..k {
                let j = rng.gen_range(c..n);
                idx.swap(c, j);
                centers.row_mut(c).copy_from_slice(x.row(idx[c]));
            }
        }
        Init::Kmeanspp => {
            let first = rng.gen_range(0..n);
            centers.row_mut(0).copy_from_slice(x.row(first));
            let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
            for c in 1..k {
                let total: f64 = d2.iter().sum();
                let pick = if total > 0.0 {
                    let mut thr = rng.gen::<f64>() * total;
                    let mut chosen = n - 1;
                    for (i, &w) in d2.iter().enumerate() {
                        thr -= w;
                        if thr <= 0.0 {
                            chosen = i;
                            break;
                        }
                    }
                    chosen
                } else {
                    // all mass at existing centers; fall back to uniform
                    rng.gen_range(0..n)
                };
                centers.row_mut(c).copy_from_slice(x.row(pick));
                for i in 0..n {
                    let d = sq_dist(x.row(i), centers.row(c));
                    if d < d2[i] {
                        d2[i] = d;
                    }
                }
            }
        }
    }
    centers
}

fn assign(x: &Matrix, centers: &Matrix, labels: &mut [usize]) -> f64 {
    let mut obj = 0.0;
    for i in 0..x.rows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..centers.rows() {
            let d = sq_dist(x.row(i), centers.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        obj += best_d;
    }
    obj
}

fn lloyd(x: &Matrix, k: usize, init: Init, seed: u64, max_iter: usize, tol: f64) -> KMeansFit {
    let n = x.rows();
    let p = x.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = init_centers(x, k, init, &mut rng);
    let mut labels = vec![0usize; n];
    let mut obj = assign(x, &centers, &mut labels);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < max_iter {
        iterations += 1;
        // recompute means
        let mut sums = Matrix::zeros(k, p);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = labels[i];
            counts[c] += 1;
            for j in 0..p {
                let v = sums.get(c, j) + x.get(i, j);
                sums.set(c, j, v);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..p {
                    centers.set(c, j, sums.get(c, j) / counts[c] as f64);
                }
            }
        }
        // re-seed empty clusters with the point farthest from its center
        let empties: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        for c in empties {
            let far = (0..n)
                .max_by(|&a, &b| {
                    let da = sq_dist(x.row(a), centers.row(labels[a]));
                    let db = sq_dist(x.row(b), centers.row(labels[b]));
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            centers.row_mut(c).copy_from_slice(x.row(far));
            labels[far] = c;
        }

        let prev_obj = obj;
        obj = assign(x, &centers, &mut labels);
        debug_assert!(obj <= prev_obj + 1e-9 * prev_obj.abs().max(1.0));
        let rel = if prev_obj > 0.0 {
            (prev_obj - obj) / prev_obj
        } else {
            0.0
        };
        if rel < tol {
            converged = true;
            break;
        }
    }

    KMeansFit {
        centers,
        labels,
        objective: obj,
        iterations,
        converged,
    }
}

/// Best-of-restarts Lloyd fit. Per-restart seeds derive from `cfg.seed` by
/// restart index; the winner is the lowest objective with the lowest
/// restart index breaking exact ties, so the result does not depend on
/// evaluation order.
pub fn fit_kmeans(x: &Matrix, cfg: &KMeansConfig) -> Result<KMeansFit> {
    let n = x.rows();
    if cfg.k < 1 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if cfg.k > n {
        return Err(Error::Config(format!("k = {} exceeds n = {n}", cfg.k)));
    }
    if cfg.max_iter < 1 || cfg.tol <= 0.0 || cfg.restarts < 1 {
        return Err(Error::Config("max_iter >= 1, tol > 0, restarts >= 1 required".into()));
    }
    let mut best: Option<KMeansFit> = None;
    for r in 0..cfg.restarts {
        let seed = derive_seed(cfg.seed, r as u64);
        let fit = lloyd(x, cfg.k, cfg.init, seed, cfg.max_iter, cfg.tol);
        let better = match &best {
            None => true,
            Some(b) => fit.objective < b.objective,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

/// Mean squared distance from each row of `x` to its nearest center; the
/// empirical quantization error of order two.
pub fn quantization_error(x: &Matrix, centers: &Matrix) -> f64 {
    assert_eq!(x.cols(), centers.cols(), "dimension mismatch");
    let n = x.rows();
    let mut total = 0.0;
    for i in 0..n {
        let d = (0..centers.rows())
            .map(|c| sq_dist(x.row(i), centers.row(c)))
            .fold(f64::INFINITY, f64::min);
        total += d;
    }
    total / n as f64
}
