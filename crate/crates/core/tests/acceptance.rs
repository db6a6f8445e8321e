//! Acceptance suite: one test per release criterion, each printing a
//! single PASS line (a failed assertion is the FAIL line). Run with
//! `cargo test --test acceptance -- --nocapture` to see every verdict.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use coarsen::dataset::{compact_strata, ColumnKind, Dataset, StrataAssignment};
use coarsen::estimator::{
    estimate_ace, estimate_acet, summarize_strata, VariancePolicy, WeightMode,
};
use coarsen::extrapolate::{extrapolate_points, GridPoint};
use coarsen::kmeans::{fit_kmeans, KMeansConfig};
use coarsen::pipeline::{estimate_strata, EstimationOptions, StratifyMethod};
use coarsen::rf::{fit_forest, rf_strata, ForestConfig, ProximityMode};
use coarsen::sim::{run_mc, scenario};
use coarsen::Matrix;

fn replay(js: &[usize], taus: &[f64], vars: &[f64]) -> (f64, f64) {
    let points: Vec<GridPoint> = js
        .iter()
        .zip(taus.iter().zip(vars))
        .map(|(&j, (&t, &v))| GridPoint {
            requested: j,
            realized_j: j,
            tau_hat: t,
            var_hat: v,
            seed: 0,
        })
        .collect();
    let res = extrapolate_points(points, Vec::new()).unwrap();
    (res.tau_corrected, res.var_corrected)
}

// Criterion 1: recorded cesarean-study grids replayed through the OLS
// extrapolation reproduce the published intercepts.
#[test]
fn criterion_1_recorded_grid_intercepts() {
    let (tau, var) = replay(
        &[2, 5, 10, 20, 45],
        &[0.04347558, 0.04300296, 0.008925207, 0.00460203, 0.0002226695],
        &[2.270514e-05, 2.362881e-05, 2.438034e-05, 2.440448e-05, 2.495849e-05],
    );
    assert!((tau - 0.00387).abs() < 1e-4, "kmeans tau intercept {tau}");
    assert!((var - 2.477363e-05).abs() < 1e-9, "kmeans var intercept {var}");

    let (tau, var) = replay(
        &[5, 7, 10, 20, 40],
        &[0.0120924, 0.01096943, 0.008772231, 0.004587131, 0.0001869272],
        &[1.969936e-05, 2.055659e-05, 2.281092e-05, 2.487004e-05, 2.500779e-05],
    );
    assert!((tau - 0.0005276872).abs() < 1e-6, "rf tau intercept {tau}");
    assert!((var - 2.608433e-05).abs() < 1e-9, "rf var intercept {var}");
    println!("PASS criterion 1: recorded grid intercepts reproduced");
}

/// Random small instance where every stratum holds both arms.
fn random_instance(rng: &mut ChaCha8Rng) -> (Dataset, StrataAssignment) {
    let j = rng.gen_range(2..=6usize);
    loop {
        let n = rng.gen_range((4 * j).max(10)..=50);
        let mut labels = Vec::with_capacity(n);
        let mut t = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n);
        for i in 0..n {
            // force the first 2j rows to fill every (stratum, arm) cell
            let (s, arm) = if i < 2 * j {
                (i / 2, (i % 2) as u8)
            } else {
                (rng.gen_range(0..j), rng.gen_range(0..=1u8))
            };
            labels.push(s as i64);
            t.push(arm);
            y.push(rng.gen::<f64>() * 10.0 - 5.0);
        }
        let s = compact_strata(&labels, &t);
        if s.j() != j {
            continue;
        }
        let x = Matrix::from_rows(&vec![vec![0.0]; n]);
        let d = Dataset::from_parts(y, t, x, &[ColumnKind::Continuous]).unwrap();
        return (d, s);
    }
}

fn naive_mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0); // zero_with_warning reading of an undefined term
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, ss / (n - 1.0))
}

/// Direct loop over strata computing the printed ACE/ACET formulas, kept
/// deliberately independent of the library's code paths.
fn naive_estimates(d: &Dataset, s: &StrataAssignment) -> (f64, f64, f64, f64) {
    let n: usize = s.counts.iter().map(|c| c.n).sum();
    let n1: usize = s.counts.iter().map(|c| c.n1).sum();
    let n0: usize = s.counts.iter().map(|c| c.n0).sum();
    let mut tau_ace = 0.0;
    let mut var_ace = 0.0;
    let mut tau_acet = 0.0;
    let mut var_acet = 0.0;
    for j in 0..s.j() {
        let treated: Vec<f64> = (0..d.n())
            .filter(|&i| s.labels[i] == j as i64 && d.t[i] == 1)
            .map(|i| d.y[i])
            .collect();
        let control: Vec<f64> = (0..d.n())
            .filter(|&i| s.labels[i] == j as i64 && d.t[i] == 0)
            .map(|i| d.y[i])
            .collect();
        let (m1, v1) = naive_mean_var(&treated);
        let (m0, v0) = naive_mean_var(&control);
        let (n1j, n0j) = (treated.len() as f64, control.len() as f64);
        let wt = (n1j + n0j) / n as f64;
        tau_ace += wt * (m1 - m0);
        var_ace += wt * wt * (v1 / n1j + v0 / n0j);
        let w = (n1j / n1 as f64) / (n0j / n0 as f64);
        tau_acet += wt * (m1 - w * m0);
        var_acet += wt * wt * (v1 / n1j + w * w * v0 / n0j);
    }
    (tau_ace, var_ace, tau_acet, var_acet)
}

/// Estimating-equation value at tau: the stratified double sum minus tau.
fn estimating_equation(d: &Dataset, s: &StrataAssignment, tau: f64) -> f64 {
    let n: usize = s.counts.iter().map(|c| c.n).sum();
    let mut u = 0.0;
    for (i, &l) in s.labels.iter().enumerate() {
        let c = s.counts[l as usize];
        let wt = c.n as f64 / n as f64;
        u += wt
            * if d.t[i] == 1 {
                d.y[i] / c.n1 as f64
            } else {
                -d.y[i] / c.n0 as f64
            };
    }
    u - tau
}

// Criterion 2: on 200 random small instances the library estimators agree
// with a brute-force recomputation to 1e-12, and the ACE estimate is the
// root of the estimating equation to 1e-10.
#[test]
fn criterion_2_estimator_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xace);
    for case in 0..200 {
        let (d, s) = random_instance(&mut rng);
        let sums = summarize_strata(&d, &s).unwrap();
        let ace = estimate_ace(&sums, WeightMode::Retained, VariancePolicy::ZeroWithWarning)
            .unwrap();
        let acet = estimate_acet(
            &sums,
            WeightMode::Retained,
            VariancePolicy::ZeroWithWarning,
            false,
        )
        .unwrap();
        let (tau_ace, var_ace, tau_acet, var_acet) = naive_estimates(&d, &s);
        assert!((ace.tau_hat - tau_ace).abs() < 1e-12, "case {case} ace tau");
        assert!((ace.var_hat - var_ace).abs() < 1e-12, "case {case} ace var");
        assert!((acet.tau_hat - tau_acet).abs() < 1e-12, "case {case} acet tau");
        assert!((acet.var_hat - var_acet).abs() < 1e-12, "case {case} acet var");
        let u = estimating_equation(&d, &s, ace.tau_hat);
        assert!(u.abs() < 1e-10, "case {case}: U(tau_hat) = {u}");
    }
    println!("PASS criterion 2: estimator oracle equivalence on 200 instances");
}

fn one_d(points: &[f64]) -> Matrix {
    Matrix::from_rows(&points.iter().map(|&v| vec![v]).collect::<Vec<_>>())
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize, scale: f64) -> Matrix {
    Matrix::from_rows(
        &(0..n)
            .map(|_| (0..p).map(|_| rng.gen::<f64>() * scale).collect())
            .collect::<Vec<_>>(),
    )
}

fn co_membership(labels: &[usize]) -> Vec<bool> {
    let n = labels.len();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(labels[i] == labels[j]);
        }
    }
    out
}

// Criterion 3: k-means finds the brute-force optimum on the 1-D fixture,
// Lloyd never worsens the objective with more iterations, and the fit is
// seed-deterministic and invariant to translation/rotation of the inputs.
#[test]
fn criterion_3_kmeans_correctness() {
    // brute force over every 2-labelling of {0, 1, 9, 10}
    let pts = [0.0, 1.0, 9.0, 10.0];
    let mut best = f64::INFINITY;
    for mask in 0..16u32 {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, &v) in pts.iter().enumerate() {
            if mask >> i & 1 == 1 {
                a.push(v);
            } else {
                b.push(v);
            }
        }
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let ss = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        };
        best = best.min(ss(&a) + ss(&b));
    }
    let fit = fit_kmeans(&one_d(&pts), &KMeansConfig::new(2, 17)).unwrap();
    assert!((fit.objective - best).abs() < 1e-12, "fixture not optimal");
    assert!((fit.objective - 1.0).abs() < 1e-12);

    // Lloyd monotonicity: with a single restart, allowing one more
    // iteration can never increase the objective
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for ds in 0..50 {
        let x = random_matrix(&mut rng, 60, 3, 4.0);
        let mut prev = f64::INFINITY;
        for max_iter in 1..=6 {
            let cfg = KMeansConfig {
                max_iter,
                restarts: 1,
                ..KMeansConfig::new(4, 1000 + ds)
            };
            let obj = fit_kmeans(&x, &cfg).unwrap().objective;
            assert!(
                obj <= prev + 1e-9 * prev.abs().max(1.0),
                "dataset {ds}: objective rose at max_iter {max_iter}"
            );
            prev = obj;
        }
    }

    // seeded determinism
    let x = random_matrix(&mut rng, 80, 2, 1.0);
    let cfg = KMeansConfig::new(5, 42);
    let a = fit_kmeans(&x, &cfg).unwrap();
    let b = fit_kmeans(&x, &cfg).unwrap();
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());

    // translation/rotation co-membership invariance on separated blobs
    let mut rows = Vec::new();
    for i in 0..60 {
        let cx = [0.0, 20.0, 40.0][i % 3];
        rows.push(vec![cx + rng.gen::<f64>(), rng.gen::<f64>()]);
    }
    let x = Matrix::from_rows(&rows);
    let (sin, cos) = 0.7f64.sin_cos();
    let moved = Matrix::from_rows(
        &rows
            .iter()
            .map(|r| {
                vec![
                    cos * r[0] - sin * r[1] + 3.5,
                    sin * r[0] + cos * r[1] - 1.25,
                ]
            })
            .collect::<Vec<_>>(),
    );
    let cfg = KMeansConfig::new(3, 7);
    let base = fit_kmeans(&x, &cfg).unwrap();
    let mapped = fit_kmeans(&moved, &cfg).unwrap();
    assert_eq!(
        co_membership(&base.labels),
        co_membership(&mapped.labels),
        "co-membership changed under isometry"
    );
    println!("PASS criterion 3: k-means optimality, monotonicity, determinism, isometry invariance");
}

fn rand_index(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

// Criterion 4: proximity matrix structure, blob recovery, OOB calibration
// on coin-flip labels, and thread-count independence.
#[test]
fn criterion_4_rf_pipeline_properties() {
    let kinds2 = [ColumnKind::Continuous, ColumnKind::Continuous];

    // structure on 20 random datasets
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for ds in 0..20 {
        let x = random_matrix(&mut rng, 30, 2, 2.0);
        let mode = if ds % 2 == 0 {
            ProximityMode::Oob
        } else {
            ProximityMode::AllPairs
        };
        let cfg = ForestConfig {
            proximity_mode: mode,
            ..ForestConfig::new(40, 100 + ds)
        };
        let (_, prox) = rf_strata(&x, &kinds2, &cfg, 3, &[1u8; 30]).unwrap();
        let m = &prox.m;
        for i in 0..30 {
            let diag = m.get(i, i);
            assert!(diag == 1.0 || diag == 0.0, "diagonal {diag}");
            for j in 0..30 {
                let v = m.get(i, j);
                assert!((0.0..=1.0).contains(&v), "proximity out of range: {v}");
                assert_eq!(v.to_bits(), m.get(j, i).to_bits(), "asymmetry at ({i},{j})");
            }
        }
    }

    // two-blob recovery
    let n = 100;
    let mut rows = Vec::new();
    let mut truth = Vec::new();
    for i in 0..n {
        let blob = i % 2;
        truth.push(blob);
        let c = blob as f64 * 10.0;
        rows.push(vec![c + rng.gen::<f64>(), c + rng.gen::<f64>()]);
    }
    let x = Matrix::from_rows(&rows);
    // a mild leaf-size floor keeps the proximity signal from being diluted
    // by noise splits inside pure-real regions
    let cfg = ForestConfig {
        min_leaf: 5,
        ..ForestConfig::new(200, 9)
    };
    let (s, _) = rf_strata(&x, &kinds2, &cfg, 2, &vec![1u8; n]).unwrap();
    let found: Vec<usize> = s.labels.iter().map(|&l| l as usize).collect();
    let ri = rand_index(&truth, &found);
    assert!(ri > 0.95, "two-blob Rand index {ri}");

    // coin-flip labels: the forest cannot beat chance out of bag
    let n = 2000;
    let x = random_matrix(&mut rng, n, 2, 1.0);
    let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1u8)).collect();
    let forest = fit_forest(&x, &labels, &kinds2, &ForestConfig::new(100, 5)).unwrap();
    let err = forest.oob_error(&x, &labels);
    assert!((err - 0.5).abs() < 0.05, "coin-flip OOB error {err}");

    // byte-identical proximity at 1 vs 8 workers through the full pipeline
    let x = random_matrix(&mut rng, 60, 2, 2.0);
    let cfg = ForestConfig::new(80, 31);
    let t: Vec<u8> = (0..60).map(|i| (i % 2) as u8).collect();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| rf_strata(&x, &kinds2, &cfg, 3, &t).unwrap().1.m)
    };
    let a = run(1);
    let b = run(8);
    let same = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    assert!(same, "proximity differs between 1 and 8 workers");
    println!("PASS criterion 4: proximity structure, blob recovery, OOB calibration, thread independence");
}

// Criterion 5: on the aligned-piecewise design the estimator is unbiased
// within Monte Carlo error, the 95% CI covers at nominal rate, and the
// standardized estimates pass a 1% KS normality check.
#[test]
fn criterion_5_sampling_behavior() {
    let (cfg, mc) = scenario("aligned-piecewise").unwrap();
    let reps = 2000;
    let report = run_mc(&cfg, &mc, reps, 0x7e2).unwrap();
    assert_eq!(report.reps_failed, 0, "replicates failed");
    let mc_se = report.emp_sd / (reps as f64).sqrt();
    assert!(
        report.bias.abs() < 3.0 * mc_se,
        "bias {} vs 3*MC-SE {}",
        report.bias,
        3.0 * mc_se
    );
    let cov = report.coverage.unwrap();
    assert!((0.92..=0.97).contains(&cov), "coverage {cov}");
    assert!(
        report.ks_pass.unwrap(),
        "KS stat {} fails at the 1% level",
        report.ks_stat.unwrap()
    );
    println!(
        "PASS criterion 5: bias {:.2e} (3*MC-SE {:.2e}), coverage {:.3}, KS {:.4}",
        report.bias,
        3.0 * mc_se,
        cov,
        report.ks_stat.unwrap()
    );
}

// Criterion 6: bias shrinks as the strata count grows, and the
// extrapolated estimate beats the coarsest grid point.
#[test]
fn criterion_6_bias_decay_and_correction() {
    let (cfg, mut mc) = scenario("smooth-linear").unwrap();
    mc.grid = Some(vec![2, 4, 8, 16, 32]);
    let reps = 500;
    let report = run_mc(&cfg, &mc, reps, 0x6ea).unwrap();
    assert_eq!(report.reps_failed, 0, "replicates failed");
    let curve = report.per_j.as_ref().unwrap();
    assert_eq!(curve.len(), 5);
    for pair in curve.windows(2) {
        let slack = 3.0 * (pair[0].mc_se + pair[1].mc_se);
        assert!(
            pair[1].bias.abs() <= pair[0].bias.abs() + slack,
            "bias rose from K={} ({:.4}) to K={} ({:.4})",
            pair[0].requested,
            pair[0].bias,
            pair[1].requested,
            pair[1].bias
        );
    }
    let corrected_bias = report.bias.abs();
    let coarsest_bias = curve[0].bias.abs();
    assert!(
        corrected_bias < coarsest_bias,
        "corrected bias {corrected_bias} not under K=2 bias {coarsest_bias}"
    );
    println!(
        "PASS criterion 6: |bias| decays over K grid; corrected {:.4} < K=2 {:.4}",
        corrected_bias, coarsest_bias
    );
}

// Criterion 7 (optional, needs the public electronic-fetal-monitoring CSV
// with columns cesarean, monitor, arrest, breech, nullipar, year): CEM on
// the four confounders yields 45 strata with one treated-only stratum and
// reproduces the published risk difference and SE.
#[test]
fn criterion_7_dataset_reproduction() {
    use coarsen::cem::{Estimand, PrunePolicy};
    use coarsen::dataset::{load_csv, ColumnRole, ColumnSpec, MissingPolicy};
    use coarsen::pipeline::stratify;

    let candidates = [
        concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/efm.csv"),
        concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/efm.csv"),
    ];
    let Some(path) = candidates
        .iter()
        .find(|p| std::path::Path::new(p).exists())
    else {
        println!("SKIP criterion 7: EFM dataset not present");
        return;
    };

    let spec = |name: &str, role: ColumnRole| ColumnSpec {
        name: name.into(),
        kind: ColumnKind::Categorical,
        role,
    };
    let schema = vec![
        spec("cesarean", ColumnRole::Outcome),
        spec("monitor", ColumnRole::Treatment),
        spec("arrest", ColumnRole::Confounder),
        spec("breech", ColumnRole::Confounder),
        spec("nullipar", ColumnRole::Confounder),
        spec("year", ColumnRole::Confounder),
    ];
    let (d, _) = load_csv(std::path::Path::new(path), &schema, MissingPolicy::Reject).unwrap();
    let s = stratify(&d, &StratifyMethod::cem_auto(), 0, 0).unwrap();
    assert_eq!(s.j(), 45, "expected 45 CEM strata, got {}", s.j());
    let treated_only = s.counts.iter().filter(|c| c.n0 == 0 && c.n1 > 0).count();
    let control_only = s.counts.iter().filter(|c| c.n1 == 0 && c.n0 > 0).count();
    assert_eq!(treated_only, 1, "expected exactly one treated-only stratum");
    assert_eq!(control_only, 0);

    let opts = EstimationOptions {
        estimand: Estimand::Ace,
        weight_total: true,
        variance_policy: VariancePolicy::ZeroWithWarning,
        prune_policy: PrunePolicy::Drop,
        conventional_att: false,
    };
    let (est, _) = estimate_strata(&d, &s, &opts).unwrap();
    assert!(
        (est.tau_hat - 8.62e-5).abs() / 8.62e-5 < 0.05,
        "risk difference {}",
        est.tau_hat
    );
    assert!((est.se - 0.005).abs() / 0.005 < 0.05, "SE {}", est.se);
    println!("PASS criterion 7: EFM dataset reproduction");
}
