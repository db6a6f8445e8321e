//! `coarsen`: stratification-based causal effect estimation from the
//! command line. Subcommands: `estimate` (single run), `bias-correct`
//! (1/J extrapolation over a grid), `simulate` (Monte Carlo study),
//! `strata` (stratify-only dump).

mod config;
mod report;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use coarsen::cem::Estimand;
use coarsen::dataset::{load_csv, standardize, Dataset, LoadReport, MissingPolicy};
use coarsen::error::Error;
use coarsen::estimator::VariancePolicy;
use coarsen::extrapolate::run_grid;
use coarsen::kmeans::Init;
use coarsen::pipeline::{estimate_once, stratify, EstimationOptions, StratifyMethod};
use coarsen::rf::ProximityMode;
use coarsen::sim::{run_mc_detailed, scenario, McConfig, SimConfig};
use coarsen::Result;

use config::{load_run_file, load_schema, ParsedSchema, RunFile};
use report::Report;

#[derive(Parser)]
#[command(name = "coarsen", version, about = "Stratified causal effect estimation")]
struct Cli {
    /// Worker threads (results are identical for any value).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimate the causal effect at a single strata count.
    Estimate(EstimateArgs),
    /// Run a grid of strata counts and extrapolate to 1/J = 0.
    BiasCorrect(BiasCorrectArgs),
    /// Monte Carlo study on a synthetic scenario.
    Simulate(SimulateArgs),
    /// Write stratum labels and counts as CSV, no estimation.
    Strata(StrataArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum MethodArg {
    Cem,
    Kmeans,
    Rf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EstimandArg {
    Ace,
    Acet,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightModeArg {
    Retained,
    Total,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariancePolicyArg {
    ZeroWithWarning,
    DropStratum,
    Error,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProxArg {
    Oob,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum MissingArg {
    Reject,
    DropRows,
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV (header row required).
    #[arg(long)]
    data: PathBuf,
    /// Sidecar TOML declaring each column's kind and role.
    #[arg(long)]
    schema: PathBuf,
    /// Missing-cell policy ("" and "NA" count as missing).
    #[arg(long, value_enum)]
    missing: Option<MissingArg>,
    /// Z-score continuous confounders before stratifying.
    #[arg(long)]
    standardize: bool,
}

#[derive(Args)]
struct MethodArgs {
    /// Optional run-config TOML; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Strata count (k-means/RF) or per-column bin count (CEM; 0 = Sturges).
    #[arg(long)]
    k: Option<usize>,
    /// Master seed; required for kmeans/rf.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long)]
    min_leaf: Option<usize>,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long, value_enum)]
    prox: Option<ProxArg>,
}

#[derive(Args)]
struct EstimationArgs {
    #[arg(long, value_enum)]
    estimand: Option<EstimandArg>,
    #[arg(long, value_enum)]
    weight_mode: Option<WeightModeArg>,
    #[arg(long, value_enum)]
    variance_policy: Option<VariancePolicyArg>,
    /// ACET only: weight strata by n_1j / n_1 instead of n_j / n.
    #[arg(long)]
    conventional_att: bool,
}

#[derive(Args)]
struct EstimateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    method: MethodArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
    /// Report path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BiasCorrectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    method: MethodArgs,
    #[command(flatten)]
    estimation: EstimationArgs,
    /// Strata-count grid, e.g. --grid 2,5,10,20.
    #[arg(long, value_delimiter = ',')]
    grid: Vec<usize>,
    /// Reuse the master seed at every grid point instead of deriving one
    /// per point.
    #[arg(long)]
    shared_seed: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Preset name (null, constant-effect, aligned-piecewise,
    /// smooth-linear) or a TOML file with [sim] and [mc] tables.
    #[arg(long)]
    scenario: Option<String>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override: run the 1/J grid + correction inside every replicate.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<usize>>,
    /// Optional run-config TOML; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write per-replicate estimates (rep,tau_hat,se) as CSV.
    #[arg(long)]
    reps_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct StrataArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    method: MethodArgs,
    /// Labels CSV path (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-stratum counts CSV path.
    #[arg(long)]
    counts_out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Degenerate(_) => 4,
        _ => 3,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match cli.cmd {
        Cmd::Estimate(args) => cmd_estimate(args),
        Cmd::BiasCorrect(args) => cmd_bias_correct(args),
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Strata(args) => cmd_strata(args),
    };
    match outcome {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}

/// Flag > config file > built-in default.
struct Resolved {
    method: StratifyMethod,
    method_name: &'static str,
    size: usize,
    seed: u64,
    opts: EstimationOptions,
    missing: MissingPolicy,
    standardize: bool,
}

fn parse_prox(s: &str) -> Result<ProximityMode> {
    match s {
        "oob" => Ok(ProximityMode::Oob),
        "all" | "all_pairs" => Ok(ProximityMode::AllPairs),
        _ => Err(Error::Config(format!("unknown proximity mode '{s}'"))),
    }
}

fn resolve(
    method: &MethodArgs,
    estimation: &EstimationArgs,
    data: &DataArgs,
    file: &RunFile,
    cem_rules: Option<Vec<coarsen::cem::CoarsenRule>>,
    need_size: bool,
) -> Result<Resolved> {
    let method_name = match method.method {
        Some(MethodArg::Cem) => "cem",
        Some(MethodArg::Kmeans) => "kmeans",
        Some(MethodArg::Rf) => "rf",
        None => match file.method.as_deref() {
            Some("cem") | None => "cem",
            Some("kmeans") => "kmeans",
            Some("rf") => "rf",
            Some(other) => return Err(Error::Config(format!("unknown method '{other}'"))),
        },
    };

    let (built, size) = match method_name {
        "cem" => {
            let bins = method.k.or(file.cem.bins).unwrap_or(0);
            (StratifyMethod::Cem { rules: cem_rules }, bins)
        }
        "kmeans" => {
            let k = match method.k.or(file.kmeans.k) {
                Some(k) => k,
                None if !need_size => 0,
                None => return Err(Error::Config("kmeans needs --k".into())),
            };
            (
                StratifyMethod::KMeans {
                    init: Init::Kmeanspp,
                    max_iter: method.max_iter.or(file.kmeans.max_iter).unwrap_or(100),
                    tol: method.tol.or(file.kmeans.tol).unwrap_or(1e-8),
                    restarts: method.restarts.or(file.kmeans.restarts).unwrap_or(10),
                },
                k,
            )
        }
        _ => {
            let k = match method.k.or(file.rf.k) {
                Some(k) => k,
                None if !need_size => 0,
                None => return Err(Error::Config("rf needs --k".into())),
            };
            let prox = match method.prox {
                Some(ProxArg::Oob) => ProximityMode::Oob,
                Some(ProxArg::All) => ProximityMode::AllPairs,
                None => match &file.rf.prox {
                    Some(s) => parse_prox(s)?,
                    None => ProximityMode::Oob,
                },
            };
            (
                StratifyMethod::Rf {
                    n_trees: method.trees.or(file.rf.trees).unwrap_or(1000),
                    mtry: method.mtry.or(file.rf.mtry),
                    min_leaf: method.min_leaf.or(file.rf.min_leaf).unwrap_or(1),
                    max_depth: method.max_depth.or(file.rf.max_depth),
                    proximity_mode: prox,
                },
                k,
            )
        }
    };

    let seed = match method.seed.or(file.seed) {
        Some(s) => s,
        None if method_name == "cem" => 0,
        None => {
            return Err(Error::Config(format!(
                "--seed is required for method {method_name}"
            )))
        }
    };

    let estimand = match estimation.estimand {
        Some(EstimandArg::Ace) => Estimand::Ace,
        Some(EstimandArg::Acet) => Estimand::Acet,
        None => match file.estimand.as_deref() {
            Some("ace") | None => Estimand::Ace,
            Some("acet") => Estimand::Acet,
            Some(other) => return Err(Error::Config(format!("unknown estimand '{other}'"))),
        },
    };
    let weight_total = match estimation.weight_mode {
        Some(WeightModeArg::Retained) => false,
        Some(WeightModeArg::Total) => true,
        None => match file.weight_mode.as_deref() {
            Some("retained") | None => false,
            Some("total") => true,
            Some(other) => return Err(Error::Config(format!("unknown weight mode '{other}'"))),
        },
    };
    let variance_policy = match estimation.variance_policy {
        Some(VariancePolicyArg::ZeroWithWarning) => VariancePolicy::ZeroWithWarning,
        Some(VariancePolicyArg::DropStratum) => VariancePolicy::DropStratum,
        Some(VariancePolicyArg::Error) => VariancePolicy::Error,
        None => match file.variance_policy.as_deref() {
            Some("zero_with_warning") | None => VariancePolicy::ZeroWithWarning,
            Some("drop_stratum") => VariancePolicy::DropStratum,
            Some("error") => VariancePolicy::Error,
            Some(other) => {
                return Err(Error::Config(format!("unknown variance policy '{other}'")))
            }
        },
    };
    let opts = EstimationOptions {
        estimand,
        weight_total,
        variance_policy,
        conventional_att: estimation.conventional_att
            || file.conventional_att.unwrap_or(false),
        ..EstimationOptions::default()
    };

    let missing = match data.missing {
        Some(MissingArg::Reject) => MissingPolicy::Reject,
        Some(MissingArg::DropRows) => MissingPolicy::DropRows,
        None => match file.missing.as_deref() {
            Some("reject") | None => MissingPolicy::Reject,
            Some("drop_rows") => MissingPolicy::DropRows,
            Some(other) => {
                return Err(Error::Config(format!("unknown missing policy '{other}'")))
            }
        },
    };

    Ok(Resolved {
        method: built,
        method_name,
        size,
        seed,
        opts,
        missing,
        standardize: data.standardize || file.standardize.unwrap_or(false),
    })
}

fn ingest(data: &DataArgs, schema: &ParsedSchema, r: &Resolved) -> Result<(Dataset, LoadReport)> {
    let (d, load) = load_csv(&data.data, &schema.columns, r.missing)?;
    let d = standardize(&d, r.standardize)?;
    Ok((d, load))
}

fn config_echo(data: &DataArgs, r: &Resolved, extra: serde_json::Value) -> serde_json::Value {
    let mut base = json!({
        "data": data.data.display().to_string(),
        "schema": data.schema.display().to_string(),
        "missing": match r.missing {
            MissingPolicy::Reject => "reject",
            MissingPolicy::DropRows => "drop_rows",
        },
        "standardize": r.standardize,
        "method": r.method,
        "size": r.size,
        "options": r.opts,
    });
    if let (Some(obj), Some(more)) = (base.as_object_mut(), extra.as_object()) {
        for (k, v) in more {
            obj.insert(k.clone(), v.clone());
        }
    }
    base
}

fn cmd_estimate(args: EstimateArgs) -> Result<()> {
    let file = load_run_file(args.method.config.as_deref())?;
    let schema = load_schema(&args.data.schema)?;
    let r = resolve(
        &args.method,
        &args.estimation,
        &args.data,
        &file,
        schema.cem_rules.clone(),
        true,
    )?;
    let (d, load) = ingest(&args.data, &schema, &r)?;
    let (est, pruned) = estimate_once(&d, &r.method, r.size, r.seed, &r.opts)?;

    let mut seeds = BTreeMap::new();
    seeds.insert("stratify".to_string(), r.seed);
    let report = Report::new(
        "estimate",
        r.seed,
        seeds,
        config_echo(&args.data, &r, json!({})),
        json!({
            "load": load,
            "estimate": est,
            "realized_strata": pruned.counts,
        }),
    );
    report.write(args.out.as_deref())?;
    if args.out.is_some() {
        println!("method        {}", r.method_name);
        report::print_estimate(&est);
    }
    Ok(())
}

fn cmd_bias_correct(args: BiasCorrectArgs) -> Result<()> {
    let file = load_run_file(args.method.config.as_deref())?;
    let schema = load_schema(&args.data.schema)?;
    let r = resolve(
        &args.method,
        &args.estimation,
        &args.data,
        &file,
        schema.cem_rules.clone(),
        false,
    )?;
    let grid = if args.grid.is_empty() {
        file.grid.clone().unwrap_or_default()
    } else {
        args.grid.clone()
    };
    if grid.is_empty() {
        return Err(Error::Config("bias-correct needs --grid".into()));
    }
    let (d, load) = ingest(&args.data, &schema, &r)?;
    let res = run_grid(&d, &r.method, &grid, &r.opts, r.seed, args.shared_seed)?;

    let mut seeds = BTreeMap::new();
    for p in &res.points {
        seeds.insert(format!("grid_{}", p.requested), p.seed);
    }
    let report = Report::new(
        "bias-correct",
        r.seed,
        seeds,
        config_echo(
            &args.data,
            &r,
            json!({"grid": grid, "shared_seed": args.shared_seed}),
        ),
        json!({
            "load": load,
            "extrapolation": res,
        }),
    );
    report.write(args.out.as_deref())?;
    if args.out.is_some() {
        report::print_extrapolation(&res);
    }
    Ok(())
}

#[derive(Deserialize)]
struct ScenarioFile {
    sim: SimConfig,
    mc: McConfig,
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let file = load_run_file(args.config.as_deref())?;
    let name = args
        .scenario
        .clone()
        .or_else(|| file.scenario.clone())
        .ok_or_else(|| Error::Config("simulate needs --scenario".into()))?;
    let (sim, mut mc) = match scenario(&name) {
        Some(pair) => pair,
        None => {
            let path = Path::new(&name);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "'{name}' is neither a preset scenario nor a file"
                )));
            }
            let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            let parsed: ScenarioFile =
                toml::from_str(&text).map_err(|e| Error::Config(format!("scenario file: {e}")))?;
            (parsed.sim, parsed.mc)
        }
    };
    if let Some(grid) = args.grid.clone().or(file.grid.clone()) {
        mc.grid = Some(grid);
    }
    let reps = args.reps.or(file.reps).unwrap_or(1000);
    let seed = args
        .seed
        .or(file.seed)
        .ok_or_else(|| Error::Config("simulate needs --seed".into()))?;

    let (mc_report, per_rep) = run_mc_detailed(&sim, &mc, reps, seed)?;

    if let Some(path) = &args.reps_csv {
        let mut out = String::from("rep,tau_hat,se\n");
        for r in &per_rep {
            out += &format!("{},{},{}\n", r.rep, r.tau_hat, r.se);
        }
        std::fs::write(path, out).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }

    let report = Report::new(
        "simulate",
        seed,
        BTreeMap::new(),
        json!({
            "scenario": name,
            "reps": reps,
            "sim": sim,
            "mc": mc,
        }),
        json!({ "report": mc_report }),
    );
    report.write(args.out.as_deref())?;
    if args.out.is_some() {
        report::print_mc(&mc_report);
    }
    Ok(())
}

fn cmd_strata(args: StrataArgs) -> Result<()> {
    let file = load_run_file(args.method.config.as_deref())?;
    let schema = load_schema(&args.data.schema)?;
    // estimation options are irrelevant for a label dump
    let est = EstimationArgs {
        estimand: None,
        weight_mode: None,
        variance_policy: None,
        conventional_att: false,
    };
    let r = resolve(&args.method, &est, &args.data, &file, schema.cem_rules.clone(), true)?;
    let (d, _) = ingest(&args.data, &schema, &r)?;
    let s = stratify(&d, &r.method, r.size, r.seed)?;

    let mut labels = String::from("row,stratum\n");
    for (i, &l) in s.labels.iter().enumerate() {
        labels += &format!("{i},{l}\n");
    }
    match &args.out {
        Some(path) => std::fs::write(path, labels).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?,
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(labels.as_bytes()).map_err(|e| Error::Io {
                path: "<stdout>".into(),
                source: e,
            })?;
        }
    }
    if let Some(path) = &args.counts_out {
        let mut counts = String::from("stratum,n,n1,n0\n");
        for (j, c) in s.counts.iter().enumerate() {
            counts += &format!("{j},{},{},{}\n", c.n, c.n1, c.n0);
        }
        std::fs::write(path, counts).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}
