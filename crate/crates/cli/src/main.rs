//! Command-line front end: basis and sparseness verification, flattening,
//! operator evaluation and constant estimation.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{json, Value};

use sparse_lab::constructions::{flatten, verify_flattening};
use sparse_lab::harness::{BasisSpec, ConstantReport, Experiment, ExperimentConfig};
use sparse_lab::measure::FunctionJson;
use sparse_lab::rational::{format_ratio, format_significant, RatioStr, Rational};
use sparse_lab::sparse::{verify_sparseness, BallAverages, SparseJson, SparsenessOutcome};
use sparse_lab::{BallBasis, BallId, CellSpace, StepFunction};

#[derive(Parser, Debug)]
#[command(name = "sparse-lab", version, about = "Ball-bases, sparse operators and flattening on exact finite measure spaces")]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Checks the ball-basis axioms and reports the hull and doubling constants.
    VerifyBasis {
        /// Use the dyadic basis of this depth instead of a config.
        #[arg(long)]
        dyadic: Option<u32>,
    },
    /// Decides sparseness of a collection and prints witnesses or a violating family.
    VerifySparse,
    /// Flattens a function at a threshold and checks the result.
    Flatten,
    /// Evaluates a sparse operator or the maximal function.
    Apply,
    /// Estimates empirical constants over random trials.
    Estimate {
        #[arg(long, value_enum, default_value_t = Kind::Weak)]
        kind: Kind,
        /// Worker threads (0 = one per core); overrides SPARSE_LAB_THREADS.
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Weak,
    Strong,
    Maximal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
enum Operator {
    Sparse,
    #[default]
    Strong,
    Maximal,
}

/// Shared shape of the non-estimate configs; each command reads what it needs.
#[derive(Debug, Deserialize)]
struct TaskConfig {
    basis: BasisSpec,
    #[serde(default = "one")]
    r: u32,
    /// Cell values in leftmost order.
    #[serde(default)]
    values: Option<Vec<RatioStr>>,
    /// Cell values keyed by cell id.
    #[serde(default)]
    function: Option<FunctionJson>,
    #[serde(default)]
    collection: Option<SparseJson>,
    #[serde(default)]
    lambda: Option<RatioStr>,
    #[serde(default)]
    delta: Option<RatioStr>,
    /// Constant the flattening checks are held to.
    #[serde(default)]
    constant: Option<RatioStr>,
    #[serde(default)]
    operator: Operator,
}

fn one() -> u32 {
    1
}

/// Errors that exit with status 2.
#[derive(Debug)]
struct UsageError(anyhow::Error);

enum Outcome {
    Success,
    /// Verification failed; the witness goes to standard output.
    Failure(Value),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failure(witness)) => {
            println!("{}", serde_json::to_string_pretty(&witness).expect("json"));
            ExitCode::from(1)
        }
        Err(UsageError(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn usage<T>(r: Result<T>) -> Result<T, UsageError> {
    r.map_err(UsageError)
}

fn run(cli: &Cli) -> Result<Outcome, UsageError> {
    match &cli.command {
        Command::VerifyBasis { dyadic } => usage(verify_basis(cli, *dyadic)),
        Command::VerifySparse => usage(verify_sparse(cli)),
        Command::Flatten => usage(flatten_cmd(cli)),
        Command::Apply => usage(apply(cli)),
        Command::Estimate { kind, threads } => usage(estimate(cli, *kind, *threads)),
    }
}

fn config_path(cli: &Cli) -> Result<&Path> {
    cli.config.as_deref().ok_or_else(|| anyhow!("--config is required"))
}

fn read_config<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(cli: &Cli, text: &str) -> Result<()> {
    match &cli.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn emit_json(cli: &Cli, value: &Value) -> Result<()> {
    emit(cli, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn load_task(cli: &Cli) -> Result<(TaskConfig, BallBasis, CellSpace)> {
    let path = config_path(cli)?;
    let task: TaskConfig = read_config(path)?;
    let (basis, space) = task.basis.build(path.parent())?;
    Ok((task, basis, space))
}

fn task_function(task: &TaskConfig, space: &CellSpace) -> Result<StepFunction> {
    match (&task.values, &task.function) {
        (Some(v), None) => Ok(space.function(v.iter().map(|x| x.0.clone()).collect())?),
        (None, Some(f)) => Ok(space.function_from_json(f)?),
        _ => bail!("give exactly one of `values` and `function`"),
    }
}

fn verify_basis(cli: &Cli, dyadic: Option<u32>) -> Result<Outcome> {
    #[derive(Deserialize)]
    struct BasisOnly {
        basis: BasisSpec,
    }
    let (basis, space) = match dyadic {
        Some(depth) => BasisSpec::Dyadic { depth }.build(None)?,
        None => {
            let path = config_path(cli)?;
            read_config::<BasisOnly>(path)?.basis.build(path.parent())?
        }
    };
    report_basis(cli, &basis, &space)
}

fn report_basis(cli: &Cli, basis: &BallBasis, space: &CellSpace) -> Result<Outcome> {
    let axioms = basis.verify_axioms(space)?;
    let meta = sparse_lab::harness::BasisMeta::of(space, basis);
    let report = json!({
        "cells": space.len(),
        "balls": basis.len(),
        "K": axioms.k,
        "doubling": meta.doubling,
        "eta": meta.eta,
        "axioms": axioms,
    });
    if axioms.all_ok() {
        emit_json(cli, &report)?;
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::Failure(report))
    }
}

fn verify_sparse(cli: &Cli) -> Result<Outcome> {
    let (task, basis, mut space) = load_task(cli)?;
    let json = task.collection.ok_or_else(|| anyhow!("config needs a `collection`"))?;
    let gamma = json.gamma.0.clone();
    let balls = json.balls.clone();
    if json.witnesses.is_some() {
        let given = sparse_lab::sparse::SparseCollection::from_json(&space, &json)?;
        if let Err(e) = given.validate(&space, &basis) {
            return Ok(Outcome::Failure(json!({ "invalid_witness": e.to_string() })));
        }
    }
    match verify_sparseness(&mut space, &basis, &balls, &gamma)? {
        SparsenessOutcome::Feasible(w) => {
            let refined = basis.refine(&space, &w.remap)?;
            w.collection.validate(&space, &refined)?;
            emit_json(
                cli,
                &json!({
                    "sparse": true,
                    "space": space.to_json(),
                    "collection": w.collection.to_json(&space)?,
                }),
            )?;
            Ok(Outcome::Success)
        }
        SparsenessOutcome::Infeasible(v) => Ok(Outcome::Failure(json!({ "sparse": false, "violating": v }))),
    }
}

fn flatten_cmd(cli: &Cli) -> Result<Outcome> {
    let (task, basis, space) = load_task(cli)?;
    let f = task_function(&task, &space)?;
    let lambda = task.lambda.as_ref().ok_or_else(|| anyhow!("config needs `lambda`"))?;
    let result = flatten(&space, &basis, &f, &lambda.0, task.r, task.delta.map(|d| d.0))?;
    let audit = result.audit()?;
    let constant = task.constant.map(|c| c.0);
    let report = verify_flattening(&result, constant.as_ref().unwrap_or(&Rational::from_integer(0.into())))?;
    let passed = audit.all_ok() && report.level_set_covered && report.g_bounded && (constant.is_none() || report.passed);
    let out = json!({
        "result": result.to_json()?,
        "audit": audit,
        "report": report,
    });
    if passed {
        emit_json(cli, &out)?;
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::Failure(out))
    }
}

fn apply(cli: &Cli) -> Result<Outcome> {
    let (task, basis, space) = load_task(cli)?;
    let f = task_function(&task, &space)?;
    let averages = BallAverages::compute(&space, &basis, &f, task.r)?;
    let collection: Vec<BallId> = task.collection.map(|c| c.balls).unwrap_or_default();
    for b in &collection {
        basis.get(*b)?;
    }
    // (display value, exact value when rational)
    let values: Vec<(String, Option<String>)> = match task.operator {
        Operator::Maximal => {
            let m = averages.maximal(&basis);
            (0..space.len())
                .map(|p| {
                    let v = m.value(p);
                    (format_significant(v.to_f64(), 12), v.exact().map(|e| format_ratio(&e)))
                })
                .collect()
        }
        op => {
            let t = if op == Operator::Sparse {
                averages.sparse_operator(&basis, &collection)
            } else {
                averages.strong_sparse_operator(&basis, &collection)
            };
            t.values()
                .iter()
                .map(|v| (format_significant(v.to_f64(), 12), v.exact().map(|e| format_ratio(&e))))
                .collect()
        }
    };
    let ids: Vec<_> = space.cells().iter().map(|c| c.id).collect();
    match cli.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["cell", "value", "exact"])?;
            for (id, (v, e)) in ids.iter().zip(&values) {
                w.write_record([id.0.to_string(), v.clone(), e.clone().unwrap_or_default()])?;
            }
            emit(cli, &String::from_utf8(w.into_inner()?)?)?;
        }
        Format::Json => {
            let cells: Vec<Value> = ids
                .iter()
                .zip(&values)
                .map(|(id, (v, e))| json!({ "cell": id, "value": v, "exact": e }))
                .collect();
            emit_json(cli, &json!({ "r": task.r, "values": cells }))?;
        }
    }
    Ok(Outcome::Success)
}

fn estimate(cli: &Cli, kind: Kind, threads: Option<usize>) -> Result<Outcome> {
    let path = config_path(cli)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut config = ExperimentConfig::from_json_str(&text)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let mut exp = Experiment::new(config, path.parent())?;
    if let Some(t) = threads {
        exp = exp.with_threads(t);
    }
    let reports: Vec<ConstantReport> = match kind {
        Kind::Weak => vec![exp.estimate_weak()?],
        Kind::Strong => vec![exp.estimate_strong()?],
        Kind::Maximal => exp.estimate_maximal()?,
    };
    for r in &reports {
        exp.write_outputs(r, path.parent())?;
    }
    match cli.format {
        Format::Csv => {
            let mut text = String::new();
            for r in &reports {
                text.push_str(&r.csv_string()?);
            }
            emit(cli, &text)?;
        }
        Format::Json => {
            let value = if reports.len() == 1 {
                serde_json::to_value(&reports[0])?
            } else {
                serde_json::to_value(&reports)?
            };
            emit_json(cli, &value)?;
        }
    }
    let failed = reports
        .iter()
        .filter_map(|r| r.chain.as_ref())
        .find_map(|c| c.first_failure.clone());
    match failed {
        Some((trial, check)) => Ok(Outcome::Failure(json!({ "chain_failure": { "trial": trial, "check": check } }))),
        None => Ok(Outcome::Success),
    }
}
