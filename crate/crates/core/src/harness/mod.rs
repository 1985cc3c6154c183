//! Randomized experiments: generators, empirical weak- and strong-type
//! constants of sparse operators and of the maximal function, and report
//! emission.
//!
//! Every trial draws its inputs from a seed derived from `(config seed,
//! trial index)`, so reports do not depend on the worker count.

pub mod config;

use std::cmp::Ordering;
use std::io::Write;
use std::path::{Path, PathBuf};

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use config::{BasisSpec, ConfigError, ExperimentConfig, LambdaGrid, Outputs, ValueRange};

use crate::basis::{BallBasis, BallId, BasisError, Doubling, MartingaleTree};
use crate::constructions::{flatten_with, ConstructionError};
use crate::measure::{CellSpace, MeasureError, StepFunction};
use crate::rational::{format_ratio, format_significant, pow, root_bounds, to_f64, Certified, RatioStr, Rational, RootSum};
use crate::sparse::{apply_strong_sparse, BallAverages, RootSumFunction, SparseError};

/// Environment variable overriding the worker count (0 = one per core).
pub const THREADS_ENV: &str = "SPARSE_LAB_THREADS";

/// Precision of the enclosures behind reported decimals.
const REPORT_BITS: u64 = 128;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Construction(#[from] ConstructionError),
    #[error("the function is identically zero")]
    ZeroFunction,
    #[error("lambda must be positive")]
    NonPositiveLambda,
    #[error("strong-type runs need an exponent p")]
    MissingExponent,
    #[error("p must exceed r")]
    ExponentTooSmall,
    #[error("writing report: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("thread pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// The seed of trial `trial` in a run seeded with `seed`.
pub fn trial_seed(seed: u64, trial: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng.next_u64()
}

fn bernoulli<R: Rng>(rng: &mut R, p: &Rational) -> bool {
    if p.is_zero() {
        return false;
    }
    if p >= &Rational::one() {
        return true;
    }
    match (p.numer().to_u64(), p.denom().to_u64()) {
        (Some(n), Some(d)) => rng.gen_range(0..d) < n,
        _ => rng.gen_bool(to_f64(p)),
    }
}

/// A random nonnegative step function, fully determined by `seed`.
pub fn random_step_function(space: &CellSpace, seed: u64, range: &ValueRange) -> StepFunction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_step_function_with(space, &mut rng, range)
}

pub fn random_step_function_with<R: Rng>(space: &CellSpace, rng: &mut R, range: &ValueRange) -> StepFunction {
    let span = &range.max.0 - &range.min.0;
    let steps = BigInt::from(range.steps);
    let values = (0..space.len())
        .map(|_| {
            if bernoulli(rng, &range.zero_probability.0) {
                return Rational::zero();
            }
            let k = rng.gen_range(0..=range.steps);
            &range.min.0 + &span * Rational::new(k.into(), steps.clone())
        })
        .collect();
    space.function(values).expect("values are nonnegative")
}

/// A random `gamma`-sparse collection. Balls are offered with probability
/// `density` in random order and kept when enough whole free cells remain
/// inside them to serve as their disjoint part.
pub fn random_sparse_collection<R: Rng>(
    space: &CellSpace,
    basis: &BallBasis,
    gamma: &Rational,
    density: &Rational,
    rng: &mut R,
) -> Vec<BallId> {
    let mut offered: Vec<BallId> = basis.ids().filter(|_| bernoulli(rng, density)).collect();
    offered.shuffle(rng);
    let mut free = vec![true; space.len()];
    let mut chosen = Vec::new();
    for b in offered {
        let ball = basis.ball(b);
        let need = gamma * &ball.measure;
        let mut got = Rational::zero();
        let mut take = Vec::new();
        for p in ball.set.positions() {
            if got >= need {
                break;
            }
            if free[p] {
                got += space.cell_measure(p);
                take.push(p);
            }
        }
        if got >= need {
            for p in take {
                free[p] = false;
            }
            chosen.push(b);
        }
    }
    chosen.sort();
    chosen
}

/// A random martingale tree of total weight 1 with between 2 and
/// `max_leaves` leaves (when `max_leaves >= 2`). Leaves are split into two or
/// three children; with `skew = Some(eps)` every split gives one child the
/// share `eps`, which makes the basis far from doubling.
pub fn random_martingale_tree<R: Rng>(rng: &mut R, max_leaves: usize, skew: Option<&Rational>) -> MartingaleTree {
    struct Node {
        weight: Rational,
        children: Vec<usize>,
    }
    let mut nodes = vec![Node {
        weight: Rational::one(),
        children: Vec::new(),
    }];
    let mut leaves = vec![0usize];
    let target = if max_leaves < 2 { 1 } else { rng.gen_range(2..=max_leaves) };
    while leaves.len() < target {
        let room = target - leaves.len() + 1;
        let k = if room >= 3 && rng.gen_bool(0.3) { 3 } else { 2 };
        let at = rng.gen_range(0..leaves.len());
        let parent = leaves.swap_remove(at);
        let shares: Vec<Rational> = match skew {
            Some(eps) => {
                let big = (Rational::one() - eps) / Rational::from_integer(BigInt::from(k - 1));
                let small_at = rng.gen_range(0..k);
                (0..k).map(|i| if i == small_at { eps.clone() } else { big.clone() }).collect()
            }
            None => {
                let raw: Vec<u32> = (0..k).map(|_| rng.gen_range(1..=4)).collect();
                let total: u32 = raw.iter().sum();
                raw.iter().map(|&w| Rational::new(w.into(), total.into())).collect()
            }
        };
        for share in shares {
            let weight = &nodes[parent].weight * share;
            nodes.push(Node {
                weight,
                children: Vec::new(),
            });
            let id = nodes.len() - 1;
            nodes[parent].children.push(id);
            leaves.push(id);
        }
    }
    fn build(nodes: &[Node], i: usize) -> MartingaleTree {
        MartingaleTree {
            weight: RatioStr(nodes[i].weight.clone()),
            children: nodes[i].children.iter().map(|&c| build(nodes, c)).collect(),
        }
    }
    build(&nodes, 0)
}

/// `lambda^r mu{A*_{S,r} f > lambda} / ||f||_r^r`, exactly.
pub fn weak_ratio(
    space: &CellSpace,
    basis: &BallBasis,
    collection: &[BallId],
    f: &StepFunction,
    r: u32,
    lambda: &Rational,
) -> Result<Rational, HarnessError> {
    if !lambda.is_positive() {
        return Err(HarnessError::NonPositiveLambda);
    }
    let norm = space.norm_pow(f, r)?;
    if norm.is_zero() {
        return Err(HarnessError::ZeroFunction);
    }
    let op = BallAverages::compute(space, basis, f, r)?.strong_sparse_operator(basis, collection);
    let level = space.measure(&op.level_set(lambda))?;
    Ok(pow(lambda, r) * level / norm)
}

/// One distinct value `v` of an operator output and the weak ratio reached
/// just below it.
#[derive(Debug, Clone)]
pub struct Breakpoint {
    pub value: RootSum,
    /// `mu{T >= v}`.
    pub measure: Rational,
    /// A rational strictly between `v` and the next lower value, so
    /// `{T > probe} = {T >= v}`.
    pub probe: Rational,
    /// `(v^r mu{T >= v} / ||f||_r^r)^(1/r)`, the left limit of the weak
    /// ratio at `v` written as a root sum.
    pub ratio_root: RootSum,
}

impl Breakpoint {
    pub fn ratio(&self) -> Certified {
        certified_pow(&self.ratio_root)
    }
}

fn certified_pow(root: &RootSum) -> Certified {
    let r = root.order();
    if r == 1 {
        return Certified::exact(root.terms().iter().sum());
    }
    let (lo, hi) = root.pow_bounds(r, REPORT_BITS);
    Certified { lo, hi }
}

fn rational_between(upper: &RootSum, lower: &RootSum) -> Rational {
    if upper.order() == 1 {
        let a: Rational = upper.terms().iter().sum();
        let b: Rational = lower.terms().iter().sum();
        return (a + b) / Rational::from_integer(2.into());
    }
    let mut bits = 32;
    loop {
        let (ulo, _) = upper.bounds(bits);
        let (_, lhi) = lower.bounds(bits);
        if ulo > lhi {
            return (ulo + lhi) / Rational::from_integer(2.into());
        }
        assert!(bits < 1 << 16, "breakpoints do not separate");
        bits *= 2;
    }
}

/// The breakpoint grid of the weak ratio of `op`: the supremum over all
/// `lambda > 0` is the largest left limit at a breakpoint.
pub fn breakpoints(space: &CellSpace, op: &RootSumFunction, norm_pow: &Rational) -> Result<Vec<Breakpoint>, HarnessError> {
    if norm_pow.is_zero() {
        return Err(HarnessError::ZeroFunction);
    }
    let levels: Vec<_> = op.upper_level_sets().into_iter().filter(|(v, _)| !v.is_zero()).collect();
    let zero = RootSum::zero(op.r());
    let mut out = Vec::with_capacity(levels.len());
    for (i, (value, set)) in levels.iter().enumerate() {
        let measure = space.measure(set)?;
        let next = levels.get(i + 1).map_or(&zero, |(v, _)| v);
        let scale = &measure / norm_pow;
        let ratio_root = RootSum::from_terms(op.r(), value.terms().iter().map(|t| t * &scale).collect());
        out.push(Breakpoint {
            value: value.clone(),
            measure,
            probe: rational_between(value, next),
            ratio_root,
        });
    }
    Ok(out)
}

/// `||T||_p / ||f||_p` for an operator output given cell by cell.
///
/// Integer `p` gets a certified enclosure; other exponents are evaluated in
/// floating point and widened by a relative `1e-9`.
pub fn strong_ratio(
    space: &CellSpace,
    op_values: &[RootSum],
    f: &StepFunction,
    p: &Rational,
) -> Result<StrongRatio, HarnessError> {
    space.check(f.stamp())?;
    if f.is_zero() {
        return Err(HarnessError::ZeroFunction);
    }
    if let Some(k) = p.to_integer().to_u32().filter(|_| p.is_integer()) {
        let den: Rational = (0..space.len()).map(|c| space.cell_measure(c) * pow(f.value(c), k)).sum();
        let mut lo = Rational::zero();
        let mut hi = Rational::zero();
        for (c, v) in op_values.iter().enumerate() {
            let (l, h) = v.pow_bounds(k, REPORT_BITS);
            lo += space.cell_measure(c) * l;
            hi += space.cell_measure(c) * h;
        }
        let (rlo, _) = root_bounds(&(lo / &den), k, REPORT_BITS);
        let (_, rhi) = root_bounds(&(hi / &den), k, REPORT_BITS);
        return Ok(StrongRatio {
            ratio: Certified { lo: rlo, hi: rhi },
            certified: true,
        });
    }
    let pf = to_f64(p);
    let den: f64 = (0..space.len())
        .map(|c| to_f64(space.cell_measure(c)) * to_f64(f.value(c)).powf(pf))
        .sum();
    let num: f64 = op_values
        .iter()
        .enumerate()
        .map(|(c, v)| to_f64(space.cell_measure(c)) * v.to_f64().powf(pf))
        .sum();
    let v = (num / den).powf(1.0 / pf);
    let slack = |x: f64| Rational::from_float(x).unwrap_or_else(Rational::zero);
    Ok(StrongRatio {
        ratio: Certified {
            lo: slack(v * (1.0 - 1e-9)),
            hi: slack(v * (1.0 + 1e-9)),
        },
        certified: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrongRatio {
    pub ratio: Certified,
    /// Whether the enclosure is rigorous.
    pub certified: bool,
}

/// Outcome of `mu{A*f > lambda} <= mu(E_lambda) + mu{A*g > lambda off E_lambda}`
/// for one threshold, with `(E_lambda, g)` from flattening `f` at `lambda`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChainCheck {
    pub lambda: RatioStr,
    /// `mu{A*f > lambda}`.
    pub level_measure: RatioStr,
    pub e_measure: RatioStr,
    /// `mu{A*g > lambda} minus E_lambda`.
    pub off_e_measure: RatioStr,
    pub holds: bool,
    /// Set when flattening itself failed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs the flattening chain check at `lambda`.
pub fn chain_check(
    space: &CellSpace,
    basis: &BallBasis,
    collection: &[BallId],
    f: &StepFunction,
    averages: &BallAverages,
    lambda: &Rational,
) -> Result<ChainCheck, HarnessError> {
    let r = averages.r();
    let op = averages.strong_sparse_operator(basis, collection);
    let level_measure = space.measure(&op.level_set(lambda))?;
    let res = match flatten_with(space, basis, f, averages, lambda, None) {
        Ok(res) => res,
        Err(e @ ConstructionError::DeltaExhausted { .. }) => {
            return Ok(ChainCheck {
                lambda: RatioStr(lambda.clone()),
                level_measure: RatioStr(level_measure),
                e_measure: RatioStr(Rational::zero()),
                off_e_measure: RatioStr(Rational::zero()),
                holds: false,
                error: Some(e.to_string()),
            })
        }
        Err(e) => return Err(e.into()),
    };
    let g_op = apply_strong_sparse(&res.space, &res.basis, collection, &res.g, r)?;
    let off = g_op.level_set(lambda).difference(&res.e_lambda);
    let e_measure = res.space.measure(&res.e_lambda)?;
    let off_e_measure = res.space.measure(&off)?;
    Ok(ChainCheck {
        lambda: RatioStr(lambda.clone()),
        holds: level_measure <= &e_measure + &off_e_measure,
        level_measure: RatioStr(level_measure),
        e_measure: RatioStr(e_measure),
        off_e_measure: RatioStr(off_e_measure),
        error: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    /// `lambda^r mu{A*_{S,r} f > lambda} / ||f||_r^r`.
    WeakSparse,
    /// `||A*_{S,r} f||_p / ||f||_p`.
    StrongSparse,
    /// `lambda^r mu{M_r f > lambda} / ||f||_r^r`.
    WeakMaximal,
    /// `||M_r f||_p / ||f||_p`.
    StrongMaximal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BasisMeta {
    pub cells: usize,
    pub balls: usize,
    pub k: Option<RatioStr>,
    /// `vacuous`, `eta` or `unbounded`.
    pub doubling: &'static str,
    pub eta: Option<RatioStr>,
}

impl BasisMeta {
    pub fn of(space: &CellSpace, basis: &BallBasis) -> Self {
        let (doubling, eta) = match basis.doubling_constant(space) {
            Doubling::Vacuous => ("vacuous", None),
            Doubling::Eta(e) => ("eta", Some(RatioStr(e))),
            Doubling::Unbounded { .. } => ("unbounded", None),
        };
        BasisMeta {
            cells: space.len(),
            balls: basis.len(),
            k: basis.hull_constant().map(RatioStr::from),
            doubling,
            eta,
        }
    }
}

/// One CSV row: a trial evaluated at one threshold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CsvRow {
    pub trial: usize,
    pub seed: u64,
    pub lambda: String,
    /// Decimal, 12 significant digits.
    pub ratio: String,
    /// `p/q` when the ratio is rational and known exactly.
    pub exact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub seed: u64,
    pub collection_size: Option<usize>,
    /// Largest ratio of the trial; absent for a zero function.
    pub ratio: Option<String>,
    pub exact: Option<RatioStr>,
    /// Threshold attaining it, for weak-type runs.
    pub lambda: Option<String>,
    pub running_max: Option<String>,
    #[serde(skip)]
    pub enclosure: Option<Certified>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ChainSummary {
    pub checked: usize,
    pub failures: usize,
    pub first_failure: Option<(usize, ChainCheck)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMax {
    pub trial: usize,
    pub ratio: String,
    pub exact: Option<RatioStr>,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConstantReport {
    pub kind: ReportKind,
    pub basis: BasisMeta,
    pub r: u32,
    pub p: Option<RatioStr>,
    pub gamma: Option<RatioStr>,
    pub seed: u64,
    pub trials: usize,
    /// False when some strong ratio was evaluated in floating point.
    pub certified: bool,
    pub per_trial: Vec<TrialSummary>,
    pub max: Option<ReportMax>,
    pub chain: Option<ChainSummary>,
    #[serde(skip)]
    pub rows: Vec<CsvRow>,
}

impl ConstantReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), HarnessError> {
        let mut w = csv::Writer::from_writer(out);
        if self.rows.is_empty() {
            w.write_record(["trial", "seed", "lambda", "ratio", "exact"])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn csv_string(&self) -> Result<String, HarnessError> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Ordering key of a trial maximum.
#[derive(Debug, Clone)]
enum Key {
    /// The ratio is `root^r`.
    Root(RootSum),
    Interval(Certified),
}

impl Key {
    fn cmp(&self, other: &Key) -> Ordering {
        match (self, other) {
            (Key::Root(a), Key::Root(b)) => a.cmp_exact(b),
            _ => {
                let (a, b) = (self.enclosure(), other.enclosure());
                a.lo.cmp(&b.lo).then(a.hi.cmp(&b.hi))
            }
        }
    }

    fn enclosure(&self) -> Certified {
        match self {
            Key::Root(r) => certified_pow(r),
            Key::Interval(c) => c.clone(),
        }
    }
}

struct TrialValue {
    key: Key,
    lambda: Option<String>,
}

struct TrialOutcome {
    trial: usize,
    seed: u64,
    collection_size: Option<usize>,
    best: Option<TrialValue>,
    rows: Vec<CsvRow>,
    chain: Vec<ChainCheck>,
    certified: bool,
}

fn exact_of(c: &Certified) -> Option<Rational> {
    c.value().cloned()
}

fn decimal(c: &Certified) -> String {
    format_significant(c.midpoint_f64(), 12)
}

fn row(trial: usize, seed: u64, lambda: String, ratio: &Certified, show_exact: bool) -> CsvRow {
    CsvRow {
        trial,
        seed,
        lambda,
        ratio: decimal(ratio),
        exact: exact_of(ratio).filter(|_| show_exact).map(|v| format_ratio(&v)),
    }
}

fn better(best: &mut Option<TrialValue>, candidate: TrialValue) {
    if best.as_ref().is_none_or(|b| candidate.key.cmp(&b.key) == Ordering::Greater) {
        *best = Some(candidate);
    }
}

/// A configured run: the config plus the basis it names.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub basis: BallBasis,
    pub space: CellSpace,
    /// Worker count; `None` reads the environment.
    pub threads: Option<usize>,
}

impl Experiment {
    /// Validates the config and builds its basis, resolving relative tree
    /// files against `base_dir`.
    pub fn new(config: ExperimentConfig, base_dir: Option<&Path>) -> Result<Self, HarnessError> {
        config.validate()?;
        let (basis, space) = config.basis.build(base_dir)?;
        Ok(Experiment {
            config,
            basis,
            space,
            threads: None,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = Some(threads);
        self
    }

    fn pool(&self) -> Result<rayon::ThreadPool, HarnessError> {
        let n = self.threads.unwrap_or_else(|| {
            std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .unwrap_or(0)
        });
        Ok(rayon::ThreadPoolBuilder::new().num_threads(n).build()?)
    }

    fn run<F>(&self, trial: F) -> Result<Vec<TrialOutcome>, HarnessError>
    where
        F: Fn(usize, u64) -> Result<TrialOutcome, HarnessError> + Sync,
    {
        let seed = self.config.seed;
        self.pool()?.install(|| {
            (0..self.config.trials)
                .into_par_iter()
                .map(|t| trial(t, trial_seed(seed, t)))
                .collect()
        })
    }

    /// The function and collection of a trial.
    pub fn trial_inputs(&self, seed: u64) -> (StepFunction, Vec<BallId>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_step_function_with(&self.space, &mut rng, &self.config.values);
        let s = random_sparse_collection(
            &self.space,
            &self.basis,
            &self.config.gamma.0,
            &self.config.collection_density.0,
            &mut rng,
        );
        (f, s)
    }

    fn strong_exponent(&self) -> Result<Rational, HarnessError> {
        let p = self.config.p.as_ref().ok_or(HarnessError::MissingExponent)?;
        if p.0 <= Rational::from_integer(self.config.r.into()) {
            return Err(HarnessError::ExponentTooSmall);
        }
        Ok(p.0.clone())
    }

    fn report(&self, kind: ReportKind, outcomes: Vec<TrialOutcome>, with_chain: bool) -> ConstantReport {
        let c = &self.config;
        let mut per_trial = Vec::with_capacity(outcomes.len());
        let mut rows = Vec::new();
        let mut best: Option<(usize, Key)> = None;
        let mut chain = ChainSummary::default();
        let mut certified = true;
        for o in outcomes {
            certified &= o.certified;
            let enclosure = o.best.as_ref().map(|b| b.key.enclosure());
            if let Some(b) = &o.best {
                if best.as_ref().is_none_or(|(_, k)| b.key.cmp(k) == Ordering::Greater) {
                    best = Some((o.trial, b.key.clone()));
                }
            }
            for check in o.chain {
                chain.checked += 1;
                if !check.holds {
                    chain.failures += 1;
                    if chain.first_failure.is_none() {
                        chain.first_failure = Some((o.trial, check));
                    }
                }
            }
            per_trial.push(TrialSummary {
                trial: o.trial,
                seed: o.seed,
                collection_size: o.collection_size,
                ratio: enclosure.as_ref().map(decimal),
                exact: enclosure.as_ref().and_then(exact_of).map(RatioStr),
                lambda: o.best.and_then(|b| b.lambda),
                running_max: best.as_ref().map(|(_, k)| decimal(&k.enclosure())),
                enclosure,
            });
            rows.extend(o.rows);
        }
        let max = best.map(|(trial, key)| {
            let e = key.enclosure();
            ReportMax {
                trial,
                ratio: decimal(&e),
                exact: exact_of(&e).map(RatioStr),
                lo: to_f64(&e.lo),
                hi: to_f64(&e.hi),
            }
        });
        let strong = matches!(kind, ReportKind::StrongSparse | ReportKind::StrongMaximal);
        let sparse = matches!(kind, ReportKind::WeakSparse | ReportKind::StrongSparse);
        ConstantReport {
            kind,
            basis: BasisMeta::of(&self.space, &self.basis),
            r: c.r,
            p: c.p.clone().filter(|_| strong),
            gamma: Some(c.gamma.clone()).filter(|_| sparse),
            seed: c.seed,
            trials: c.trials,
            certified,
            per_trial,
            max,
            chain: with_chain.then_some(chain),
            rows,
        }
    }

    fn weak_trial(&self, trial: usize, seed: u64) -> Result<TrialOutcome, HarnessError> {
        let c = &self.config;
        let r = c.r;
        let (f, s) = self.trial_inputs(seed);
        let mut out = TrialOutcome {
            trial,
            seed,
            collection_size: Some(s.len()),
            best: None,
            rows: Vec::new(),
            chain: Vec::new(),
            certified: true,
        };
        let norm = self.space.norm_pow(&f, r)?;
        if norm.is_zero() {
            return Ok(out);
        }
        let averages = BallAverages::compute(&self.space, &self.basis, &f, r)?;
        let op = averages.strong_sparse_operator(&self.basis, &s);
        let mut probes = Vec::new();
        if c.lambda_grid.breakpoints {
            for bp in breakpoints(&self.space, &op, &norm)? {
                let ratio = bp.ratio();
                let lambda = bp.value.to_string();
                out.rows.push(row(trial, seed, lambda.clone(), &ratio, r == 1));
                better(
                    &mut out.best,
                    TrialValue {
                        key: Key::Root(bp.ratio_root),
                        lambda: Some(lambda),
                    },
                );
                probes.push(bp.probe);
            }
        }
        for lambda in &c.lambda_grid.values {
            let level = self.space.measure(&op.level_set(&lambda.0))?;
            let ratio = pow(&lambda.0, r) * level / &norm;
            out.rows.push(row(trial, seed, format_ratio(&lambda.0), &Certified::exact(ratio.clone()), true));
            better(
                &mut out.best,
                TrialValue {
                    key: Key::Root(RootSum::from_terms(r, vec![ratio])),
                    lambda: Some(format_ratio(&lambda.0)),
                },
            );
            probes.push(lambda.0.clone());
        }
        if c.chain_check {
            for lambda in &probes {
                out.chain
                    .push(chain_check(&self.space, &self.basis, &s, &f, &averages, lambda)?);
            }
        }
        Ok(out)
    }

    /// Supremum over trials and thresholds of the weak ratio of `A*_{S,r}`.
    pub fn estimate_weak(&self) -> Result<ConstantReport, HarnessError> {
        let outcomes = self.run(|t, seed| self.weak_trial(t, seed))?;
        Ok(self.report(ReportKind::WeakSparse, outcomes, self.config.chain_check))
    }

    /// Maximum over trials of `||A*_{S,r} f||_p / ||f||_p`.
    pub fn estimate_strong(&self) -> Result<ConstantReport, HarnessError> {
        let p = self.strong_exponent()?;
        let r = self.config.r;
        let outcomes = self.run(|trial, seed| {
            let (f, s) = self.trial_inputs(seed);
            let mut out = TrialOutcome {
                trial,
                seed,
                collection_size: Some(s.len()),
                best: None,
                rows: Vec::new(),
                chain: Vec::new(),
                certified: true,
            };
            if f.is_zero() {
                return Ok(out);
            }
            let op = BallAverages::compute(&self.space, &self.basis, &f, r)?.strong_sparse_operator(&self.basis, &s);
            let sr = strong_ratio(&self.space, op.values(), &f, &p)?;
            out.certified = sr.certified;
            out.rows.push(row(trial, seed, String::new(), &sr.ratio, r == 1));
            out.best = Some(TrialValue {
                key: Key::Interval(sr.ratio),
                lambda: None,
            });
            Ok(out)
        })?;
        Ok(self.report(ReportKind::StrongSparse, outcomes, false))
    }

    /// Weak-type ratios of `M_r`, and strong-type ones when `p` is set.
    pub fn estimate_maximal(&self) -> Result<Vec<ConstantReport>, HarnessError> {
        let r = self.config.r;
        let weak = self.run(|trial, seed| {
            let (f, _) = self.trial_inputs(seed);
            let mut out = TrialOutcome {
                trial,
                seed,
                collection_size: None,
                best: None,
                rows: Vec::new(),
                chain: Vec::new(),
                certified: true,
            };
            let norm = self.space.norm_pow(&f, r)?;
            if norm.is_zero() {
                return Ok(out);
            }
            let m = BallAverages::compute(&self.space, &self.basis, &f, r)?.maximal(&self.basis);
            let mut levels: Vec<Rational> = m.pow_values().iter().filter(|v| v.is_positive()).cloned().collect();
            levels.sort_by(|a, b| b.cmp(a));
            levels.dedup();
            for v in levels {
                let measure = self.space.measure(&m.level_set_pow(&v).union(&exact_level(&m, &v)))?;
                let ratio = &v * measure / &norm;
                let lambda = RootSum::from_terms(r, vec![v]).to_string();
                out.rows.push(row(trial, seed, lambda.clone(), &Certified::exact(ratio.clone()), true));
                better(
                    &mut out.best,
                    TrialValue {
                        key: Key::Root(RootSum::from_terms(r, vec![ratio])),
                        lambda: Some(lambda),
                    },
                );
            }
            Ok(out)
        })?;
        let mut reports = vec![self.report(ReportKind::WeakMaximal, weak, false)];
        if self.config.p.is_some() {
            let p = self.strong_exponent()?;
            let strong = self.run(|trial, seed| {
                let (f, _) = self.trial_inputs(seed);
                let mut out = TrialOutcome {
                    trial,
                    seed,
                    collection_size: None,
                    best: None,
                    rows: Vec::new(),
                    chain: Vec::new(),
                    certified: true,
                };
                if f.is_zero() {
                    return Ok(out);
                }
                let m = BallAverages::compute(&self.space, &self.basis, &f, r)?.maximal(&self.basis);
                let values: Vec<RootSum> = m
                    .pow_values()
                    .iter()
                    .map(|v| RootSum::from_terms(r, vec![v.clone()]))
                    .collect();
                let sr = strong_ratio(&self.space, &values, &f, &p)?;
                out.certified = sr.certified;
                out.rows.push(row(trial, seed, String::new(), &sr.ratio, true));
                out.best = Some(TrialValue {
                    key: Key::Interval(sr.ratio),
                    lambda: None,
                });
                Ok(out)
            })?;
            reports.push(self.report(ReportKind::StrongMaximal, strong, false));
        }
        Ok(reports)
    }

    /// Writes the CSV and JSON outputs named in the config.
    pub fn write_outputs(&self, report: &ConstantReport, base_dir: Option<&Path>) -> Result<(), HarnessError> {
        let resolve = |p: &PathBuf| match base_dir {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.clone(),
        };
        if let Some(p) = &self.config.outputs.csv {
            report.write_csv(std::fs::File::create(resolve(p))?)?;
        }
        if let Some(p) = &self.config.outputs.json {
            std::fs::write(resolve(p), report.to_json_string())?;
        }
        Ok(())
    }
}

/// Cells where `M_r f` equals `v` exactly (power domain).
fn exact_level(m: &crate::sparse::PowerFunction, v: &Rational) -> crate::measure::MeasurableSet {
    let above = m.level_set_pow(v);
    let mut out = above.empty_like();
    for (p, w) in m.pow_values().iter().enumerate() {
        if w == v {
            out.insert(p);
        }
    }
    out
}

pub fn estimate_weak_constant(config: &ExperimentConfig) -> Result<ConstantReport, HarnessError> {
    Experiment::new(config.clone(), None)?.estimate_weak()
}

pub fn estimate_strong_constant(config: &ExperimentConfig) -> Result<ConstantReport, HarnessError> {
    Experiment::new(config.clone(), None)?.estimate_strong()
}

pub fn estimate_maximal_constants(config: &ExperimentConfig) -> Result<Vec<ConstantReport>, HarnessError> {
    Experiment::new(config.clone(), None)?.estimate_maximal()
}
