//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit status
//! when any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use num_traits::Zero;
use rand::{Rng, SeedableRng};
use serde_json::json;

use common::*;
use sparse_lab::basis::{martingale_basis, Doubling, MartingaleTree};
use sparse_lab::constructions::{check_packing, disjointify, flatten, verify_flattening, Domination};
use sparse_lab::harness::{
    random_martingale_tree, strong_ratio, BasisSpec, ConstantReport, Experiment, ExperimentConfig,
};
use sparse_lab::rational::{format_ratio, format_significant, int, rat, to_f64, RatioStr};
use sparse_lab::sparse::{
    is_sparse, maximal_lambda_balls, verify_sparseness, BallAverages, SparsenessOutcome,
};
use sparse_lab::{dyadic_basis, BallBasis, BallId, CellSpace, Rational};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// Every ball lies in its hull, the hull absorbs every ball of at most twice
/// the measure that meets it, and stays within `K` times the measure.
fn hull_exhaustive(basis: &BallBasis) -> Result<(), String> {
    let k = basis.hull_constant().cloned().ok_or("missing hull")?;
    for b in basis.balls() {
        let h = basis.ball(basis.hull_of(b.id).map_err(e)?);
        ensure(b.set.is_subset(&h.set), || format!("{:?} not inside its hull", b.id))?;
        ensure(h.measure <= &k * &b.measure, || format!("hull of {:?} too large", b.id))?;
        let bar = &b.measure * int(2);
        for a in basis.balls() {
            if a.measure <= bar && a.set.intersects(&b.set) {
                ensure(a.set.is_subset(&h.set), || format!("{:?} escapes hull of {:?}", a.id, b.id))?;
            }
        }
    }
    Ok(())
}

fn criterion_1() -> Check {
    let start = Instant::now();
    for d in 1..=8 {
        let (basis, space) = dyadic_basis(d);
        let report = basis.verify_axioms(&space).map_err(e)?;
        ensure(report.all_ok(), || format!("dyadic depth {d}: {report:?}"))?;
        ensure(report.k == Some(RatioStr(int(2))), || format!("dyadic depth {d}: K = {:?}", report.k))?;
        hull_exhaustive(&basis).map_err(|m| format!("dyadic depth {d}: {m}"))?;
    }
    let mut rng = Rng8::seed_from_u64(101);
    let mut leaves = 0;
    for i in 0..50 {
        let skew = rat(1, 20);
        let tree = random_martingale_tree(&mut rng, 256, (i % 2 == 0).then_some(&skew));
        leaves = leaves.max(tree.leaf_count());
        let (basis, space) = martingale_basis(&tree).map_err(e)?;
        let report = basis.verify_axioms(&space).map_err(e)?;
        ensure(report.all_ok(), || format!("tree {i}: {report:?}"))?;
        hull_exhaustive(&basis).map_err(|m| format!("tree {i}: {m}"))?;
    }
    let t = start.elapsed();
    ensure(t < Duration::from_secs(10), || format!("took {t:?}"))?;
    Ok(format!("dyadic depths 1..=8 with K = 2, 50 random trees (up to {leaves} leaves), {t:.2?}"))
}

fn criterion_2() -> Check {
    let mut rng = Rng8::seed_from_u64(202);
    for i in 0..1000 {
        let (basis, space) = dyadic_basis(rng.gen_range(1..=6));
        let q = rng.gen_range(0.05..0.5);
        let mut family: Vec<BallId> = basis.ids().filter(|_| rng.gen_bool(q)).collect();
        if family.is_empty() {
            family.push(BallId(rng.gen_range(0..basis.len())));
        }
        let mut union = space.empty_set();
        for b in &family {
            union.union_with(&basis.ball(*b).set);
        }
        let target = space.set_from_positions(union.positions().filter(|_| rng.gen_bool(0.5)));
        let selected = basis.covering_select(&target, &family).map_err(e)?;
        for (j, a) in selected.iter().enumerate() {
            ensure(family.contains(a), || format!("instance {i}: {a:?} not offered"))?;
            for b in &selected[j + 1..] {
                ensure(basis.ball(*a).set.is_disjoint(&basis.ball(*b).set), || {
                    format!("instance {i}: {a:?} meets {b:?}")
                })?;
            }
        }
        let cover = basis.hull_union(&selected).map_err(e)?;
        ensure(target.is_subset(&cover), || format!("instance {i}: target not covered"))?;
    }
    Ok("1000 instances, selections disjoint and covering through hulls".into())
}

fn criterion_3() -> Check {
    let mut rng = Rng8::seed_from_u64(303);
    let mut splits = 0;
    let mut i = 0;
    while i < 1000 {
        let n = rng.gen_range(1..=64);
        let mut space = random_space(&mut rng, n);
        let b = random_set(&mut rng, &space, 0.6);
        let a = space.set_from_positions(b.positions().filter(|_| rng.gen_bool(0.6)));
        if a.is_empty() {
            continue;
        }
        let mu_a = space.measure(&a).map_err(e)?;
        let gap = space.measure(&b.difference(&a)).map_err(e)?;
        let kappa = &mu_a * rat(rng.gen_range(1..=16), 16);
        let before = space.len();
        let (lb, step) = space.leftmost_set(&kappa, &b).map_err(e)?;
        let a = step.set(&a);
        let (la, step) = space.leftmost_set(&kappa, &a).map_err(e)?;
        let lb = step.set(&lb);
        splits += space.len() - before;
        ensure(space.measure(&la).map_err(e)? == kappa && space.measure(&lb).map_err(e)? == kappa, || {
            format!("instance {i}: leftmost sets miss kappa")
        })?;
        let diff = space.measure(&la.symmetric_difference(&lb)).map_err(e)?;
        ensure(diff <= &gap * int(2), || format!("instance {i}: {diff} > 2 * {gap}"))?;
        i += 1;
    }
    Ok(format!("1000 pairs, {splits} cell splits, all within 2 mu(B \\ A)"))
}

fn criterion_4() -> Check {
    let mut rng = Rng8::seed_from_u64(404);
    for i in 0..1000 {
        let n = rng.gen_range(1..=16);
        let space0 = random_space(&mut rng, n);
        let m = rng.gen_range(1..=6);
        let mut sets = Vec::new();
        while sets.len() < m {
            let s = random_set(&mut rng, &space0, 0.5);
            if !s.is_empty() {
                sets.push(s);
            }
        }
        let mut xi: Vec<Rational> = sets
            .iter()
            .map(|s| space0.measure(s).unwrap() * rat(rng.gen_range(0..=8), 8))
            .collect();
        while check_packing(&space0, &sets, &xi).map_err(e)?.is_some() {
            for x in &mut xi {
                *x /= int(2);
            }
        }
        let mut space = space0.clone();
        let out = disjointify(&mut space, &sets, &xi).map_err(e)?;
        for (k, t) in out.sets.iter().enumerate() {
            ensure(space.measure(t).map_err(e)? == xi[k], || format!("instance {i}: measure of set {k}"))?;
            ensure(t.is_subset(&out.remap.set(&sets[k])), || format!("instance {i}: set {k} escapes"))?;
            for u in &out.sets[k + 1..] {
                ensure(t.is_disjoint(u), || format!("instance {i}: overlap"))?;
            }
        }
    }
    Ok("1000 packing instances, exact measures, containment and disjointness".into())
}

#[derive(Default)]
struct Group {
    instances: usize,
    max_c1: Option<Rational>,
    max_c2: Option<Rational>,
    vacuous: usize,
}

#[derive(Default)]
struct FlattenSuite {
    groups: BTreeMap<(String, String, u32), Group>,
    failures: Vec<String>,
    audit_failures: usize,
    retries: u32,
}

impl FlattenSuite {
    fn run(&mut self, label: &str, basis: &BallBasis, space: &CellSpace, rng: &mut Rng8, r: u32) -> Result<(), String> {
        let k = basis.hull_constant().cloned().ok_or("missing hull")?;
        let mut values = random_values(rng, space.len(), 0.5);
        if values.iter().all(Zero::is_zero) {
            values[rng.gen_range(0..space.len())] = int(1);
        }
        let top = values.iter().max().unwrap().clone();
        let lambda = top * rat(rng.gen_range(1..=8), 8);
        let f = space.function(values).map_err(e)?;
        let res = flatten(space, basis, &f, &lambda, r, None).map_err(e)?;
        self.retries = self.retries.max(res.retries);
        let report = verify_flattening(&res, &int(0)).map_err(e)?;
        if !res.audit().map_err(e)?.all_ok() {
            self.audit_failures += 1;
        }
        let tag = format!("{label} lambda={} r={r}", format_ratio(&lambda));
        if !report.g_bounded {
            self.failures.push(format!("{tag}: g exceeds lambda"));
        }
        if !report.level_set_covered {
            self.failures.push(format!("{tag}: level set escapes E"));
        }
        let group = self.groups.entry((label.split(' ').next().unwrap().to_string(), format_ratio(&k), r)).or_default();
        group.instances += 1;
        if let Some(c1) = report.measure_constant {
            // mu(E) <= (delta + K^2) ||f||^r / lambda^r with delta <= 1/K
            if c1.0 > &k * &k + int(1) / &k {
                self.failures.push(format!("{tag}: C1 = {} above K^2 + 1/K", c1.0));
            }
            if group.max_c1.as_ref().is_none_or(|m| &c1.0 > m) {
                group.max_c1 = Some(c1.0);
            }
        }
        match report.domination {
            Domination::Vacuous => group.vacuous += 1,
            Domination::Finite(c2) => {
                if group.max_c2.as_ref().is_none_or(|m| &c2.0 > m) {
                    group.max_c2 = Some(c2.0);
                }
            }
            Domination::Unbounded(ball) => self
                .failures
                .push(format!("{tag}: <f> over {ball:?} positive but <g> over its hull is 0")),
        }
        Ok(())
    }

    fn snapshot(&self) -> serde_json::Value {
        let groups: Vec<_> = self
            .groups
            .iter()
            .map(|((kind, k, r), g)| {
                json!({
                    "basis": kind,
                    "K": k,
                    "r": r,
                    "instances": g.instances,
                    "vacuous": g.vacuous,
                    "max_c1": g.max_c1.as_ref().map(format_ratio),
                    "max_c2": g.max_c2.as_ref().map(format_ratio),
                })
            })
            .collect();
        json!(groups)
    }

    fn summary(&self) -> String {
        let worst = |pick: fn(&Group) -> Option<&Rational>| {
            self.groups
                .values()
                .filter_map(pick)
                .max()
                .map_or("-".to_string(), |v| format_significant(to_f64(v), 6))
        };
        format!(
            "{} groups, max C1 {}, max C2 {}, delta halvings <= {}, audit failures {}",
            self.groups.len(),
            worst(|g| g.max_c1.as_ref()),
            worst(|g| g.max_c2.as_ref()),
            self.retries,
            self.audit_failures
        )
    }
}

fn skewed_trees(rng: &mut Rng8, count: usize) -> Vec<(BallBasis, CellSpace, String)> {
    let mut out = Vec::new();
    let eps = [rat(1, 10), rat(1, 50), rat(1, 100)];
    while out.len() < count {
        let skew = &eps[out.len() % eps.len()];
        let tree = random_martingale_tree(rng, 64, Some(skew));
        let (basis, space) = martingale_basis(&tree).unwrap();
        let far = match basis.doubling_constant(&space) {
            Doubling::Eta(eta) => eta >= int(10),
            Doubling::Unbounded { .. } => true,
            Doubling::Vacuous => false,
        };
        if far {
            let label = format!("tree {}", out.len());
            out.push((basis, space, label));
        }
    }
    out
}

fn criterion_5() -> Check {
    let mut rng = Rng8::seed_from_u64(505);
    let mut suite = FlattenSuite::default();
    for i in 0..1000 {
        let d = rng.gen_range(1..=6);
        let (basis, space) = dyadic_basis(d);
        suite.run(&format!("dyadic d={d}"), &basis, &space, &mut rng, 1 + (i % 2) as u32)?;
    }
    let trees = skewed_trees(&mut rng, 20);
    for (basis, space, label) in &trees {
        for j in 0..25 {
            suite.run(label, basis, space, &mut rng, 1 + (j % 2) as u32)?;
        }
    }
    let status = check_snapshot("flattening_constants", &suite.snapshot())?;
    if let Some(first) = suite.failures.first() {
        return Err(format!("{} failures, first: {first}", suite.failures.len()));
    }
    Ok(format!("1000 dyadic + 500 on 20 non-doubling trees; {}; snapshot {status}", suite.summary()))
}

fn weak_config(basis: BasisSpec, r: u32, trials: usize, seed: u64, chain: bool) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(basis, r);
    c.gamma = RatioStr(rat(1, 2));
    c.trials = trials;
    c.seed = seed;
    c.chain_check = chain;
    c
}

/// Weak-type runs with chain checks on one thread, then reruns without the
/// flattening on 8 and on 1 worker threads; all three must agree.
fn weak_runs(basis: BasisSpec, trials: usize, seed: u64) -> Result<Vec<(u32, ConstantReport)>, String> {
    let mut out = Vec::new();
    let mut failures = Vec::new();
    for r in [1, 2] {
        let chained = Experiment::new(weak_config(basis.clone(), r, trials, seed, true), None)
            .map_err(e)?
            .with_threads(1)
            .estimate_weak()
            .map_err(e)?;
        let plain = Experiment::new(weak_config(basis.clone(), r, trials, seed, false), None).map_err(e)?;
        let eight = plain.clone().with_threads(8).estimate_weak().map_err(e)?;
        let one = plain.with_threads(1).estimate_weak().map_err(e)?;
        ensure(chained.rows == eight.rows && eight.rows == one.rows, || format!("r={r}: rows differ between runs"))?;
        ensure(chained.max == eight.max && eight.max == one.max, || format!("r={r}: maxima differ between runs"))?;
        let max = chained.max.clone().ok_or(format!("r={r}: no nonzero trial"))?;
        ensure(max.hi.is_finite(), || format!("r={r}: infinite supremum"))?;
        let chain = chained.chain.clone().unwrap();
        if let Some((trial, check)) = &chain.first_failure {
            failures.push(format!(
                "r={r}: chain inequality fails in {} of {} checks; first in trial {trial}: {}",
                chain.failures,
                chain.checked,
                serde_json::to_string(check).unwrap()
            ));
        }
        out.push((r, chained));
    }
    if failures.is_empty() {
        Ok(out)
    } else {
        Err(failures.join("; "))
    }
}

fn describe_weak(runs: &[(u32, ConstantReport)]) -> String {
    runs.iter()
        .map(|(r, rep)| {
            let c = rep.chain.as_ref().unwrap();
            format!("r={r}: sup {} ({} chain checks)", rep.max.as_ref().unwrap().ratio, c.checked)
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn weak_snapshot(runs: &[(u32, ConstantReport)]) -> serde_json::Value {
    json!(runs
        .iter()
        .map(|(r, rep)| {
            let m = rep.max.as_ref().unwrap();
            json!({ "r": r, "trial": m.trial, "ratio": m.ratio, "exact": m.exact })
        })
        .collect::<Vec<_>>())
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let runs = weak_runs(BasisSpec::Dyadic { depth: 6 }, 1000, 606)?;
    let t = start.elapsed();
    let status = check_snapshot("weak_dyadic6", &weak_snapshot(&runs))?;
    ensure(t < Duration::from_secs(120), || format!("took {t:?}"))?;
    Ok(format!("{}; identical for 1 and 8 threads; {t:.1?}; snapshot {status}", describe_weak(&runs)))
}

/// `||A* 1||_p` for the chain `[0, 2^-k)`, `k = 0..=d`, computed by hand:
/// `(sum_{k<d} (k+1)^p 2^-(k+1) + (d+1)^p 2^-d)^(1/p)`.
const NESTED_CHAIN: [(u32, u32, &str); 4] = [
    (6, 2, "2.39465550758"),
    (6, 4, "3.22312664576"),
    (8, 2, "2.43268755700"),
    (8, 4, "3.38178582467"),
];

fn criterion_7() -> Check {
    let mut notes = Vec::new();
    let mut snap = Vec::new();
    for (r, p) in [(1u32, 2i64), (2, 4)] {
        let mut c = ExperimentConfig::new(BasisSpec::Dyadic { depth: 6 }, r);
        c.p = Some(RatioStr(int(p)));
        c.trials = 1000;
        c.seed = 707;
        let exp = Experiment::new(c, None).map_err(e)?;
        let a = exp.clone().with_threads(1).estimate_strong().map_err(e)?;
        let b = exp.with_threads(8).estimate_strong().map_err(e)?;
        ensure(a == b, || format!("(r,p)=({r},{p}): reruns differ"))?;
        ensure(a.certified, || "uncertified ratios".into())?;
        let m = a.max.clone().ok_or("no trials")?;
        ensure(m.hi.is_finite(), || "infinite ratio".into())?;
        notes.push(format!("(r,p)=({r},{p}) max {}", m.ratio));
        snap.push(json!({ "r": r, "p": p, "trial": m.trial, "ratio": m.ratio }));
    }
    for (d, p, expected) in NESTED_CHAIN {
        let (basis, space) = dyadic_basis(d);
        let chain: Vec<BallId> = (0..=d).map(|k| BallId((1 << k) - 1)).collect();
        let f = space.constant(int(1)).map_err(e)?;
        for r in (1..p).filter(|r| p % r == 0) {
            let op = BallAverages::compute(&space, &basis, &f, r)
                .map_err(e)?
                .strong_sparse_operator(&basis, &chain);
            let got = strong_ratio(&space, op.values(), &f, &int(p.into())).map_err(e)?;
            let text = format_significant(got.ratio.midpoint_f64(), 12);
            ensure(text == expected, || format!("d={d} p={p} r={r}: {text} vs {expected}"))?;
        }
    }
    let status = check_snapshot("strong_dyadic6", &json!(snap))?;
    Ok(format!("{}; nested chain matches 4 closed forms; snapshot {status}", notes.join(", ")))
}

fn criterion_8() -> Check {
    let mut rng = Rng8::seed_from_u64(808);
    let mut feasible = 0;
    for i in 0..200 {
        let n = rng.gen_range(1..=12);
        let mut space = random_space(&mut rng, n);
        let basis = random_family(&mut rng, &space, 20);
        let f = space.function(random_values(&mut rng, n, 0.3)).map_err(e)?;
        let r = rng.gen_range(1..=3);
        let collection: Vec<BallId> = basis.ids().filter(|_| rng.gen_bool(0.4)).take(10).collect();
        let avgs = BallAverages::compute(&space, &basis, &f, r).map_err(e)?;
        let tag = |what: &str| format!("instance {i}: {what} differs from its oracle");

        let a = avgs.sparse_operator(&basis, &collection);
        let want = naive_operator_terms(&space, &basis, &collection, &f, r, false);
        ensure(a.values().iter().zip(&want).all(|(v, w)| v.terms() == &w[..]), || tag("A"))?;
        let a_star = avgs.strong_sparse_operator(&basis, &collection);
        let want = naive_operator_terms(&space, &basis, &collection, &f, r, true);
        ensure(a_star.values().iter().zip(&want).all(|(v, w)| v.terms() == &w[..]), || tag("A*"))?;
        let m = avgs.maximal(&basis);
        ensure(m.pow_values() == &naive_maximal_pow(&space, &basis, &f, r)[..], || tag("M"))?;

        let lambda = rat(rng.gen_range(1..=24), 4);
        let mut got = maximal_lambda_balls(&space, &basis, &f, &lambda, r).map_err(e)?;
        got.sort();
        ensure(got == naive_maximal_lambda_balls(&space, &basis, &f, r, &lambda), || tag("maximal lambda-balls"))?;

        let gamma = rat(rng.gen_range(1..=3), 4);
        let oracle = naive_sparse(&space, &basis, &collection, &gamma);
        let quick = is_sparse(&space, &basis, &collection, &gamma).map_err(e)?;
        match verify_sparseness(&mut space, &basis, &collection, &gamma).map_err(e)? {
            SparsenessOutcome::Feasible(w) => {
                ensure(oracle.is_none() && quick.is_none(), || tag("sparseness"))?;
                let refined = basis.refine(&space, &w.remap).map_err(e)?;
                w.collection.validate(&space, &refined).map_err(|m| format!("instance {i}: {m}"))?;
                feasible += 1;
            }
            SparsenessOutcome::Infeasible(v) => {
                ensure(oracle.is_some() && quick.is_some(), || tag("sparseness"))?;
                ensure(hall_violated(&space, &basis, &v.balls, &gamma), || tag("violating family"))?;
                for drop in &v.balls {
                    let rest: Vec<BallId> = v.balls.iter().copied().filter(|b| b != drop).collect();
                    ensure(naive_sparse(&space, &basis, &rest, &gamma).is_none(), || {
                        format!("instance {i}: violating family is not minimal")
                    })?;
                }
            }
        }
    }
    Ok(format!("200 micro-instances ({feasible} sparse), all operators match"))
}

fn criterion_9() -> Check {
    let tree = MartingaleTree::from_ratios(int(1), &[rat(99, 100), rat(1, 100)], 8);
    let (basis, space) = martingale_basis(&tree).map_err(e)?;
    let eta = match basis.doubling_constant(&space) {
        Doubling::Eta(eta) => {
            ensure(eta >= int(100), || format!("eta = {eta}"))?;
            format_ratio(&eta)
        }
        Doubling::Unbounded { ball } => format!("unbounded at {ball:?}"),
        Doubling::Vacuous => return Err("doubling scan is vacuous".into()),
    };
    let mut rng = Rng8::seed_from_u64(909);
    let mut suite = FlattenSuite::default();
    for i in 0..1000 {
        suite.run("skewed", &basis, &space, &mut rng, 1 + (i % 2) as u32)?;
    }
    if let Some(first) = suite.failures.first() {
        return Err(format!("flattening: {} failures, first: {first}", suite.failures.len()));
    }
    let runs = weak_runs(BasisSpec::Martingale(tree), 1000, 909)?;
    let status = check_snapshot(
        "skewed_tree",
        &json!({ "flattening": suite.snapshot(), "weak": weak_snapshot(&runs) }),
    )?;
    Ok(format!(
        "eta {eta}; flattening {}; weak {}; snapshot {status}",
        suite.summary(),
        describe_weak(&runs)
    ))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check); 9] = [
        (1, "ball-basis axioms", criterion_1),
        (2, "covering selection", criterion_2),
        (3, "leftmost-set stability", criterion_3),
        (4, "disjointification", criterion_4),
        (5, "flattening postconditions", criterion_5),
        (6, "weak-type estimate", criterion_6),
        (7, "strong-type estimate", criterion_7),
        (8, "oracle equivalence", criterion_8),
        (9, "non-doubling coverage", criterion_9),
    ];
    let only: Option<u32> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let t = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS [{t:.1?}] {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL [{t:.1?}] {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
