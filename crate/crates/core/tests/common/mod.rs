//! Generators, brute-force oracles and snapshot files shared by the
//! integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;

use num_traits::{One, Zero};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use sparse_lab::rational::{int, pow, rat};
use sparse_lab::{BallBasis, BallId, CellSpace, MeasurableSet, Rational, StepFunction};

pub type Rng8 = ChaCha8Rng;

/// `n` cells with measures `k / 8`, `k` in `1..=8`.
pub fn random_space(rng: &mut Rng8, n: usize) -> CellSpace {
    let measures = (0..n).map(|_| rat(rng.gen_range(1..=8), 8)).collect();
    CellSpace::new(measures).unwrap()
}

pub fn random_set(rng: &mut Rng8, space: &CellSpace, p: f64) -> MeasurableSet {
    space.set_from_positions((0..space.len()).filter(|_| rng.gen_bool(p)))
}

pub fn random_values(rng: &mut Rng8, n: usize, zero_chance: f64) -> Vec<Rational> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(zero_chance) {
                int(0)
            } else {
                rat(rng.gen_range(1..=12), rng.gen_range(1..=4))
            }
        })
        .collect()
}

/// A family of nonempty sets containing the whole space, without repeats.
pub fn random_family(rng: &mut Rng8, space: &CellSpace, max_balls: usize) -> BallBasis {
    let mut seen = BTreeSet::new();
    let mut sets = vec![space.full_set()];
    seen.insert(space.full_set().positions().collect::<Vec<_>>());
    let want = rng.gen_range(1..=max_balls);
    let mut attempts = 0;
    while sets.len() < want && attempts < 200 {
        attempts += 1;
        let p = rng.gen_range(0.1..0.7);
        let s = random_set(rng, space, p);
        let key: Vec<usize> = s.positions().collect();
        if !key.is_empty() && seen.insert(key) {
            sets.push(s);
        }
    }
    BallBasis::new(space, sets).unwrap()
}

/// Position sets of the balls, recomputed from the basis by membership tests.
pub fn ball_cells(basis: &BallBasis, n: usize) -> Vec<Vec<usize>> {
    basis
        .balls()
        .iter()
        .map(|b| (0..n).filter(|&p| b.set.contains(p)).collect())
        .collect()
}

/// `<f>_{B,r}^r` straight from the definition.
pub fn naive_power_average(space: &CellSpace, cells: &[usize], f: &StepFunction, r: u32) -> Rational {
    let mut integral = Rational::zero();
    let mut measure = Rational::zero();
    for &p in cells {
        integral += pow(f.value(p), r) * space.cell_measure(p);
        measure += space.cell_measure(p);
    }
    integral / measure
}

pub fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|x| b.contains(x))
}

/// Per cell, the multiset of power averages summed by `A_{S,r}` or `A*_{S,r}`.
pub fn naive_operator_terms(
    space: &CellSpace,
    basis: &BallBasis,
    collection: &[BallId],
    f: &StepFunction,
    r: u32,
    starred: bool,
) -> Vec<Vec<Rational>> {
    let n = space.len();
    let cells = ball_cells(basis, n);
    let avg: Vec<Rational> = cells.iter().map(|c| naive_power_average(space, c, f, r)).collect();
    let mut out = vec![Vec::new(); n];
    for &b in collection {
        let term = if starred {
            (0..cells.len())
                .filter(|&a| is_subset(&cells[b.0], &cells[a]))
                .map(|a| avg[a].clone())
                .max()
                .unwrap()
        } else {
            avg[b.0].clone()
        };
        for &p in &cells[b.0] {
            if !term.is_zero() {
                out[p].push(term.clone());
            }
        }
    }
    for t in &mut out {
        t.sort();
    }
    out
}

/// `(M_r f)^r` per cell.
pub fn naive_maximal_pow(space: &CellSpace, basis: &BallBasis, f: &StepFunction, r: u32) -> Vec<Rational> {
    let n = space.len();
    let cells = ball_cells(basis, n);
    (0..n)
        .map(|p| {
            cells
                .iter()
                .filter(|c| c.contains(&p))
                .map(|c| naive_power_average(space, c, f, r))
                .max()
                .unwrap_or_else(Rational::zero)
        })
        .collect()
}

/// Maximal lambda-balls: lambda-balls with no lambda-ball containing them of
/// at least twice their measure.
pub fn naive_maximal_lambda_balls(
    space: &CellSpace,
    basis: &BallBasis,
    f: &StepFunction,
    r: u32,
    lambda: &Rational,
) -> Vec<BallId> {
    let n = space.len();
    let cells = ball_cells(basis, n);
    let threshold = pow(lambda, r);
    let is_lambda: Vec<bool> = cells
        .iter()
        .map(|c| naive_power_average(space, c, f, r) > threshold)
        .collect();
    let measure = |c: &[usize]| -> Rational { c.iter().map(|&p| space.cell_measure(p).clone()).sum() };
    (0..cells.len())
        .filter(|&b| is_lambda[b])
        .filter(|&b| {
            !(0..cells.len()).any(|a| {
                is_lambda[a] && is_subset(&cells[b], &cells[a]) && measure(&cells[a]) >= measure(&cells[b]) * int(2)
            })
        })
        .map(BallId)
        .collect()
}

/// Hall's condition over every sub-family: `gamma`-sparse iff each
/// sub-family's union has measure at least `gamma` times its total measure.
/// Returns a violating sub-family when there is one.
pub fn naive_sparse(space: &CellSpace, basis: &BallBasis, balls: &[BallId], gamma: &Rational) -> Option<Vec<BallId>> {
    let n = space.len();
    let cells = ball_cells(basis, n);
    for mask in 1u32..(1 << balls.len()) {
        let family: Vec<BallId> = (0..balls.len()).filter(|i| mask >> i & 1 == 1).map(|i| balls[i]).collect();
        let mut union = vec![false; n];
        let mut demand = Rational::zero();
        for b in &family {
            demand += gamma * &basis.ball(*b).measure;
            for &p in &cells[b.0] {
                union[p] = true;
            }
        }
        let supply: Rational = (0..n).filter(|&p| union[p]).map(|p| space.cell_measure(p).clone()).sum();
        if demand > supply {
            return Some(family);
        }
    }
    None
}

pub fn hall_violated(space: &CellSpace, basis: &BallBasis, family: &[BallId], gamma: &Rational) -> bool {
    let mut union = space.empty_set();
    let mut demand = Rational::zero();
    for b in family {
        union.union_with(&basis.ball(*b).set);
        demand += gamma * &basis.ball(*b).measure;
    }
    demand > space.measure(&union).unwrap()
}

fn snapshot_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("snapshots")
        .join(format!("{name}.json"))
}

/// Compares `value` with the stored snapshot `name`. A missing snapshot, or
/// `UPDATE_SNAPSHOTS` in the environment, records the value instead.
pub fn check_snapshot(name: &str, value: &serde_json::Value) -> Result<&'static str, String> {
    let path = snapshot_path(name);
    let text = serde_json::to_string_pretty(value).unwrap() + "\n";
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() || !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).map_err(|e| e.to_string())?;
        std::fs::write(&path, text).map_err(|e| e.to_string())?;
        return Ok("recorded");
    }
    let stored: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if &stored == value {
        Ok("matches")
    } else {
        Err(format!("snapshot {name} differs: stored {stored}, got {value}"))
    }
}

pub fn one() -> Rational {
    Rational::one()
}
