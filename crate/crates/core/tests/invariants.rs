mod common;

use std::cmp::Ordering;

use num_traits::Zero;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use common::*;
use sparse_lab::constructions::{check_packing, disjointify, flatten, verify_flattening};
use sparse_lab::harness::{breakpoints, weak_ratio};
use sparse_lab::rational::{int, pow, rat};
use sparse_lab::sparse::{is_sparse, verify_sparseness, BallAverages, SparsenessOutcome};
use sparse_lab::{dyadic_basis, BallBasis, BallId, CellSpace, MeasurableSet, Rational, RootSum, StepFunction};

fn measures() -> impl Strategy<Value = Vec<Rational>> {
    prop::collection::vec((1i64..=9, 1i64..=6).prop_map(|(a, b)| rat(a, b)), 1..=14)
}

fn world(seed: u64, n: usize, balls: usize) -> (Rng8, CellSpace, BallBasis) {
    let mut rng = Rng8::seed_from_u64(seed);
    let space = random_space(&mut rng, n);
    let basis = random_family(&mut rng, &space, balls);
    (rng, space, basis)
}

fn collection(rng: &mut Rng8, basis: &BallBasis) -> Vec<BallId> {
    basis.ids().filter(|_| rng.gen_bool(0.5)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn measure_is_additive(ms in measures(), seed: u64) {
        let space = CellSpace::new(ms.clone()).unwrap();
        let mut rng = Rng8::seed_from_u64(seed);
        let a = random_set(&mut rng, &space, 0.5);
        let b = random_set(&mut rng, &space, 0.5);
        let m = |s: &MeasurableSet| space.measure(s).unwrap();
        prop_assert_eq!(m(&a.union(&b)) + m(&a.intersection(&b)), m(&a) + m(&b));
        prop_assert_eq!(m(&space.full_set()), ms.iter().sum::<Rational>());
        prop_assert_eq!(m(&a) + m(&space.full_set().difference(&a)), space.total_measure().clone());
    }

    #[test]
    fn leftmost_set_is_an_exact_prefix(ms in measures(), seed: u64, k in 1i64..=32) {
        let mut space = CellSpace::new(ms).unwrap();
        let mut rng = Rng8::seed_from_u64(seed);
        let b = random_set(&mut rng, &space, 0.7);
        prop_assume!(!b.is_empty());
        let kappa = space.measure(&b).unwrap() * rat(k, 32);
        let (l, remap) = space.leftmost_set(&kappa, &b).unwrap();
        let b = remap.set(&b);
        prop_assert_eq!(space.measure(&l).unwrap(), kappa);
        prop_assert!(l.is_subset(&b));
        let last = l.positions().last().unwrap();
        prop_assert!(b.positions().take_while(|&p| p <= last).all(|p| l.contains(p)));
    }

    #[test]
    fn leftmost_sets_move_by_at_most_twice_the_gap(ms in measures(), seed: u64, k in 1i64..=16) {
        let mut space = CellSpace::new(ms).unwrap();
        let mut rng = Rng8::seed_from_u64(seed);
        let b = random_set(&mut rng, &space, 0.7);
        let a = space.set_from_positions(b.positions().filter(|_| rng.gen_bool(0.6)));
        prop_assume!(!a.is_empty());
        let gap = space.measure(&b.difference(&a)).unwrap();
        let kappa = space.measure(&a).unwrap() * rat(k, 16);
        let (lb, s1) = space.leftmost_set(&kappa, &b).unwrap();
        let (la, s2) = space.leftmost_set(&kappa, &s1.set(&a)).unwrap();
        let diff = space.measure(&la.symmetric_difference(&s2.set(&lb))).unwrap();
        prop_assert!(diff <= gap * int(2));
    }

    #[test]
    fn refinement_preserves_integrals_and_averages(seed: u64, n in 1usize..=10, num in 1i64..=7, r in 1u32..=3) {
        let (mut rng, space, basis) = world(seed, n, 12);
        let f = space.function(random_values(&mut rng, n, 0.3)).unwrap();
        let set = random_set(&mut rng, &space, 0.5);
        let before = BallAverages::compute(&space, &basis, &f, r).unwrap();
        let mut fine = space.clone();
        let cell = space.cells()[rng.gen_range(0..n)].id;
        let remap = fine.split_cell(cell, &rat(num, 8)).unwrap();
        let fine_basis = basis.refine(&fine, &remap).unwrap();
        let fine_f = remap.function(&f);
        prop_assert_eq!(
            fine.integrate_power(&fine_f, &remap.set(&set), r).unwrap(),
            space.integrate_power(&f, &set, r).unwrap()
        );
        prop_assert_eq!(fine.measure(&remap.set(&set)).unwrap(), space.measure(&set).unwrap());
        let after = BallAverages::compute(&fine, &fine_basis, &fine_f, r).unwrap();
        prop_assert_eq!(before.plain_pow(), after.plain_pow());
        prop_assert_eq!(before.starred_pow(), after.starred_pow());
    }

    #[test]
    fn hull_absorbs_comparable_balls(seed: u64, n in 1usize..=12) {
        let (_, _, basis) = world(seed, n, 16);
        let k = basis.hull_constant().unwrap().clone();
        for b in basis.balls() {
            let h = basis.ball(basis.hull_of(b.id).unwrap());
            prop_assert!(b.set.is_subset(&h.set));
            prop_assert!(h.measure <= &k * &b.measure);
            for a in basis.balls() {
                if a.set.intersects(&b.set) && a.measure <= &b.measure * int(2) {
                    prop_assert!(a.set.is_subset(&h.set));
                }
            }
        }
    }

    #[test]
    fn covering_selection_is_disjoint_and_covers(seed: u64, n in 1usize..=12) {
        let (mut rng, space, basis) = world(seed, n, 16);
        let family = collection(&mut rng, &basis);
        prop_assume!(!family.is_empty());
        let mut union = space.empty_set();
        for b in &family {
            union.union_with(&basis.ball(*b).set);
        }
        let target = space.set_from_positions(union.positions().filter(|_| rng.gen_bool(0.6)));
        let sel = basis.covering_select(&target, &family).unwrap();
        for (i, a) in sel.iter().enumerate() {
            prop_assert!(family.contains(a));
            for b in &sel[i + 1..] {
                prop_assert!(basis.ball(*a).set.is_disjoint(&basis.ball(*b).set));
            }
        }
        if !sel.is_empty() {
            prop_assert!(target.is_subset(&basis.hull_union(&sel).unwrap()));
        } else {
            prop_assert!(target.is_empty());
        }
    }

    #[test]
    fn plain_operator_is_dominated_by_starred(seed: u64, n in 1usize..=10, r in 1u32..=3) {
        let (mut rng, space, basis) = world(seed, n, 12);
        let f = space.function(random_values(&mut rng, n, 0.3)).unwrap();
        let s = collection(&mut rng, &basis);
        let avgs = BallAverages::compute(&space, &basis, &f, r).unwrap();
        prop_assert!(avgs.sparse_operator(&basis, &s).dominated_by(&avgs.strong_sparse_operator(&basis, &s)));
    }

    #[test]
    fn operators_are_homogeneous_and_monotone(seed: u64, n in 1usize..=10, r in 1u32..=3, c in 1i64..=5) {
        let (mut rng, space, basis) = world(seed, n, 12);
        let values = random_values(&mut rng, n, 0.3);
        let bigger: Vec<Rational> = values.iter().map(|v| v + rat(rng.gen_range(0..=3), 2)).collect();
        let f = space.function(values).unwrap();
        let g = space.function(bigger).unwrap();
        let factor = rat(c, 3);
        let s = collection(&mut rng, &basis);
        let op = |h: &StepFunction| BallAverages::compute(&space, &basis, h, r).unwrap().strong_sparse_operator(&basis, &s);
        let base = op(&f);
        let scaled = op(&f.scaled(&factor));
        let cr = pow(&factor, r);
        for (x, y) in base.values().iter().zip(scaled.values()) {
            let want: Vec<Rational> = x.terms().iter().map(|t| t * &cr).collect();
            prop_assert_eq!(y.terms(), &want[..]);
        }
        prop_assert!(base.dominated_by(&op(&g)));
    }

    #[test]
    fn maximal_function_dominates_every_average(seed: u64, n in 1usize..=10, r in 1u32..=3) {
        let (mut rng, space, basis) = world(seed, n, 12);
        let f = space.function(random_values(&mut rng, n, 0.3)).unwrap();
        let avgs = BallAverages::compute(&space, &basis, &f, r).unwrap();
        let m = avgs.maximal(&basis);
        for b in basis.balls() {
            for p in b.set.positions() {
                prop_assert!(m.pow_values()[p] >= avgs.plain_pow()[b.id.0]);
            }
        }
    }

    #[test]
    fn power_averages_match_the_definition(seed: u64, n in 1usize..=10, r in 1u32..=4) {
        let (mut rng, space, basis) = world(seed, n, 12);
        let f = space.function(random_values(&mut rng, n, 0.3)).unwrap();
        let avgs = BallAverages::compute(&space, &basis, &f, r).unwrap();
        let cells = ball_cells(&basis, n);
        for (b, c) in cells.iter().enumerate() {
            prop_assert_eq!(&avgs.plain_pow()[b], &naive_power_average(&space, c, &f, r));
            prop_assert_eq!(avgs.get(BallId(b)).root().cmp_rational(&int(0)) == Ordering::Greater, !avgs.plain_pow()[b].is_zero());
        }
    }

    #[test]
    fn disjointify_ignores_unrelated_splits(seed: u64, n in 1usize..=10, num in 1i64..=7) {
        let mut rng = Rng8::seed_from_u64(seed);
        let space = random_space(&mut rng, n);
        let sets: Vec<_> = (0..rng.gen_range(1..=4)).map(|_| random_set(&mut rng, &space, 0.5)).collect();
        let mut xi: Vec<Rational> = sets.iter().map(|s| space.measure(s).unwrap() * rat(rng.gen_range(0..=4), 4)).collect();
        while check_packing(&space, &sets, &xi).unwrap().is_some() {
            xi.iter_mut().for_each(|x| *x /= int(2));
        }
        let mut a = space.clone();
        let plain = disjointify(&mut a, &sets, &xi).unwrap();
        let mut b = space.clone();
        let remap = b.split_cell(space.cells()[rng.gen_range(0..n)].id, &rat(num, 8)).unwrap();
        let moved: Vec<_> = sets.iter().map(|s| remap.set(s)).collect();
        let split = disjointify(&mut b, &moved, &xi).unwrap();
        for (x, y) in plain.sets.iter().zip(&split.sets) {
            prop_assert_eq!(a.intervals(x).unwrap(), b.intervals(y).unwrap());
        }
    }

    #[test]
    fn sparseness_agrees_with_hall(seed: u64, n in 1usize..=8, g in 1i64..=3) {
        let (mut rng, mut space, basis) = world(seed, n, 10);
        let balls: Vec<BallId> = collection(&mut rng, &basis).into_iter().take(8).collect();
        let gamma = rat(g, 4);
        let oracle = naive_sparse(&space, &basis, &balls, &gamma);
        prop_assert_eq!(is_sparse(&space, &basis, &balls, &gamma).unwrap().is_none(), oracle.is_none());
        match verify_sparseness(&mut space, &basis, &balls, &gamma).unwrap() {
            SparsenessOutcome::Feasible(w) => {
                prop_assert!(oracle.is_none());
                let refined = basis.refine(&space, &w.remap).unwrap();
                prop_assert!(w.collection.validate(&space, &refined).is_ok());
            }
            SparsenessOutcome::Infeasible(v) => {
                prop_assert!(oracle.is_some());
                prop_assert!(hall_violated(&space, &basis, &v.balls, &gamma));
            }
        }
    }

    #[test]
    fn breakpoints_bound_every_threshold(seed: u64, n in 1usize..=10, r in 1u32..=2, l in 1i64..=40) {
        let (mut rng, space, basis) = world(seed, n, 12);
        let f = space.function(random_values(&mut rng, n, 0.3)).unwrap();
        prop_assume!(!f.is_zero());
        let s = collection(&mut rng, &basis);
        let lambda = rat(l, 8);
        let weak = weak_ratio(&space, &basis, &s, &f, r, &lambda).unwrap();
        let op = BallAverages::compute(&space, &basis, &f, r).unwrap().strong_sparse_operator(&basis, &s);
        let grid = breakpoints(&space, &op, &space.norm_pow(&f, r).unwrap()).unwrap();
        let weak_root = RootSum::from_terms(r, vec![weak.clone()]);
        prop_assert!(weak.is_zero() || grid.iter().any(|b| b.ratio_root.cmp_exact(&weak_root) != Ordering::Less));
        for b in &grid {
            let at_probe = weak_ratio(&space, &basis, &s, &f, r, &b.probe).unwrap();
            prop_assert!(b.ratio_root.cmp_exact(&RootSum::from_terms(r, vec![at_probe])) != Ordering::Less);
        }
    }

    #[test]
    fn flattening_on_dyadic_intervals(seed: u64, d in 1u32..=5, r in 1u32..=2, l in 1i64..=8) {
        let (basis, space) = dyadic_basis(d);
        let mut rng = Rng8::seed_from_u64(seed);
        let values = random_values(&mut rng, space.len(), 0.5);
        prop_assume!(values.iter().any(|v| !v.is_zero()));
        let lambda = values.iter().max().unwrap() * rat(l, 8);
        let f = space.function(values).unwrap();
        let res = flatten(&space, &basis, &f, &lambda, r, None).unwrap();
        let report = verify_flattening(&res, &int(0)).unwrap();
        prop_assert!(report.g_bounded);
        prop_assert!(report.level_set_covered);
        prop_assert!(res.audit().unwrap().all_ok());
        let c1 = report.measure_constant.unwrap().0;
        prop_assert!(c1 <= int(4) + rat(1, 2));
    }
}
