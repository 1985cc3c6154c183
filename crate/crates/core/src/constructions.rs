//! Packing-condition disjointification and function flattening.
//!
//! [`flatten`] replaces a function `f` by `g = f` off a set `E` and
//! `g = lambda` on `E`, where `E` swallows the level set of the maximal
//! function. Big values of `f` near each selected maximal lambda-ball `B_k`
//! are paid for by a slice `~G_k` of a larger ball `G_k`, carved out by
//! [`disjointify`] so the slices do not overlap.

use num_traits::{Signed, Zero};
use serde::Serialize;

use crate::basis::{BallBasis, BallId, BasisError};
use crate::measure::{CellId, CellSpace, MeasurableSet, MeasureError, Remap, StepFunction};
use crate::rational::{int, pow, RatioStr, Rational};
use crate::sparse::{BallAverages, SparseError};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConstructionError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error("{sets} sets but {weights} weights")]
    LengthMismatch { sets: usize, weights: usize },
    #[error("weight {0} is negative")]
    NegativeWeight(String),
    #[error("packing condition fails at index {}", .0.index)]
    Packing(PackingViolation),
    #[error("lambda must be positive")]
    NonPositiveLambda,
    #[error("delta must be positive")]
    NonPositiveDelta,
    #[error("packing still fails after {retries} halvings of delta (last delta {delta})")]
    DeltaExhausted { retries: u32, delta: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PackingViolation {
    pub index: usize,
    /// Sum of `xi_j` over `j` with `mu(G_j) <= mu(G_k)` meeting `G_k`.
    pub load: RatioStr,
    /// `mu(G_k)`.
    pub capacity: RatioStr,
}

fn check_inputs(space: &CellSpace, sets: &[MeasurableSet], xi: &[Rational]) -> Result<(), ConstructionError> {
    if sets.len() != xi.len() {
        return Err(ConstructionError::LengthMismatch {
            sets: sets.len(),
            weights: xi.len(),
        });
    }
    for s in sets {
        space.check(s.stamp())?;
    }
    if let Some(bad) = xi.iter().find(|x| x.is_negative()) {
        return Err(ConstructionError::NegativeWeight(bad.to_string()));
    }
    Ok(())
}

/// For every `k`: `sum of xi_j over j with mu(G_j) <= mu(G_k) and G_j meeting
/// G_k` is at most `mu(G_k)`. `j = k` always counts, even for an empty `G_k`.
/// Returns the first violation.
pub fn check_packing(
    space: &CellSpace,
    sets: &[MeasurableSet],
    xi: &[Rational],
) -> Result<Option<PackingViolation>, ConstructionError> {
    check_inputs(space, sets, xi)?;
    let measures: Vec<Rational> = sets.iter().map(|s| space.measure_unchecked(s)).collect();
    for k in 0..sets.len() {
        let load: Rational = (0..sets.len())
            .filter(|&j| j == k || (measures[j] <= measures[k] && sets[j].intersects(&sets[k])))
            .map(|j| &xi[j])
            .sum();
        if load > measures[k] {
            return Ok(Some(PackingViolation {
                index: k,
                load: RatioStr(load),
                capacity: RatioStr(measures[k].clone()),
            }));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone)]
pub struct Disjointified {
    /// `~G_k`, in input order, stamped to the refined space.
    pub sets: Vec<MeasurableSet>,
    pub remap: Remap,
}

/// Pairwise disjoint `~G_k` inside `G_k` with `mu(~G_k) = xi_k` exactly.
///
/// Sets are ranked by decreasing measure (ties by index) and filled from the
/// smallest up: each takes the leftmost `xi_k` of what the smaller ones left
/// free. Cells are split where a cut falls inside one.
pub fn disjointify(
    space: &mut CellSpace,
    sets: &[MeasurableSet],
    xi: &[Rational],
) -> Result<Disjointified, ConstructionError> {
    if let Some(v) = check_packing(space, sets, xi)? {
        return Err(ConstructionError::Packing(v));
    }
    let measures: Vec<Rational> = sets.iter().map(|s| space.measure_unchecked(s)).collect();
    let mut order: Vec<usize> = (0..sets.len()).collect();
    order.sort_by(|&a, &b| measures[b].cmp(&measures[a]).then(a.cmp(&b)));

    let mut remap = Remap::identity(space);
    let mut chosen: Vec<Option<MeasurableSet>> = vec![None; sets.len()];
    let mut taken = space.empty_set();
    for &k in order.iter().rev() {
        let current = remap.set(&sets[k]);
        if xi[k].is_zero() {
            chosen[k] = Some(current.empty_like());
            continue;
        }
        let free = current.difference(&taken);
        let (piece, step) = space.leftmost_set(&xi[k], &free)?;
        if !step.is_identity() {
            taken = step.set(&taken);
            for c in chosen.iter_mut().flatten() {
                *c = step.set(c);
            }
            remap = remap.then(&step);
        }
        taken.union_with(&piece);
        chosen[k] = Some(piece);
    }
    Ok(Disjointified {
        sets: chosen.into_iter().map(|c| c.expect("every index visited")).collect(),
        remap,
    })
}

/// One selected maximal lambda-ball and everything built around it.
#[derive(Debug, Clone)]
pub struct FlatteningStep {
    /// `B_k`.
    pub ball: BallId,
    /// `B_k*`.
    pub hull: BallId,
    /// `B_k**`.
    pub double_hull: BallId,
    /// Whether some ball meets `B_k*` with more than twice its measure.
    pub family_nonempty: bool,
    /// `G_k`: the smallest such ball, ties by id.
    pub g_ball: Option<BallId>,
    /// `D_k = B_k* minus the earlier hulls`.
    pub d_set: MeasurableSet,
    /// `integral over D_k of f^r`.
    pub d_integral: Rational,
    /// `xi_k = delta / lambda^r * d_integral`.
    pub xi: Rational,
    /// `~G_k`, present when `G_k` is.
    pub tilde: Option<MeasurableSet>,
}

#[derive(Debug, Clone)]
pub struct FlatteningResult {
    /// Refinement of the input space the result lives in.
    pub space: CellSpace,
    /// The input basis carried into `space`.
    pub basis: BallBasis,
    /// From the input space version to `space`.
    pub remap: Remap,
    /// The input function carried into `space`.
    pub f: StepFunction,
    pub g: StepFunction,
    pub e_lambda: MeasurableSet,
    pub lambda: Rational,
    pub r: u32,
    pub delta: Rational,
    /// Number of times delta was halved.
    pub retries: u32,
    pub steps: Vec<FlatteningStep>,
}

pub const MAX_DELTA_RETRIES: u32 = 10;

/// Runs the flattening construction for `f` at height `lambda`.
///
/// `delta` defaults to `1 / K`; while the packing condition fails it is
/// halved, at most [`MAX_DELTA_RETRIES`] times.
pub fn flatten(
    space: &CellSpace,
    basis: &BallBasis,
    f: &StepFunction,
    lambda: &Rational,
    r: u32,
    delta: Option<Rational>,
) -> Result<FlatteningResult, ConstructionError> {
    let averages = BallAverages::compute(space, basis, f, r)?;
    flatten_with(space, basis, f, &averages, lambda, delta)
}

/// [`flatten`] reusing precomputed ball averages of `f`.
pub fn flatten_with(
    space: &CellSpace,
    basis: &BallBasis,
    f: &StepFunction,
    averages: &BallAverages,
    lambda: &Rational,
    delta: Option<Rational>,
) -> Result<FlatteningResult, ConstructionError> {
    if !lambda.is_positive() {
        return Err(ConstructionError::NonPositiveLambda);
    }
    let r = averages.r();
    let k_const = basis
        .hull_constant()
        .cloned()
        .ok_or_else(|| BasisError::MissingHull(BallId(0)))?;
    let mut delta = delta.unwrap_or_else(|| Rational::from_integer(1.into()) / &k_const);
    if !delta.is_positive() {
        return Err(ConstructionError::NonPositiveDelta);
    }
    let lambda_pow = pow(lambda, r);

    let selection = averages.select_disjoint_maximal(basis, lambda)?;
    let mut steps = Vec::with_capacity(selection.balls.len());
    let mut earlier_hulls = space.empty_set();
    for &b in &selection.balls {
        let hull = basis.hull_of(b)?;
        let double_hull = basis.hull_of(hull)?;
        let hull_set = &basis.ball(hull).set;
        let bar = &basis.ball(hull).measure * int(2);
        let g_ball = basis
            .balls()
            .iter()
            .filter(|a| a.set.intersects(hull_set) && a.measure > bar)
            .min_by(|x, y| x.measure.cmp(&y.measure).then(x.id.cmp(&y.id)))
            .map(|a| a.id);
        let d_set = hull_set.difference(&earlier_hulls);
        earlier_hulls.union_with(hull_set);
        let d_integral = space.integrate_power_unchecked(f, &d_set, r);
        steps.push(FlatteningStep {
            ball: b,
            hull,
            double_hull,
            family_nonempty: g_ball.is_some(),
            g_ball,
            d_set,
            d_integral,
            xi: Rational::zero(),
            tilde: None,
        });
    }

    let with_g: Vec<usize> = (0..steps.len()).filter(|&k| steps[k].g_ball.is_some()).collect();
    let g_sets: Vec<MeasurableSet> = with_g
        .iter()
        .map(|&k| basis.ball(steps[k].g_ball.unwrap()).set.clone())
        .collect();
    let mut retries = 0;
    let (refined, placed) = loop {
        for s in steps.iter_mut() {
            s.xi = &delta * &s.d_integral / &lambda_pow;
        }
        let xi: Vec<Rational> = with_g.iter().map(|&k| steps[k].xi.clone()).collect();
        match check_packing(space, &g_sets, &xi)? {
            None => {
                let mut refined = space.clone();
                let placed = disjointify(&mut refined, &g_sets, &xi)?;
                break (refined, placed);
            }
            Some(_) if retries < MAX_DELTA_RETRIES => {
                delta /= int(2);
                retries += 1;
            }
            Some(_) => {
                return Err(ConstructionError::DeltaExhausted {
                    retries,
                    delta: delta.to_string(),
                })
            }
        }
    };

    let remap = placed.remap;
    let refined_basis = basis.refine(&refined, &remap)?;
    let f_refined = remap.function(f);
    for s in steps.iter_mut() {
        s.d_set = remap.set(&s.d_set);
    }
    for (&k, tilde) in with_g.iter().zip(placed.sets) {
        steps[k].tilde = Some(tilde);
    }
    let mut e_lambda = refined.empty_set();
    for s in &steps {
        if let Some(t) = &s.tilde {
            e_lambda.union_with(t);
        }
        e_lambda.union_with(&refined_basis.ball(s.double_hull).set);
    }
    let g = f_refined.replace_on(&e_lambda, lambda);
    Ok(FlatteningResult {
        space: refined,
        basis: refined_basis,
        remap,
        f: f_refined,
        g,
        e_lambda,
        lambda: lambda.clone(),
        r,
        delta,
        retries,
        steps,
    })
}

/// How well `<g>` over hulls dominates `<f>` over balls outside `E_lambda`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Domination {
    /// Every ball lies inside `E_lambda`.
    Vacuous,
    /// Smallest `C` with `<f>_B^r <= C <g>_{B*}^r` for all `B` not inside `E_lambda`.
    Finite(RatioStr),
    /// This ball has `<f>_B > 0` but `<g>_{B*} = 0`.
    Unbounded(BallId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlatteningReport {
    /// `{M_r f > lambda}` lies inside `E_lambda`.
    pub level_set_covered: bool,
    /// `g <= lambda` everywhere.
    pub g_bounded: bool,
    /// `mu(E_lambda) lambda^r / ||f||_r^r`; absent for `f = 0`.
    pub measure_constant: Option<RatioStr>,
    pub domination: Domination,
    /// Smallest `C` making all four checks hold; absent when none does.
    pub minimal_constant: Option<RatioStr>,
    pub constant: RatioStr,
    pub passed: bool,
}

/// Checks the flattening postconditions against a constant `c`.
pub fn verify_flattening(result: &FlatteningResult, c: &Rational) -> Result<FlatteningReport, ConstructionError> {
    let space = &result.space;
    let basis = &result.basis;
    let r = result.r;
    let lambda_pow = pow(&result.lambda, r);

    let f_avg = BallAverages::compute(space, basis, &result.f, r)?;
    let level = f_avg.maximal(basis).level_set(&result.lambda);
    let level_set_covered = level.is_subset(&result.e_lambda);
    let g_bounded = result.g.values().iter().all(|v| v <= &result.lambda);

    let norm = space.norm_pow(&result.f, r)?;
    let e_measure = space.measure(&result.e_lambda)?;
    let measure_constant = if norm.is_zero() {
        None
    } else {
        Some(&e_measure * &lambda_pow / &norm)
    };

    let g_avg = BallAverages::compute(space, basis, &result.g, r)?;
    let mut domination = Domination::Vacuous;
    let mut worst: Option<Rational> = None;
    for ball in basis.balls() {
        if ball.set.is_subset(&result.e_lambda) {
            continue;
        }
        let num = &f_avg.plain_pow()[ball.id.0];
        let den = &g_avg.plain_pow()[basis.hull_of(ball.id)?.0];
        if den.is_zero() {
            if num.is_zero() {
                worst.get_or_insert_with(Rational::zero);
                continue;
            }
            domination = Domination::Unbounded(ball.id);
            break;
        }
        let ratio = num / den;
        if worst.as_ref().is_none_or(|w| &ratio > w) {
            worst = Some(ratio);
        }
    }
    if domination == Domination::Vacuous {
        if let Some(w) = worst.clone() {
            domination = Domination::Finite(RatioStr(w));
        }
    }

    let minimal_constant = if !(level_set_covered && g_bounded) {
        None
    } else {
        match &domination {
            Domination::Unbounded(_) => None,
            Domination::Finite(w) => Some(
                measure_constant
                    .clone()
                    .map_or(w.0.clone(), |m| m.max(w.0.clone())),
            ),
            Domination::Vacuous => Some(measure_constant.clone().unwrap_or_else(Rational::zero)),
        }
    };
    let passed = minimal_constant.as_ref().is_some_and(|m| m <= c)
        || (norm.is_zero() && level_set_covered && g_bounded && domination == Domination::Vacuous);
    Ok(FlatteningReport {
        level_set_covered,
        g_bounded,
        measure_constant: measure_constant.map(RatioStr),
        domination,
        minimal_constant: minimal_constant.map(RatioStr),
        constant: RatioStr(c.clone()),
        passed,
    })
}

/// The intermediate inequalities of the flattening construction, evaluated
/// on one result. Each flag is one inequality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlatteningAudit {
    /// `B_k` pairwise disjoint maximal lambda-balls.
    pub selection_ok: bool,
    /// `mu(G_k) <= 2 inf over the family`.
    pub g_within_factor_two: bool,
    /// `B_k*` inside `G_k*` and `<f>_{G_k*} <= lambda`.
    pub g_hull_average_ok: bool,
    /// `integral over G_k* of f^r <= lambda^r K mu(G_k)`.
    pub g_hull_integral_ok: bool,
    /// `sum mu(~G_k) <= delta ||f||^r / lambda^r`.
    pub tilde_total_ok: bool,
    /// `mu(union B_k**) <= K^2 sum mu(B_k) <= K^2 ||f||^r / lambda^r`.
    pub double_hull_ok: bool,
    /// `~G_k` disjoint, inside `G_k`, of measure `xi_k`.
    pub tilde_exact: bool,
}

impl FlatteningAudit {
    pub fn all_ok(&self) -> bool {
        self.selection_ok
            && self.g_within_factor_two
            && self.g_hull_average_ok
            && self.g_hull_integral_ok
            && self.tilde_total_ok
            && self.double_hull_ok
            && self.tilde_exact
    }
}

impl FlatteningResult {
    pub fn audit(&self) -> Result<FlatteningAudit, ConstructionError> {
        let space = &self.space;
        let basis = &self.basis;
        let r = self.r;
        let lambda_pow = pow(&self.lambda, r);
        let k_const = basis.hull_constant().cloned().unwrap_or_else(Rational::zero);
        let avgs = BallAverages::compute(space, basis, &self.f, r)?;
        let norm = space.norm_pow(&self.f, r)?;
        let maximal = avgs.maximal_lambda_balls(basis, &self.lambda);

        let mut selection_ok = true;
        for (i, a) in self.steps.iter().enumerate() {
            selection_ok &= maximal.contains(&a.ball);
            for b in &self.steps[i + 1..] {
                selection_ok &= basis.ball(a.ball).set.is_disjoint(&basis.ball(b.ball).set);
            }
        }

        let mut g_within_factor_two = true;
        let mut g_hull_average_ok = true;
        let mut g_hull_integral_ok = true;
        for s in &self.steps {
            let hull = basis.ball(s.hull);
            let bar = &hull.measure * int(2);
            let inf = basis
                .balls()
                .iter()
                .filter(|a| a.measure > bar && a.set.intersects(&hull.set))
                .map(|a| a.measure.clone())
                .min();
            if let (Some(g), Some(inf)) = (s.g_ball, inf) {
                let g_ball = basis.ball(g);
                g_within_factor_two &= g_ball.measure <= &inf * int(2);
                let gh = basis.ball(basis.hull_of(g)?);
                g_hull_average_ok &= hull.set.is_subset(&gh.set) && avgs.plain_pow()[gh.id.0] <= lambda_pow;
                let integral = space.integrate_power_unchecked(&self.f, &gh.set, r);
                g_hull_integral_ok &= integral <= &lambda_pow * &k_const * &g_ball.measure;
            } else {
                g_within_factor_two &= s.g_ball.is_none() && !s.family_nonempty;
            }
        }

        let mut tilde_total = Rational::zero();
        let mut tilde_exact = true;
        let mut seen = space.empty_set();
        for s in &self.steps {
            if let (Some(t), Some(g)) = (&s.tilde, s.g_ball) {
                let m = space.measure(t)?;
                tilde_exact &= m == s.xi && t.is_subset(&basis.ball(g).set) && t.is_disjoint(&seen);
                seen.union_with(t);
                tilde_total += m;
            }
        }
        let tilde_total_ok = tilde_total * &lambda_pow <= &self.delta * &norm;

        let mut double_union = space.empty_set();
        let mut selected_measure = Rational::zero();
        for s in &self.steps {
            double_union.union_with(&basis.ball(s.double_hull).set);
            selected_measure += &basis.ball(s.ball).measure;
        }
        let k2 = &k_const * &k_const;
        let double_measure = space.measure(&double_union)?;
        let double_hull_ok = double_measure <= &k2 * &selected_measure
            && &selected_measure * &lambda_pow <= norm;

        Ok(FlatteningAudit {
            selection_ok,
            g_within_factor_two,
            g_hull_average_ok,
            g_hull_integral_ok,
            tilde_total_ok,
            double_hull_ok,
            tilde_exact,
        })
    }

    pub fn to_json(&self) -> Result<FlatteningJson, ConstructionError> {
        let ids = |s: &MeasurableSet| self.space.cell_ids(s);
        let steps = self
            .steps
            .iter()
            .map(|s| {
                Ok(FlatteningStepJson {
                    ball: s.ball,
                    hull: s.hull,
                    double_hull: s.double_hull,
                    family_nonempty: s.family_nonempty,
                    g_ball: s.g_ball,
                    d_set: ids(&s.d_set)?,
                    xi: RatioStr(s.xi.clone()),
                    tilde: s.tilde.as_ref().map(ids).transpose()?,
                })
            })
            .collect::<Result<Vec<_>, MeasureError>>()?;
        Ok(FlatteningJson {
            lambda: RatioStr(self.lambda.clone()),
            r: self.r,
            delta: RatioStr(self.delta.clone()),
            retries: self.retries,
            space: self.space.to_json(),
            e_lambda: ids(&self.e_lambda)?,
            g: self.space.function_to_json(&self.g)?,
            steps,
        })
    }
}

/// Audit trail of a flattening run, for regression snapshots.
#[derive(Debug, Clone, Serialize)]
pub struct FlatteningJson {
    pub lambda: RatioStr,
    pub r: u32,
    pub delta: RatioStr,
    pub retries: u32,
    pub space: crate::measure::SpaceJson,
    pub e_lambda: Vec<CellId>,
    pub g: crate::measure::FunctionJson,
    pub steps: Vec<FlatteningStepJson>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatteningStepJson {
    pub ball: BallId,
    pub hull: BallId,
    pub double_hull: BallId,
    pub family_nonempty: bool,
    pub g_ball: Option<BallId>,
    pub d_set: Vec<CellId>,
    pub xi: RatioStr,
    pub tilde: Option<Vec<CellId>>,
}
