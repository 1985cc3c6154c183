//! Ball averages, sparse operators, the maximal function and lambda-balls.
//!
//! Averages of order `r` are compared through their `r`-th powers, so every
//! threshold test here is exact. Operators that sum several averages return a
//! [`RootSumFunction`], whose cell values are exact sums of `r`-th roots.

pub mod flow;
mod sparseness;

pub use sparseness::{
    is_sparse, verify_sparseness, SparseCollection, SparseJson, SparseWitness, SparsenessOutcome,
    ViolatingFamily,
};

use std::cmp::Ordering;

use fixedbitset::FixedBitSet;
use num_traits::{Signed, Zero};

use crate::basis::{BallBasis, BallId, BasisError};
use crate::measure::{CellSpace, MeasurableSet, MeasureError, Stamp, StepFunction};
use crate::rational::{pow, Rational, RootSum};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SparseError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error("average over an empty set")]
    EmptyBall,
    #[error("lambda must be positive")]
    NonPositiveLambda,
    #[error("gamma must lie in (0, 1)")]
    GammaOutOfRange,
    #[error("exponent r must be at least 1")]
    ZeroExponent,
    #[error("witness for ball {ball:?} violates {clause}")]
    InvalidWitness { ball: BallId, clause: &'static str },
}

/// `<f>_{B,r}` stored as its `r`-th power.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PowerAverage {
    pub value_pow_r: Rational,
    pub r: u32,
}

impl PowerAverage {
    pub fn root(&self) -> RootSum {
        RootSum::from_terms(self.r, vec![self.value_pow_r.clone()])
    }

    /// Whether the average strictly exceeds `lambda`.
    pub fn exceeds(&self, lambda: &Rational) -> bool {
        self.value_pow_r > pow(lambda, self.r)
    }

    pub fn to_f64(&self) -> f64 {
        self.root().to_f64()
    }
}

/// `(1 / mu(B)) * integral over B of f^r`.
pub fn average(
    space: &CellSpace,
    f: &StepFunction,
    set: &MeasurableSet,
    r: u32,
) -> Result<PowerAverage, SparseError> {
    if r == 0 {
        return Err(SparseError::ZeroExponent);
    }
    let m = space.measure(set)?;
    if m.is_zero() {
        return Err(SparseError::EmptyBall);
    }
    let integral = space.integrate_power(f, set, r)?;
    Ok(PowerAverage {
        value_pow_r: integral / m,
        r,
    })
}

/// `<f>*_{B,r}`: the largest average over member balls containing `B`, `B` included.
pub fn starred_average(
    space: &CellSpace,
    basis: &BallBasis,
    f: &StepFunction,
    ball: BallId,
    r: u32,
) -> Result<PowerAverage, SparseError> {
    basis.get(ball)?;
    let mut best: Option<PowerAverage> = None;
    for &a in basis.supersets(ball) {
        let avg = average(space, f, &basis.ball(a).set, r)?;
        if best.as_ref().is_none_or(|b| avg.value_pow_r > b.value_pow_r) {
            best = Some(avg);
        }
    }
    Ok(best.expect("a ball contains itself"))
}

/// Power averages of one function over every ball of a basis, with the
/// starred averages derived from them.
#[derive(Debug, Clone)]
pub struct BallAverages {
    stamp: Stamp,
    r: u32,
    plain: Vec<Rational>,
    starred: Vec<Rational>,
}

impl BallAverages {
    pub fn compute(
        space: &CellSpace,
        basis: &BallBasis,
        f: &StepFunction,
        r: u32,
    ) -> Result<Self, SparseError> {
        if r == 0 {
            return Err(SparseError::ZeroExponent);
        }
        space.check(basis.stamp())?;
        space.check(f.stamp())?;
        let (weights, den) = space.power_weights(f, r);
        let plain: Vec<Rational> = basis.balls().iter().map(|b| weighted_average(&weights, &den, b)).collect();
        let starred = basis
            .ids()
            .map(|b| {
                basis
                    .supersets(b)
                    .iter()
                    .map(|a| &plain[a.0])
                    .max()
                    .cloned()
                    .expect("a ball contains itself")
            })
            .collect();
        Ok(BallAverages {
            stamp: space.stamp(),
            r,
            plain,
            starred,
        })
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    pub fn get(&self, ball: BallId) -> PowerAverage {
        PowerAverage {
            value_pow_r: self.plain[ball.0].clone(),
            r: self.r,
        }
    }

    pub fn starred(&self, ball: BallId) -> PowerAverage {
        PowerAverage {
            value_pow_r: self.starred[ball.0].clone(),
            r: self.r,
        }
    }

    pub fn plain_pow(&self) -> &[Rational] {
        &self.plain
    }

    pub fn starred_pow(&self) -> &[Rational] {
        &self.starred
    }

    fn operator(&self, basis: &BallBasis, collection: &[BallId], table: &[Rational]) -> RootSumFunction {
        let n = basis.containing_len();
        let mut values = vec![RootSum::zero(self.r); n];
        for &b in collection {
            let term = &table[b.0];
            for p in basis.ball(b).set.positions() {
                values[p].push(term.clone());
            }
        }
        RootSumFunction {
            stamp: self.stamp,
            r: self.r,
            values,
        }
    }

    /// `A_{S,r} f`.
    pub fn sparse_operator(&self, basis: &BallBasis, collection: &[BallId]) -> RootSumFunction {
        self.operator(basis, collection, &self.plain)
    }

    /// `A*_{S,r} f`.
    pub fn strong_sparse_operator(&self, basis: &BallBasis, collection: &[BallId]) -> RootSumFunction {
        self.operator(basis, collection, &self.starred)
    }

    /// `M_r f` in the power domain.
    pub fn maximal(&self, basis: &BallBasis) -> PowerFunction {
        let pow_values = (0..basis.containing_len())
            .map(|p| {
                basis
                    .containing(p)
                    .iter()
                    .map(|b| &self.plain[b.0])
                    .max()
                    .cloned()
                    .unwrap_or_else(Rational::zero)
            })
            .collect();
        PowerFunction {
            stamp: self.stamp,
            r: self.r,
            pow_values,
        }
    }

    /// Balls whose average exceeds `lambda`.
    pub fn lambda_balls(&self, basis: &BallBasis, lambda: &Rational) -> Vec<BallId> {
        let threshold = pow(lambda, self.r);
        basis.ids().filter(|b| self.plain[b.0] > threshold).collect()
    }

    /// Lambda-balls `B` with no lambda-ball `A` containing `B` and `mu(A) >= 2 mu(B)`.
    pub fn maximal_lambda_balls(&self, basis: &BallBasis, lambda: &Rational) -> Vec<BallId> {
        let threshold = pow(lambda, self.r);
        let flags: Vec<bool> = self.plain.iter().map(|a| a > &threshold).collect();
        let is_lambda = |b: BallId| flags[b.0];
        basis
            .ids()
            .filter(|&b| is_lambda(b))
            .filter(|&b| {
                let doubled = &basis.ball(b).measure * Rational::from_integer(2.into());
                !basis
                    .supersets(b)
                    .iter()
                    .any(|&a| is_lambda(a) && basis.ball(a).measure >= doubled)
            })
            .collect()
    }

    /// Pairwise disjoint maximal lambda-balls whose hulls cover `{M_r f > lambda}`.
    pub fn select_disjoint_maximal(
        &self,
        basis: &BallBasis,
        lambda: &Rational,
    ) -> Result<MaximalSelection, SparseError> {
        if !lambda.is_positive() {
            return Err(SparseError::NonPositiveLambda);
        }
        // {M_r f > lambda} is the union of the lambda-balls
        let mut level_set = MeasurableSet::from_bits(self.stamp, FixedBitSet::with_capacity(basis.containing_len()));
        for b in self.lambda_balls(basis, lambda) {
            level_set.union_with(&basis.ball(b).set);
        }
        let candidates = self.maximal_lambda_balls(basis, lambda);
        let balls = basis.covering_select(&level_set, &candidates)?;
        Ok(MaximalSelection { balls, level_set })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaximalSelection {
    pub balls: Vec<BallId>,
    /// `{M_r f > lambda}`.
    pub level_set: MeasurableSet,
}

pub fn apply_sparse(
    space: &CellSpace,
    basis: &BallBasis,
    collection: &[BallId],
    f: &StepFunction,
    r: u32,
) -> Result<RootSumFunction, SparseError> {
    check_ids(basis, collection)?;
    Ok(BallAverages::compute(space, basis, f, r)?.sparse_operator(basis, collection))
}

/// `A*_{S,r} f`, averaging only over balls that contain a member of
/// `collection`.
pub fn apply_strong_sparse(
    space: &CellSpace,
    basis: &BallBasis,
    collection: &[BallId],
    f: &StepFunction,
    r: u32,
) -> Result<RootSumFunction, SparseError> {
    if r == 0 {
        return Err(SparseError::ZeroExponent);
    }
    check_ids(basis, collection)?;
    space.check(basis.stamp())?;
    space.check(f.stamp())?;
    let (weights, den) = space.power_weights(f, r);
    let mut plain: Vec<Option<Rational>> = vec![None; basis.len()];
    let mut values = vec![RootSum::zero(r); basis.containing_len()];
    for &b in collection {
        let mut best: Option<Rational> = None;
        for &a in basis.supersets(b) {
            let avg = plain[a.0].get_or_insert_with(|| weighted_average(&weights, &den, basis.ball(a)));
            if best.as_ref().is_none_or(|m| &*avg > m) {
                best = Some(avg.clone());
            }
        }
        let term = best.expect("a ball contains itself");
        for p in basis.ball(b).set.positions() {
            values[p].push(term.clone());
        }
    }
    Ok(RootSumFunction {
        stamp: space.stamp(),
        r,
        values,
    })
}

/// `<f>_B^r` from integer weights over a common denominator.
fn weighted_average(weights: &[num_bigint::BigInt], den: &num_bigint::BigInt, ball: &crate::basis::Ball) -> Rational {
    let mut num = num_bigint::BigInt::zero();
    for p in ball.set.positions() {
        num += &weights[p];
    }
    Rational::new(num * ball.measure.denom(), den * ball.measure.numer())
}

pub fn maximal_function(
    space: &CellSpace,
    basis: &BallBasis,
    f: &StepFunction,
    r: u32,
) -> Result<PowerFunction, SparseError> {
    Ok(BallAverages::compute(space, basis, f, r)?.maximal(basis))
}

pub fn lambda_balls(
    space: &CellSpace,
    basis: &BallBasis,
    f: &StepFunction,
    lambda: &Rational,
    r: u32,
) -> Result<Vec<BallId>, SparseError> {
    if !lambda.is_positive() {
        return Err(SparseError::NonPositiveLambda);
    }
    Ok(BallAverages::compute(space, basis, f, r)?.lambda_balls(basis, lambda))
}

pub fn maximal_lambda_balls(
    space: &CellSpace,
    basis: &BallBasis,
    f: &StepFunction,
    lambda: &Rational,
    r: u32,
) -> Result<Vec<BallId>, SparseError> {
    if !lambda.is_positive() {
        return Err(SparseError::NonPositiveLambda);
    }
    Ok(BallAverages::compute(space, basis, f, r)?.maximal_lambda_balls(basis, lambda))
}

pub fn select_disjoint_maximal(
    space: &CellSpace,
    basis: &BallBasis,
    f: &StepFunction,
    lambda: &Rational,
    r: u32,
) -> Result<MaximalSelection, SparseError> {
    BallAverages::compute(space, basis, f, r)?.select_disjoint_maximal(basis, lambda)
}

fn check_ids(basis: &BallBasis, collection: &[BallId]) -> Result<(), SparseError> {
    for &b in collection {
        basis.get(b)?;
    }
    Ok(())
}

/// A step function whose values are stored as `r`-th powers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PowerFunction {
    stamp: Stamp,
    r: u32,
    pow_values: Vec<Rational>,
}

impl PowerFunction {
    pub fn stamp(&self) -> Stamp {
        self.stamp
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    /// `r`-th powers of the cell values.
    pub fn pow_values(&self) -> &[Rational] {
        &self.pow_values
    }

    pub fn value(&self, position: usize) -> RootSum {
        RootSum::from_terms(self.r, vec![self.pow_values[position].clone()])
    }

    /// `{x : value(x) > lambda}`.
    pub fn level_set(&self, lambda: &Rational) -> MeasurableSet {
        let threshold = pow(lambda, self.r);
        self.level_set_pow(&threshold)
    }

    /// `{x : value(x)^r > threshold}`.
    pub fn level_set_pow(&self, threshold: &Rational) -> MeasurableSet {
        let mut bits = FixedBitSet::with_capacity(self.pow_values.len());
        for (p, v) in self.pow_values.iter().enumerate() {
            if v > threshold {
                bits.insert(p);
            }
        }
        MeasurableSet::from_bits(self.stamp, bits)
    }

    /// Exact values when `r = 1`.
    pub fn to_step_function(&self) -> Option<StepFunction> {
        (self.r == 1).then(|| StepFunction::from_parts(self.stamp, self.pow_values.clone()))
    }
}

/// A step function whose cell values are sums of `r`-th roots of rationals,
/// the output type of the sparse operators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootSumFunction {
    stamp: Stamp,
    r: u32,
    values: Vec<RootSum>,
}

impl RootSumFunction {
    pub fn stamp(&self) -> Stamp {
        self.stamp
    }

    pub fn r(&self) -> u32 {
        self.r
    }

    pub fn values(&self) -> &[RootSum] {
        &self.values
    }

    pub fn value(&self, position: usize) -> &RootSum {
        &self.values[position]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(RootSum::to_f64).collect()
    }

    /// Exact values, available when every cell value is rational (always for `r = 1`).
    pub fn to_step_function(&self) -> Option<StepFunction> {
        let values = self.values.iter().map(RootSum::exact).collect::<Option<Vec<_>>>()?;
        Some(StepFunction::from_parts(self.stamp, values))
    }

    /// `{x : value(x) > lambda}`, decided exactly.
    pub fn level_set(&self, lambda: &Rational) -> MeasurableSet {
        let mut bits = FixedBitSet::with_capacity(self.values.len());
        for (p, v) in self.values.iter().enumerate() {
            if v.cmp_rational(lambda) == Ordering::Greater {
                bits.insert(p);
            }
        }
        MeasurableSet::from_bits(self.stamp, bits)
    }

    /// Distinct cell values in decreasing order, each with the set of cells
    /// where the function is at least that value.
    pub fn upper_level_sets(&self) -> Vec<(RootSum, MeasurableSet)> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| self.values[b].cmp_exact(&self.values[a]));
        let mut out: Vec<(RootSum, MeasurableSet)> = Vec::new();
        let mut bits = FixedBitSet::with_capacity(self.values.len());
        let mut i = 0;
        while i < order.len() {
            let v = self.values[order[i]].clone();
            let mut j = i;
            while j < order.len() && self.values[order[j]].cmp_exact(&v) == Ordering::Equal {
                bits.insert(order[j]);
                j += 1;
            }
            out.push((v, MeasurableSet::from_bits(self.stamp, bits.clone())));
            i = j;
        }
        out
    }

    /// Pointwise `self <= other`, decided exactly.
    pub fn dominated_by(&self, other: &RootSumFunction) -> bool {
        self.values
            .iter()
            .zip(&other.values)
            .all(|(a, b)| a.cmp_exact(b) != Ordering::Greater)
    }
}
