//! Finite measure spaces with a total cell order.
//!
//! A [`CellSpace`] is an ordered partition of the ambient space into cells of
//! positive rational measure. The cell order is the "leftmost" order used by
//! [`CellSpace::leftmost_set`]. Cells can be split in place; every split
//! issues a fresh [`Stamp`], so sets and functions built against an older
//! version are rejected until they are migrated through the returned
//! [`Remap`].

use std::ops::Range;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use fixedbitset::FixedBitSet;
use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use crate::rational::{lcm_into, pow, sum_rationals, RatioStr, Rational};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MeasureError {
    #[error("handle stamped {found:?} used with space stamped {expected:?}")]
    StaleStamp { expected: Stamp, found: Stamp },
    #[error("cell measure must be positive, got {0}")]
    NonPositiveMeasure(String),
    #[error("split fraction {0} is outside (0, 1)")]
    FractionOutOfRange(String),
    #[error("unknown cell {0:?}")]
    UnknownCell(CellId),
    #[error("kappa {kappa} outside (0, {available}]")]
    KappaOutOfRange { kappa: String, available: String },
    #[error("function value {0} is negative")]
    NegativeValue(String),
    #[error("expected {expected} values, got {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("integration exponent must be at least 1")]
    ZeroExponent,
    #[error("space has no cells")]
    EmptySpace,
}

/// Identity of one version of a [`CellSpace`]. Unique per process.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stamp(u64);

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

impl Stamp {
    fn fresh() -> Self {
        Stamp(NEXT_STAMP.fetch_add(1, AtomicOrdering::Relaxed))
    }
}

/// Stable cell token. Survives splits of other cells; a split cell's id is
/// retired and both children get new ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cell {
    pub id: CellId,
    pub measure: Rational,
}

#[derive(Debug, Clone)]
pub struct CellSpace {
    stamp: Stamp,
    generation: u64,
    cells: Vec<Cell>,
    next_id: u64,
    total: Rational,
}

/// A set of cells of one space version, stored by cell position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MeasurableSet {
    stamp: Stamp,
    bits: FixedBitSet,
}

/// A nonnegative function constant on each cell.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepFunction {
    stamp: Stamp,
    values: Vec<Rational>,
}

/// Migration table from one space version to a refinement of it. Each old
/// position maps to the contiguous run of positions its descendants occupy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Remap {
    from: Stamp,
    to: Stamp,
    targets: Vec<Range<usize>>,
    new_len: usize,
}

/// Where the cumulative measure of a set first reaches `kappa`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LeftmostPosition {
    /// Reached exactly at the right edge of this cell.
    After { cell: CellId, position: usize },
    /// Reached strictly inside this cell, `offset` from its left edge.
    Inside {
        cell: CellId,
        position: usize,
        offset: Rational,
    },
}

impl CellSpace {
    /// Builds a space whose cells, in leftmost order, have the given measures.
    pub fn new(measures: Vec<Rational>) -> Result<Self, MeasureError> {
        if measures.is_empty() {
            return Err(MeasureError::EmptySpace);
        }
        if let Some(bad) = measures.iter().find(|m| !m.is_positive()) {
            return Err(MeasureError::NonPositiveMeasure(bad.to_string()));
        }
        let total = measures.iter().sum();
        let cells: Vec<Cell> = measures
            .into_iter()
            .enumerate()
            .map(|(i, measure)| Cell {
                id: CellId(i as u64),
                measure,
            })
            .collect();
        Ok(CellSpace {
            stamp: Stamp::fresh(),
            generation: 0,
            next_id: cells.len() as u64,
            cells,
            total,
        })
    }

    /// `n` cells of measure `total / n`.
    pub fn uniform(n: usize, total: Rational) -> Result<Self, MeasureError> {
        let each = total / Rational::from_integer(n.into());
        Self::new(vec![each; n])
    }

    pub fn stamp(&self) -> Stamp {
        self.stamp
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell_measure(&self, position: usize) -> &Rational {
        &self.cells[position].measure
    }

    pub fn total_measure(&self) -> &Rational {
        &self.total
    }

    pub fn position_of(&self, id: CellId) -> Result<usize, MeasureError> {
        self.cells
            .iter()
            .position(|c| c.id == id)
            .ok_or(MeasureError::UnknownCell(id))
    }

    pub fn check(&self, stamp: Stamp) -> Result<(), MeasureError> {
        if stamp == self.stamp {
            Ok(())
        } else {
            Err(MeasureError::StaleStamp {
                expected: self.stamp,
                found: stamp,
            })
        }
    }

    pub fn empty_set(&self) -> MeasurableSet {
        MeasurableSet {
            stamp: self.stamp,
            bits: FixedBitSet::with_capacity(self.len()),
        }
    }

    pub fn full_set(&self) -> MeasurableSet {
        let mut bits = FixedBitSet::with_capacity(self.len());
        bits.insert_range(..);
        MeasurableSet {
            stamp: self.stamp,
            bits,
        }
    }

    /// The set of cells at the given positions.
    pub fn set_from_positions<I: IntoIterator<Item = usize>>(&self, positions: I) -> MeasurableSet {
        let mut set = self.empty_set();
        for p in positions {
            assert!(p < self.len(), "cell position {p} out of range");
            set.bits.insert(p);
        }
        set
    }

    pub fn set_from_ids(&self, ids: &[CellId]) -> Result<MeasurableSet, MeasureError> {
        let mut set = self.empty_set();
        for &id in ids {
            set.bits.insert(self.position_of(id)?);
        }
        Ok(set)
    }

    pub fn cell_ids(&self, set: &MeasurableSet) -> Result<Vec<CellId>, MeasureError> {
        self.check(set.stamp)?;
        Ok(set.positions().map(|p| self.cells[p].id).collect())
    }

    pub fn measure(&self, set: &MeasurableSet) -> Result<Rational, MeasureError> {
        self.check(set.stamp)?;
        Ok(self.measure_unchecked(set))
    }

    pub(crate) fn measure_unchecked(&self, set: &MeasurableSet) -> Rational {
        sum_rationals(set.bits.ones().map(|p| &self.cells[p].measure))
    }

    /// The function with the given per-cell values, in leftmost order.
    pub fn function(&self, values: Vec<Rational>) -> Result<StepFunction, MeasureError> {
        if values.len() != self.len() {
            return Err(MeasureError::LengthMismatch {
                expected: self.len(),
                found: values.len(),
            });
        }
        if let Some(bad) = values.iter().find(|v| v.is_negative()) {
            return Err(MeasureError::NegativeValue(bad.to_string()));
        }
        Ok(StepFunction {
            stamp: self.stamp,
            values,
        })
    }

    pub fn constant(&self, value: Rational) -> Result<StepFunction, MeasureError> {
        self.function(vec![value; self.len()])
    }

    pub fn indicator(&self, set: &MeasurableSet) -> Result<StepFunction, MeasureError> {
        self.check(set.stamp)?;
        let values = (0..self.len())
            .map(|p| {
                if set.contains(p) {
                    Rational::one()
                } else {
                    Rational::zero()
                }
            })
            .collect();
        self.function(values)
    }

    /// `sum over cells c in set of f(c)^r * mu(c)`.
    pub fn integrate_power(
        &self,
        f: &StepFunction,
        set: &MeasurableSet,
        r: u32,
    ) -> Result<Rational, MeasureError> {
        self.check(f.stamp)?;
        self.check(set.stamp)?;
        if r == 0 {
            return Err(MeasureError::ZeroExponent);
        }
        Ok(self.integrate_power_unchecked(f, set, r))
    }

    pub(crate) fn integrate_power_unchecked(&self, f: &StepFunction, set: &MeasurableSet, r: u32) -> Rational {
        let terms: Vec<Rational> = set
            .bits
            .ones()
            .filter(|&p| !f.values[p].is_zero())
            .map(|p| pow(&f.values[p], r) * &self.cells[p].measure)
            .collect();
        sum_rationals(&terms)
    }

    /// `mu(c) f(c)^r` for every cell as integers over one common denominator.
    pub(crate) fn power_weights(&self, f: &StepFunction, r: u32) -> (Vec<BigInt>, BigInt) {
        // unreduced (numerator, denominator) of v^r * mu(cell)
        let terms: Vec<(BigInt, BigInt)> = f
            .values
            .iter()
            .zip(&self.cells)
            .map(|(v, c)| {
                if v.is_zero() {
                    (BigInt::zero(), BigInt::one())
                } else {
                    (v.numer().pow(r) * c.measure.numer(), v.denom().pow(r) * c.measure.denom())
                }
            })
            .collect();
        let mut den = BigInt::one();
        for (_, d) in &terms {
            lcm_into(&mut den, d);
        }
        let nums = terms
            .iter()
            .map(|(n, d)| if d == &den { n.clone() } else { n * (&den / d) })
            .collect();
        (nums, den)
    }

    /// `||f||_r^r` over the whole space.
    pub fn norm_pow(&self, f: &StepFunction, r: u32) -> Result<Rational, MeasureError> {
        self.integrate_power(f, &self.full_set(), r)
    }

    /// Splits one cell into two adjacent children; the left child receives
    /// `fraction` of its measure.
    pub fn split_cell(&mut self, cell: CellId, fraction: &Rational) -> Result<Remap, MeasureError> {
        if !fraction.is_positive() || fraction >= &Rational::one() {
            return Err(MeasureError::FractionOutOfRange(fraction.to_string()));
        }
        let position = self.position_of(cell)?;
        Ok(self.split_at(position, fraction))
    }

    fn split_at(&mut self, position: usize, fraction: &Rational) -> Remap {
        let old = self.cells[position].measure.clone();
        let left = &old * fraction;
        let right = &old - &left;
        let left_id = CellId(self.next_id);
        let right_id = CellId(self.next_id + 1);
        self.next_id += 2;
        self.cells.splice(
            position..=position,
            [
                Cell {
                    id: left_id,
                    measure: left,
                },
                Cell {
                    id: right_id,
                    measure: right,
                },
            ],
        );
        let from = self.stamp;
        self.stamp = Stamp::fresh();
        self.generation += 1;
        let old_len = self.cells.len() - 1;
        let targets = (0..old_len)
            .map(|p| match p.cmp(&position) {
                std::cmp::Ordering::Less => p..p + 1,
                std::cmp::Ordering::Equal => p..p + 2,
                std::cmp::Ordering::Greater => p + 1..p + 2,
            })
            .collect();
        Remap {
            from,
            to: self.stamp,
            targets,
            new_len: self.cells.len(),
        }
    }

    /// Splits one cell into consecutive children with the given measures,
    /// which must be positive and sum to the cell's measure. Returns the
    /// child ids in leftmost order.
    pub fn split_into(
        &mut self,
        cell: CellId,
        pieces: &[Rational],
    ) -> Result<(Vec<CellId>, Remap), MeasureError> {
        let position = self.position_of(cell)?;
        let total: Rational = pieces.iter().sum();
        if pieces.iter().any(|p| !p.is_positive()) || &total != self.cell_measure(position) {
            return Err(MeasureError::FractionOutOfRange(format!("{pieces:?}")));
        }
        let mut remap = Remap::identity(self);
        let mut ids = Vec::with_capacity(pieces.len());
        let mut rest = total;
        for (k, piece) in pieces.iter().enumerate() {
            let at = position + k;
            if k + 1 == pieces.len() {
                ids.push(self.cells[at].id);
                break;
            }
            let step = self.split_at(at, &(piece / &rest));
            remap = remap.then(&step);
            ids.push(self.cells[at].id);
            rest -= piece;
        }
        Ok((ids, remap))
    }

    /// `a(kappa, B)`: where the cumulative measure of `set`, scanned in
    /// leftmost order, first reaches `kappa`.
    pub fn leftmost_position(
        &self,
        kappa: &Rational,
        set: &MeasurableSet,
    ) -> Result<LeftmostPosition, MeasureError> {
        self.check(set.stamp)?;
        let available = self.measure_unchecked(set);
        if !kappa.is_positive() || kappa > &available {
            return Err(MeasureError::KappaOutOfRange {
                kappa: kappa.to_string(),
                available: available.to_string(),
            });
        }
        let mut acc = Rational::zero();
        for p in set.positions() {
            let m = &self.cells[p].measure;
            let next = &acc + m;
            if &next == kappa {
                return Ok(LeftmostPosition::After {
                    cell: self.cells[p].id,
                    position: p,
                });
            }
            if &next > kappa {
                return Ok(LeftmostPosition::Inside {
                    cell: self.cells[p].id,
                    position: p,
                    offset: kappa - acc,
                });
            }
            acc = next;
        }
        unreachable!("kappa bounded by the measure of the set")
    }

    /// `L(kappa, B)`: the leftmost part of `set` of measure exactly `kappa`.
    ///
    /// When `kappa` falls inside a cell that cell is split, so the returned
    /// set lives in the refined space; the remap migrates older handles.
    pub fn leftmost_set(
        &mut self,
        kappa: &Rational,
        set: &MeasurableSet,
    ) -> Result<(MeasurableSet, Remap), MeasureError> {
        match self.leftmost_position(kappa, set)? {
            LeftmostPosition::After { position, .. } => {
                let mut out = set.clone();
                out.bits.remove_range(position + 1..);
                Ok((out, Remap::identity(self)))
            }
            LeftmostPosition::Inside {
                position, offset, ..
            } => {
                let fraction = &offset / &self.cells[position].measure;
                let remap = self.split_at(position, &fraction);
                let mut out = remap.set(set);
                out.bits.remove_range(position + 1..);
                Ok((out, remap))
            }
        }
    }

    /// The cells of `set` as half-open coordinate intervals, laying the
    /// cells end to end from 0 in leftmost order. Adjacent intervals are merged.
    pub fn intervals(&self, set: &MeasurableSet) -> Result<Vec<(Rational, Rational)>, MeasureError> {
        self.check(set.stamp)?;
        let mut out: Vec<(Rational, Rational)> = Vec::new();
        let mut left = Rational::zero();
        for (p, cell) in self.cells.iter().enumerate() {
            let right = &left + &cell.measure;
            if set.contains(p) {
                match out.last_mut() {
                    Some(last) if last.1 == left => last.1 = right.clone(),
                    _ => out.push((left.clone(), right.clone())),
                }
            }
            left = right;
        }
        Ok(out)
    }

    /// Cell positions in leftmost order together with their left coordinate.
    pub fn offsets(&self) -> Vec<Rational> {
        let mut acc = Rational::zero();
        self.cells
            .iter()
            .map(|c| {
                let here = acc.clone();
                acc += &c.measure;
                here
            })
            .collect()
    }
}

impl MeasurableSet {
    pub(crate) fn from_bits(stamp: Stamp, bits: FixedBitSet) -> Self {
        MeasurableSet { stamp, bits }
    }

    pub fn stamp(&self) -> Stamp {
        self.stamp
    }

    pub fn contains(&self, position: usize) -> bool {
        self.bits.contains(position)
    }

    pub fn positions(&self) -> fixedbitset::Ones<'_> {
        self.bits.ones()
    }

    pub fn count(&self) -> usize {
        self.bits.count_ones(..)
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_clear()
    }

    /// The empty set of the same space version.
    pub fn empty_like(&self) -> MeasurableSet {
        MeasurableSet {
            stamp: self.stamp,
            bits: FixedBitSet::with_capacity(self.bits.len()),
        }
    }

    pub fn insert(&mut self, position: usize) {
        self.bits.insert(position);
    }

    fn same_space(&self, other: &MeasurableSet) {
        assert_eq!(
            self.stamp, other.stamp,
            "set operation across different space versions"
        );
    }

    pub fn union(&self, other: &MeasurableSet) -> MeasurableSet {
        self.same_space(other);
        let mut bits = self.bits.clone();
        bits.union_with(&other.bits);
        MeasurableSet { stamp: self.stamp, bits }
    }

    pub fn intersection(&self, other: &MeasurableSet) -> MeasurableSet {
        self.same_space(other);
        let mut bits = self.bits.clone();
        bits.intersect_with(&other.bits);
        MeasurableSet { stamp: self.stamp, bits }
    }

    pub fn difference(&self, other: &MeasurableSet) -> MeasurableSet {
        self.same_space(other);
        let mut bits = self.bits.clone();
        bits.difference_with(&other.bits);
        MeasurableSet { stamp: self.stamp, bits }
    }

    pub fn symmetric_difference(&self, other: &MeasurableSet) -> MeasurableSet {
        self.same_space(other);
        let mut bits = self.bits.clone();
        bits.symmetric_difference_with(&other.bits);
        MeasurableSet { stamp: self.stamp, bits }
    }

    pub fn union_with(&mut self, other: &MeasurableSet) {
        self.same_space(other);
        self.bits.union_with(&other.bits);
    }

    pub fn difference_with(&mut self, other: &MeasurableSet) {
        self.same_space(other);
        self.bits.difference_with(&other.bits);
    }

    pub fn is_subset(&self, other: &MeasurableSet) -> bool {
        self.same_space(other);
        self.bits.is_subset(&other.bits)
    }

    pub fn is_disjoint(&self, other: &MeasurableSet) -> bool {
        self.same_space(other);
        self.bits.is_disjoint(&other.bits)
    }

    pub fn intersects(&self, other: &MeasurableSet) -> bool {
        !self.is_disjoint(other)
    }
}

impl StepFunction {
    pub(crate) fn from_parts(stamp: Stamp, values: Vec<Rational>) -> Self {
        StepFunction { stamp, values }
    }

    pub fn stamp(&self) -> Stamp {
        self.stamp
    }

    pub fn values(&self) -> &[Rational] {
        &self.values
    }

    pub fn value(&self, position: usize) -> &Rational {
        &self.values[position]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn max_value(&self) -> Rational {
        self.values.iter().max().cloned().unwrap_or_else(Rational::zero)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(Zero::is_zero)
    }

    /// `f` off `set`, `value` on `set`.
    pub fn replace_on(&self, set: &MeasurableSet, value: &Rational) -> StepFunction {
        assert_eq!(self.stamp, set.stamp, "function and set from different space versions");
        let values = self
            .values
            .iter()
            .enumerate()
            .map(|(p, v)| if set.contains(p) { value.clone() } else { v.clone() })
            .collect();
        StepFunction {
            stamp: self.stamp,
            values,
        }
    }

    pub fn scaled(&self, factor: &Rational) -> StepFunction {
        assert!(!factor.is_negative());
        StepFunction {
            stamp: self.stamp,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// `{x : f(x) > value}`.
    pub fn level_set(&self, value: &Rational) -> MeasurableSet {
        let mut bits = FixedBitSet::with_capacity(self.values.len());
        for (p, v) in self.values.iter().enumerate() {
            if v > value {
                bits.insert(p);
            }
        }
        MeasurableSet {
            stamp: self.stamp,
            bits,
        }
    }
}

impl Remap {
    pub fn identity(space: &CellSpace) -> Remap {
        Remap {
            from: space.stamp,
            to: space.stamp,
            targets: (0..space.len()).map(|p| p..p + 1).collect(),
            new_len: space.len(),
        }
    }

    pub fn from_stamp(&self) -> Stamp {
        self.from
    }

    pub fn to_stamp(&self) -> Stamp {
        self.to
    }

    pub fn is_identity(&self) -> bool {
        self.from == self.to
    }

    /// New positions covering the old cell at `position`.
    pub fn targets(&self, position: usize) -> Range<usize> {
        self.targets[position].clone()
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: &Remap) -> Remap {
        assert_eq!(self.to, next.from, "remaps do not chain");
        let targets = self
            .targets
            .iter()
            .map(|r| {
                if r.is_empty() {
                    return r.clone();
                }
                next.targets[r.start].start..next.targets[r.end - 1].end
            })
            .collect();
        Remap {
            from: self.from,
            to: next.to,
            targets,
            new_len: next.new_len,
        }
    }

    pub fn set(&self, set: &MeasurableSet) -> MeasurableSet {
        assert_eq!(set.stamp, self.from, "remap applied to a set of another version");
        let mut bits = FixedBitSet::with_capacity(self.new_len);
        for p in set.bits.ones() {
            bits.insert_range(self.targets[p].clone());
        }
        MeasurableSet { stamp: self.to, bits }
    }

    pub fn function(&self, f: &StepFunction) -> StepFunction {
        assert_eq!(f.stamp, self.from, "remap applied to a function of another version");
        let mut values = vec![Rational::zero(); self.new_len];
        for (p, v) in f.values.iter().enumerate() {
            for q in self.targets[p].clone() {
                values[q] = v.clone();
            }
        }
        StepFunction { stamp: self.to, values }
    }
}

/// JSON form of a space: cells in leftmost order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpaceJson {
    pub cells: Vec<CellJson>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellJson {
    pub id: CellId,
    pub measure: RatioStr,
}

/// JSON form of a step function: one entry per cell, leftmost order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionJson {
    pub values: Vec<CellValueJson>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellValueJson {
    pub cell: CellId,
    pub value: RatioStr,
}

impl CellSpace {
    pub fn to_json(&self) -> SpaceJson {
        SpaceJson {
            cells: self
                .cells
                .iter()
                .map(|c| CellJson {
                    id: c.id,
                    measure: RatioStr(c.measure.clone()),
                })
                .collect(),
        }
    }

    /// Rebuilds a space from JSON; cell ids are taken from the document.
    pub fn from_json(json: &SpaceJson) -> Result<Self, MeasureError> {
        let mut space = CellSpace::new(json.cells.iter().map(|c| c.measure.0.clone()).collect())?;
        for (cell, src) in space.cells.iter_mut().zip(&json.cells) {
            cell.id = src.id;
        }
        space.next_id = json.cells.iter().map(|c| c.id.0 + 1).max().unwrap_or(0);
        Ok(space)
    }

    pub fn function_to_json(&self, f: &StepFunction) -> Result<FunctionJson, MeasureError> {
        self.check(f.stamp)?;
        Ok(FunctionJson {
            values: self
                .cells
                .iter()
                .zip(&f.values)
                .map(|(c, v)| CellValueJson {
                    cell: c.id,
                    value: RatioStr(v.clone()),
                })
                .collect(),
        })
    }

    pub fn function_from_json(&self, json: &FunctionJson) -> Result<StepFunction, MeasureError> {
        let mut values = vec![None; self.len()];
        for entry in &json.values {
            values[self.position_of(entry.cell)?] = Some(entry.value.0.clone());
        }
        let values: Option<Vec<Rational>> = values.into_iter().collect();
        match values {
            Some(values) => self.function(values),
            None => Err(MeasureError::LengthMismatch {
                expected: self.len(),
                found: json.values.len(),
            }),
        }
    }
}
