//! Finite ball-bases: hulls, axiom checks, doubling, and covering selection.

use std::collections::{BTreeSet, HashMap};

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};

use crate::measure::{CellId, CellSpace, MeasurableSet, MeasureError, Remap, Stamp};
use crate::rational::{int, RatioStr, Rational};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BasisError {
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error("ball {0} has zero measure")]
    EmptyBall(usize),
    #[error("basis has no balls")]
    NoBalls,
    #[error("ball {0:?} has no hull in this family")]
    MissingHull(BallId),
    #[error("unknown ball {0:?}")]
    UnknownBall(BallId),
    #[error("children of tree node {node} sum to {found}, expected {expected}")]
    TreeWeights {
        node: usize,
        expected: String,
        found: String,
    },
    #[error("tree node {0} has non-positive weight")]
    TreeLeafWeight(usize),
    #[error("the family does not cover the target set; {0} cells uncovered")]
    NotCovered(usize),
    #[error("cell at position {0} is not in the set")]
    CellNotInSet(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BallId(pub usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ball {
    pub id: BallId,
    pub set: MeasurableSet,
    pub measure: Rational,
}

/// A finite family of balls over one [`CellSpace`] version, with cached
/// hulls, containment lists and the hull constant.
#[derive(Debug, Clone)]
pub struct BallBasis {
    stamp: Stamp,
    balls: Vec<Ball>,
    hulls: Vec<Option<BallId>>,
    supersets: Vec<Vec<BallId>>,
    containing: Vec<Vec<BallId>>,
    full: Option<BallId>,
    hull_constant: Option<Rational>,
}

impl BallBasis {
    /// Builds a basis from measurable sets; ball ids follow the input order.
    /// Every ball must have positive measure.
    pub fn new(space: &CellSpace, sets: Vec<MeasurableSet>) -> Result<Self, BasisError> {
        if sets.is_empty() {
            return Err(BasisError::NoBalls);
        }
        let mut balls = Vec::with_capacity(sets.len());
        for (i, set) in sets.into_iter().enumerate() {
            let measure = space.measure(&set)?;
            if measure.is_zero() {
                return Err(BasisError::EmptyBall(i));
            }
            balls.push(Ball {
                id: BallId(i),
                set,
                measure,
            });
        }
        Ok(Self::assemble(space, balls))
    }

    fn assemble(space: &CellSpace, balls: Vec<Ball>) -> Self {
        let full_set = space.full_set();
        let full = balls
            .iter()
            .filter(|b| b.set == full_set)
            .map(|b| b.id)
            .next();
        let supersets = balls
            .iter()
            .map(|b| {
                balls
                    .iter()
                    .filter(|a| b.set.is_subset(&a.set))
                    .map(|a| a.id)
                    .collect()
            })
            .collect();
        let mut containing = vec![Vec::new(); space.len()];
        for b in &balls {
            for p in b.set.positions() {
                containing[p].push(b.id);
            }
        }
        let mut basis = BallBasis {
            stamp: space.stamp(),
            balls,
            hulls: Vec::new(),
            supersets,
            containing,
            full,
            hull_constant: None,
        };
        basis.hulls = basis.balls.iter().map(|b| basis.compute_hull(b.id)).collect();
        basis.hull_constant = basis
            .hulls
            .iter()
            .zip(&basis.balls)
            .map(|(h, b)| h.map(|h| &basis.balls[h.0].measure / &b.measure))
            .collect::<Option<Vec<_>>>()
            .and_then(|ratios| ratios.into_iter().max());
        basis
    }

    /// The same family carried into a refinement of its space.
    pub fn refine(&self, space: &CellSpace, remap: &Remap) -> Result<Self, BasisError> {
        space.check(remap.to_stamp())?;
        if remap.from_stamp() != self.stamp {
            return Err(MeasureError::StaleStamp {
                expected: self.stamp,
                found: remap.from_stamp(),
            }
            .into());
        }
        let mut containing = vec![Vec::new(); space.len()];
        let balls: Vec<Ball> = self
            .balls
            .iter()
            .map(|b| Ball {
                id: b.id,
                set: remap.set(&b.set),
                measure: b.measure.clone(),
            })
            .collect();
        for b in &balls {
            for p in b.set.positions() {
                containing[p].push(b.id);
            }
        }
        Ok(BallBasis {
            stamp: space.stamp(),
            balls,
            hulls: self.hulls.clone(),
            supersets: self.supersets.clone(),
            containing,
            full: self.full,
            hull_constant: self.hull_constant.clone(),
        })
    }

    pub fn stamp(&self) -> Stamp {
        self.stamp
    }

    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    pub fn balls(&self) -> &[Ball] {
        &self.balls
    }

    pub fn ball(&self, id: BallId) -> &Ball {
        &self.balls[id.0]
    }

    pub fn get(&self, id: BallId) -> Result<&Ball, BasisError> {
        self.balls.get(id.0).ok_or(BasisError::UnknownBall(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = BallId> + '_ {
        self.balls.iter().map(|b| b.id)
    }

    /// The member ball equal to the whole space, if any.
    pub fn full_ball(&self) -> Option<BallId> {
        self.full
    }

    /// Cached hull of `id`, when one exists in the family.
    pub fn hull(&self, id: BallId) -> Option<BallId> {
        self.hulls[id.0]
    }

    pub fn hull_of(&self, id: BallId) -> Result<BallId, BasisError> {
        self.hulls[id.0].ok_or(BasisError::MissingHull(id))
    }

    /// Minimal verified hull constant `K = max_B mu(B*) / mu(B)`.
    pub fn hull_constant(&self) -> Option<&Rational> {
        self.hull_constant.as_ref()
    }

    /// Member balls containing `id`, itself included.
    pub fn supersets(&self, id: BallId) -> &[BallId] {
        &self.supersets[id.0]
    }

    /// Number of cells in the underlying space version.
    pub fn containing_len(&self) -> usize {
        self.containing.len()
    }

    /// Member balls containing the cell at `position`.
    pub fn containing(&self, position: usize) -> &[BallId] {
        &self.containing[position]
    }

    /// Union of every ball `A` with `mu(A) <= 2 mu(B)` meeting `B`.
    pub fn hull_requirement(&self, id: BallId) -> MeasurableSet {
        let b = self.ball(id);
        let limit = &b.measure * int(2);
        let mut union = b.set.clone();
        for a in &self.balls {
            if a.measure <= limit && a.set.intersects(&b.set) {
                union.union_with(&a.set);
            }
        }
        union
    }

    /// The smallest member containing [`Self::hull_requirement`], ties by id.
    pub fn compute_hull(&self, id: BallId) -> Option<BallId> {
        let need = self.hull_requirement(id);
        self.smallest_containing(&need)
    }

    fn smallest_containing(&self, set: &MeasurableSet) -> Option<BallId> {
        self.balls
            .iter()
            .filter(|a| set.is_subset(&a.set))
            .min_by(|x, y| x.measure.cmp(&y.measure).then(x.id.cmp(&y.id)))
            .map(|a| a.id)
    }

    /// `pr(B)`: the smallest member strictly containing `B`, ties by id.
    pub fn parent(&self, id: BallId) -> Option<BallId> {
        let b = self.ball(id);
        self.balls
            .iter()
            .filter(|a| b.set.is_subset(&a.set) && a.set != b.set)
            .min_by(|x, y| x.measure.cmp(&y.measure).then(x.id.cmp(&y.id)))
            .map(|a| a.id)
    }

    /// Checks B1 through B4 exhaustively.
    pub fn verify_axioms(&self, space: &CellSpace) -> Result<AxiomReport, BasisError> {
        space.check(self.stamp)?;
        let b1_witness = self.balls.iter().find(|b| b.measure <= Rational::zero()).map(|b| b.id);

        let b2_witness = if self.full.is_some() {
            None
        } else {
            self.pair_without_common_ball(space)
        };

        let mut signatures: HashMap<Vec<usize>, usize> = HashMap::new();
        let mut b3_witness = None;
        for p in 0..space.len() {
            let sig: Vec<usize> = self.containing[p].iter().map(|b| b.0).collect();
            if let Some(&q) = signatures.get(&sig) {
                b3_witness = Some((space.cells()[q].id, space.cells()[p].id));
                break;
            }
            signatures.insert(sig, p);
        }

        let mut b4_witness = None;
        let mut worst: Option<Rational> = None;
        for b in &self.balls {
            let hull = self.compute_hull(b.id);
            match hull {
                None => {
                    b4_witness.get_or_insert(b.id);
                }
                Some(h) => {
                    let ratio = &self.balls[h.0].measure / &b.measure;
                    if worst.as_ref().is_none_or(|w| &ratio > w) {
                        worst = Some(ratio);
                    }
                }
            }
        }
        let k = if b4_witness.is_none() { worst } else { None };
        Ok(AxiomReport {
            k: k.map(RatioStr),
            b1_ok: b1_witness.is_none(),
            b2_ok: b2_witness.is_none(),
            b2_witness,
            b3_ok: b3_witness.is_none(),
            b3_witness,
            b4_ok: b4_witness.is_none(),
            b4_witness,
        })
    }

    fn pair_without_common_ball(&self, space: &CellSpace) -> Option<(CellId, CellId)> {
        for x in 0..space.len() {
            for y in x..space.len() {
                let common = self.balls.iter().any(|b| b.set.contains(x) && b.set.contains(y));
                if !common {
                    return Some((space.cells()[x].id, space.cells()[y].id));
                }
            }
        }
        None
    }

    /// Smallest `eta` such that every `A` whose hull is not the whole space
    /// has a member `B` strictly containing it with `mu(B) <= eta mu(A)`.
    pub fn doubling_constant(&self, space: &CellSpace) -> Doubling {
        let full_set = space.full_set();
        let mut eta: Option<Rational> = None;
        for a in &self.balls {
            let hull_is_full = match self.hulls[a.id.0] {
                Some(h) => self.balls[h.0].set == full_set,
                None => false,
            };
            if hull_is_full {
                continue;
            }
            match self.parent(a.id) {
                None => return Doubling::Unbounded { ball: a.id },
                Some(p) => {
                    let ratio = &self.balls[p.0].measure / &a.measure;
                    if eta.as_ref().is_none_or(|e| &ratio > e) {
                        eta = Some(ratio);
                    }
                }
            }
        }
        match eta {
            None => Doubling::Vacuous,
            Some(eta) => Doubling::Eta(eta),
        }
    }

    /// Whether some ball containing the cell puts more than `1 - eps` of its
    /// measure inside `set`.
    pub fn is_density_point(
        &self,
        space: &CellSpace,
        set: &MeasurableSet,
        position: usize,
        eps: &Rational,
    ) -> Result<bool, BasisError> {
        space.check(set.stamp())?;
        if !set.contains(position) {
            return Err(BasisError::CellNotInSet(position));
        }
        let keep = Rational::one() - eps;
        Ok(self.containing[position].iter().any(|&b| {
            let ball = self.ball(b);
            space.measure_unchecked(&ball.set.intersection(set)) > &keep * &ball.measure
        }))
    }

    /// Greedy disjoint selection from `family` whose hulls cover `target`.
    ///
    /// Balls meeting `target` are scanned by decreasing measure (ties by id)
    /// and kept when disjoint from everything kept so far. Each skipped ball
    /// meets a kept ball of at least its measure, hence lies in that ball's hull.
    pub fn covering_select(
        &self,
        target: &MeasurableSet,
        family: &[BallId],
    ) -> Result<Vec<BallId>, BasisError> {
        if target.stamp() != self.stamp {
            return Err(MeasureError::StaleStamp {
                expected: self.stamp,
                found: target.stamp(),
            }
            .into());
        }
        let mut covered = target.empty_like();
        for &g in family {
            covered.union_with(&self.get(g)?.set);
        }
        let uncovered = target.difference(&covered);
        if !uncovered.is_empty() {
            return Err(BasisError::NotCovered(uncovered.count()));
        }
        let mut order: Vec<BallId> = family
            .iter()
            .copied()
            .filter(|&g| self.ball(g).set.intersects(target))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        order.sort_by(|x, y| {
            self.ball(*y)
                .measure
                .cmp(&self.ball(*x).measure)
                .then(x.cmp(y))
        });
        let mut taken = target.empty_like();
        let mut selected = Vec::new();
        for g in order {
            let set = &self.ball(g).set;
            if set.is_disjoint(&taken) {
                taken.union_with(set);
                selected.push(g);
            }
        }
        Ok(selected)
    }

    /// Union of the hulls of `balls`.
    pub fn hull_union(&self, balls: &[BallId]) -> Result<MeasurableSet, BasisError> {
        let mut out: Option<MeasurableSet> = None;
        for &b in balls {
            let h = &self.ball(self.hull_of(b)?).set;
            match out.as_mut() {
                Some(o) => o.union_with(h),
                None => out = Some(h.clone()),
            }
        }
        Ok(out.unwrap_or_else(|| self.balls[0].set.empty_like()))
    }

    pub fn to_json(&self, space: &CellSpace) -> Result<BasisJson, BasisError> {
        space.check(self.stamp)?;
        let balls = self
            .balls
            .iter()
            .map(|b| space.cell_ids(&b.set))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BasisJson {
            space: Some(space.to_json()),
            balls,
            hulls: Some(self.hulls.clone()),
        })
    }

    /// Rebuilds a basis from JSON against `space`. Hulls are recomputed; a
    /// stored hull map is not trusted.
    pub fn from_json(space: &CellSpace, json: &BasisJson) -> Result<Self, BasisError> {
        let sets = json
            .balls
            .iter()
            .map(|ids| space.set_from_ids(ids))
            .collect::<Result<Vec<_>, _>>()?;
        BallBasis::new(space, sets)
    }
}

/// Outcome of the doubling scan.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Doubling {
    /// No ball has a hull other than the whole space.
    Vacuous,
    Eta(Rational),
    /// This ball has no strictly larger member.
    Unbounded { ball: BallId },
}

impl Doubling {
    pub fn eta(&self) -> Option<&Rational> {
        match self {
            Doubling::Eta(e) => Some(e),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AxiomReport {
    /// Hull constant; absent when some ball lacks a hull.
    pub k: Option<RatioStr>,
    pub b1_ok: bool,
    pub b2_ok: bool,
    pub b2_witness: Option<(CellId, CellId)>,
    pub b3_ok: bool,
    /// Two cells no ball separates.
    pub b3_witness: Option<(CellId, CellId)>,
    pub b4_ok: bool,
    pub b4_witness: Option<BallId>,
}

impl AxiomReport {
    pub fn all_ok(&self) -> bool {
        self.b1_ok && self.b2_ok && self.b3_ok && self.b4_ok
    }
}

/// JSON form of a basis: balls as sorted cell-id arrays plus the hull map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisJson {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space: Option<crate::measure::SpaceJson>,
    pub balls: Vec<Vec<CellId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hulls: Option<Vec<Option<BallId>>>,
}

/// Balls: every dyadic interval of generations `0..=depth` on `[0, 1)`, in
/// breadth-first order (`[0,1)`, `[0,1/2)`, `[1/2,1)`, ...).
pub fn dyadic_basis(depth: u32) -> (BallBasis, CellSpace) {
    let n = 1usize << depth;
    let space = CellSpace::uniform(n, int(1)).expect("positive cell count");
    let mut sets = Vec::with_capacity(2 * n - 1);
    for level in 0..=depth {
        let width = n >> level;
        for j in 0..(1usize << level) {
            sets.push(space.set_from_positions(j * width..(j + 1) * width));
        }
    }
    let basis = BallBasis::new(&space, sets).expect("dyadic balls are nonempty");
    (basis, space)
}

/// A node-weighted tree; leaves become cells, every node becomes a ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleTree {
    pub weight: RatioStr,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<MartingaleTree>,
}

impl MartingaleTree {
    pub fn leaf(weight: Rational) -> Self {
        MartingaleTree {
            weight: RatioStr(weight),
            children: Vec::new(),
        }
    }

    /// Complete tree of the given depth where every node splits its weight
    /// according to `ratios` (which should sum to 1).
    pub fn from_ratios(weight: Rational, ratios: &[Rational], depth: u32) -> Self {
        let children = if depth == 0 {
            Vec::new()
        } else {
            ratios
                .iter()
                .map(|q| Self::from_ratios(&weight * q, ratios, depth - 1))
                .collect()
        };
        MartingaleTree {
            weight: RatioStr(weight),
            children,
        }
    }

    pub fn leaf_count(&self) -> usize {
        if self.children.is_empty() {
            1
        } else {
            self.children.iter().map(Self::leaf_count).sum()
        }
    }
}

/// Cells are the leaves in depth-first order; balls are all nodes in
/// breadth-first order, each being the union of the leaves below it.
pub fn martingale_basis(tree: &MartingaleTree) -> Result<(BallBasis, CellSpace), BasisError> {
    // breadth-first node list with parent links
    let mut nodes: Vec<&MartingaleTree> = vec![tree];
    let mut children_of: Vec<Vec<usize>> = Vec::new();
    let mut i = 0;
    while i < nodes.len() {
        let node = nodes[i];
        let mut kids = Vec::new();
        for c in &node.children {
            kids.push(nodes.len());
            nodes.push(c);
        }
        children_of.push(kids);
        i += 1;
    }
    for (idx, node) in nodes.iter().enumerate() {
        if children_of[idx].is_empty() {
            if node.weight.0 <= Rational::zero() {
                return Err(BasisError::TreeLeafWeight(idx));
            }
        } else {
            let sum: Rational = children_of[idx].iter().map(|&c| nodes[c].weight.0.clone()).sum();
            if sum != node.weight.0 {
                return Err(BasisError::TreeWeights {
                    node: idx,
                    expected: node.weight.0.to_string(),
                    found: sum.to_string(),
                });
            }
        }
    }
    // leaves in depth-first order give the leftmost order; record each node's leaf range
    let mut leaf_weights = Vec::new();
    let mut ranges = vec![0..0; nodes.len()];
    fn walk(
        idx: usize,
        nodes: &[&MartingaleTree],
        children_of: &[Vec<usize>],
        leaves: &mut Vec<Rational>,
        ranges: &mut [std::ops::Range<usize>],
    ) {
        let start = leaves.len();
        if children_of[idx].is_empty() {
            leaves.push(nodes[idx].weight.0.clone());
        } else {
            for &c in &children_of[idx] {
                walk(c, nodes, children_of, leaves, ranges);
            }
        }
        ranges[idx] = start..leaves.len();
    }
    walk(0, &nodes, &children_of, &mut leaf_weights, &mut ranges);
    let space = CellSpace::new(leaf_weights)?;
    let sets = ranges
        .into_iter()
        .map(|r| space.set_from_positions(r))
        .collect();
    let basis = BallBasis::new(&space, sets)?;
    Ok((basis, space))
}
