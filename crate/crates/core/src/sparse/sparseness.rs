use std::collections::BTreeMap;

use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};

use super::flow::{EdgeRef, FlowNetwork};
use super::SparseError;
use crate::basis::{BallBasis, BallId};
use crate::measure::{CellId, CellSpace, MeasurableSet, Remap};
use crate::rational::{RatioStr, Rational};

/// A sub-family of balls with its sparseness parameter and, once verified,
/// the pairwise disjoint sets `E_B`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseCollection {
    pub balls: Vec<BallId>,
    pub gamma: Rational,
    pub witnesses: Option<Vec<MeasurableSet>>,
}

impl SparseCollection {
    pub fn new(balls: Vec<BallId>, gamma: Rational) -> Result<Self, SparseError> {
        check_gamma(&gamma)?;
        Ok(SparseCollection {
            balls,
            gamma,
            witnesses: None,
        })
    }

    /// Checks `E_B` inside `B`, `mu(E_B) >= gamma mu(B)` and pairwise
    /// disjointness. `basis` and `space` must be the versions the witnesses
    /// were built in.
    pub fn validate(&self, space: &CellSpace, basis: &BallBasis) -> Result<(), SparseError> {
        let Some(witnesses) = &self.witnesses else {
            return Ok(());
        };
        let mut seen: Option<MeasurableSet> = None;
        for (b, e) in self.balls.iter().zip(witnesses) {
            space.check(e.stamp())?;
            let ball = basis.get(*b)?;
            if !e.is_subset(&ball.set) {
                return Err(SparseError::InvalidWitness { ball: *b, clause: "containment" });
            }
            if space.measure(e)? < &self.gamma * &ball.measure {
                return Err(SparseError::InvalidWitness { ball: *b, clause: "measure" });
            }
            match seen.as_mut() {
                Some(s) if s.intersects(e) => {
                    return Err(SparseError::InvalidWitness { ball: *b, clause: "disjointness" })
                }
                Some(s) => s.union_with(e),
                None => seen = Some(e.clone()),
            }
        }
        Ok(())
    }

    pub fn to_json(&self, space: &CellSpace) -> Result<SparseJson, SparseError> {
        let witnesses = match &self.witnesses {
            None => None,
            Some(ws) => Some(ws.iter().map(|w| space.cell_ids(w)).collect::<Result<Vec<_>, _>>()?),
        };
        Ok(SparseJson {
            balls: self.balls.clone(),
            gamma: RatioStr(self.gamma.clone()),
            witnesses,
        })
    }

    pub fn from_json(space: &CellSpace, json: &SparseJson) -> Result<Self, SparseError> {
        check_gamma(&json.gamma.0)?;
        let witnesses = match &json.witnesses {
            None => None,
            Some(ws) => Some(ws.iter().map(|w| space.set_from_ids(w)).collect::<Result<Vec<_>, _>>()?),
        };
        Ok(SparseCollection {
            balls: json.balls.clone(),
            gamma: json.gamma.0.clone(),
            witnesses,
        })
    }
}

/// JSON form of a sparse collection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseJson {
    pub balls: Vec<BallId>,
    pub gamma: RatioStr,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witnesses: Option<Vec<Vec<CellId>>>,
}

/// Sub-family whose demand exceeds the measure of its union, and such that
/// dropping any one ball leaves a sparse family.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ViolatingFamily {
    pub balls: Vec<BallId>,
    /// `gamma * sum of mu(B)` over the family.
    pub demand: RatioStr,
    /// `mu` of the union of the family.
    pub supply: RatioStr,
}

#[derive(Debug, Clone)]
pub struct SparseWitness {
    /// Collection with witnesses in the refined space.
    pub collection: SparseCollection,
    /// From the input space version to the refined one.
    pub remap: Remap,
}

#[derive(Debug, Clone)]
pub enum SparsenessOutcome {
    Feasible(SparseWitness),
    Infeasible(ViolatingFamily),
}

fn check_gamma(gamma: &Rational) -> Result<(), SparseError> {
    if gamma.is_positive() && gamma < &Rational::one() {
        Ok(())
    } else {
        Err(SparseError::GammaOutOfRange)
    }
}

struct Assignment {
    network: FlowNetwork,
    value: Rational,
    demand: Rational,
    /// (ball index in the collection, cell position, edge)
    edges: Vec<(usize, usize, EdgeRef)>,
    ball_nodes: Vec<usize>,
}

/// source -> ball (gamma mu(B)), ball -> cell (mu(cell)), cell -> sink (mu(cell)).
fn solve(
    space: &CellSpace,
    basis: &BallBasis,
    balls: &[BallId],
    gamma: &Rational,
) -> Result<Assignment, SparseError> {
    check_gamma(gamma)?;
    space.check(basis.stamp())?;
    for &b in balls {
        basis.get(b)?;
    }
    let source = 0;
    let sink = 1;
    let ball_base = 2;
    let cell_base = ball_base + balls.len();
    let mut network = FlowNetwork::new(cell_base + space.len());
    let mut edges = Vec::new();
    let mut demand = Rational::zero();
    let mut used = vec![false; space.len()];
    for (i, &b) in balls.iter().enumerate() {
        let ball = basis.ball(b);
        let need = gamma * &ball.measure;
        demand += &need;
        network.add_edge(source, ball_base + i, need);
        for p in ball.set.positions() {
            let e = network.add_edge(ball_base + i, cell_base + p, space.cell_measure(p).clone());
            edges.push((i, p, e));
            used[p] = true;
        }
    }
    for (p, _) in used.iter().enumerate().filter(|(_, u)| **u) {
        network.add_edge(cell_base + p, sink, space.cell_measure(p).clone());
    }
    let value = network.max_flow(source, sink);
    Ok(Assignment {
        network,
        value,
        demand,
        edges,
        ball_nodes: (0..balls.len()).map(|i| ball_base + i).collect(),
    })
}

fn violation(space: &CellSpace, basis: &BallBasis, family: &[BallId], gamma: &Rational) -> Option<(Rational, Rational)> {
    let mut union = space.empty_set();
    let mut demand = Rational::zero();
    for &b in family {
        union.union_with(&basis.ball(b).set);
        demand += gamma * &basis.ball(b).measure;
    }
    let supply = space.measure_unchecked(&union);
    (demand > supply).then_some((demand, supply))
}

fn reachable_balls(balls: &[BallId], assignment: &Assignment) -> Vec<BallId> {
    let reach = assignment.network.residual_reachable(0);
    let mut family: Vec<BallId> = balls
        .iter()
        .zip(&assignment.ball_nodes)
        .filter(|(_, &node)| reach[node])
        .map(|(&b, _)| b)
        .collect();
    family.sort();
    family.dedup();
    family
}

fn violating_family(
    space: &CellSpace,
    basis: &BallBasis,
    balls: &[BallId],
    gamma: &Rational,
    assignment: &Assignment,
) -> ViolatingFamily {
    let mut family = reachable_balls(balls, assignment);
    // shrink while some proper sub-family is still infeasible; the residual
    // cut of that sub-family replaces the current one
    'shrink: loop {
        for i in 0..family.len() {
            let mut trial = family.clone();
            trial.remove(i);
            if trial.is_empty() {
                continue;
            }
            let sub = solve(space, basis, &trial, gamma).expect("validated inputs");
            if sub.value != sub.demand {
                family = reachable_balls(&trial, &sub);
                continue 'shrink;
            }
        }
        break;
    }
    let (demand, supply) = violation(space, basis, &family, gamma).expect("minimal infeasible family violates");
    ViolatingFamily {
        balls: family,
        demand: RatioStr(demand),
        supply: RatioStr(supply),
    }
}

/// Feasibility only: `None` when `balls` is `gamma`-sparse, otherwise a
/// violating sub-family. Never refines the space.
pub fn is_sparse(
    space: &CellSpace,
    basis: &BallBasis,
    balls: &[BallId],
    gamma: &Rational,
) -> Result<Option<ViolatingFamily>, SparseError> {
    let assignment = solve(space, basis, balls, gamma)?;
    if assignment.value == assignment.demand {
        Ok(None)
    } else {
        Ok(Some(violating_family(space, basis, balls, gamma, &assignment)))
    }
}

/// Decides `gamma`-sparseness exactly by max-flow and, when feasible,
/// realises the flow as disjoint sets `E_B`, splitting cells that are shared
/// between several balls. `basis` must be stamped to `space`; on success the
/// witnesses live in the refined `space` and `remap` migrates older handles.
pub fn verify_sparseness(
    space: &mut CellSpace,
    basis: &BallBasis,
    balls: &[BallId],
    gamma: &Rational,
) -> Result<SparsenessOutcome, SparseError> {
    let assignment = solve(space, basis, balls, gamma)?;
    if assignment.value != assignment.demand {
        return Ok(SparsenessOutcome::Infeasible(violating_family(
            space,
            basis,
            balls,
            gamma,
            &assignment,
        )));
    }
    // per cell: (collection index, amount)
    let mut per_cell: BTreeMap<usize, Vec<(usize, Rational)>> = BTreeMap::new();
    for (i, p, e) in &assignment.edges {
        let amount = assignment.network.flow_on(*e);
        if amount.is_positive() {
            per_cell.entry(*p).or_default().push((*i, amount));
        }
    }
    let mut owned: Vec<Vec<CellId>> = vec![Vec::new(); balls.len()];
    let mut remap = Remap::identity(space);
    let original: Vec<(CellId, Rational)> = space.cells().iter().map(|c| (c.id, c.measure.clone())).collect();
    for (p, shares) in per_cell {
        let (cell, cell_measure) = original[p].clone();
        let used: Rational = shares.iter().map(|(_, a)| a).sum();
        let mut pieces: Vec<Rational> = shares.iter().map(|(_, a)| a.clone()).collect();
        if used < cell_measure {
            pieces.push(&cell_measure - &used);
        }
        if pieces.len() == 1 {
            owned[shares[0].0].push(cell);
            continue;
        }
        let (ids, step) = space.split_into(cell, &pieces)?;
        remap = remap.then(&step);
        for ((i, _), id) in shares.iter().zip(ids) {
            owned[*i].push(id);
        }
    }
    let witnesses = owned
        .iter()
        .map(|ids| space.set_from_ids(ids))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SparsenessOutcome::Feasible(SparseWitness {
        collection: SparseCollection {
            balls: balls.to_vec(),
            gamma: gamma.clone(),
            witnesses: Some(witnesses),
        },
        remap,
    }))
}
