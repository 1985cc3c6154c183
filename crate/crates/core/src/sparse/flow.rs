//! Exact max-flow (shortest augmenting paths) over rational capacities.

use std::collections::VecDeque;

use num_traits::{Signed, Zero};

use crate::rational::Rational;

#[derive(Debug, Clone)]
struct Edge {
    to: usize,
    rev: usize,
    cap: Rational,
    original: Rational,
}

#[derive(Debug, Clone)]
pub struct FlowNetwork {
    graph: Vec<Vec<Edge>>,
}

/// Handle to a forward edge, for reading its flow afterwards.
#[derive(Debug, Clone, Copy)]
pub struct EdgeRef {
    from: usize,
    index: usize,
}

impl FlowNetwork {
    pub fn new(nodes: usize) -> Self {
        FlowNetwork {
            graph: vec![Vec::new(); nodes],
        }
    }

    pub fn add_edge(&mut self, from: usize, to: usize, cap: Rational) -> EdgeRef {
        assert!(!cap.is_negative(), "negative capacity");
        let (fl, tl) = (self.graph[from].len(), self.graph[to].len() + usize::from(from == to));
        self.graph[from].push(Edge {
            to,
            rev: tl,
            cap: cap.clone(),
            original: cap,
        });
        self.graph[to].push(Edge {
            to: from,
            rev: fl,
            cap: Rational::zero(),
            original: Rational::zero(),
        });
        EdgeRef { from, index: fl }
    }

    pub fn flow_on(&self, edge: EdgeRef) -> Rational {
        let e = &self.graph[edge.from][edge.index];
        &e.original - &e.cap
    }

    /// Pushes the maximum flow from `source` to `sink` and returns its value.
    /// Shortest augmenting paths terminate for rational capacities.
    pub fn max_flow(&mut self, source: usize, sink: usize) -> Rational {
        let mut total = Rational::zero();
        loop {
            let mut prev: Vec<Option<(usize, usize)>> = vec![None; self.graph.len()];
            let mut queue = VecDeque::from([source]);
            let mut seen = vec![false; self.graph.len()];
            seen[source] = true;
            while let Some(u) = queue.pop_front() {
                if u == sink {
                    break;
                }
                for (i, e) in self.graph[u].iter().enumerate() {
                    if !seen[e.to] && e.cap.is_positive() {
                        seen[e.to] = true;
                        prev[e.to] = Some((u, i));
                        queue.push_back(e.to);
                    }
                }
            }
            if !seen[sink] {
                return total;
            }
            let mut bottleneck: Option<Rational> = None;
            let mut v = sink;
            while let Some((u, i)) = prev[v] {
                let cap = &self.graph[u][i].cap;
                if bottleneck.as_ref().is_none_or(|b| cap < b) {
                    bottleneck = Some(cap.clone());
                }
                v = u;
            }
            let push = bottleneck.expect("augmenting path has an edge");
            let mut v = sink;
            while let Some((u, i)) = prev[v] {
                self.graph[u][i].cap -= &push;
                let (to, rev) = (self.graph[u][i].to, self.graph[u][i].rev);
                self.graph[to][rev].cap += &push;
                v = u;
            }
            total += push;
        }
    }

    /// Nodes reachable from `source` in the residual graph.
    pub fn residual_reachable(&self, source: usize) -> Vec<bool> {
        let mut seen = vec![false; self.graph.len()];
        seen[source] = true;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for e in &self.graph[u] {
                if !seen[e.to] && e.cap.is_positive() {
                    seen[e.to] = true;
                    queue.push_back(e.to);
                }
            }
        }
        seen
    }
}
