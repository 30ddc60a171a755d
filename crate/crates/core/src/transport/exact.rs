//! Exact solution of the unregularized matching LP by successive shortest
//! paths on the transportation network `source -> rows -> cols -> sink`.
//!
//! With integral masses every augmentation moves an integral amount, so the
//! result is an integral extreme point of the constraint polytope.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

use super::Marginals;

/// Largest `rows + cols` the oracle accepts.
pub const ORACLE_LIMIT: usize = 16;

const CAP_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ExactPlan {
    pub plan: Tensor,
    pub cost: f64,
}

struct Edge {
    to: usize,
    cap: f64,
    cost: f64,
}

struct Network {
    edges: Vec<Edge>,
    adj: Vec<Vec<usize>>,
}

impl Network {
    fn new(nodes: usize) -> Self {
        Self {
            edges: Vec::new(),
            adj: vec![Vec::new(); nodes],
        }
    }

    fn add_edge(&mut self, from: usize, to: usize, cap: f64, cost: f64) -> usize {
        let id = self.edges.len();
        self.edges.push(Edge { to, cap, cost });
        self.edges.push(Edge {
            to: from,
            cap: 0.0,
            cost: -cost,
        });
        self.adj[from].push(id);
        self.adj[to].push(id + 1);
        id
    }

    /// Bellman-Ford shortest path in the residual graph; returns the edge
    /// used to reach each node.
    fn shortest_path(&self, source: usize) -> Vec<Option<usize>> {
        let nodes = self.adj.len();
        let mut dist = vec![f64::INFINITY; nodes];
        let mut via = vec![None; nodes];
        dist[source] = 0.0;
        for _ in 0..nodes {
            let mut changed = false;
            for u in 0..nodes {
                if dist[u] == f64::INFINITY {
                    continue;
                }
                for &e in &self.adj[u] {
                    let edge = &self.edges[e];
                    if edge.cap > CAP_EPS && dist[u] + edge.cost < dist[edge.to] - 1e-15 {
                        dist[edge.to] = dist[u] + edge.cost;
                        via[edge.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        via
    }

    fn tail(&self, e: usize) -> usize {
        self.edges[e ^ 1].to
    }
}

/// Minimum of `<P, C>` subject to row sums `a` and column sums `b`.
pub fn exact_matching_oracle(cost: &Tensor, marg: &Marginals) -> Result<ExactPlan> {
    if cost.rank() != 2 {
        return dim_err("exact_oracle", format!("cost must be 2-D, got {:?}", cost.shape()));
    }
    let (r, k) = (cost.shape()[0], cost.shape()[1]);
    if r != marg.a().len() || k != marg.b().len() {
        return dim_err(
            "exact_oracle",
            format!("cost {:?} vs marginals {}x{}", cost.shape(), marg.a().len(), marg.b().len()),
        );
    }
    if r + k > ORACLE_LIMIT {
        return Err(Error::OracleScale {
            rows: r,
            cols: k,
            limit: ORACLE_LIMIT,
        });
    }

    let source = r + k;
    let sink = source + 1;
    let mut net = Network::new(r + k + 2);
    for (i, &ai) in marg.a().iter().enumerate() {
        net.add_edge(source, i, ai, 0.0);
    }
    for (j, &bj) in marg.b().iter().enumerate() {
        net.add_edge(r + j, sink, bj, 0.0);
    }
    let mut cell_edges = vec![0; r * k];
    for i in 0..r {
        for j in 0..k {
            let cap = marg.a()[i].min(marg.b()[j]);
            cell_edges[i * k + j] = net.add_edge(i, r + j, cap, cost.at2(i, j));
        }
    }

    let mut remaining: f64 = marg.a().iter().sum();
    while remaining > CAP_EPS {
        let via = net.shortest_path(source);
        if via[sink].is_none() {
            return Err(Error::Contract("transport problem infeasible".into()));
        }
        let mut bottleneck = remaining;
        let mut v = sink;
        while v != source {
            let e = via[v].expect("path edge");
            bottleneck = bottleneck.min(net.edges[e].cap);
            v = net.tail(e);
        }
        let mut v = sink;
        while v != source {
            let e = via[v].expect("path edge");
            net.edges[e].cap -= bottleneck;
            net.edges[e ^ 1].cap += bottleneck;
            v = net.tail(e);
        }
        remaining -= bottleneck;
    }

    let data: Vec<f64> = cell_edges.iter().map(|&e| net.edges[e ^ 1].cap).collect();
    let plan = Tensor::new(vec![r, k], data)?;
    let total = plan.data().iter().zip(cost.data()).map(|(p, c)| p * c).sum();
    Ok(ExactPlan { plan, cost: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anti_diagonal_cost_picks_identity() {
        let cost = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let marg = Marginals::new(vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
        let sol = exact_matching_oracle(&cost, &marg).unwrap();
        assert_eq!(sol.plan.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(sol.cost, 0.0);
    }

    #[test]
    fn single_cell() {
        let cost = Tensor::from_rows(&[vec![0.2]]).unwrap();
        let marg = Marginals::new(vec![1.0], vec![1.0]).unwrap();
        let sol = exact_matching_oracle(&cost, &marg).unwrap();
        assert_eq!(sol.plan.data(), &[1.0]);
        assert!((sol.cost - 0.2).abs() < 1e-15);
    }

    #[test]
    fn negative_costs_and_dummy_masses() {
        // Two bidders, two items, unit demand: welfare-maximizing assignment.
        let cost = Tensor::from_rows(&[
            vec![-0.8, -0.2, 0.0],
            vec![-0.6, -0.4, 0.0],
            vec![0.0, 0.0, 0.0],
        ])
        .unwrap();
        let marg = Marginals::new(vec![1.0, 1.0, 2.0], vec![1.0, 1.0, 2.0]).unwrap();
        let sol = exact_matching_oracle(&cost, &marg).unwrap();
        assert!((sol.cost + 1.2).abs() < 1e-12);
        assert_eq!(sol.plan.at2(0, 0), 1.0);
        assert_eq!(sol.plan.at2(1, 1), 1.0);
    }

    #[test]
    fn scale_limit() {
        let cost = Tensor::zeros(&[9, 8]);
        let marg = Marginals::uniform(9, 8, 1.0).unwrap();
        assert!(matches!(
            exact_matching_oracle(&cost, &marg),
            Err(Error::OracleScale { .. })
        ));
    }
}
