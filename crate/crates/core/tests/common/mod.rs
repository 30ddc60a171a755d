#![allow(dead_code)]

pub mod diff;
pub mod invariants;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sinkauction_core::{Graph, Result, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let len = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..len).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Worst relative error between reverse-mode and central-difference
/// gradients of `sum(w * build(inputs))` for a fixed random `w`, over every
/// entry of every input, or over `probe` random entries per input when given.
pub fn gradcheck<F>(inputs: &[Tensor], build: F, seed: u64, probe: Option<usize>) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let scalar = |g: &mut Graph, vars: &[Var], w: &Tensor| -> Var {
        let out = build(g, vars).unwrap();
        let w = g.constant(w.clone());
        let prod = g.mul(out, w).unwrap();
        g.sum(prod)
    };
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars).unwrap();
        g.shape(out).to_vec()
    };
    let w = uniform(&out_shape, -1.0, 1.0, &mut r);

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = scalar(&mut g, &vars, &w);
    let grads = g.backward(loss).unwrap();

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = scalar(&mut g, &vars, &w);
        g.value(loss).item().unwrap()
    };

    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        let entries: Vec<usize> = match probe {
            Some(p) if p < t.len() => (0..p).map(|_| r.gen_range(0..t.len())).collect(),
            _ => (0..t.len()).collect(),
        };
        for e in entries {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[e] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    worst
}

/// Every injective map from `rows` bidders into `cols` items, each bidder
/// optionally left unmatched when `allow_empty`.
pub fn assignments(rows: usize, cols: usize, allow_empty: bool) -> Vec<Vec<Option<usize>>> {
    fn go(
        i: usize,
        rows: usize,
        cols: usize,
        allow_empty: bool,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if i == rows {
            out.push(cur.clone());
            return;
        }
        if allow_empty {
            cur.push(None);
            go(i + 1, rows, cols, allow_empty, used, cur, out);
            cur.pop();
        }
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                go(i + 1, rows, cols, allow_empty, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, rows, cols, allow_empty, &mut vec![false; cols], &mut Vec::new(), &mut out);
    out
}

/// Best welfare over all assignments by exhaustive enumeration.
pub fn brute_force_welfare(values: &[Vec<f64>], cols: usize, allow_empty: bool) -> f64 {
    assignments(values.len(), cols, allow_empty)
        .iter()
        .map(|a| {
            a.iter()
                .enumerate()
                .map(|(i, j)| j.map_or(0.0, |j| values[i][j]))
                .sum::<f64>()
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Minimum `<P, C>` over permutation matrices, for square costs.
pub fn brute_force_assignment_cost(cost: &Tensor) -> f64 {
    let n = cost.shape()[0];
    let neg: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| -cost.at2(i, j)).collect()).collect();
    -brute_force_welfare(&neg, n, false)
}
