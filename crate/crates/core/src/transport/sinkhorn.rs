//! Stabilized log-domain Sinkhorn with an annealed epsilon schedule.
//!
//! Potentials `f` (rows) and `g` (columns) are updated alternately:
//!
//! ```text
//! f_i = -eps * LSE_j((g_j - C_ij) / eps) + eps * ln a_i
//! g_j = -eps * LSE_i((f_i - C_ij) / eps) + eps * ln b_j
//! P_ij = exp((f_i + g_j - C_ij) / eps)
//! ```
//!
//! For each epsilon the loop runs while the worst relative row-mass error is
//! at least `tol`, capped at `max_iter` updates. Only a miss at the final
//! epsilon is an error. Rows or columns with zero mass are pinned to zero and
//! kept out of the updates.

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

use super::Marginals;

#[derive(Clone, Debug, PartialEq)]
pub struct SinkhornConfig {
    /// Strictly positive, non-increasing epsilons.
    pub schedule: Vec<f64>,
    /// Relative row-mass tolerance.
    pub tol: f64,
    /// Update cap per epsilon.
    pub max_iter: usize,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            schedule: geometric_schedule(1.0, 0.05, 10),
            tol: 0.01,
            max_iter: 200,
        }
    }
}

impl SinkhornConfig {
    pub fn with_final_eps(eps: f64) -> Self {
        Self {
            schedule: geometric_schedule(1.0, eps, 10),
            ..Self::default()
        }
    }

    pub fn final_eps(&self) -> f64 {
        *self.schedule.last().expect("validated schedule")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Config("sinkhorn schedule is empty".into()));
        }
        if self.schedule.iter().any(|&e| !(e > 0.0) || !e.is_finite()) {
            return Err(Error::Config("sinkhorn epsilons must be positive".into()));
        }
        if self.schedule.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Config("sinkhorn schedule must be non-increasing".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("sinkhorn tolerance must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("sinkhorn max_iter must be positive".into()));
        }
        Ok(())
    }
}

/// `steps` epsilons from `start` to `end`, evenly spaced in log scale.
pub fn geometric_schedule(start: f64, end: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![end],
        _ => {
            let ratio = (end / start).ln() / (steps - 1) as f64;
            let mut s: Vec<f64> = (0..steps).map(|k| start * (ratio * k as f64).exp()).collect();
            s[steps - 1] = end;
            s
        }
    }
}

/// `steps` epsilons from `start` to `end`, evenly spaced.
pub fn linear_schedule(start: f64, end: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![end],
        _ => {
            let step = (end - start) / (steps - 1) as f64;
            let mut s: Vec<f64> = (0..steps).map(|k| start + step * k as f64).collect();
            s[steps - 1] = end;
            s
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    pub plan: Tensor,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub eps_final: f64,
    pub iterations_used: usize,
}

fn check_cost(cost: &Tensor, marg: &Marginals) -> Result<(usize, usize)> {
    if cost.rank() != 2 {
        return dim_err("sinkhorn", format!("cost must be 2-D, got {:?}", cost.shape()));
    }
    let (r, k) = (cost.shape()[0], cost.shape()[1]);
    if r != marg.a().len() || k != marg.b().len() {
        return dim_err(
            "sinkhorn",
            format!("cost {:?} vs marginals {}x{}", cost.shape(), marg.a().len(), marg.b().len()),
        );
    }
    if let Some(index) = cost.data().iter().position(|c| !c.is_finite()) {
        return Err(Error::Numeric {
            op: "sinkhorn",
            index,
            value: cost.data()[index],
        });
    }
    Ok((r, k))
}

fn lse(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + values.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

/// `P_ij = exp((f_i + g_j - C_ij) / eps)`, formed in the log domain.
pub fn plan_from_potentials(f: &[f64], g: &[f64], cost: &Tensor, eps: f64) -> Result<Tensor> {
    if cost.rank() != 2 || cost.shape() != [f.len(), g.len()] {
        return dim_err(
            "plan_from_potentials",
            format!("cost {:?} vs f {} g {}", cost.shape(), f.len(), g.len()),
        );
    }
    let k = g.len();
    let data = cost
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &c)| {
            let (i, j) = (idx / k, idx % k);
            ((f[i] + g[j] - c) / eps).exp()
        })
        .collect();
    Tensor::new(cost.shape().to_vec(), data)
}

/// Largest `|sum_j P_ij - a_i| / a_i` over rows with positive mass.
pub fn row_violation(plan: &Tensor, a: &[f64]) -> f64 {
    let k = plan.shape()[1];
    a.iter()
        .enumerate()
        .filter(|(_, &ai)| ai > 0.0)
        .map(|(i, &ai)| {
            let s: f64 = plan.data()[i * k..(i + 1) * k].iter().sum();
            (s - ai).abs() / ai
        })
        .fold(0.0, f64::max)
}

/// `<P, C> + eps * sum P ln P`, with `0 ln 0 = 0`.
pub fn entropic_objective(plan: &Tensor, cost: &Tensor, eps: f64) -> f64 {
    plan.data()
        .iter()
        .zip(cost.data())
        .map(|(&p, &c)| {
            let ent = if p > 0.0 { eps * p * p.ln() } else { 0.0 };
            p * c + ent
        })
        .sum()
}

/// Solves one entropic matching problem off-graph.
pub fn sinkhorn_solve(cost: &Tensor, marg: &Marginals, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    cfg.validate()?;
    let (r, k) = check_cost(cost, marg)?;
    let (a, b) = (marg.a(), marg.b());
    let rows = marg.active_rows();
    let cols = marg.active_cols();
    let c = |i: usize, j: usize| cost.data()[i * k + j];

    let mut f = vec![f64::NEG_INFINITY; r];
    let mut g = vec![f64::NEG_INFINITY; k];
    for &i in &rows {
        f[i] = 0.0;
    }
    for &j in &cols {
        g[j] = 0.0;
    }

    let violation = |f: &[f64], g: &[f64], eps: f64| -> f64 {
        rows.iter()
            .map(|&i| {
                let s: f64 = cols.iter().map(|&j| ((f[i] + g[j] - c(i, j)) / eps).exp()).sum();
                (s - a[i]).abs() / a[i]
            })
            .fold(0.0, f64::max)
    };

    let mut total = 0;
    let last = cfg.schedule.len() - 1;
    for (stage, &eps) in cfg.schedule.iter().enumerate() {
        let mut iters = 0;
        let mut viol = violation(&f, &g, eps);
        while viol >= cfg.tol && iters < cfg.max_iter {
            for &i in &rows {
                let l = lse(cols.iter().map(|&j| (g[j] - c(i, j)) / eps));
                f[i] = -eps * l + eps * a[i].ln();
            }
            for &j in &cols {
                let l = lse(rows.iter().map(|&i| (f[i] - c(i, j)) / eps));
                g[j] = -eps * l + eps * b[j].ln();
            }
            iters += 1;
            viol = violation(&f, &g, eps);
        }
        total += iters;
        if stage == last && viol >= cfg.tol {
            return Err(Error::Convergence {
                eps,
                iterations: iters,
                violation: viol,
            });
        }
    }
    let eps_final = cfg.final_eps();
    let plan = plan_from_potentials(&f, &g, cost, eps_final)?;
    Ok(TransportPlan {
        plan,
        f,
        g,
        eps_final,
        iterations_used: total,
    })
}

/// Batched plan recorded on a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub struct GraphPlan {
    /// Shape `[batch, rows, cols]`, zero on zero-mass rows and columns.
    pub plan: Var,
    /// Largest number of updates any instance ran, summed over the schedule.
    pub iterations: usize,
    /// Worst final relative row violation across the batch.
    pub violation: f64,
}

struct BatchState<'a> {
    batch: usize,
    rows: usize,
    cols: usize,
    log_a: &'a [f64],
}

impl BatchState<'_> {
    /// Per-instance relative row violation from current potentials.
    fn violations(&self, g: &Graph, f: Var, gv: Var, c: Var, eps: f64, tol: f64, out: &mut [f64]) {
        let (fd, gd, cd) = (g.value(f).data(), g.value(gv).data(), g.value(c).data());
        let (r, k) = (self.rows, self.cols);
        for (b, slot) in out.iter_mut().enumerate().take(self.batch) {
            if *slot < tol {
                continue;
            }
            let mut worst: f64 = 0.0;
            for i in 0..r {
                let fi = fd[b * r + i];
                let mut s = 0.0;
                for j in 0..k {
                    s += ((fi + gd[b * k + j] - cd[(b * r + i) * k + j]) / eps).exp();
                }
                let ai = self.log_a[i].exp();
                worst = worst.max((s - ai).abs() / ai);
            }
            *slot = worst;
        }
    }
}

/// Runs Sinkhorn on a batch of cost matrices `[batch, rows, cols]` held on
/// `g`, recording every update so the plan can be differentiated with
/// respect to the costs. Each instance follows its own stopping rule; an
/// instance that has converged for the current epsilon is frozen.
pub fn sinkhorn_solve_graph(
    g: &mut Graph,
    cost: Var,
    marg: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<GraphPlan> {
    cfg.validate()?;
    let shape = g.shape(cost).to_vec();
    if shape.len() != 3 || shape[1] != marg.a().len() || shape[2] != marg.b().len() {
        return dim_err(
            "sinkhorn",
            format!("cost {:?} vs marginals {}x{}", shape, marg.a().len(), marg.b().len()),
        );
    }
    if let Some(index) = g.value(cost).data().iter().position(|c| !c.is_finite()) {
        return Err(Error::Numeric {
            op: "sinkhorn",
            index,
            value: g.value(cost).data()[index],
        });
    }
    let (batch, full_r, full_k) = (shape[0], shape[1], shape[2]);
    let rows = marg.active_rows();
    let cols = marg.active_cols();
    let (r, k) = (rows.len(), cols.len());

    let mut c = cost;
    if r < full_r {
        c = g.select(c, 1, &rows)?;
    }
    if k < full_k {
        c = g.select(c, 2, &cols)?;
    }

    let log_a: Vec<f64> = rows.iter().map(|&i| marg.a()[i].ln()).collect();
    let log_b: Vec<f64> = cols.iter().map(|&j| marg.b()[j].ln()).collect();

    let mut f = g.constant(Tensor::zeros(&[batch, r]));
    let mut gv = g.constant(Tensor::zeros(&[batch, k]));
    let state = BatchState {
        batch,
        rows: r,
        cols: k,
        log_a: &log_a,
    };

    let mut viol = vec![0.0; batch];
    let mut total = 0;
    let last = cfg.schedule.len() - 1;
    for (stage, &eps) in cfg.schedule.iter().enumerate() {
        let off_a: Vec<f64> = log_a.iter().map(|x| eps * x).collect();
        let off_b: Vec<f64> = log_b.iter().map(|x| eps * x).collect();
        viol.fill(f64::INFINITY);
        state.violations(g, f, gv, c, eps, cfg.tol, &mut viol);
        let mut active: Vec<bool> = viol.iter().map(|&v| v >= cfg.tol).collect();
        let mut iters = 0;
        while active.iter().any(|&x| x) && iters < cfg.max_iter {
            f = g.softmin_update(f, gv, c, eps, &off_a, true, &active)?;
            gv = g.softmin_update(gv, f, c, eps, &off_b, false, &active)?;
            iters += 1;
            state.violations(g, f, gv, c, eps, cfg.tol, &mut viol);
            for (act, &v) in active.iter_mut().zip(&viol) {
                *act = *act && v >= cfg.tol;
            }
        }
        total += iters;
        if stage == last && active.iter().any(|&x| x) {
            let worst = viol.iter().copied().fold(0.0, f64::max);
            return Err(Error::Convergence {
                eps,
                iterations: iters,
                violation: worst,
            });
        }
    }

    let eps = cfg.final_eps();
    let f3 = g.reshape(f, &[batch, r, 1])?;
    let f3 = g.expand(f3, &[batch, r, k])?;
    let g3 = g.reshape(gv, &[batch, 1, k])?;
    let g3 = g.expand(g3, &[batch, r, k])?;
    let s = g.add(f3, g3)?;
    let s = g.sub(s, c)?;
    let s = g.scale(s, 1.0 / eps);
    let mut plan = g.exp(s)?;
    if k < full_k {
        plan = g.scatter(plan, 2, &cols, full_k)?;
    }
    if r < full_r {
        plan = g.scatter(plan, 1, &rows, full_r)?;
    }
    Ok(GraphPlan {
        plan,
        iterations: total,
        violation: viol.iter().copied().fold(0.0, f64::max),
    })
}
