use rand::Rng;
use sinkauction_core::mechanism::MechanismVars;
use sinkauction_core::nn::{mlp_forward, Activation, Mlp, MlpVars};
use sinkauction_core::transport::sinkhorn_solve_graph;
use sinkauction_core::{
    AllocationHead, DemandSpec, Graph, Marginals, MechanismParams, Result, SinkhornConfig, Tensor, Var,
};

use super::{gradcheck, rng, uniform};

/// Uniform in `[-2, 2]` but at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, r: &mut impl Rng) -> Tensor {
    let mut t = uniform(shape, -2.0, 2.0, r);
    for x in t.data_mut() {
        if x.abs() < gap {
            *x = if *x < 0.0 { -gap } else { gap } * 2.0;
        }
    }
    t
}

/// Worst gradient error of every differentiable graph op on random inputs.
pub fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, inputs: Vec<Tensor>, f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>| {
        out.push((name, gradcheck(&inputs, f, seed ^ name.len() as u64, None)));
    };
    let a = uniform(&[3, 4], -2.0, 2.0, &mut r);
    let b = uniform(&[4, 5], -2.0, 2.0, &mut r);
    let c = uniform(&[3, 4], -2.0, 2.0, &mut r);
    let s = uniform(&[1], -2.0, 2.0, &mut r);
    let pos = uniform(&[3, 4], 0.2, 2.0, &mut r);
    let mut apart = c.clone();
    for (x, y) in apart.data_mut().iter_mut().zip(a.data()) {
        if (*x - y).abs() < 1e-3 {
            *x = y + 0.5;
        }
    }
    let cube = uniform(&[2, 3, 4], -2.0, 2.0, &mut r);

    check("matmul", vec![a.clone(), b.clone()], &|g, v| g.matmul(v[0], v[1]));
    check("add", vec![a.clone(), c.clone()], &|g, v| g.add(v[0], v[1]));
    check("add_scalar", vec![a.clone(), s.clone()], &|g, v| g.add(v[0], v[1]));
    check("sub", vec![a.clone(), c.clone()], &|g, v| g.sub(v[0], v[1]));
    check("mul", vec![a.clone(), c.clone()], &|g, v| g.mul(v[0], v[1]));
    check("mul_scalar", vec![s.clone(), c.clone()], &|g, v| g.mul(v[0], v[1]));
    check("minimum", vec![a.clone(), apart], &|g, v| g.minimum(v[0], v[1]));
    check("exp", vec![a.clone()], &|g, v| g.exp(v[0]));
    check("log", vec![pos], &|g, v| g.log(v[0]));
    check("tanh", vec![a.clone()], &|g, v| Ok(g.tanh(v[0])));
    check("sigmoid", vec![a.clone()], &|g, v| Ok(g.sigmoid(v[0])));
    check("relu", vec![away_from_zero(&[3, 4], 1e-3, &mut r)], &|g, v| Ok(g.relu(v[0])));
    check("negate", vec![a.clone()], &|g, v| Ok(g.negate(v[0])));
    check("scale", vec![a.clone()], &|g, v| Ok(g.scale(v[0], -1.7)));
    check("offset", vec![a.clone()], &|g, v| Ok(g.offset(v[0], 0.3)));
    for axis in 0..3 {
        check("logsumexp", vec![cube.clone()], &|g, v| g.logsumexp(v[0], axis));
        check("softmax", vec![cube.clone()], &|g, v| g.softmax(v[0], axis));
        check("sum_axis", vec![cube.clone()], &|g, v| g.sum_axis(v[0], axis));
    }
    check("sum", vec![cube.clone()], &|g, v| Ok(g.sum(v[0])));
    check("mean", vec![cube.clone()], &|g, v| Ok(g.mean(v[0])));
    check("reshape", vec![cube.clone()], &|g, v| g.reshape(v[0], &[6, 4]));
    check("expand", vec![uniform(&[3, 1], -2.0, 2.0, &mut r)], &|g, v| g.expand(v[0], &[3, 5]));
    check("select", vec![cube.clone()], &|g, v| g.select(v[0], 2, &[3, 0, 3]));
    check("scatter", vec![cube.clone()], &|g, v| g.scatter(v[0], 1, &[4, 0, 2], 5));

    let prev_r = uniform(&[2, 3], -2.0, 2.0, &mut r);
    let prev_c = uniform(&[2, 4], -2.0, 2.0, &mut r);
    let offs_r = [0.1, -0.2, 0.3];
    let offs_c = [0.0, 0.5, -0.5, 0.2];
    check(
        "softmin_rows",
        vec![prev_r.clone(), prev_c.clone(), cube.clone()],
        &|g, v| g.softmin_update(v[0], v[1], v[2], 0.3, &offs_r, true, &[true, false]),
    );
    check(
        "softmin_cols",
        vec![prev_c, prev_r, cube],
        &|g, v| g.softmin_update(v[0], v[1], v[2], 0.3, &offs_c, false, &[false, true]),
    );
    out
}

/// Worst error over `draws` random two-hidden-layer tanh networks.
pub fn mlp_error(draws: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for d in 0..draws {
        let widths = [3, 6, 5, 2];
        let mut net = Mlp::init(&widths, Activation::Tanh, &mut r);
        for p in net.parameters_mut() {
            for x in p.data_mut() {
                *x += r.gen_range(-0.5..0.5);
            }
        }
        let mut inputs: Vec<Tensor> = net.parameters().cloned().collect();
        inputs.push(uniform(&[4, 3], -2.0, 2.0, &mut r));
        let err = gradcheck(
            &inputs,
            |g, v| {
                let layers = v[..6].chunks(2).map(|p| (p[0], p[1])).collect();
                let vars = MlpVars {
                    layers,
                    activation: Activation::Tanh,
                };
                mlp_forward(g, &vars, v[6])
            },
            seed + d as u64,
            None,
        );
        worst = worst.max(err);
    }
    worst
}

/// Plan `exp((f + g - C) / eps)` for `[1, R]`, `[1, K]`, `[1, R, K]`.
fn plan_on_graph(g: &mut Graph, f: Var, gv: Var, c: Var, eps: f64) -> Result<Var> {
    let (rows, cols) = (g.shape(c)[1], g.shape(c)[2]);
    let f = g.reshape(f, &[1, rows, 1])?;
    let f = g.expand(f, &[1, rows, cols])?;
    let gv = g.reshape(gv, &[1, 1, cols])?;
    let gv = g.expand(gv, &[1, rows, cols])?;
    let s = g.add(f, gv)?;
    let s = g.sub(s, c)?;
    let s = g.scale(s, 1.0 / eps);
    g.exp(s)
}

/// `iters` hand-unrolled log-domain updates at a fixed `eps`, differentiated
/// with respect to the cost; returns the worst error over the plan.
pub fn unrolled_sinkhorn_error(marg: &Marginals, iters: usize, eps: f64, seed: u64) -> f64 {
    let mut r = rng(seed);
    let (rows, cols) = (marg.a().len(), marg.b().len());
    let cost = uniform(&[1, rows, cols], 0.0, 1.0, &mut r);
    let off_a: Vec<f64> = marg.a().iter().map(|a| eps * a.ln()).collect();
    let off_b: Vec<f64> = marg.b().iter().map(|b| eps * b.ln()).collect();
    gradcheck(
        &[cost],
        |g, v| {
            let mut f = g.constant(Tensor::zeros(&[1, rows]));
            let mut gv = g.constant(Tensor::zeros(&[1, cols]));
            for _ in 0..iters {
                f = g.softmin_update(f, gv, v[0], eps, &off_a, true, &[true])?;
                gv = g.softmin_update(gv, f, v[0], eps, &off_b, false, &[true])?;
            }
            plan_on_graph(g, f, gv, v[0], eps)
        },
        seed,
        None,
    )
}

/// Gradient of `<P, M>` for the scheduled solver on a batch of costs.
pub fn solver_error(marg: &Marginals, cfg: &SinkhornConfig, batch: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let cost = uniform(&[batch, marg.a().len(), marg.b().len()], 0.0, 1.0, &mut r);
    gradcheck(
        &[cost],
        |g, v| Ok(sinkhorn_solve_graph(g, v[0], marg, cfg)?.plan),
        seed,
        None,
    )
}

/// Gradient of revenue with respect to both networks' weights through
/// allocation network, Sinkhorn layer, truncation and payment rule.
/// `probe` random entries of each parameter tensor are checked.
pub fn pipeline_error(demand: DemandSpec, batch: usize, probe: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let params = MechanismParams::init(demand, SinkhornConfig::default(), AllocationHead::Sinkhorn, &mut r).unwrap();
    let bids = uniform(&[batch, demand.n * demand.m], 0.0, 1.0, &mut r);
    let inputs: Vec<Tensor> = params.parameters().cloned().collect();
    let split = params.alloc_net.layers.len() * 2;
    gradcheck(
        &inputs,
        |g, v| {
            let pairs = |vs: &[Var]| vs.chunks(2).map(|p| (p[0], p[1])).collect();
            let vars = MechanismVars {
                alloc: MlpVars {
                    layers: pairs(&v[..split]),
                    activation: params.alloc_net.activation,
                },
                pay: MlpVars {
                    layers: pairs(&v[split..]),
                    activation: params.pay_net.activation,
                },
            };
            let x = g.constant(bids.clone());
            let out = params.forward(g, &vars, x)?;
            Ok(g.mean(out.payments))
        },
        seed,
        Some(probe),
    )
}

/// Backward through `iters` fixed updates at `eps` yields finite gradients.
pub fn long_unroll_is_finite(marg: &Marginals, iters: usize, eps: f64, seed: u64) -> bool {
    let mut r = rng(seed);
    let (rows, cols) = (marg.a().len(), marg.b().len());
    let mut g = Graph::new();
    let c = g.leaf(uniform(&[1, rows, cols], 0.0, 1.0, &mut r));
    let off_a: Vec<f64> = marg.a().iter().map(|a| eps * a.ln()).collect();
    let off_b: Vec<f64> = marg.b().iter().map(|b| eps * b.ln()).collect();
    let mut f = g.constant(Tensor::zeros(&[1, rows]));
    let mut gv = g.constant(Tensor::zeros(&[1, cols]));
    for _ in 0..iters {
        f = g.softmin_update(f, gv, c, eps, &off_a, true, &[true]).unwrap();
        gv = g.softmin_update(gv, f, c, eps, &off_b, false, &[true]).unwrap();
    }
    let p = plan_on_graph(&mut g, f, gv, c, eps).unwrap();
    let w = g.constant(uniform(&[1, rows, cols], -1.0, 1.0, &mut r));
    let pw = g.mul(p, w).unwrap();
    let loss = g.sum(pw);
    g.backward(loss).unwrap().wrt(c).all_finite()
}
