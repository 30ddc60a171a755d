//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and the ids of
//! its inputs, so append order is a topological order. [`Graph::backward`]
//! walks the tape once in reverse. The tape is rebuilt on every forward pass,
//! which lets solvers with data-dependent iteration counts (Sinkhorn) be
//! differentiated by unrolling exactly the iterations they ran.
//!
//! Binary elementwise ops accept equal shapes, or a single-element operand
//! paired with any tensor. Anything else must go through [`Graph::expand`].

use crate::error::{dim_err, Error, Result};
use crate::tensor::{axis_split, strides, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Negate(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    LogSumExp { x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Expand { x: Var, map: Vec<usize> },
    Select { x: Var, axis: usize, indices: Vec<usize> },
    Scatter { x: Var, axis: usize, indices: Vec<usize> },
    Softmin(Box<Softmin>),
}

#[derive(Clone, Debug)]
struct Softmin {
    prev: Var,
    other: Var,
    cost: Var,
    reduce_cols: bool,
    active: Vec<bool>,
    /// `[B, R, K]` normalised weights of the reduction.
    weights: Vec<f64>,
}

/// `tanh` through `expm1`, which is much cheaper than the libm routine and
/// agrees with it to a few ulps.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() > 20.0 {
        return x.signum();
    }
    let e = (2.0 * x).exp_m1();
    e / (e + 2.0)
}

/// Flat `[B, R, K]` index for output slot `l` and reduced slot `q`.
fn softmin_index(reduce_cols: bool, rows: usize, cols: usize, b: usize, l: usize, q: usize) -> usize {
    if reduce_cols {
        (b * rows + l) * cols + q
    } else {
        (b * rows + q) * cols + l
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only record of tensor operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, materialising zeros when it received none.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn scalar_like(t: &Tensor) -> bool {
    t.len() == 1
}

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || scalar_like(b) {
        Ok(a.shape().to_vec())
    } else if scalar_like(a) {
        Ok(b.shape().to_vec())
    } else {
        dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn zip_with(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let data: Vec<f64> = if ad.len() == bd.len() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        ad.iter().map(|&x| f(x, bd[0])).collect()
    } else {
        bd.iter().map(|&y| f(ad[0], y)).collect()
    };
    Tensor::new(shape, data).expect("binary op shape")
}

/// Accumulates `upstream * local` into the gradient of an operand that may
/// have been broadcast from a single element.
fn accumulate_operand(slot: &mut Tensor, upstream: &Tensor, local: impl Fn(usize) -> f64) {
    let g = upstream.data();
    if slot.len() == g.len() {
        for (k, s) in slot.data_mut().iter_mut().enumerate() {
            *s += g[k] * local(k);
        }
    } else {
        let total: f64 = g.iter().enumerate().map(|(k, &gk)| gk * local(k)).sum();
        slot.data_mut()[0] += total;
    }
}

fn broadcast_map(input: &[usize], output: &[usize]) -> Result<Vec<usize>> {
    if input.len() != output.len() {
        return dim_err("expand", format!("rank {:?} -> {:?}", input, output));
    }
    for (&i, &o) in input.iter().zip(output) {
        if i != o && i != 1 {
            return dim_err("expand", format!("{:?} -> {:?}", input, output));
        }
    }
    let in_strides = strides(input);
    let eff: Vec<usize> = input
        .iter()
        .zip(&in_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let total: usize = output.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; output.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..output.len()).rev() {
            counter[d] += 1;
            offset += eff[d];
            if counter[d] < output[d] {
                break;
            }
            offset -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    Ok(map)
}

/// `c = alpha * a(m x k) b(k x n) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: all slices are sized for the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return dim_err("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = binary_shape(name, ta, tb)?;
        let out = zip_with(ta, tb, shape, f);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; on ties the gradient flows to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(out, Op::Offset(a), ng)
    }

    pub fn negate(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let ng = self.ng(a);
        self.push(out, Op::Negate(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = t.map(f64::exp);
        if let Some(index) = out.data().iter().position(|y| !y.is_finite()) {
            return Err(Error::Numeric {
                op: "exp",
                index,
                value: t.data()[index],
            });
        }
        let ng = self.ng(a);
        Ok(self.push(out, Op::Exp(a), ng))
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if let Some(index) = t.data().iter().position(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::Numeric {
                op: "log",
                index,
                value: t.data()[index],
            });
        }
        let out = t.map(f64::ln);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Log(a), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(fast_tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    /// `max(0, x)`; the gradient at 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.value(x).rank() {
            return dim_err(op, format!("axis {} for shape {:?}", axis, self.shape(x)));
        }
        Ok(())
    }

    /// Max-shifted `log(sum(exp(x)))` along `axis`, which is removed.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("logsumexp", x, axis)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for k in 0..len {
                    mx = mx.max(d[base + k * inner]);
                }
                let val = if mx == f64::NEG_INFINITY {
                    f64::NEG_INFINITY
                } else {
                    let s: f64 = (0..len).map(|k| (d[base + k * inner] - mx).exp()).sum();
                    mx + s.ln()
                };
                out[o * inner + i] = val;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::LogSumExp { x, axis }, ng))
    }

    /// Masked soft-min potential update over a `[B, R, K]` cost.
    ///
    /// With `reduce_cols`, `other` is `[B, K]` and the result is `[B, R]`:
    /// `out[b,r] = -eps * ln sum_k exp((other[b,k] - cost[b,r,k]) / eps) + offset[r]`.
    /// Otherwise rows and columns swap roles. Instances whose `active` flag
    /// is false copy `prev` unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn softmin_update(
        &mut self,
        prev: Var,
        other: Var,
        cost: Var,
        eps: f64,
        offset: &[f64],
        reduce_cols: bool,
        active: &[bool],
    ) -> Result<Var> {
        let cs = self.shape(cost).to_vec();
        if cs.len() != 3 {
            return dim_err("softmin_update", format!("cost {:?}", cs));
        }
        let (batch, rows, cols) = (cs[0], cs[1], cs[2]);
        let (out_len, red_len) = if reduce_cols { (rows, cols) } else { (cols, rows) };
        if self.shape(prev) != [batch, out_len]
            || self.shape(other) != [batch, red_len]
            || offset.len() != out_len
            || active.len() != batch
        {
            return dim_err(
                "softmin_update",
                format!(
                    "prev {:?}, other {:?}, cost {:?}",
                    self.shape(prev),
                    self.shape(other),
                    cs
                ),
            );
        }
        let (pd, od, cd) = (self.value(prev).data(), self.value(other).data(), self.value(cost).data());
        let mut out = pd.to_vec();
        let mut weights = vec![0.0; cd.len()];
        let mut z = vec![0.0; red_len];
        for b in 0..batch {
            if !active[b] {
                continue;
            }
            for l in 0..out_len {
                let mut mx = f64::NEG_INFINITY;
                for (q, zq) in z.iter_mut().enumerate() {
                    *zq = (od[b * red_len + q] - cd[softmin_index(reduce_cols, rows, cols, b, l, q)]) / eps;
                    mx = mx.max(*zq);
                }
                let mut sum = 0.0;
                for (q, zq) in z.iter().enumerate() {
                    let e = (zq - mx).exp();
                    weights[softmin_index(reduce_cols, rows, cols, b, l, q)] = e;
                    sum += e;
                }
                for q in 0..red_len {
                    weights[softmin_index(reduce_cols, rows, cols, b, l, q)] /= sum;
                }
                out[b * out_len + l] = -eps * (mx + sum.ln()) + offset[l];
            }
        }
        if let Some(index) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric {
                op: "softmin_update",
                index,
                value: out[index],
            });
        }
        let ng = self.ng(prev) || self.ng(other) || self.ng(cost);
        let op = Op::Softmin(Box::new(Softmin {
            prev,
            other,
            cost,
            reduce_cols,
            active: active.to_vec(),
            weights,
        }));
        Ok(self.push(Tensor::new(vec![batch, out_len], out)?, op, ng))
    }

    /// Softmax along `axis`, computed through the log-sum-exp shift.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let d = t.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mx = (0..len).fold(f64::NEG_INFINITY, |m, k| m.max(d[base + k * inner]));
                let lse = mx + (0..len).map(|k| (d[base + k * inner] - mx).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[base + k * inner] = (d[base + k * inner] - lse).exp();
                }
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Sum along `axis`, which is removed.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let d = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let row = &d[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::SumAxis { x, axis }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Broadcasts size-1 dimensions of `x` up to `shape` (same rank).
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let map = broadcast_map(self.shape(x), shape)?;
        let d = self.value(x).data();
        let out: Vec<f64> = map.iter().map(|&k| d[k]).collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape.to_vec(), out)?, Op::Expand { x, map }, ng))
    }

    /// Gathers `indices` along `axis`.
    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        self.check_axis("select", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return dim_err("select", format!("index {} out of range {}", bad, len));
        }
        let d = t.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let start = (o * len + k) * inner;
                out.extend_from_slice(&d[start..start + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = indices.len();
        let ng = self.ng(x);
        let op = Op::Select {
            x,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    /// Inverse of [`Graph::select`]: places slices of `x` at `indices` along
    /// `axis` of a zero tensor whose `axis` extent is `len`.
    pub fn scatter(&mut self, x: Var, axis: usize, indices: &[usize], len: usize) -> Result<Var> {
        self.check_axis("scatter", x, axis)?;
        let t = self.value(x);
        let (outer, k_in, inner) = axis_split(t.shape(), axis);
        if k_in != indices.len() || indices.iter().any(|&i| i >= len) {
            return dim_err("scatter", format!("{} indices into {}", indices.len(), len));
        }
        let d = t.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for (s, &k) in indices.iter().enumerate() {
                let src = (o * k_in + s) * inner;
                let dst = (o * len + k) * inner;
                out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let ng = self.ng(x);
        let op = Op::Scatter {
            x,
            axis,
            indices: indices.to_vec(),
        };
        Ok(self.push(Tensor::new(shape, out)?, op, ng))
    }

    /// Reverse sweep from a scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut Tensor> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape();
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(s) = self.slot(grads, *a) {
                    // dA = dC * B^T
                    gemm(m, n, k, g.data(), n, 1, tb.data(), 1, n, 1.0, s.data_mut());
                }
                if let Some(s) = self.slot(grads, *b) {
                    // dB = A^T * dC
                    gemm(k, m, n, ta.data(), 1, k, g.data(), n, 1, 1.0, s.data_mut());
                }
            }
            Op::Add(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |_| 1.0);
                }
                if let Some(s) = self.slot(grads, *b) {
                    accumulate_operand(s, g, |_| 1.0);
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |_| 1.0);
                }
                if let Some(s) = self.slot(grads, *b) {
                    accumulate_operand(s, g, |_| -1.0);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick = |t: &Tensor, k: usize| if t.len() == 1 { t.data()[0] } else { t.data()[k] };
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |k| pick(tb, k));
                }
                if let Some(s) = self.slot(grads, *b) {
                    accumulate_operand(s, g, |k| pick(ta, k));
                }
            }
            Op::Minimum(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let pick = |t: &Tensor, k: usize| if t.len() == 1 { t.data()[0] } else { t.data()[k] };
                let a_wins = |k: usize| pick(ta, k) <= pick(tb, k);
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |k| if a_wins(k) { 1.0 } else { 0.0 });
                }
                if let Some(s) = self.slot(grads, *b) {
                    accumulate_operand(s, g, |k| if a_wins(k) { 0.0 } else { 1.0 });
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |_| *c);
                }
            }
            Op::Offset(a) | Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (d, &gk) in s.data_mut().iter_mut().zip(g.data()) {
                        *d += gk;
                    }
                }
            }
            Op::Negate(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |_| -1.0);
                }
            }
            Op::Exp(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |k| y.data()[k]);
                }
            }
            Op::Log(a) => {
                let x = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |k| 1.0 / x.data()[k]);
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |k| 1.0 - y.data()[k] * y.data()[k]);
                }
            }
            Op::Sigmoid(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |k| y.data()[k] * (1.0 - y.data()[k]));
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    accumulate_operand(s, g, |k| if x.data()[k] > 0.0 { 1.0 } else { 0.0 });
                }
            }
            Op::LogSumExp { x, axis } => {
                let tx = self.value(*x);
                let (outer, len, inner) = axis_split(tx.shape(), *axis);
                if let Some(s) = self.slot(grads, *x) {
                    let (xd, sd) = (tx.data(), s.data_mut());
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            let (lse, gr) = (y.data()[r], g.data()[r]);
                            if lse == f64::NEG_INFINITY {
                                continue;
                            }
                            for k in 0..len {
                                let idx = o * len * inner + k * inner + i;
                                sd[idx] += gr * (xd[idx] - lse).exp();
                            }
                        }
                    }
                }
            }
            Op::Softmin(sm) => {
                let cs = self.value(sm.cost).shape();
                let (batch, rows, cols) = (cs[0], cs[1], cs[2]);
                let (out_len, red_len) = if sm.reduce_cols { (rows, cols) } else { (cols, rows) };
                let idx = |b, l, q| softmin_index(sm.reduce_cols, rows, cols, b, l, q);
                let gd = g.data();
                if let Some(s) = self.slot(grads, sm.prev) {
                    let sd = s.data_mut();
                    for b in (0..batch).filter(|&b| !sm.active[b]) {
                        for l in 0..out_len {
                            sd[b * out_len + l] += gd[b * out_len + l];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, sm.other) {
                    let sd = s.data_mut();
                    for b in (0..batch).filter(|&b| sm.active[b]) {
                        for l in 0..out_len {
                            let gl = gd[b * out_len + l];
                            for q in 0..red_len {
                                sd[b * red_len + q] -= gl * sm.weights[idx(b, l, q)];
                            }
                        }
                    }
                }
                if let Some(s) = self.slot(grads, sm.cost) {
                    let sd = s.data_mut();
                    for b in (0..batch).filter(|&b| sm.active[b]) {
                        for l in 0..out_len {
                            let gl = gd[b * out_len + l];
                            for q in 0..red_len {
                                let k = idx(b, l, q);
                                sd[k] += gl * sm.weights[k];
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                if let Some(s) = self.slot(grads, *x) {
                    let (yd, gd, sd) = (y.data(), g.data(), s.data_mut());
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len)
                                .map(|k| gd[base + k * inner] * yd[base + k * inner])
                                .sum();
                            for k in 0..len {
                                let idx = base + k * inner;
                                sd[idx] += yd[idx] * (gd[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    for o in 0..outer {
                        let gr = &g.data()[o * inner..(o + 1) * inner];
                        for k in 0..len {
                            let start = (o * len + k) * inner;
                            for (d, &gv) in sd[start..start + inner].iter_mut().zip(gr) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                if let Some(s) = self.slot(grads, *x) {
                    for d in s.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Expand { x, map } => {
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    for (&k, &gv) in map.iter().zip(g.data()) {
                        sd[k] += gv;
                    }
                }
            }
            Op::Select { x, axis, indices } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    let w = indices.len();
                    for o in 0..outer {
                        for (pos, &k) in indices.iter().enumerate() {
                            let src = (o * w + pos) * inner;
                            let dst = (o * len + k) * inner;
                            for t in 0..inner {
                                sd[dst + t] += g.data()[src + t];
                            }
                        }
                    }
                }
            }
            Op::Scatter { x, axis, indices } => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                if let Some(s) = self.slot(grads, *x) {
                    let sd = s.data_mut();
                    let w = indices.len();
                    for o in 0..outer {
                        for (pos, &k) in indices.iter().enumerate() {
                            let dst = (o * w + pos) * inner;
                            let src = (o * len + k) * inner;
                            for t in 0..inner {
                                sd[dst + t] += g.data()[src + t];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
