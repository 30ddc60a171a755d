//! Adam with bias correction.

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub(crate) m: Vec<Tensor>,
    pub(crate) v: Vec<Tensor>,
    pub(crate) t: u64,
}

impl Adam {
    pub fn new<'a>(lr: f64, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    /// Rebuilds optimizer state from saved moments.
    pub fn from_state(lr: f64, m: Vec<Tensor>, v: Vec<Tensor>, t: u64) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return dim_err("adam", "moment shapes disagree");
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t,
        })
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One descent step. Gradients are checked for finiteness before any
    /// parameter is touched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: &[Tensor],
    ) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return dim_err(
                "adam",
                format!("{} params, {} grads, {} moments", params.len(), grads.len(), self.m.len()),
            );
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[k].shape() {
                return dim_err("adam", format!("parameter {} shape mismatch", k));
            }
            if let Some(index) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient { param: k, index });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (idx, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[idx] = self.beta1 * m[idx] + (1.0 - self.beta1) * gi;
                v[idx] = self.beta2 * v[idx] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[idx] / c1;
                let vhat = v[idx] / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
