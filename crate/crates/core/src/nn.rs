//! Feedforward networks on the autodiff graph.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

/// One affine layer: `x W + b` with `W` of shape `[fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Graph handles for the parameters of an [`Mlp`].
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub activation: Activation,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `widths` lists every layer width
    /// from input to output.
    pub fn init<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("layer shape"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(widths: &[usize], activation: Activation) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Layer {
                weight: Tensor::zeros(&[w[0], w[1]]),
                bias: Tensor::zeros(&[w[1]]),
            })
            .collect();
        Self { layers, activation }
    }

    /// Layer widths from input to output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.weight.shape()[0]).collect();
        w.extend(self.layers.last().map(|l| l.weight.shape()[1]));
        w
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weight.shape()[0])
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.shape()[1])
    }

    /// Checks that consecutive layers chain.
    pub fn validate(&self) -> Result<()> {
        for (i, l) in self.layers.iter().enumerate() {
            let s = l.weight.shape();
            if s.len() != 2 || l.bias.shape() != [s[1]] {
                return dim_err("mlp", format!("layer {} weight {:?} bias {:?}", i, s, l.bias.shape()));
            }
            if i > 0 && self.layers[i - 1].weight.shape()[1] != s[0] {
                return dim_err("mlp", format!("layer {} does not chain", i));
            }
        }
        Ok(())
    }

    /// Places the parameters on `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (g.leaf(l.weight.clone()), g.leaf(l.bias.clone()))
                } else {
                    (g.constant(l.weight.clone()), g.constant(l.bias.clone()))
                }
            })
            .collect();
        MlpVars {
            layers,
            activation: self.activation,
        }
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

impl MlpVars {
    pub fn parameters(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Affine -> activation on every hidden layer; the last layer is left affine.
/// `input` has shape `[batch, fan_in]`.
pub fn mlp_forward(g: &mut Graph, net: &MlpVars, input: Var) -> Result<Var> {
    let mut h = input;
    let last = net.layers.len().saturating_sub(1);
    for (i, &(w, b)) in net.layers.iter().enumerate() {
        let z = g.matmul(h, w)?;
        let rows = g.shape(z)[0];
        let cols = g.shape(z)[1];
        let b2 = g.reshape(b, &[1, cols])?;
        let bb = g.expand(b2, &[rows, cols])?;
        let z = g.add(z, bb)?;
        h = if i == last {
            z
        } else {
            match net.activation {
                Activation::Tanh => g.tanh(z),
                Activation::Sigmoid => g.sigmoid(z),
            }
        };
    }
    Ok(h)
}
