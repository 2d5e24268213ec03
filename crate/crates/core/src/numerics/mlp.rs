use rand::Rng;

use super::graph::{Graph, NodeId};
use super::tensor::{Params, Tensor};
use super::NumericsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// Fully connected stack. `dims` lists layer widths including the input,
/// so `[8, 32, 4]` is one hidden layer. Hidden layers use `activation`,
/// the last layer is always linear. Parameters are named
/// `{prefix}.{layer}.w` and `{prefix}.{layer}.b`.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub prefix: String,
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        MlpSpec {
            prefix: prefix.into(),
            dims,
            activation: Activation::Tanh,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn layer_names(&self, layer: usize) -> (String, String) {
        (
            format!("{}.{layer}.w", self.prefix),
            format!("{}.{layer}.b", self.prefix),
        )
    }

    /// Insert freshly initialised weights: uniform in +-1/sqrt(fan_in),
    /// biases zero. Draw order is fixed (layer by layer, row-major), so a
    /// given rng state always produces the same parameters.
    pub fn init(&self, params: &mut Params, rng: &mut impl Rng) {
        assert!(self.dims.len() >= 2, "mlp needs at least input and output dims");
        for layer in 0..self.dims.len() - 1 {
            let (d_in, d_out) = (self.dims[layer], self.dims[layer + 1]);
            let bound = 1.0 / (d_in as f64).sqrt();
            let w: Vec<f64> = (0..d_in * d_out)
                .map(|_| rng.gen_range(-bound..bound))
                .collect();
            let (wn, bn) = self.layer_names(layer);
            params.insert(wn, Tensor::matrix(d_in, d_out, w).unwrap());
            params.insert(bn, Tensor::vector(vec![0.0; d_out]));
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        x: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let layers = self.dims.len() - 1;
        let mut h = x;
        for layer in 0..layers {
            let (wn, bn) = self.layer_names(layer);
            let w = g.param(params, &wn)?;
            let b = g.param(params, &bn)?;
            h = g.linear(h, w, b)?;
            if layer + 1 < layers && self.activation == Activation::Tanh {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }

    /// Names of all parameters this spec owns, in creation order.
    pub fn param_names(&self) -> Vec<String> {
        (0..self.dims.len() - 1)
            .flat_map(|l| {
                let (w, b) = self.layer_names(l);
                [w, b]
            })
            .collect()
    }
}
