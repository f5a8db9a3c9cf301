use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::graph::{CompGraph, NodeId};
use crate::numerics::matrix::DenseMatrix;

/// Affine layer `x·W + b` with `W: in × out` and `b: 1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

impl Linear {
    /// He-style Gaussian initialisation for leaky activations.
    pub fn init<R: Rng + ?Sized>(d_in: usize, d_out: usize, slope: f64, rng: &mut R) -> Self {
        let std = (2.0 / ((1.0 + slope * slope) * d_in as f64)).sqrt();
        let weight = DenseMatrix::from_fn(d_in, d_out, |_, _| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        });
        Self {
            weight,
            bias: DenseMatrix::zeros(1, d_out),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: DenseMatrix::identity(d),
            bias: DenseMatrix::zeros(1, d),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        x.matmul(&self.weight)?.add_row_broadcast(&self.bias)
    }

    /// Records the layer; returns the output node and the `[weight, bias]` leaves.
    pub fn record(&self, g: &mut CompGraph, x: NodeId) -> Result<(NodeId, [NodeId; 2])> {
        let w = g.param(self.weight.clone());
        let b = g.param(self.bias.clone());
        let h = g.matmul(x, w)?;
        Ok((g.add_bias(h, b)?, [w, b]))
    }
}

/// Stack of affine layers with leaky-ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Mlp {
    /// `dims = [d_in, h1, ..., d_out]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], slope: f64, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(w[0], w[1], slope, rng))
            .collect();
        Self { layers, slope }
    }

    pub fn d_in(&self) -> usize {
        self.layers.first().map_or(0, Linear::d_in)
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().map_or(0, Linear::d_out)
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        if x.cols() != self.d_in() {
            return Err(shape_err(
                "mlp_forward",
                format!("input has {} columns, network expects {}", x.cols(), self.d_in()),
            ));
        }
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                let s = self.slope;
                h = h.map(|v| if v > 0.0 { v } else { s * v });
            }
        }
        Ok(h)
    }

    /// Records the network; parameter leaves come back in [`Mlp::params_mut`] order.
    pub fn record(&self, g: &mut CompGraph, x: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        if g.value(x).cols() != self.d_in() {
            return Err(shape_err(
                "mlp_record",
                format!("input has {} columns, network expects {}", g.value(x).cols(), self.d_in()),
            ));
        }
        let mut h = x;
        let mut params = Vec::with_capacity(self.layers.len() * 2);
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, p) = layer.record(g, h)?;
            params.extend(p);
            h = out;
            if i + 1 < self.layers.len() {
                h = g.leaky_relu(h, self.slope);
            }
        }
        Ok((h, params))
    }

    pub fn params(&self) -> Vec<&DenseMatrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{relative_error, Lcg};
    use rand::SeedableRng;

    #[test]
    fn recorded_forward_matches_plain_forward() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::init(&[5, 16, 16, 3], 0.2, &mut rng);
        let x = Lcg::new(2).matrix(7, 5);
        let mut g = CompGraph::new();
        let xi = g.constant(x.clone());
        let (out, params) = mlp.record(&mut g, xi).unwrap();
        assert_eq!(g.value(out), &mlp.forward(&x).unwrap());
        assert_eq!(params.len(), 6);
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp::init(&[4, 8, 2], 0.2, &mut rng);
        let x = Lcg::new(5).matrix(6, 4);
        let loss = |m: &Mlp| {
            let y = m.forward(&x).unwrap();
            y.as_slice().iter().map(|v| v * v).sum::<f64>()
        };
        let mut g = CompGraph::new();
        let xi = g.constant(x.clone());
        let (out, params) = mlp.record(&mut g, xi).unwrap();
        let sq = g.square(out);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        let analytic = grads.wrt(params[0]);
        let h = 1e-5;
        let mut numeric = DenseMatrix::zeros(4, 8);
        for i in 0..32 {
            let mut up = mlp.clone();
            up.layers[0].weight.as_mut_slice()[i] += h;
            let mut dn = mlp.clone();
            dn.layers[0].weight.as_mut_slice()[i] -= h;
            numeric.as_mut_slice()[i] = (loss(&up) - loss(&dn)) / (2.0 * h);
        }
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }
}
