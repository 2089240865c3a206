//! Fully connected tanh network with an analytic backward pass.
//!
//! Shared by the modality encoders and the partition-function amortizers.
//! Hidden layers apply tanh; the last layer is affine.

use crate::error::{Error, Result};
use crate::numerics::{rng, Matrix, ParamBlock};

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`.
    pub weight: ParamBlock,
    /// `1 × fan_out`.
    pub bias: ParamBlock,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Matrix>,
}

impl Mlp {
    /// Glorot-uniform weights and zero biases. Each layer draws from its own
    /// stream derived from `(seed, label, layer index)`.
    pub fn new(name: &str, widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!(
                "network '{name}' needs at least two positive widths, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut r = rng::seeded(seed, rng::stream_id(name, &[i as u64]));
                Dense {
                    weight: ParamBlock::new(
                        format!("{name}.{i}.weight"),
                        rng::glorot_uniform(&mut r, w[0], w[1]),
                        true,
                    ),
                    bias: ParamBlock::new(format!("{name}.{i}.bias"), Matrix::zeros(1, w[1]), false),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.value.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.value.cols()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(self.layers.iter().map(|l| l.weight.value.cols()));
        w
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn zero_grad(&mut self) {
        self.blocks_mut().for_each(ParamBlock::zero_grad);
    }

    pub fn num_params(&self) -> usize {
        self.blocks().map(ParamBlock::len).sum()
    }

    /// Concatenated parameter values in block order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.blocks()
            .flat_map(|b| b.value.as_slice().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.blocks()
            .flat_map(|b| b.grad.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for b in self.blocks_mut() {
            let n = b.len();
            b.value.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(Error::contract(format!(
                "network expects input dim {}, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = h.matmul(&layer.weight.value)?;
            let b = layer.bias.value.row(0);
            for r in 0..z.rows() {
                for (zi, bi) in z.row_mut(r).iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            if i < last {
                z = z.map(f64::tanh);
            }
            inputs.push(h);
            h = z;
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Output without keeping a cache.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Accumulates parameter gradients for upstream gradient `grad_out` on the
    /// output and returns the gradient on the input.
    pub fn backward(&mut self, cache: &MlpCache, grad_out: &Matrix) -> Result<Matrix> {
        let n = cache.inputs[0].rows();
        if grad_out.shape() != (n, self.output_dim()) || cache.inputs.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "backward expects gradient of shape {:?}, got {:?}",
                (n, self.output_dim()),
                grad_out.shape()
            )));
        }
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input = &cache.inputs[i];
            let layer = &mut self.layers[i];
            let dw = input.transposed_matmul(&g)?;
            layer.weight.grad.add_assign(&dw)?;
            let db = layer.bias.grad.row_mut(0);
            for r in 0..g.rows() {
                for (d, gi) in db.iter_mut().zip(g.row(r)) {
                    *d += gi;
                }
            }
            let mut dx = g.matmul_transposed(&layer.weight.value)?;
            if i > 0 {
                // `input` is tanh output of the previous layer.
                for (d, h) in dx.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *d *= 1.0 - h * h;
                }
            }
            g = dx;
        }
        Ok(g)
    }

    /// Copies values from `other`, which must have identical shapes.
    pub fn copy_values_from(&mut self, other: &Mlp) -> Result<()> {
        self.check_same_shape(other)?;
        for (dst, src) in self.blocks_mut().zip(other.blocks()) {
            dst.value = src.value.clone();
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &Mlp) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::contract(format!(
                "layer count mismatch: {} vs {}",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.blocks().zip(other.blocks()) {
            if a.value.shape() != b.value.shape() {
                return Err(Error::contract(format!(
                    "block '{}' shape {:?} does not match '{}' shape {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    /// Renames every block under a new prefix, keeping layer suffixes.
    pub fn renamed(mut self, name: &str) -> Self {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.weight.name = format!("{name}.{i}.weight");
            layer.bias.name = format!("{name}.{i}.bias");
        }
        self
    }
}
