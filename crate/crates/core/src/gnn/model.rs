//! GIN parameter containers.
//!
//! Weight tensors are indexed in a flat list: block `k` contributes its two
//! MLP matrices at indices `2k` and `2k + 1`, and the classifier head comes
//! last. All matrices are `[out_features x in_features]`.
//!
//! Every weight tensor also carries an input gain vector (one entry per
//! column). The layer computes `W (x * gain) + b`; gains stay at 1 unless a
//! honeypot encoding installs an activation multiplier.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quant::{self, BitFlipEvent, QuantTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_dim: usize,
    pub hidden: usize,
    pub depth: usize,
    pub tasks: usize,
    /// GIN self-weight `epsilon`, shared by all blocks and not trained.
    pub eps: f64,
}

/// What a weight tensor computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// First linear map of block `k`.
    MlpIn(usize),
    /// Second linear map of block `k`; its outputs are the node states.
    MlpOut(usize),
    Head,
}

impl Architecture {
    pub fn new(in_dim: usize, hidden: usize, depth: usize, tasks: usize) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || depth == 0 || tasks == 0 {
            return Err(invalid("architecture dims must be positive"));
        }
        Ok(Self {
            in_dim,
            hidden,
            depth,
            tasks,
            eps: 0.0,
        })
    }

    pub fn n_tensors(&self) -> usize {
        2 * self.depth + 1
    }

    pub fn head_index(&self) -> usize {
        2 * self.depth
    }

    /// Width of the concatenated readout, including the layer-0 input term.
    pub fn readout_dim(&self) -> usize {
        self.in_dim + self.depth * self.hidden
    }

    pub fn role(&self, tensor: usize) -> TensorRole {
        if tensor == self.head_index() {
            TensorRole::Head
        } else if tensor.is_multiple_of(2) {
            TensorRole::MlpIn(tensor / 2)
        } else {
            TensorRole::MlpOut(tensor / 2)
        }
    }

    pub fn tensor_shape(&self, tensor: usize) -> (usize, usize) {
        match self.role(tensor) {
            TensorRole::MlpIn(0) => (self.hidden, self.in_dim),
            TensorRole::MlpIn(_) | TensorRole::MlpOut(_) => (self.hidden, self.hidden),
            TensorRole::Head => (self.tasks, self.readout_dim()),
        }
    }

    /// Where output neuron `h` of `tensor` is consumed: a list of
    /// `(consumer tensor, column offset)`, the consumed column being
    /// `offset + h`. The head has no consumers.
    pub fn consumers(&self, tensor: usize) -> Vec<(usize, usize)> {
        match self.role(tensor) {
            TensorRole::MlpIn(_) => vec![(tensor + 1, 0)],
            TensorRole::MlpOut(k) => {
                let mut out = Vec::with_capacity(2);
                if k + 1 < self.depth {
                    out.push((tensor + 1, 0));
                }
                out.push((self.head_index(), self.in_dim + k * self.hidden));
                out
            }
            TensorRole::Head => Vec::new(),
        }
    }

    pub fn total_weights(&self) -> usize {
        (0..self.n_tensors())
            .map(|t| {
                let (r, c) = self.tensor_shape(t);
                r * c
            })
            .sum()
    }
}

/// Full-precision GIN parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RealModel {
    pub arch: Architecture,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub gains: Vec<Array1<f64>>,
}

impl RealModel {
    pub fn zeros(arch: Architecture) -> Self {
        let weights = (0..arch.n_tensors())
            .map(|t| Array2::zeros(arch.tensor_shape(t)))
            .collect();
        let biases = (0..arch.n_tensors())
            .map(|t| Array1::zeros(arch.tensor_shape(t).0))
            .collect();
        let gains = (0..arch.n_tensors())
            .map(|t| Array1::ones(arch.tensor_shape(t).1))
            .collect();
        Self {
            arch,
            weights,
            biases,
            gains,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Self {
        let mut m = Self::zeros(arch);
        for w in &mut m.weights {
            let (r, c) = w.dim();
            let limit = (6.0 / (r + c) as f64).sqrt();
            w.mapv_inplace(|_| rng.gen_range(-limit..limit));
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.arch.n_tensors();
        if self.weights.len() != n || self.biases.len() != n || self.gains.len() != n {
            return Err(invalid("parameter list length does not match depth"));
        }
        for t in 0..n {
            let (r, c) = self.arch.tensor_shape(t);
            if self.weights[t].dim() != (r, c) {
                return Err(invalid(format!(
                    "tensor {t}: expected {r}x{c}, got {:?}",
                    self.weights[t].dim()
                )));
            }
            if self.biases[t].len() != r || self.gains[t].len() != c {
                return Err(invalid(format!("tensor {t}: bias or gain length mismatch")));
            }
        }
        Ok(())
    }
}

/// An INT8-quantized GIN: the deployed, attackable model.
#[derive(Debug, Clone, PartialEq)]
pub struct GinModel {
    pub arch: Architecture,
    pub weights: Vec<QuantTensor>,
    pub biases: Vec<Array1<f64>>,
    pub gains: Vec<Array1<f64>>,
    pub seed: u64,
}

impl GinModel {
    /// Quantizes every weight tensor with its own max-abs scale.
    pub fn quantize(real: &RealModel, seed: u64) -> Result<Self> {
        real.validate()?;
        let weights = real
            .weights
            .iter()
            .map(quant::quantize_symmetric)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch: real.arch,
            weights,
            biases: real.biases.clone(),
            gains: real.gains.clone(),
            seed,
        })
    }

    /// Re-quantizes `real` using this model's existing per-tensor scales and ranges.
    pub fn requantize_like(&self, real: &RealModel) -> Result<Self> {
        real.validate()?;
        if real.arch != self.arch {
            return Err(invalid("architecture mismatch"));
        }
        let weights = real
            .weights
            .iter()
            .zip(&self.weights)
            .map(|(w, q)| quant::quantize(w, q.scale(), q.qmin(), q.qmax()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            arch: real.arch,
            weights,
            biases: real.biases.clone(),
            gains: real.gains.clone(),
            seed: self.seed,
        })
    }

    pub fn dequantize(&self) -> RealModel {
        RealModel {
            arch: self.arch,
            weights: self.weights.iter().map(QuantTensor::dequantize).collect(),
            biases: self.biases.clone(),
            gains: self.gains.clone(),
        }
    }

    pub fn n_tensors(&self) -> usize {
        self.weights.len()
    }

    pub fn flip_bit(
        &mut self,
        layer: usize,
        row: usize,
        col: usize,
        bit: u8,
    ) -> Result<BitFlipEvent> {
        let tensor = self
            .weights
            .get_mut(layer)
            .ok_or_else(|| invalid(format!("layer {layer} out of range")))?;
        let (before, after) = tensor.flip_bit(row, col, bit)?;
        Ok(BitFlipEvent {
            layer,
            row,
            col,
            bit,
            before,
            after,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dequantize().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_consumers() {
        let a = Architecture::new(4, 8, 3, 2).unwrap();
        assert_eq!(a.n_tensors(), 7);
        assert_eq!(a.tensor_shape(0), (8, 4));
        assert_eq!(a.tensor_shape(1), (8, 8));
        assert_eq!(a.tensor_shape(6), (2, 4 + 3 * 8));
        assert_eq!(a.consumers(0), vec![(1, 0)]);
        assert_eq!(a.consumers(1), vec![(2, 0), (6, 4)]);
        assert_eq!(a.consumers(5), vec![(6, 4 + 16)]);
        assert!(a.consumers(6).is_empty());
    }

    #[test]
    fn consumer_columns_fit_shapes() {
        let a = Architecture::new(3, 5, 4, 1).unwrap();
        for t in 0..a.n_tensors() {
            let rows = a.tensor_shape(t).0;
            for (c, off) in a.consumers(t) {
                assert!(off + rows <= a.tensor_shape(c).1);
            }
        }
    }
}
