//! Quantization-aware training with a straight-through estimator.
//!
//! Adam updates full-precision master weights; every step runs the forward
//! and backward pass on their INT8 fake-quantized copies and maps the
//! gradient back through the quantizer with [`ste_backward`].

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::compute::{backward, loss, LossKind, Target};
use super::data::Dataset;
use super::model::{GinModel, RealModel};
use crate::error::{invalid, Result};
use crate::quant::{self, ste_backward};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Coefficient of an L1 penalty on the master weights.
    pub l1: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            l1: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GinModel,
    /// Master weights after the last step.
    pub master: RealModel,
    /// Training-split BCE before any update.
    pub initial_loss: f64,
    /// Training-split BCE after each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Adam<D: ndarray::Dimension> {
    m: ndarray::Array<f64, D>,
    v: ndarray::Array<f64, D>,
}

impl<D: ndarray::Dimension> Adam<D> {
    fn new(shape: D) -> Self {
        Self {
            m: ndarray::Array::zeros(shape.clone()),
            v: ndarray::Array::zeros(shape),
        }
    }

    fn step(
        &mut self,
        param: &mut ndarray::Array<f64, D>,
        grad: &ndarray::Array<f64, D>,
        cfg: &TrainConfig,
        t: i32,
    ) {
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        ndarray::Zip::from(param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
            });
    }
}

fn fake_quantized(master: &RealModel) -> Result<(RealModel, Vec<quant::QuantTensor>)> {
    let q = master
        .weights
        .iter()
        .map(quant::quantize_symmetric)
        .collect::<Result<Vec<_>>>()?;
    let mut deq = master.clone();
    deq.weights = q.iter().map(|t| t.dequantize()).collect();
    Ok((deq, q))
}

fn split_loss(
    model: &RealModel,
    batches: &[(super::graph::GraphBatch, Array2<f64>)],
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0.0;
    for (b, t) in batches {
        let w = b.n_graphs() as f64;
        total += w * loss(model, b, Target::Labels(t), LossKind::Bce)?;
        n += w;
    }
    Ok(total / n)
}

/// Trains `init` on the graphs at `train_idx` and returns the INT8 model.
pub fn train_ste(
    init: &RealModel,
    data: &Dataset,
    train_idx: &[usize],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    init.validate()?;
    if train_idx.is_empty() {
        return Err(invalid("training split is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(invalid("batch size must be positive"));
    }
    let with_labels = |idx: &[usize]| -> Result<Vec<_>> {
        data.batches(idx, cfg.batch_size)?
            .into_iter()
            .map(|b| {
                let t = b
                    .labels()
                    .cloned()
                    .ok_or_else(|| invalid("dataset has no labels"))?;
                Ok((b, t))
            })
            .collect()
    };
    let eval_batches = with_labels(train_idx)?;

    let mut master = init.clone();
    let mut w_opt: Vec<Adam<ndarray::Ix2>> = master
        .weights
        .iter()
        .map(|w| Adam::new(w.raw_dim()))
        .collect();
    let mut b_opt: Vec<Adam<ndarray::Ix1>> = master
        .biases
        .iter()
        .map(|b| Adam::new(b.raw_dim()))
        .collect();

    let initial_loss = split_loss(&fake_quantized(&master)?.0, &eval_batches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = train_idx.to_vec();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut t = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (batch, targets) in with_labels(&order)? {
            t += 1;
            let (deq, q) = fake_quantized(&master)?;
            let (_, grads) = backward(&deq, &batch, Target::Labels(&targets), LossKind::Bce)?;
            for (i, g) in grads.weights.iter().enumerate() {
                let mut g = ste_backward(
                    g,
                    &master.weights[i],
                    q[i].qmin(),
                    q[i].qmax(),
                    q[i].scale(),
                )?;
                if cfg.l1 != 0.0 {
                    g.zip_mut_with(&master.weights[i], |gi, &w| {
                        *gi += cfg.l1 * w.signum() * (w != 0.0) as u8 as f64
                    });
                }
                w_opt[i].step(&mut master.weights[i], &g, cfg, t);
            }
            for (i, g) in grads.biases.iter().enumerate() {
                let g: &Array1<f64> = g;
                b_opt[i].step(&mut master.biases[i], g, cfg, t);
            }
        }
        epoch_losses.push(split_loss(&fake_quantized(&master)?.0, &eval_batches)?);
    }
    let model = GinModel::quantize(&master, seed)?;
    Ok(TrainOutcome {
        model,
        master,
        initial_loss,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::data::{synth_dataset, TaskSpec};
    use crate::gnn::model::Architecture;

    #[test]
    fn zero_lr_keeps_weights() {
        let spec = TaskSpec::default();
        let data = synth_dataset(3, 40, &spec).unwrap();
        let arch = Architecture::new(spec.feature_dim, 4, 2, 1).unwrap();
        let init = RealModel::init(arch, &mut ChaCha8Rng::seed_from_u64(1));
        let cfg = TrainConfig {
            epochs: 2,
            lr: 0.0,
            ..TrainConfig::default()
        };
        let idx: Vec<usize> = (0..40).collect();
        let out = train_ste(&init, &data, &idx, &cfg, 9).unwrap();
        assert_eq!(out.master, init);
        assert_eq!(out.model, GinModel::quantize(&init, 9).unwrap());
    }

    #[test]
    fn empty_split_rejected() {
        let spec = TaskSpec::default();
        let data = synth_dataset(3, 10, &spec).unwrap();
        let arch = Architecture::new(spec.feature_dim, 4, 1, 1).unwrap();
        let init = RealModel::init(arch, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(train_ste(&init, &data, &[], &TrainConfig::default(), 0).is_err());
    }
}
