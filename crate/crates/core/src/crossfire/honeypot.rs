//! Sparsity induction, gradient-driven honeypot selection and the
//! function-preserving rescaling that turns selected neurons into honeypots.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gnn::compute::{backward, forward, Gradients, LossKind, Target};
use crate::gnn::graph::GraphBatch;
use crate::gnn::model::{Architecture, GinModel, RealModel};

/// A weight cell: `(tensor, row, col)`.
pub type Cell = (usize, usize, usize);

/// Zeroes every entry with `|w| < tau`, `tau` being the nearest-rank
/// `p`-quantile of `|W|`.
pub fn induce_sparsity(w: &Array2<f64>, p: f64) -> Result<Array2<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(invalid(format!("prune ratio {p} outside [0, 1)")));
    }
    if w.is_empty() {
        return Ok(w.clone());
    }
    let mut mags: Vec<f64> = w.iter().map(|x| x.abs()).collect();
    mags.sort_by(f64::total_cmp);
    // the small slack keeps exact products such as 0.75 * 4 from rounding up
    let rank = ((p * mags.len() as f64 - 1e-9).ceil() as usize).max(1);
    let tau = mags[rank - 1];
    Ok(w.mapv(|x| if x.abs() < tau { 0.0 } else { x }))
}

/// Thresholded clean-model predictions: logit > 0 means class 1.
pub fn pseudo_label(model: &RealModel, batches: &[GraphBatch]) -> Result<Vec<Array2<f64>>> {
    if batches.is_empty() {
        return Err(invalid("pseudo-labeling needs at least one batch"));
    }
    batches
        .iter()
        .map(|b| Ok(forward(model, b)?.mapv(|z| if z > 0.0 { 1.0 } else { 0.0 })))
        .collect()
}

/// Sum over batches of the BCE weight gradients against `targets`.
pub fn accumulate_gradients(
    model: &RealModel,
    batches: &[GraphBatch],
    targets: &[Array2<f64>],
) -> Result<Vec<Array2<f64>>> {
    if batches.len() != targets.len() {
        return Err(invalid("one target matrix per batch is required"));
    }
    let mut total = Gradients::zeros_like(model);
    for (b, t) in batches.iter().zip(targets) {
        let (_, g) = backward(model, b, Target::Labels(t), LossKind::Bce)?;
        total.add_assign(&g);
    }
    Ok(total.weights)
}

/// Per-neuron score: the sum of `|G|` over the neuron's incoming weights.
pub fn neuron_scores(g: &Array2<f64>) -> Vec<f64> {
    g.rows()
        .into_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum())
        .collect()
}

/// `max(1, round(n p))`.
pub fn honeypot_count(n: usize, p: f64) -> usize {
    ((n as f64 * p).round() as usize).clamp(1, n.max(1))
}

/// Indices of the `k` highest scores, ascending; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

pub fn select_honeypots(g: &Array2<f64>, p: f64) -> Result<Vec<usize>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(invalid(format!("honeypot ratio {p} outside (0, 1]")));
    }
    let scores = neuron_scores(g);
    Ok(top_k(&scores, honeypot_count(scores.len(), p)))
}

/// `gamma * lambda^l`.
pub fn layer_gamma(gamma: f64, lambda: f64, l: usize) -> f64 {
    gamma * lambda.powi(l as i32)
}

/// Affine map of `s` onto `[1, gamma_l]`; every value becomes `gamma_l`
/// when `s` is constant.
pub fn saliency(s: &[f64], gamma_l: f64) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Err(invalid("saliency needs at least one honeypot"));
    }
    let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(vec![gamma_l; s.len()]);
    }
    Ok(s.iter()
        .map(|&v| 1.0 + (v - lo) * (gamma_l - 1.0) / (hi - lo))
        .collect())
}

/// Every cell that belongs to neuron `h` of `tensor`: its incoming row and
/// the column it feeds in each consumer tensor.
pub fn neuron_cells(arch: &Architecture, tensor: usize, h: usize) -> Vec<Cell> {
    let (_, cols) = arch.tensor_shape(tensor);
    let mut cells: Vec<Cell> = (0..cols).map(|c| (tensor, h, c)).collect();
    for (consumer, off) in arch.consumers(tensor) {
        let rows = arch.tensor_shape(consumer).0;
        cells.extend((0..rows).map(|r| (consumer, r, off + h)));
    }
    cells
}

/// Divides the weights fed by neuron `h` of `tensor` by `factor` and
/// multiplies the matching input gains, so outputs are unchanged.
pub fn rescale_neuron(model: &mut RealModel, tensor: usize, h: usize, factor: f64) -> Result<()> {
    if h >= model.arch.tensor_shape(tensor).0 {
        return Err(invalid(format!(
            "neuron {h} out of range for tensor {tensor}"
        )));
    }
    if !(factor.is_finite() && factor > 0.0) {
        return Err(invalid("rescale factor must be positive"));
    }
    for (consumer, off) in model.arch.consumers(tensor) {
        model.weights[consumer]
            .column_mut(off + h)
            .mapv_inplace(|w| w / factor);
        model.gains[consumer][off + h] *= factor;
    }
    Ok(())
}

/// Honeypots of one weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHoneypots {
    pub tensor: usize,
    pub indices: Vec<usize>,
    /// Rescale factor of each honeypot, aligned with `indices`.
    pub saliency: Vec<f64>,
    pub gamma_l: f64,
}

/// Honeypot placement plus the sealed post-encoding values of every cell
/// a honeypot owns.
#[derive(Debug, Clone, PartialEq)]
pub struct HoneypotRegistry {
    pub layers: Vec<LayerHoneypots>,
    sealed: BTreeMap<Cell, i8>,
}

impl HoneypotRegistry {
    /// Seals the current values of all owned cells of `model`.
    pub fn seal(model: &GinModel, layers: Vec<LayerHoneypots>) -> Result<Self> {
        let mut sealed = BTreeMap::new();
        for lh in &layers {
            if lh.indices.len() != lh.saliency.len() {
                return Err(invalid("saliency must align with honeypot indices"));
            }
            for &h in &lh.indices {
                if h >= model.arch.tensor_shape(lh.tensor).0 {
                    return Err(invalid(format!(
                        "honeypot {h} out of range for tensor {}",
                        lh.tensor
                    )));
                }
                for (t, r, c) in neuron_cells(&model.arch, lh.tensor, h) {
                    sealed.insert((t, r, c), model.weights[t].get(r, c));
                }
            }
        }
        Ok(Self { layers, sealed })
    }

    pub(crate) fn from_parts(layers: Vec<LayerHoneypots>, sealed: BTreeMap<Cell, i8>) -> Self {
        Self { layers, sealed }
    }

    pub fn sealed_value(&self, cell: Cell) -> Option<i8> {
        self.sealed.get(&cell).copied()
    }

    pub fn sealed_entries(&self) -> impl Iterator<Item = (Cell, i8)> + '_ {
        self.sealed.iter().map(|(&k, &v)| (k, v))
    }

    pub fn n_sealed(&self) -> usize {
        self.sealed.len()
    }

    pub fn n_honeypots(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }
}

/// Rescales every honeypot of `layers` by its saliency.
pub fn encode_honeypots(model: &RealModel, layers: &[LayerHoneypots]) -> Result<RealModel> {
    let mut out = model.clone();
    for lh in layers {
        if lh.tensor >= model.arch.n_tensors() {
            return Err(invalid(format!("tensor {} out of range", lh.tensor)));
        }
        for (&h, &s) in lh.indices.iter().zip(&lh.saliency) {
            rescale_neuron(&mut out, lh.tensor, h, s)?;
        }
    }
    Ok(out)
}

/// Per-neuron gradient sums restricted to `indices`.
pub fn honeypot_strength(g: &Array2<f64>, indices: &[usize]) -> Vec<f64> {
    let scores = neuron_scores(g);
    indices.iter().map(|&h| scores[h]).collect()
}
