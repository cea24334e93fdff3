//! Forward and reverse-mode passes for the dense GIN.
//!
//! Block `k` computes
//!
//! ```text
//! agg  = (1 + eps) h + sum_{u in N(v)} h_u
//! z1   = W1 (agg * g1) + b1,   a1 = relu(z1)
//! h'   = W2 (a1 * g2) + b2
//! ```
//!
//! and the readout concatenates per-graph node sums of `h^0 .. h^L` before
//! the linear head. Gradients are taken with respect to the (dequantized)
//! weights the forward pass actually used.

use ndarray::{concatenate, s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::graph::GraphBatch;
use super::model::RealModel;
use crate::error::{invalid, Result};

/// Loss used by [`backward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Binary cross-entropy on sigmoid outputs against 0/1 targets.
    Bce,
    /// Mean absolute difference between the sigmoid outputs of two batches.
    L1,
    /// Mean Bernoulli KL divergence between the sigmoid outputs of two batches.
    Kl,
}

/// What the loss compares the batch against.
#[derive(Debug, Clone, Copy)]
pub enum Target<'a> {
    Labels(&'a Array2<f64>),
    Batch(&'a GraphBatch),
}

/// Per-tensor gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &RealModel) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Array2::zeros(w.dim()))
                .collect(),
            biases: model
                .biases
                .iter()
                .map(|b| Array1::zeros(b.len()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

struct BlockCache {
    /// `agg * g1`
    x1: Array2<f64>,
    z1: Array2<f64>,
    /// `relu(z1) * g2`
    x2: Array2<f64>,
}

pub(crate) struct ForwardCache {
    blocks: Vec<BlockCache>,
    /// `readout * g_head`
    head_in: Array2<f64>,
    pub logits: Array2<f64>,
}

fn linear(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(&w.t()) + b
}

fn check_input(model: &RealModel, batch: &GraphBatch) -> Result<()> {
    if batch.feature_dim() != model.arch.in_dim {
        return Err(invalid(format!(
            "batch feature dim {} does not match model input dim {}",
            batch.feature_dim(),
            model.arch.in_dim
        )));
    }
    Ok(())
}

/// One GIN block on node states `h` (weights `2k`, `2k+1` of `model`).
pub fn gin_layer_forward(
    model: &RealModel,
    block: usize,
    h: &Array2<f64>,
    batch: &GraphBatch,
) -> Result<Array2<f64>> {
    if block >= model.arch.depth {
        return Err(invalid(format!("block {block} out of range")));
    }
    let t1 = 2 * block;
    if h.ncols() != model.weights[t1].ncols() || h.nrows() != batch.n_nodes() {
        return Err(invalid(format!(
            "node state shape {:?} does not fit block {block}",
            h.dim()
        )));
    }
    Ok(block_forward(model, block, h, batch).1)
}

fn block_forward(
    model: &RealModel,
    block: usize,
    h: &Array2<f64>,
    batch: &GraphBatch,
) -> (BlockCache, Array2<f64>) {
    let (t1, t2) = (2 * block, 2 * block + 1);
    let agg = batch.aggregate(h, 1.0 + model.arch.eps);
    let x1 = agg * &model.gains[t1];
    let z1 = linear(&x1, &model.weights[t1], &model.biases[t1]);
    let x2 = z1.mapv(|v| v.max(0.0)) * &model.gains[t2];
    let out = linear(&x2, &model.weights[t2], &model.biases[t2]);
    (BlockCache { x1, z1, x2 }, out)
}

/// Per-graph node sums of each layer's states, concatenated along columns.
pub fn readout(states: &[Array2<f64>], batch: &GraphBatch) -> Array2<f64> {
    let pooled: Vec<Array2<f64>> = states.iter().map(|h| batch.sum_pool(h)).collect();
    let views: Vec<_> = pooled.iter().map(|p| p.view()).collect();
    concatenate(Axis(1), &views).expect("pooled states share the graph axis")
}

pub(crate) fn forward_cached(model: &RealModel, batch: &GraphBatch) -> Result<ForwardCache> {
    check_input(model, batch)?;
    let mut states = Vec::with_capacity(model.arch.depth + 1);
    states.push(batch.features().clone());
    let mut blocks = Vec::with_capacity(model.arch.depth);
    for k in 0..model.arch.depth {
        let (cache, next) = block_forward(model, k, &states[k], batch);
        blocks.push(cache);
        states.push(next);
    }
    let head = model.arch.head_index();
    let head_in = readout(&states, batch) * &model.gains[head];
    let logits = linear(&head_in, &model.weights[head], &model.biases[head]);
    Ok(ForwardCache {
        blocks,
        head_in,
        logits,
    })
}

/// Logits, shape `(n_graphs, tasks)`.
pub fn forward(model: &RealModel, batch: &GraphBatch) -> Result<Array2<f64>> {
    Ok(forward_cached(model, batch)?.logits)
}

/// Mean absolute output of every neuron of every weight tensor over `batch`.
/// For the first map of a block the output is taken after the ReLU.
pub fn neuron_activity(model: &RealModel, batch: &GraphBatch) -> Result<Vec<Array1<f64>>> {
    check_input(model, batch)?;
    let mean_abs = |x: &Array2<f64>| {
        x.mapv(f64::abs)
            .mean_axis(Axis(0))
            .expect("non-empty batch")
    };
    let mut out = Vec::with_capacity(model.arch.n_tensors());
    let mut h = batch.features().clone();
    for k in 0..model.arch.depth {
        let (cache, next) = block_forward(model, k, &h, batch);
        out.push(mean_abs(&cache.z1.mapv(|v| v.max(0.0))));
        out.push(mean_abs(&next));
        h = next;
    }
    out.push(mean_abs(&forward(model, batch)?));
    Ok(out)
}

pub(crate) fn backward_from(
    model: &RealModel,
    batch: &GraphBatch,
    cache: &ForwardCache,
    dlogits: &Array2<f64>,
) -> Gradients {
    let arch = &model.arch;
    let mut grads = Gradients::zeros_like(model);
    let head = arch.head_index();

    grads.weights[head] = dlogits.t().dot(&cache.head_in);
    grads.biases[head] = dlogits.sum_axis(Axis(0));
    let dreadout = dlogits.dot(&model.weights[head]) * &model.gains[head];

    let graph_of = batch.graph_of_node();
    let spread = |cols: std::ops::Range<usize>| -> Array2<f64> {
        let seg = dreadout.slice(s![.., cols]);
        let mut out = Array2::zeros((batch.n_nodes(), seg.ncols()));
        for (v, &g) in graph_of.iter().enumerate() {
            out.row_mut(v).assign(&seg.row(g));
        }
        out
    };

    // Gradient w.r.t. the output states of the last block.
    let last = arch.in_dim + (arch.depth - 1) * arch.hidden;
    let mut dh = spread(last..last + arch.hidden);
    for k in (0..arch.depth).rev() {
        let (t1, t2) = (2 * k, 2 * k + 1);
        let c = &cache.blocks[k];
        grads.weights[t2] = dh.t().dot(&c.x2);
        grads.biases[t2] = dh.sum_axis(Axis(0));
        let mut dz1 = dh.dot(&model.weights[t2]) * &model.gains[t2];
        ndarray::Zip::from(&mut dz1).and(&c.z1).for_each(|d, &z| {
            if z <= 0.0 {
                *d = 0.0;
            }
        });
        grads.weights[t1] = dz1.t().dot(&c.x1);
        grads.biases[t1] = dz1.sum_axis(Axis(0));
        if k > 0 {
            let dagg = dz1.dot(&model.weights[t1]) * &model.gains[t1];
            // The aggregation is symmetric, so its transpose is itself.
            let mut prev = batch.aggregate(&dagg, 1.0 + arch.eps);
            let off = arch.in_dim + (k - 1) * arch.hidden;
            prev += &spread(off..off + arch.hidden);
            dh = prev;
        }
    }
    grads
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean binary cross-entropy of logits against 0/1 targets and its gradient.
pub(crate) fn bce(logits: &Array2<f64>, targets: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = logits.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    ndarray::Zip::from(&mut grad)
        .and(logits)
        .and(targets)
        .for_each(|g, &z, &t| {
            loss += softplus(z) - t * z;
            *g = (sigmoid(z) - t) / n;
        });
    (loss / n, grad)
}

/// Divergence between the sigmoid outputs of two logit matrices and its
/// gradients with respect to both.
pub(crate) fn divergence(
    kind: LossKind,
    za: &Array2<f64>,
    zb: &Array2<f64>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let n = za.len().max(1) as f64;
    let mut loss = 0.0;
    let mut ga = Array2::zeros(za.dim());
    let mut gb = Array2::zeros(zb.dim());
    ndarray::Zip::from(&mut ga)
        .and(&mut gb)
        .and(za)
        .and(zb)
        .for_each(|da, db, &a, &b| {
            let (p, q) = (sigmoid(a), sigmoid(b));
            match kind {
                LossKind::L1 => {
                    let d = p - q;
                    loss += d.abs();
                    let sgn = if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *da = sgn * p * (1.0 - p) / n;
                    *db = -sgn * q * (1.0 - q) / n;
                }
                LossKind::Kl => {
                    // log p = -softplus(-a), log(1-p) = -softplus(a)
                    let kl =
                        p * (softplus(-b) - softplus(-a)) + (1.0 - p) * (softplus(b) - softplus(a));
                    loss += kl.max(0.0);
                    *da = (a - b) * p * (1.0 - p) / n;
                    *db = (q - p) / n;
                }
                LossKind::Bce => unreachable!("bce is not a divergence"),
            }
        });
    (loss / n, ga, gb)
}

/// Loss value only, without gradients.
pub fn loss(
    model: &RealModel,
    batch: &GraphBatch,
    target: Target<'_>,
    kind: LossKind,
) -> Result<f64> {
    match (kind, target) {
        (LossKind::Bce, Target::Labels(t)) => {
            let z = forward(model, batch)?;
            check_targets(&z, t)?;
            Ok(bce(&z, t).0)
        }
        (LossKind::L1 | LossKind::Kl, Target::Batch(other)) => {
            let za = forward(model, batch)?;
            let zb = forward(model, other)?;
            if za.dim() != zb.dim() {
                return Err(invalid(
                    "divergence batches must have the same number of graphs",
                ));
            }
            Ok(divergence(kind, &za, &zb).0)
        }
        _ => Err(invalid(format!(
            "loss {kind:?} does not accept this target"
        ))),
    }
}

fn check_targets(z: &Array2<f64>, t: &Array2<f64>) -> Result<()> {
    if z.dim() != t.dim() {
        return Err(invalid(format!(
            "targets {:?} do not match logits {:?}",
            t.dim(),
            z.dim()
        )));
    }
    if t.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(invalid("bce targets must be 0 or 1"));
    }
    Ok(())
}

/// Loss and gradients with respect to every weight tensor and bias.
///
/// BCE takes label targets; L1 and KL take a second batch whose outputs,
/// computed with the same weights, are the comparison point. Gradients flow
/// through both batches.
pub fn backward(
    model: &RealModel,
    batch: &GraphBatch,
    target: Target<'_>,
    kind: LossKind,
) -> Result<(f64, Gradients)> {
    match (kind, target) {
        (LossKind::Bce, Target::Labels(t)) => {
            let cache = forward_cached(model, batch)?;
            check_targets(&cache.logits, t)?;
            let (l, dz) = bce(&cache.logits, t);
            Ok((l, backward_from(model, batch, &cache, &dz)))
        }
        (LossKind::L1 | LossKind::Kl, Target::Batch(other)) => {
            let ca = forward_cached(model, batch)?;
            let cb = forward_cached(model, other)?;
            if ca.logits.dim() != cb.logits.dim() {
                return Err(invalid(
                    "divergence batches must have the same number of graphs",
                ));
            }
            let (l, da, db) = divergence(kind, &ca.logits, &cb.logits);
            let mut g = backward_from(model, batch, &ca, &da);
            g.add_assign(&backward_from(model, other, &cb, &db));
            Ok((l, g))
        }
        _ => Err(invalid(format!(
            "loss {kind:?} does not accept this target"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::graph::Graph;
    use crate::gnn::model::Architecture;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// 1-wide identity MLP: W1 = W2 = [[1]], zero biases.
    fn identity_model(eps: f64) -> RealModel {
        let mut arch = Architecture::new(1, 1, 1, 1).unwrap();
        arch.eps = eps;
        let mut m = RealModel::zeros(arch);
        m.weights[0] = array![[1.0]];
        m.weights[1] = array![[1.0]];
        m
    }

    fn batch_with_states(g: &Graph, states: Array2<f64>) -> GraphBatch {
        GraphBatch::new(states, g.adjacency(), vec![0; g.n_nodes], 1, None).unwrap()
    }

    #[test]
    fn layer_isolated_node_unchanged() {
        let g = Graph {
            n_nodes: 1,
            edges: vec![],
            labels: vec![],
        };
        let b = batch_with_states(&g, array![[0.7]]);
        let out = gin_layer_forward(&identity_model(0.0), 0, b.features(), &b).unwrap();
        assert_eq!(out, array![[0.7]]);
    }

    #[test]
    fn layer_two_connected_nodes() {
        let g = Graph {
            n_nodes: 2,
            edges: vec![(0, 1)],
            labels: vec![],
        };
        let b = batch_with_states(&g, array![[1.0], [2.0]]);
        let out = gin_layer_forward(&identity_model(0.0), 0, b.features(), &b).unwrap();
        assert_eq!(out, array![[3.0], [3.0]]);
    }

    #[test]
    fn layer_eps_one_doubles() {
        let g = Graph {
            n_nodes: 1,
            edges: vec![],
            labels: vec![],
        };
        let b = batch_with_states(&g, array![[1.25]]);
        let out = gin_layer_forward(&identity_model(1.0), 0, b.features(), &b).unwrap();
        assert_eq!(out, array![[2.5]]);
    }

    #[test]
    fn layer_dim_mismatch() {
        let g = Graph {
            n_nodes: 1,
            edges: vec![],
            labels: vec![],
        };
        let b = batch_with_states(&g, array![[1.0, 2.0]]);
        assert!(gin_layer_forward(&identity_model(0.0), 0, b.features(), &b).is_err());
        assert!(gin_layer_forward(&identity_model(0.0), 1, b.features(), &b).is_err());
    }

    #[test]
    fn readout_examples() {
        let g = Graph {
            n_nodes: 1,
            edges: vec![],
            labels: vec![],
        };
        let b = batch_with_states(&g, array![[4.0]]);
        assert_eq!(readout(&[array![[4.0]]], &b), array![[4.0]]);

        let g = Graph {
            n_nodes: 2,
            edges: vec![(0, 1)],
            labels: vec![],
        };
        let b = batch_with_states(&g, array![[1.0], [2.0]]);
        assert_eq!(readout(&[array![[1.0], [2.0]]], &b), array![[3.0]]);
        let r = readout(&[array![[1.0], [2.0]], array![[1.0, 0.0], [0.0, 1.0]]], &b);
        assert_eq!(r, array![[3.0, 1.0, 1.0]]);
    }

    #[test]
    fn zero_model_zero_logits() {
        let arch = Architecture::new(3, 4, 2, 2).unwrap();
        let m = RealModel::zeros(arch);
        let g = Graph {
            n_nodes: 3,
            edges: vec![(0, 1), (1, 2)],
            labels: vec![0.0, 1.0],
        };
        let b = GraphBatch::from_graphs([&g, &g], 3).unwrap();
        let z = forward(&m, &b).unwrap();
        assert_eq!(z.dim(), (2, 2));
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_traced_one_layer_logit() {
        // in=1, hidden=1, depth=1. Path 0-1 with features [1],[2].
        // agg = [3],[3]; z1 = 0.5*3 + 0.1 = 1.6; h1 = 2*1.6 - 1 = 2.2 each.
        // readout = [3, 4.4]; logit = 0.25*3 - 0.5*4.4 + 0.3 = -1.15.
        let arch = Architecture::new(1, 1, 1, 1).unwrap();
        let mut m = RealModel::zeros(arch);
        m.weights[0] = array![[0.5]];
        m.biases[0] = array![0.1];
        m.weights[1] = array![[2.0]];
        m.biases[1] = array![-1.0];
        m.weights[2] = array![[0.25, -0.5]];
        m.biases[2] = array![0.3];
        let g = Graph {
            n_nodes: 2,
            edges: vec![(0, 1)],
            labels: vec![],
        };
        let b = batch_with_states(&g, array![[1.0], [2.0]]);
        let z = forward(&m, &b).unwrap();
        assert!((z[[0, 0]] - (-1.15)).abs() < 1e-12);
        let p = 1.0 / (1.0 + 1.15f64.exp());
        assert!((sigmoid(z[[0, 0]]) - p).abs() < 1e-12);
    }

    #[test]
    fn invalid_loss_target_combos() {
        let arch = Architecture::new(2, 2, 1, 1).unwrap();
        let m = RealModel::zeros(arch);
        let g = Graph {
            n_nodes: 2,
            edges: vec![(0, 1)],
            labels: vec![1.0],
        };
        let b = GraphBatch::from_graphs([&g], 2).unwrap();
        let t = array![[1.0]];
        assert!(backward(&m, &b, Target::Batch(&b), LossKind::Bce).is_err());
        assert!(backward(&m, &b, Target::Labels(&t), LossKind::Kl).is_err());
        assert!(backward(&m, &b, Target::Labels(&array![[0.5]]), LossKind::Bce).is_err());
        assert!(backward(&m, &b, Target::Labels(&array![[1.0, 0.0]]), LossKind::Bce).is_err());
    }

    #[test]
    fn kl_identical_batches_zero_gradient() {
        let arch = Architecture::new(4, 3, 2, 2).unwrap();
        let m = RealModel::init(arch, &mut ChaCha8Rng::seed_from_u64(3));
        let g = Graph {
            n_nodes: 4,
            edges: vec![(0, 1), (1, 2), (2, 3)],
            labels: vec![0.0, 1.0],
        };
        let b = GraphBatch::from_graphs([&g], 4).unwrap();
        let (l, grads) = backward(&m, &b, Target::Batch(&b), LossKind::Kl).unwrap();
        assert!(l.abs() < 1e-15);
        for w in &grads.weights {
            assert!(w.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn saturated_bce_has_tiny_gradient() {
        let arch = Architecture::new(2, 2, 1, 1).unwrap();
        let mut m = RealModel::zeros(arch);
        m.biases[2] = array![40.0];
        let g = Graph {
            n_nodes: 2,
            edges: vec![(0, 1)],
            labels: vec![1.0],
        };
        let b = GraphBatch::from_graphs([&g], 2).unwrap();
        let (_, grads) = backward(&m, &b, Target::Labels(&array![[1.0]]), LossKind::Bce).unwrap();
        let norm: f64 = grads
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6, "norm {norm}");
    }
}
