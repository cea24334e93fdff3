//! Progressive bit search (PBS) and the two attacks built on it.
//!
//! Each round ranks weight cells by the magnitude of the objective's
//! gradient with respect to the stored integers, proposes one bit per cell,
//! evaluates every proposal by applying it, measuring the objective and
//! reverting, then commits the best proposal. PBFA maximizes the training
//! loss; IBFA minimizes the divergence between the outputs of two inputs
//! and never reads labels.

use std::collections::HashSet;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gnn::compute::{backward, loss, LossKind, Target};
use crate::gnn::graph::GraphBatch;
use crate::gnn::model::{GinModel, RealModel};
use crate::quant::{flipped, BitFlipEvent};

/// Which way the attacker pushes the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

/// How many cells each round proposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidatePolicy {
    /// Top `k` cells of every weight tensor, one bit each.
    PerLayer(usize),
    /// Top `k` cells over the whole model, one bit each.
    Global(usize),
    /// Every bit of every cell.
    Exhaustive,
}

impl Default for CandidatePolicy {
    fn default() -> Self {
        CandidatePolicy::PerLayer(10)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackBudget {
    pub max_flips: usize,
    pub policy: CandidatePolicy,
}

impl AttackBudget {
    pub fn new(max_flips: usize, policy: CandidatePolicy) -> Result<Self> {
        match policy {
            CandidatePolicy::PerLayer(0) | CandidatePolicy::Global(0) => {
                Err(invalid("candidates_k must be at least 1"))
            }
            _ => Ok(Self { max_flips, policy }),
        }
    }
}

/// A proposed flip and the gradient magnitude that ranked it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub bit: u8,
    pub score: f64,
}

impl Candidate {
    fn key(&self) -> (usize, usize, usize, u8) {
        (self.layer, self.row, self.col, self.bit)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub flips: Vec<BitFlipEvent>,
    /// Objective value after each committed flip.
    pub objective_curve: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    layer: usize,
    row: usize,
    col: usize,
    bit: u8,
    before: i8,
    after: i8,
    objective: f64,
}

impl AttackTrace {
    pub fn len(&self) -> usize {
        self.flips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flips.is_empty()
    }

    /// One JSON object per flip, newline-terminated.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (f, &objective) in self.flips.iter().zip(&self.objective_curve) {
            let line = TraceLine {
                layer: f.layer,
                row: f.row,
                col: f.col,
                bit: f.bit,
                before: f.before,
                after: f.after,
                objective,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut trace = AttackTrace::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let t: TraceLine = serde_json::from_str(line)?;
            if t.bit > 7 || t.after != flipped(t.before, t.bit) {
                return Err(Error::Format(format!("inconsistent flip record: {line}")));
            }
            trace.flips.push(BitFlipEvent {
                layer: t.layer,
                row: t.row,
                col: t.col,
                bit: t.bit,
                before: t.before,
                after: t.after,
            });
            trace.objective_curve.push(t.objective);
        }
        Ok(trace)
    }
}

/// What a round optimizes.
#[derive(Clone, Copy)]
enum Goal<'a> {
    Loss {
        batch: &'a GraphBatch,
        targets: &'a Array2<f64>,
    },
    Divergence {
        a: &'a GraphBatch,
        b: &'a GraphBatch,
        kind: LossKind,
    },
}

impl Goal<'_> {
    fn eval(&self, m: &RealModel) -> Result<f64> {
        match *self {
            Goal::Loss { batch, targets } => loss(m, batch, Target::Labels(targets), LossKind::Bce),
            Goal::Divergence { a, b, kind } => loss(m, a, Target::Batch(b), kind),
        }
    }

    fn gradients(&self, m: &RealModel) -> Result<Vec<Array2<f64>>> {
        let (_, g) = match *self {
            Goal::Loss { batch, targets } => {
                backward(m, batch, Target::Labels(targets), LossKind::Bce)?
            }
            Goal::Divergence { a, b, kind } => backward(m, a, Target::Batch(b), kind)?,
        };
        Ok(g.weights)
    }
}

/// Highest bit whose flip moves `value` in the direction of `signed_grad`;
/// the sign bit when the gradient carries no direction.
pub fn select_bit(value: i8, signed_grad: f64) -> u8 {
    if signed_grad == 0.0 || signed_grad.is_nan() {
        return 7;
    }
    (0..8u8)
        .rev()
        .find(|&b| {
            let delta = flipped(value, b) as i32 - value as i32;
            (delta as f64) * signed_grad > 0.0
        })
        .unwrap_or(7)
}

type Cell = (usize, usize, usize);

fn ranked_candidates(
    model: &GinModel,
    grads: &[Array2<f64>],
    direction: Direction,
    policy: CandidatePolicy,
    exclude: &HashSet<Cell>,
) -> Vec<Candidate> {
    let sign = match direction {
        Direction::Maximize => 1.0,
        Direction::Minimize => -1.0,
    };
    let by_score = |a: &Candidate, b: &Candidate| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.key().cmp(&b.key()))
    };
    let mut per_layer = Vec::with_capacity(model.n_tensors());
    for (l, (t, g)) in model.weights.iter().zip(grads).enumerate() {
        let mut cells = Vec::with_capacity(t.len());
        for ((r, c), &gr) in g.indexed_iter() {
            if exclude.contains(&(l, r, c)) {
                continue;
            }
            // d loss / d w_q = d loss / d w_hat * scale
            let gq = gr * t.scale();
            let bits: Vec<u8> = match policy {
                CandidatePolicy::Exhaustive => (0..8).collect(),
                _ => vec![select_bit(t.get(r, c), sign * gq)],
            };
            for bit in bits {
                cells.push(Candidate {
                    layer: l,
                    row: r,
                    col: c,
                    bit,
                    score: gq.abs(),
                });
            }
        }
        if let CandidatePolicy::PerLayer(k) = policy {
            cells.sort_by(by_score);
            cells.truncate(k);
        }
        per_layer.push(cells);
    }
    let mut all: Vec<Candidate> = per_layer.into_iter().flatten().collect();
    all.sort_by(by_score);
    if let CandidatePolicy::Global(k) = policy {
        all.truncate(k);
    }
    all
}

/// One forward-backward pass; proposals sorted by gradient magnitude, descending.
pub fn pbs_candidates(
    model: &GinModel,
    batch: &GraphBatch,
    target: Target<'_>,
    kind: LossKind,
    direction: Direction,
    policy: CandidatePolicy,
) -> Result<Vec<Candidate>> {
    let goal = match (kind, target) {
        (LossKind::Bce, Target::Labels(targets)) => Goal::Loss { batch, targets },
        (LossKind::L1 | LossKind::Kl, Target::Batch(b)) => Goal::Divergence { a: batch, b, kind },
        _ => {
            return Err(invalid(format!(
                "loss {kind:?} does not accept this target"
            )))
        }
    };
    let grads = goal.gradients(&model.dequantize())?;
    Ok(ranked_candidates(
        model,
        &grads,
        direction,
        policy,
        &HashSet::new(),
    ))
}

/// Applies, measures and reverts every candidate on a per-worker copy of
/// the dequantized weights. Returns the objective after each flip.
fn evaluate(
    model: &GinModel,
    real: &RealModel,
    goal: Goal<'_>,
    cands: &[Candidate],
) -> Result<Vec<f64>> {
    cands
        .par_iter()
        .map_init(
            || real.clone(),
            |m, c| {
                let t = &model.weights[c.layer];
                let original = m.weights[c.layer][[c.row, c.col]];
                m.weights[c.layer][[c.row, c.col]] =
                    flipped(t.get(c.row, c.col), c.bit) as f64 * t.scale();
                let value = goal.eval(m);
                m.weights[c.layer][[c.row, c.col]] = original;
                value
            },
        )
        .collect()
}

fn choose(cands: &[Candidate], values: &[f64], direction: Direction) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) => {
                let better = match direction {
                    Direction::Maximize => v > values[j],
                    Direction::Minimize => v < values[j],
                };
                let tie = v == values[j] && cands[i].key() < cands[j].key();
                if better || tie {
                    Some(i)
                } else {
                    Some(j)
                }
            }
        };
    }
    best
}

fn progressive_search(
    model: &mut GinModel,
    goal: Goal<'_>,
    direction: Direction,
    budget: AttackBudget,
) -> Result<AttackTrace> {
    let mut trace = AttackTrace::default();
    let mut real = model.dequantize();
    let mut committed: HashSet<Cell> = HashSet::new();
    for _ in 0..budget.max_flips {
        let grads = goal.gradients(&real)?;
        let cands = ranked_candidates(model, &grads, direction, budget.policy, &committed);
        if cands.is_empty() {
            break;
        }
        let values = evaluate(model, &real, goal, &cands)?;
        let Some(i) = choose(&cands, &values, direction) else {
            break;
        };
        let c = cands[i];
        let event = model.flip_bit(c.layer, c.row, c.col, c.bit)?;
        real.weights[c.layer][[c.row, c.col]] = event.after as f64 * model.weights[c.layer].scale();
        committed.insert((c.layer, c.row, c.col));
        trace.flips.push(event);
        trace.objective_curve.push(values[i]);
    }
    Ok(trace)
}

/// Greedy loss maximization on a labeled batch.
pub fn pbfa(
    model: &mut GinModel,
    batch: &GraphBatch,
    targets: &Array2<f64>,
    budget: AttackBudget,
) -> Result<AttackTrace> {
    progressive_search(
        model,
        Goal::Loss { batch, targets },
        Direction::Maximize,
        budget,
    )
}

/// The pool pair whose clean outputs diverge most; ties go to the
/// lexicographically smallest `(i, j)` with `i < j`.
pub fn ibfa_select_pair(
    model: &GinModel,
    pool: &[GraphBatch],
    kind: LossKind,
) -> Result<(usize, usize)> {
    if pool.len() < 2 {
        return Err(invalid("pair selection needs at least two batches"));
    }
    if kind == LossKind::Bce {
        return Err(invalid("pair selection needs a divergence"));
    }
    let real = model.dequantize();
    let pairs: Vec<(usize, usize)> = (0..pool.len())
        .flat_map(|i| (i + 1..pool.len()).map(move |j| (i, j)))
        .collect();
    let scores = pairs
        .par_iter()
        .map(|&(i, j)| loss(&real, &pool[i], Target::Batch(&pool[j]), kind))
        .collect::<Result<Vec<f64>>>()?;
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    Ok(pairs[best])
}

/// Greedy divergence minimization between the outputs of `a` and `b`.
pub fn ibfa(
    model: &mut GinModel,
    a: &GraphBatch,
    b: &GraphBatch,
    budget: AttackBudget,
    kind: LossKind,
) -> Result<AttackTrace> {
    if kind == LossKind::Bce {
        return Err(invalid("IBFA needs the l1 or kl divergence"));
    }
    if a.n_graphs() != b.n_graphs() {
        return Err(invalid("IBFA batches must hold the same number of graphs"));
    }
    progressive_search(
        model,
        Goal::Divergence { a, b, kind },
        Direction::Minimize,
        budget,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_selection() {
        // ascend from 0: setting bit 6 is the largest increase
        assert_eq!(select_bit(0, 1.0), 6);
        // descend from 0: only the sign bit decreases
        assert_eq!(select_bit(0, -1.0), 7);
        assert_eq!(select_bit(5, 0.0), 7);
        // setting the sign bit is the largest decrease from any non-negative value
        assert_eq!(select_bit(6, -1.0), 7);
        assert_eq!(select_bit(-1, 1.0), 7);
        assert_eq!(select_bit(-1, -1.0), 6);
    }

    #[test]
    fn jsonl_round_trip() {
        let trace = AttackTrace {
            flips: vec![BitFlipEvent {
                layer: 1,
                row: 2,
                col: 3,
                bit: 7,
                before: 6,
                after: -122,
            }],
            objective_curve: vec![0.5],
        };
        let text = trace.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(AttackTrace::from_jsonl(&text).unwrap(), trace);
        assert!(AttackTrace::from_jsonl(
            r#"{"layer":0,"row":0,"col":0,"bit":0,"before":0,"after":5,"objective":0}"#
        )
        .is_err());
    }

    #[test]
    fn zero_k_rejected() {
        assert!(AttackBudget::new(3, CandidatePolicy::PerLayer(0)).is_err());
        assert!(AttackBudget::new(0, CandidatePolicy::Exhaustive).is_ok());
    }
}
