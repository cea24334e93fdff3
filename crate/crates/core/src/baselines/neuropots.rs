//! One-shot honeypot encoding with a uniform factor and checksum refresh.
//!
//! Honeypot neurons are rescaled exactly like Crossfire's, but every
//! honeypot uses the same factor and nothing outside the honeypots is
//! monitored: a flip in an ordinary weight is invisible to this defense.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::crossfire::honeypot::{neuron_cells, rescale_neuron, top_k, Cell};
use crate::digest::blake2b;
use crate::error::{invalid, Result};
use crate::gnn::compute::neuron_activity;
use crate::gnn::graph::GraphBatch;
use crate::gnn::model::GinModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoneypotSelection {
    Random,
    /// Most active neurons on the calibration batches.
    ActivationRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NeuropotsConfig {
    pub p: f64,
    pub gamma: f64,
    pub selection: HoneypotSelection,
}

impl Default for NeuropotsConfig {
    fn default() -> Self {
        Self {
            p: 0.1,
            gamma: 1.66,
            selection: HoneypotSelection::Random,
        }
    }
}

/// Sealed cells of one honeypot neuron and their checksum.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeuropotSeal {
    pub tensor: usize,
    pub neuron: usize,
    pub cells: Vec<(Cell, i8)>,
    pub checksum: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuropotsState {
    pub gamma: f64,
    pub seals: Vec<NeuropotSeal>,
}

impl NeuropotsState {
    pub fn n_honeypots(&self) -> usize {
        self.seals.len()
    }
}

fn checksum(model: &GinModel, cells: &[(Cell, i8)]) -> u8 {
    let bytes: Vec<u8> = cells
        .iter()
        .map(|&((t, r, c), _)| model.weights[t].get(r, c) as u8)
        .collect();
    blake2b(1, &bytes)[0]
}

/// `round(n p)` honeypots per weight tensor.
fn count(n: usize, p: f64) -> usize {
    ((n as f64 * p).round() as usize).min(n)
}

pub fn neuropots_protect(
    model: &GinModel,
    calibration: &[GraphBatch],
    cfg: &NeuropotsConfig,
    seed: u64,
) -> Result<(GinModel, NeuropotsState)> {
    if !(cfg.p > 0.0 && cfg.p <= 1.0) {
        return Err(invalid("honeypot ratio must lie in (0, 1]"));
    }
    if !(cfg.gamma >= 1.0 && cfg.gamma.is_finite()) {
        return Err(invalid("gamma must be at least 1"));
    }
    let arch = model.arch;
    let mut real = model.dequantize();
    let activity = match cfg.selection {
        HoneypotSelection::Random => None,
        HoneypotSelection::ActivationRank => {
            if calibration.is_empty() {
                return Err(invalid("activation ranking needs calibration batches"));
            }
            let mut total = neuron_activity(&real, &calibration[0])?;
            for b in &calibration[1..] {
                for (acc, a) in total.iter_mut().zip(neuron_activity(&real, b)?) {
                    *acc += &a;
                }
            }
            Some(total)
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for t in 0..arch.n_tensors() {
        let n = arch.tensor_shape(t).0;
        let k = count(n, cfg.p);
        let mut idx = match &activity {
            None => {
                let mut all: Vec<usize> = (0..n).collect();
                all.shuffle(&mut rng);
                all.truncate(k);
                all
            }
            Some(act) => top_k(act[t].as_slice().expect("contiguous"), k),
        };
        idx.sort_unstable();
        for &h in &idx {
            rescale_neuron(&mut real, t, h, cfg.gamma)?;
        }
        chosen.extend(idx.into_iter().map(|h| (t, h)));
    }
    let deployed = model.requantize_like(&real)?;
    let seals = chosen
        .into_iter()
        .map(|(tensor, neuron)| {
            let cells: Vec<(Cell, i8)> = neuron_cells(&arch, tensor, neuron)
                .into_iter()
                .map(|(t, r, c)| ((t, r, c), deployed.weights[t].get(r, c)))
                .collect();
            let checksum = checksum(&deployed, &cells);
            NeuropotSeal {
                tensor,
                neuron,
                cells,
                checksum,
            }
        })
        .collect();
    Ok((
        deployed,
        NeuropotsState {
            gamma: cfg.gamma,
            seals,
        },
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuropotsReport {
    /// `(tensor, neuron)` of every honeypot whose checksum mismatched.
    pub flagged: Vec<(usize, usize)>,
    /// Cells owned by flagged honeypots.
    pub flagged_cells: BTreeSet<Cell>,
    pub refreshed_cells: usize,
}

impl NeuropotsReport {
    pub fn attack_detected(&self) -> bool {
        !self.flagged.is_empty()
    }
}

/// Checks every honeypot and rewrites the sealed values of flagged ones.
pub fn neuropots_detect_and_refresh(
    model: &mut GinModel,
    state: &NeuropotsState,
) -> NeuropotsReport {
    let mut report = NeuropotsReport::default();
    let flagged: Vec<&NeuropotSeal> = state
        .seals
        .iter()
        .filter(|s| checksum(model, &s.cells) != s.checksum)
        .collect();
    for seal in flagged {
        report.flagged.push((seal.tensor, seal.neuron));
        for &((t, r, c), v) in &seal.cells {
            report.flagged_cells.insert((t, r, c));
            if model.weights[t].get(r, c) != v {
                model.weights[t].set(r, c, v);
                report.refreshed_cells += 1;
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_rounds() {
        assert_eq!(count(16, 0.1), 2);
        assert_eq!(count(16, 0.01), 0);
        assert_eq!(count(3, 1.0), 3);
    }
}
