//! Honeypots, hash ledger, out-of-range repair and verified reconstruction.
//!
//! [`protect`] runs the fixed pipeline: dequantize, prune, pseudo-label a
//! calibration set, accumulate gradients, pick honeypots, rescale them by
//! their saliency, re-quantize with the original scales and seal. The
//! sealed state lives in a [`CrossfireVault`], which only hands out shared
//! references; nothing in the attack code path receives one.

pub mod honeypot;
pub mod ledger;
pub mod reconstruct;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::graph::GraphBatch;
use crate::gnn::model::GinModel;

pub use honeypot::{
    accumulate_gradients, encode_honeypots, induce_sparsity, layer_gamma, neuron_cells,
    pseudo_label, rescale_neuron, saliency, select_honeypots, top_k, Cell, HoneypotRegistry,
    LayerHoneypots,
};
pub use ledger::{
    build_ledger, hash_overhead, localize, monitor, verify, DigestSizing, HashLedger, LayerLedger,
    Overhead, SuspectSet,
};
pub use reconstruct::{reconstruct, CellAction, DefenseReport, ReconstructOptions, RepairAction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CrossfireConfig {
    pub prune_ratio: f64,
    pub p_honeypot: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub digest: DigestSizing,
    pub reconstruct: ReconstructOptions,
}

impl Default for CrossfireConfig {
    fn default() -> Self {
        Self {
            prune_ratio: 0.75,
            p_honeypot: 0.05,
            gamma: 1.33,
            lambda: 1.1,
            digest: DigestSizing::default(),
            reconstruct: ReconstructOptions::default(),
        }
    }
}

impl CrossfireConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Config {
                field: field.into(),
                message: message.into(),
            })
        };
        if !(0.0..1.0).contains(&self.prune_ratio) {
            return bad("prune_ratio", "must lie in [0, 1)");
        }
        if !(self.p_honeypot > 0.0 && self.p_honeypot <= 1.0) {
            return bad("p_honeypot", "must lie in (0, 1]");
        }
        if !(self.gamma >= 1.0 && self.gamma.is_finite()) {
            return bad("gamma", "must be at least 1");
        }
        if !(self.lambda >= 1.0 && self.lambda.is_finite()) {
            return bad("lambda", "must be at least 1");
        }
        self.digest
            .size_for(1, 1)
            .map(|_| ())
            .map_err(|e| Error::Config {
                field: "digest".into(),
                message: e.to_string(),
            })
    }
}

/// Sealed state of a Crossfire-protected model.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossfireVault {
    ledger: HashLedger,
    registry: HoneypotRegistry,
    options: ReconstructOptions,
}

impl CrossfireVault {
    pub fn new(
        ledger: HashLedger,
        registry: HoneypotRegistry,
        options: ReconstructOptions,
    ) -> Self {
        Self {
            ledger,
            registry,
            options,
        }
    }

    pub fn ledger(&self) -> &HashLedger {
        &self.ledger
    }

    pub fn registry(&self) -> &HoneypotRegistry {
        &self.registry
    }

    pub fn options(&self) -> ReconstructOptions {
        self.options
    }

    pub fn monitor(&self, model: &GinModel) -> bool {
        monitor(model, &self.ledger)
    }

    pub fn localize(&self, model: &GinModel) -> SuspectSet {
        localize(model, &self.ledger)
    }

    pub fn verify(&self, model: &GinModel) -> bool {
        verify(model, &self.ledger)
    }

    pub fn reconstruct(&self, model: &mut GinModel) -> DefenseReport {
        reconstruct(model, &self.ledger, &self.registry, self.options)
    }

    pub fn overhead(&self) -> Overhead {
        ledger::ledger_overhead(&self.ledger, registry_bytes(&self.registry))
    }
}

/// Index (4 bytes) and saliency (8 bytes) per honeypot plus one
/// `(row, col, value)` record of 9 bytes per sealed cell.
pub fn registry_bytes(r: &HoneypotRegistry) -> usize {
    12 * r.n_honeypots() + 9 * r.n_sealed()
}

/// Runs the protection pipeline on a trained model. `calibration` holds the
/// unlabeled batches used for pseudo-labels and gradients.
pub fn protect(
    model: &GinModel,
    calibration: &[GraphBatch],
    cfg: &CrossfireConfig,
) -> Result<(GinModel, CrossfireVault)> {
    cfg.validate()?;
    let mut real = model.dequantize();
    for w in &mut real.weights {
        *w = induce_sparsity(w, cfg.prune_ratio)?;
    }
    let targets = pseudo_label(&real, calibration)?;
    let grads = accumulate_gradients(&real, calibration, &targets)?;

    let mut layers = Vec::with_capacity(grads.len());
    for (l, g) in grads.iter().enumerate() {
        let indices = select_honeypots(g, cfg.p_honeypot)?;
        let gamma_l = layer_gamma(cfg.gamma, cfg.lambda, l);
        let strength = honeypot::honeypot_strength(g, &indices);
        let saliency = saliency(&strength, gamma_l)?;
        layers.push(LayerHoneypots {
            tensor: l,
            indices,
            saliency,
            gamma_l,
        });
    }
    let encoded = encode_honeypots(&real, &layers)?;
    let deployed = model.requantize_like(&encoded)?;
    let registry = HoneypotRegistry::seal(&deployed, layers)?;
    let ledger = build_ledger(&deployed, cfg.digest)?;
    Ok((
        deployed,
        CrossfireVault::new(ledger, registry, cfg.reconstruct),
    ))
}
