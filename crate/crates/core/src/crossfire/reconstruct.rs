//! Staged repair of localized cells, verified against the layer digests.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::honeypot::{Cell, HoneypotRegistry};
use super::ledger::{localize, tampered_layers, HashLedger, SuspectSet};
use crate::gnn::model::GinModel;
use crate::quant::msb_unset_repair;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepairAction {
    HoneypotRestore,
    OodRepair,
    Zeroed,
    Untouched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellAction {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub action: RepairAction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub attack_detected: bool,
    /// Candidate cells of the first localization.
    pub flagged_cells: Vec<Cell>,
    /// One entry per flagged or repaired cell.
    pub actions: Vec<CellAction>,
    pub verified: bool,
    /// Number of repair stages that ran (0 to 3).
    pub stages_run: usize,
}

impl DefenseReport {
    pub fn count(&self, action: RepairAction) -> usize {
        self.actions.iter().filter(|a| a.action == action).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructOptions {
    /// Recompute the suspect set from the digests before stages 2 and 3,
    /// so cells whose row or column was already repaired drop out.
    pub relocalize: bool,
}

impl Default for ReconstructOptions {
    fn default() -> Self {
        Self { relocalize: true }
    }
}

/// Candidates restricted to layers whose digest still mismatches.
fn open_candidates(model: &GinModel, ledger: &HashLedger, suspects: &SuspectSet) -> Vec<Cell> {
    let open = tampered_layers(model, ledger);
    suspects
        .candidates()
        .into_iter()
        .filter(|c| open.binary_search(&c.0).is_ok())
        .collect()
}

/// Honeypot restore, then out-of-range MSB repair, then zeroing of the
/// remaining nonzero candidates, verifying after each stage.
pub fn reconstruct(
    model: &mut GinModel,
    ledger: &HashLedger,
    registry: &HoneypotRegistry,
    opts: ReconstructOptions,
) -> DefenseReport {
    let mut report = DefenseReport::default();
    if tampered_layers(model, ledger).is_empty() {
        report.verified = true;
        return report;
    }
    report.attack_detected = true;
    let mut suspects = localize(model, ledger);
    report.flagged_cells = suspects.candidates();
    let mut acted: BTreeMap<Cell, RepairAction> = BTreeMap::new();

    for stage in 1..=3 {
        if stage > 1 && opts.relocalize {
            suspects = localize(model, ledger);
        }
        report.stages_run = stage;
        if stage == 1 {
            // Sealed copies are authoritative, so every mismatching sealed
            // cell of a tampered layer is restored, not only those inside the
            // suspect product: two flips with opposite deltas in one row
            // leave that row's digest intact.
            let open = tampered_layers(model, ledger);
            for ((l, r, c), sealed) in registry.sealed_entries() {
                let Some(t) = model.weights.get_mut(l) else {
                    continue;
                };
                if open.binary_search(&l).is_ok() && t.get(r, c) != sealed {
                    t.set(r, c, sealed);
                    acted.insert((l, r, c), RepairAction::HoneypotRestore);
                }
            }
        } else {
            for (l, r, c) in open_candidates(model, ledger, &suspects) {
                if acted.contains_key(&(l, r, c)) {
                    continue;
                }
                let t = &mut model.weights[l];
                let v = t.get(r, c);
                if stage == 2 {
                    let bounds = ledger.layers[l].bounds;
                    if !bounds.contains(v) {
                        let fix = msb_unset_repair(v, bounds);
                        t.set(r, c, fix.value);
                        if fix.in_range {
                            acted.insert((l, r, c), RepairAction::OodRepair);
                        }
                    }
                } else if v != 0 {
                    t.set(r, c, 0);
                    acted.insert((l, r, c), RepairAction::Zeroed);
                }
            }
        }
        if tampered_layers(model, ledger).is_empty() {
            report.verified = true;
            break;
        }
    }

    for &cell in &report.flagged_cells {
        acted.entry(cell).or_insert(RepairAction::Untouched);
    }
    report.actions = acted
        .into_iter()
        .map(|((layer, row, col), action)| CellAction {
            layer,
            row,
            col,
            action,
        })
        .collect();
    report
}
