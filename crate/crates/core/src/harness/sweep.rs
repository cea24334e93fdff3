use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::{prepare, run_cell, ExperimentRecord, Prepared};
use super::report::{from_csv, round_sig, to_csv, RECORD_COLUMNS};
use super::{AttackKind, DefenseKind, ExperimentConfig};
use crate::error::{invalid, Result};

/// Cross product of the listed axes over `base`. An empty axis keeps the
/// base value. Axes only touch the attack and the defense, so every cell of
/// a repetition shares one trained model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub base: ExperimentConfig,
    pub attacks: Vec<AttackKind>,
    pub flips: Vec<usize>,
    pub defenses: Vec<DefenseKind>,
    pub p: Vec<f64>,
    pub gamma: Vec<f64>,
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl SweepGrid {
    /// Configs in row-major order: attack, flips, defense, p, gamma.
    pub fn cells(&self) -> Vec<ExperimentConfig> {
        let b = &self.base;
        let mut out = Vec::new();
        for &attack in &axis(&self.attacks, b.attack) {
            for &flips in &axis(&self.flips, b.flips) {
                for &defense in &axis(&self.defenses, b.defense) {
                    for &p in &axis(&self.p, b.params.p) {
                        for &gamma in &axis(&self.gamma, b.params.gamma) {
                            let mut c = b.clone();
                            c.attack = attack;
                            c.flips = flips;
                            c.defense = defense;
                            c.params.p = p;
                            c.params.gamma = gamma;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

/// Mean over the repetitions of one grid cell. Boolean columns become rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub dataset: String,
    pub attack: String,
    pub flips: usize,
    pub defense: String,
    pub p: f64,
    pub gamma: f64,
    pub quality_pre: f64,
    pub quality_attack: f64,
    pub quality_repair: f64,
    pub attack_detected: f64,
    pub flip_detect_ratio: f64,
    pub reconstructed: f64,
    pub t_attack_ms: f64,
    pub t_defense_ms: f64,
}

impl SweepRow {
    pub fn to_csv(rows: &[SweepRow]) -> Result<String> {
        to_csv(rows, &RECORD_COLUMNS)
    }

    pub fn from_csv(text: &str) -> Result<Vec<SweepRow>> {
        from_csv(text)
    }
}

/// Averages the records of one cell; identifying columns come from the first.
pub fn aggregate(records: &[ExperimentRecord]) -> Result<SweepRow> {
    let first = records
        .first()
        .ok_or_else(|| invalid("nothing to aggregate"))?;
    let mean = |f: &dyn Fn(&ExperimentRecord) -> f64| {
        round_sig(records.iter().map(f).sum::<f64>() / records.len() as f64)
    };
    let rate = |b: bool| b as u8 as f64;
    Ok(SweepRow {
        seed: first.seed,
        dataset: first.dataset.clone(),
        attack: first.attack.clone(),
        flips: first.flips,
        defense: first.defense.clone(),
        p: first.p,
        gamma: first.gamma,
        quality_pre: mean(&|r| r.quality_pre),
        quality_attack: mean(&|r| r.quality_attack),
        quality_repair: mean(&|r| r.quality_repair),
        attack_detected: mean(&|r| rate(r.attack_detected)),
        flip_detect_ratio: mean(&|r| r.flip_detect_ratio),
        reconstructed: mean(&|r| rate(r.reconstructed)),
        t_attack_ms: mean(&|r| r.t_attack_ms),
        t_defense_ms: mean(&|r| r.t_defense_ms),
    })
}

/// Runs every cell and repetition of the grid; returns the raw records in
/// grid order (repetitions innermost) and one aggregated row per cell.
pub fn sweep(grid: &SweepGrid) -> Result<(Vec<ExperimentRecord>, Vec<SweepRow>)> {
    let cells = grid.cells();
    for c in &cells {
        c.validate()?;
    }
    let base = &grid.base;
    let prepared: Vec<Prepared> = (0..base.repetitions as u64)
        .into_par_iter()
        .map(|r| prepare(base, base.seed.wrapping_add(r)))
        .collect::<Result<_>>()?;
    let jobs: Vec<(&ExperimentConfig, &Prepared)> = cells
        .iter()
        .flat_map(|c| prepared.iter().map(move |p| (c, p)))
        .collect();
    let records: Vec<ExperimentRecord> = jobs
        .par_iter()
        .map(|(c, p)| run_cell(c, p))
        .collect::<Result<_>>()?;
    let rows = records
        .chunks(prepared.len())
        .map(aggregate)
        .collect::<Result<_>>()?;
    Ok((records, rows))
}
