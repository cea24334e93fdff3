use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::round_sig;
use super::{derive_seed, AttackKind, DefenseKind, ExperimentConfig};
use crate::attack::{ibfa, ibfa_select_pair, pbfa, AttackBudget, AttackTrace};
use crate::baselines::{
    neuropots_detect_and_refresh, neuropots_protect, radar_detect_and_zero, radar_protect,
    NeuropotsState, RadarState,
};
use crate::crossfire::{protect, CrossfireVault};
use crate::digest::layer_digest;
use crate::error::{invalid, Result};
use crate::gnn::{
    forward, multitask_quality, synth_dataset, train_ste, Architecture, Dataset, GinModel,
    GraphBatch, LossKind, QualityMetric, RealModel,
};
use crate::io;
use crate::quant::BitFlipEvent;

// Sub-seed streams of one repetition.
const DATA_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const INIT_STREAM: u64 = 2;
const TRAIN_STREAM: u64 = 3;
const CALIB_STREAM: u64 = 4;
const ATTACK_STREAM: u64 = 5;
const DEFENSE_STREAM: u64 = 6;

/// One repetition of one experiment cell. Column order is the CSV order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
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
    pub attack_detected: bool,
    pub flip_detect_ratio: f64,
    /// Every 4-byte layer digest equals the pristine model's after repair.
    pub reconstructed: bool,
    pub t_attack_ms: f64,
    pub t_defense_ms: f64,
}

impl ExperimentRecord {
    /// Post-attack and post-repair quality as a percentage of the pre-attack quality.
    pub fn normalized_quality(&self) -> (f64, f64) {
        (
            100.0 * self.quality_attack / self.quality_pre,
            100.0 * self.quality_repair / self.quality_pre,
        )
    }
}

/// A trained model and the data splits of one repetition.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub seed: u64,
    pub data: Dataset,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub model: GinModel,
}

impl Prepared {
    /// Regenerates the data of repetition seed `seed` around an existing model.
    pub fn with_model(cfg: &ExperimentConfig, seed: u64, model: GinModel) -> Result<Self> {
        let d = &cfg.dataset;
        let data = synth_dataset(derive_seed(seed, DATA_STREAM), d.n_graphs, &d.task)?;
        let (train_idx, test_idx) = data.split(d.train_fraction, derive_seed(seed, SPLIT_STREAM));
        let arch = model_arch(cfg)?;
        if model.arch != arch {
            return Err(invalid("model architecture does not match the config"));
        }
        Ok(Self {
            seed,
            data,
            train_idx,
            test_idx,
            model,
        })
    }
}

fn model_arch(cfg: &ExperimentConfig) -> Result<Architecture> {
    let t = &cfg.dataset.task;
    let mut arch = Architecture::new(
        t.feature_dim,
        cfg.model.hidden,
        cfg.model.depth,
        t.tasks.len(),
    )?;
    arch.eps = cfg.model.eps;
    Ok(arch)
}

/// Synthesizes the dataset and trains the INT8 model for repetition seed `seed`.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let init = RealModel::init(
        model_arch(cfg)?,
        &mut ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_STREAM)),
    );
    let mut prep = Prepared::with_model(cfg, seed, GinModel::quantize(&init, seed)?)?;
    prep.model = train_ste(
        &init,
        &prep.data,
        &prep.train_idx,
        &cfg.train,
        derive_seed(seed, TRAIN_STREAM),
    )?
    .model;
    Ok(prep)
}

/// `n` batches of `size` graphs drawn from `pool` without replacement,
/// reshuffling whenever the pool runs out.
fn sample_batches(
    data: &Dataset,
    pool: &[usize],
    n: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<GraphBatch>> {
    if pool.is_empty() {
        return Err(invalid("cannot sample batches from an empty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = Vec::new();
    (0..n)
        .map(|_| {
            let mut idx = Vec::with_capacity(size);
            while idx.len() < size {
                if order.is_empty() {
                    order = pool.to_vec();
                    order.shuffle(&mut rng);
                }
                idx.push(order.pop().expect("refilled"));
            }
            data.batch(&idx)
        })
        .collect()
}

fn quality(model: &GinModel, test: &GraphBatch, metric: QualityMetric) -> Result<f64> {
    let labels = test
        .labels()
        .ok_or_else(|| invalid("test batch has no labels"))?;
    multitask_quality(&forward(&model.dequantize(), test)?, labels, metric)
}

/// Sealed state of whichever defense protects the deployed model.
#[derive(Debug, Clone)]
pub enum SealedState {
    Crossfire(CrossfireVault),
    Neuropots(NeuropotsState),
    Radar(RadarState),
    None,
}

const LEDGER_FILE: &str = "ledger.cflg";
const REGISTRY_FILE: &str = "registry.cfhp";
const NEUROPOTS_FILE: &str = "neuropots.cfnp";
const RADAR_FILE: &str = "radar.cfrd";

impl SealedState {
    pub fn kind(&self) -> DefenseKind {
        match self {
            SealedState::Crossfire(_) => DefenseKind::Crossfire,
            SealedState::Neuropots(_) => DefenseKind::Neuropots,
            SealedState::Radar(_) => DefenseKind::Radar,
            SealedState::None => DefenseKind::None,
        }
    }

    /// Writes the state files of this defense into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        match self {
            SealedState::Crossfire(v) => {
                fs::write(dir.join(LEDGER_FILE), io::encode_ledger(v.ledger()))?;
                fs::write(dir.join(REGISTRY_FILE), io::encode_registry(v.registry()))?;
            }
            SealedState::Neuropots(s) => {
                fs::write(dir.join(NEUROPOTS_FILE), io::encode_neuropots(s))?
            }
            SealedState::Radar(s) => fs::write(dir.join(RADAR_FILE), io::encode_radar(s))?,
            SealedState::None => {}
        }
        Ok(())
    }

    /// Reads the state that [`SealedState::save`] wrote for `cfg.defense`.
    pub fn load(dir: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.defense {
            DefenseKind::Crossfire => SealedState::Crossfire(CrossfireVault::new(
                io::decode_ledger(&fs::read(dir.join(LEDGER_FILE))?)?,
                io::decode_registry(&fs::read(dir.join(REGISTRY_FILE))?)?,
                cfg.params.reconstruct,
            )),
            DefenseKind::Neuropots => {
                SealedState::Neuropots(io::decode_neuropots(&fs::read(dir.join(NEUROPOTS_FILE))?)?)
            }
            DefenseKind::Radar => {
                SealedState::Radar(io::decode_radar(&fs::read(dir.join(RADAR_FILE))?)?)
            }
            DefenseKind::None => SealedState::None,
        })
    }
}

/// The calibration batches of a repetition, without labels.
pub fn calibration_batches(cfg: &ExperimentConfig, prep: &Prepared) -> Result<Vec<GraphBatch>> {
    let batches = sample_batches(
        &prep.data,
        &prep.train_idx,
        cfg.calibration_batches,
        cfg.batch_size,
        derive_seed(prep.seed, CALIB_STREAM),
    )?;
    Ok(batches.into_iter().map(|b| b.unlabeled()).collect())
}

/// Applies `cfg.defense` to the prepared model; returns the deployed model.
pub fn protect_model(cfg: &ExperimentConfig, prep: &Prepared) -> Result<(GinModel, SealedState)> {
    Ok(match cfg.defense {
        DefenseKind::Crossfire => {
            let (m, v) = protect(
                &prep.model,
                &calibration_batches(cfg, prep)?,
                &cfg.params.crossfire(),
            )?;
            (m, SealedState::Crossfire(v))
        }
        DefenseKind::Neuropots => {
            let seed = derive_seed(prep.seed, DEFENSE_STREAM);
            let (m, s) = neuropots_protect(
                &prep.model,
                &calibration_batches(cfg, prep)?,
                &cfg.params.neuropots(),
                seed,
            )?;
            (m, SealedState::Neuropots(s))
        }
        DefenseKind::Radar => (
            prep.model.clone(),
            SealedState::Radar(radar_protect(&prep.model, cfg.params.radar)?),
        ),
        DefenseKind::None => (prep.model.clone(), SealedState::None),
    })
}

/// What a defense saw and did.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DefenseOutcome {
    pub attack_detected: bool,
    /// Committed flips the defense flagged, under that defense's accounting.
    pub detected_flips: usize,
    /// The defense's own report.
    pub report: serde_json::Value,
}

/// Runs detection and repair on `model`. `trace` only feeds the accounting:
/// a flip counts for Crossfire if its cell lies in a flagged row x column
/// product, for RADAR if its group is flagged and for NeuroPots if its cell
/// belongs to a flagged honeypot.
pub fn defend_model(
    state: &SealedState,
    model: &mut GinModel,
    trace: &AttackTrace,
) -> Result<DefenseOutcome> {
    let count = |hit: &dyn Fn(&BitFlipEvent) -> bool| trace.flips.iter().filter(|f| hit(f)).count();
    Ok(match state {
        SealedState::Crossfire(vault) => {
            let report = vault.reconstruct(model);
            let flagged: BTreeSet<_> = report.flagged_cells.iter().copied().collect();
            DefenseOutcome {
                attack_detected: report.attack_detected,
                detected_flips: count(&|f| flagged.contains(&(f.layer, f.row, f.col))),
                report: serde_json::to_value(&report)?,
            }
        }
        SealedState::Neuropots(s) => {
            let report = neuropots_detect_and_refresh(model, s);
            DefenseOutcome {
                attack_detected: report.attack_detected(),
                detected_flips: count(&|f| report.flagged_cells.contains(&(f.layer, f.row, f.col))),
                report: serde_json::to_value(&report)?,
            }
        }
        SealedState::Radar(s) => {
            let report = radar_detect_and_zero(model, s)?;
            let flagged: BTreeSet<_> = report.flagged.iter().copied().collect();
            let cols: Vec<usize> = model.weights.iter().map(|t| t.cols()).collect();
            DefenseOutcome {
                attack_detected: report.attack_detected(),
                detected_flips: count(&|f| {
                    flagged.contains(&(f.layer, s.group_of(f.row, f.col, cols[f.layer])))
                }),
                report: serde_json::to_value(&report)?,
            }
        }
        SealedState::None => DefenseOutcome {
            attack_detected: false,
            detected_flips: 0,
            report: serde_json::Value::Null,
        },
    })
}

/// True iff every 4-byte layer digest of `a` equals that of `b`.
pub fn same_weights(a: &GinModel, b: &GinModel) -> bool {
    a.weights.len() == b.weights.len()
        && a.weights
            .iter()
            .zip(&b.weights)
            .all(|(x, y)| layer_digest(x) == layer_digest(y))
}

/// Quality of `model` on the prepared test split.
pub fn test_quality(cfg: &ExperimentConfig, prep: &Prepared, model: &GinModel) -> Result<f64> {
    quality(model, &prep.data.batch(&prep.test_idx)?, cfg.metric)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs protect, attack and repair on a prepared model.
pub fn run_cell(cfg: &ExperimentConfig, prep: &Prepared) -> Result<ExperimentRecord> {
    let (mut deployed, sealed) = protect_model(cfg, prep)?;
    // Hidden ground truth for the reconstruction oracle.
    let pristine = deployed.clone();
    let test = prep.data.batch(&prep.test_idx)?;
    let quality_pre = quality(&deployed, &test, cfg.metric)?;

    let t = Instant::now();
    let trace = attack_model(cfg, prep, &mut deployed)?;
    let t_attack_ms = ms(t);
    let quality_attack = quality(&deployed, &test, cfg.metric)?;

    let t = Instant::now();
    let outcome = defend_model(&sealed, &mut deployed, &trace)?;
    let t_defense_ms = ms(t);
    let quality_repair = quality(&deployed, &test, cfg.metric)?;

    let (p, gamma) = match cfg.defense {
        DefenseKind::Crossfire | DefenseKind::Neuropots => (cfg.params.p, cfg.params.gamma),
        DefenseKind::Radar | DefenseKind::None => (0.0, 0.0),
    };
    // With nothing flipped every flip was (vacuously) detected.
    let flip_detect_ratio = if trace.is_empty() {
        1.0
    } else {
        outcome.detected_flips as f64 / trace.len() as f64
    };
    let timing = |v: f64| {
        if cfg.record_timings {
            round_sig(v)
        } else {
            0.0
        }
    };
    Ok(ExperimentRecord {
        seed: prep.seed,
        dataset: dataset_name(cfg),
        attack: cfg.attack.name().into(),
        flips: cfg.flips,
        defense: cfg.defense.name().into(),
        p,
        gamma,
        quality_pre: round_sig(quality_pre),
        quality_attack: round_sig(quality_attack),
        quality_repair: round_sig(quality_repair),
        attack_detected: outcome.attack_detected,
        flip_detect_ratio: round_sig(flip_detect_ratio),
        reconstructed: same_weights(&deployed, &pristine),
        t_attack_ms: timing(t_attack_ms),
        t_defense_ms: timing(t_defense_ms),
    })
}

pub(crate) fn dataset_name(cfg: &ExperimentConfig) -> String {
    let names: Vec<String> = cfg
        .dataset
        .task
        .tasks
        .iter()
        .map(|t| {
            serde_json::to_value(t)
                .ok()
                .and_then(|v| v.as_str().map(String::from))
                .unwrap_or_default()
        })
        .collect();
    names.join("+")
}

/// Runs `cfg.attack` against `model` in place.
pub fn attack_model(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    model: &mut GinModel,
) -> Result<AttackTrace> {
    let budget = AttackBudget::new(cfg.flips, cfg.candidates)?;
    let seed = derive_seed(prep.seed, ATTACK_STREAM);
    match cfg.attack {
        AttackKind::None => Ok(AttackTrace::default()),
        AttackKind::Pbfa => {
            let batch =
                sample_batches(&prep.data, &prep.train_idx, 1, cfg.batch_size, seed)?.remove(0);
            let targets = batch
                .labels()
                .cloned()
                .ok_or_else(|| invalid("attack batch has no labels"))?;
            pbfa(model, &batch, &targets, budget)
        }
        AttackKind::IbfaL1 | AttackKind::IbfaKl => {
            let kind = if cfg.attack == AttackKind::IbfaL1 {
                LossKind::L1
            } else {
                LossKind::Kl
            };
            let pool: Vec<GraphBatch> = sample_batches(
                &prep.data,
                &prep.train_idx,
                cfg.ibfa_pool,
                cfg.batch_size,
                seed,
            )?
            .into_iter()
            .map(|b| b.unlabeled())
            .collect();
            let (i, j) = ibfa_select_pair(model, &pool, kind)?;
            ibfa(model, &pool[i], &pool[j], budget, kind)
        }
    }
}

/// Runs every repetition of `cfg`; repetition `r` uses seed `cfg.seed + r`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    (0..cfg.repetitions as u64)
        .into_par_iter()
        .map(|r| run_cell(cfg, &prepare(cfg, cfg.seed.wrapping_add(r))?))
        .collect()
}
