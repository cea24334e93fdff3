//! Experiment engine: configs, the attack/defense protocol, the reliability
//! and overhead studies, sweeps and report emission.

mod experiment;
mod overhead;
mod reliability;
mod report;
mod sweep;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::CandidatePolicy;
use crate::baselines::{HoneypotSelection, NeuropotsConfig, RadarConfig};
use crate::crossfire::{CrossfireConfig, DigestSizing, ReconstructOptions};
use crate::error::{Error, Result};
use crate::gnn::{QualityMetric, TaskSpec, TrainConfig};

pub use experiment::{
    attack_model, calibration_batches, defend_model, prepare, protect_model, run_cell,
    run_experiment, same_weights, test_quality, DefenseOutcome, ExperimentRecord, Prepared,
    SealedState,
};
pub use overhead::{overhead_study, OverheadConfig, OverheadRow};
pub use reliability::{reliability_study, ReliabilityConfig, ReliabilityRow, ReliabilityTable};
pub use report::{
    read_csv, read_json, records_to_csv, records_to_json, round_sig, write_report, ReportFormat,
};
pub use sweep::{aggregate, sweep, SweepGrid, SweepRow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    #[serde(rename = "pbfa")]
    Pbfa,
    #[serde(rename = "ibfa-l1")]
    IbfaL1,
    #[serde(rename = "ibfa-kl")]
    IbfaKl,
    #[serde(rename = "none")]
    None,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Pbfa => "pbfa",
            AttackKind::IbfaL1 => "ibfa-l1",
            AttackKind::IbfaKl => "ibfa-kl",
            AttackKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DefenseKind {
    Crossfire,
    Neuropots,
    Radar,
    None,
}

impl DefenseKind {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseKind::Crossfire => "crossfire",
            DefenseKind::Neuropots => "neuropots",
            DefenseKind::Radar => "radar",
            DefenseKind::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_graphs: usize,
    pub train_fraction: f64,
    pub task: TaskSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_graphs: 1000,
            train_fraction: 0.8,
            task: TaskSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            depth: 5,
            eps: 0.0,
        }
    }
}

/// Hyperparameters shared by the defenses. `p` and `gamma` drive both
/// Crossfire and NeuroPots so the two are compared at equal settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseParams {
    pub p: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub prune: f64,
    pub digest: DigestSizing,
    pub reconstruct: ReconstructOptions,
    pub selection: HoneypotSelection,
    pub radar: RadarConfig,
}

impl Default for DefenseParams {
    fn default() -> Self {
        let cf = CrossfireConfig::default();
        Self {
            p: cf.p_honeypot,
            gamma: cf.gamma,
            lambda: cf.lambda,
            prune: cf.prune_ratio,
            digest: cf.digest,
            reconstruct: cf.reconstruct,
            selection: HoneypotSelection::Random,
            radar: RadarConfig::default(),
        }
    }
}

impl DefenseParams {
    pub fn crossfire(&self) -> CrossfireConfig {
        CrossfireConfig {
            prune_ratio: self.prune,
            p_honeypot: self.p,
            gamma: self.gamma,
            lambda: self.lambda,
            digest: self.digest,
            reconstruct: self.reconstruct,
        }
    }

    pub fn neuropots(&self) -> NeuropotsConfig {
        NeuropotsConfig {
            p: self.p,
            gamma: self.gamma,
            selection: self.selection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metric: QualityMetric,
    pub attack: AttackKind,
    pub flips: usize,
    pub candidates: CandidatePolicy,
    pub defense: DefenseKind,
    pub params: DefenseParams,
    /// Graphs per calibration, attack and IBFA pool batch.
    pub batch_size: usize,
    pub calibration_batches: usize,
    pub ibfa_pool: usize,
    pub repetitions: usize,
    /// Wall-clock timings make reports non-reproducible, so they are opt-in.
    pub record_timings: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metric: QualityMetric::Auroc,
            attack: AttackKind::Pbfa,
            flips: 15,
            candidates: CandidatePolicy::default(),
            defense: DefenseKind::Crossfire,
            params: DefenseParams::default(),
            batch_size: 32,
            calibration_batches: 10,
            ibfa_pool: 8,
            repetitions: 1,
            record_timings: false,
        }
    }
}

pub(crate) fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| config_err("json", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        d.task
            .validate()
            .map_err(|e| config_err("dataset.task", e.to_string()))?;
        if d.n_graphs < 20 {
            return Err(config_err("dataset.n_graphs", "must be at least 20"));
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(config_err("dataset.train_fraction", "must lie in (0, 1)"));
        }
        if self.model.hidden == 0 {
            return Err(config_err("model.hidden", "must be positive"));
        }
        if self.model.depth == 0 {
            return Err(config_err("model.depth", "must be positive"));
        }
        if !self.model.eps.is_finite() {
            return Err(config_err("model.eps", "must be finite"));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(config_err("train.batch_size", "must be positive"));
        }
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(config_err("train.lr", "must be a non-negative number"));
        }
        if !(t.l1 >= 0.0 && t.l1.is_finite()) {
            return Err(config_err("train.l1", "must be a non-negative number"));
        }
        if matches!(
            self.candidates,
            CandidatePolicy::PerLayer(0) | CandidatePolicy::Global(0)
        ) {
            return Err(config_err("candidates", "k must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be positive"));
        }
        if self.calibration_batches == 0 {
            return Err(config_err("calibration_batches", "must be positive"));
        }
        if self.ibfa_pool < 2 {
            return Err(config_err("ibfa_pool", "must be at least 2"));
        }
        if self.repetitions == 0 {
            return Err(config_err("repetitions", "must be positive"));
        }
        self.params.crossfire().validate().map_err(|e| match e {
            Error::Config { field, message } => {
                let field = match field.as_str() {
                    "prune_ratio" => "params.prune".into(),
                    "p_honeypot" => "params.p".into(),
                    other => format!("params.{other}"),
                };
                config_err(&field, message)
            }
            other => other,
        })?;
        self.params
            .radar
            .validate()
            .map_err(|e| config_err("params.radar", e.to_string()))
    }
}

/// Independent sub-seed `stream` of `seed`.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}
