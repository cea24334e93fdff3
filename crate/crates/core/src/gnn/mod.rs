//! Dense graph isomorphism network with INT8 weights.

pub mod compute;
pub mod data;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod train;

pub use compute::{
    backward, forward, gin_layer_forward, loss, neuron_activity, readout, Gradients, LossKind,
    Target,
};
pub use data::{synth_dataset, Dataset, TaskKind, TaskSpec};
pub use graph::{Graph, GraphBatch};
pub use metrics::{auroc, average_precision, multitask_quality, QualityMetric};
pub use model::{Architecture, GinModel, RealModel, TensorRole};
pub use train::{train_ste, TrainConfig, TrainOutcome};
