//! Shared fixtures for the benchmarks.

use crossfire_core::gnn::{synth_dataset, Architecture, GinModel, GraphBatch, RealModel, TaskSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// An untrained INT8 model on the default task's feature width.
pub fn model(seed: u64, hidden: usize, depth: usize) -> GinModel {
    let arch = Architecture::new(TaskSpec::default().feature_dim, hidden, depth, 1)
        .expect("valid architecture");
    GinModel::quantize(
        &RealModel::init(arch, &mut ChaCha8Rng::seed_from_u64(seed)),
        seed,
    )
    .expect("quantizes")
}

/// A labeled batch of `n` synthetic graphs.
pub fn batch(seed: u64, n: usize) -> GraphBatch {
    let data = synth_dataset(seed, n, &TaskSpec::default()).expect("dataset");
    let idx: Vec<usize> = (0..n).collect();
    data.batch(&idx).expect("batch")
}
