use std::hint::black_box;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::report::{round_sig, to_csv};
use crate::crossfire::{hash_overhead, LayerLedger};
use crate::error::{invalid, Result};
use crate::quant::QuantTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OverheadConfig {
    /// Side lengths of the square weight matrices.
    pub sizes: Vec<usize>,
    pub digests: Vec<usize>,
    /// Graphs per batch of the reference layer.
    pub batch: usize,
    /// Nodes per graph.
    pub nodes: Vec<usize>,
    pub repetitions: usize,
    /// Untimed runs before measuring.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512, 1024],
            digests: vec![1, 2, 3],
            batch: 32,
            nodes: vec![5, 10],
            repetitions: 20,
            warmup: 3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverheadRow {
    pub size: usize,
    pub digest: usize,
    pub nodes: usize,
    pub storage_bytes: usize,
    pub storage_ratio: f64,
    /// Median wall time to build the row, column and layer digests.
    pub hash_ms: f64,
    /// Median wall time of the INT8 reference layer on one batch.
    pub layer_ms: f64,
}

impl OverheadRow {
    pub fn to_csv(rows: &[OverheadRow]) -> Result<String> {
        to_csv(
            rows,
            &[
                "size",
                "digest",
                "nodes",
                "storage_bytes",
                "storage_ratio",
                "hash_ms",
                "layer_ms",
            ],
        )
    }
}

/// Median of `reps` timed calls after `warmup` untimed ones, in milliseconds.
fn median_ms(reps: usize, warmup: usize, mut f: impl FnMut()) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}

/// Block-diagonal batch of random graphs as neighbor lists.
fn random_batch(rng: &mut ChaCha8Rng, graphs: usize, nodes: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); graphs * nodes];
    for g in 0..graphs {
        let base = g * nodes;
        for v in 1..nodes {
            // Random tree plus a few extra edges.
            let u = rng.gen_range(0..v);
            adj[base + u].push(base + v);
            adj[base + v].push(base + u);
        }
        for _ in 0..nodes / 3 {
            let (u, v) = (rng.gen_range(0..nodes), rng.gen_range(0..nodes));
            if u != v && !adj[base + u].contains(&(base + v)) {
                adj[base + u].push(base + v);
                adj[base + v].push(base + u);
            }
        }
    }
    adj
}

/// `(A + I) X W^T` with INT8 operands and i32 accumulation.
fn reference_layer(adj: &[Vec<usize>], x: &[i8], w: &[i8], n: usize) -> Vec<i32> {
    let nodes = adj.len();
    let mut agg = vec![0i32; nodes * n];
    for v in 0..nodes {
        let row = &mut agg[v * n..(v + 1) * n];
        for (r, &xv) in row.iter_mut().zip(&x[v * n..(v + 1) * n]) {
            *r = xv as i32;
        }
        for &u in &adj[v] {
            for (r, &xu) in row.iter_mut().zip(&x[u * n..(u + 1) * n]) {
                *r += xu as i32;
            }
        }
    }
    let mut out = vec![0i32; nodes * n];
    for v in 0..nodes {
        let a = &agg[v * n..(v + 1) * n];
        for (o, wrow) in out[v * n..(v + 1) * n].iter_mut().zip(w.chunks_exact(n)) {
            *o = a.iter().zip(wrow).map(|(&p, &q)| p * q as i32).sum();
        }
    }
    out
}

/// Storage ratios and sequential timings of ledger hashing against one
/// INT8 message-passing layer.
pub fn overhead_study(cfg: &OverheadConfig) -> Result<Vec<OverheadRow>> {
    if cfg.sizes.contains(&0) || cfg.nodes.contains(&0) || cfg.batch == 0 {
        return Err(invalid("sizes, nodes and batch must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let w: Vec<i8> = (0..n * n).map(|_| rng.gen_range(-127..=127)).collect();
        let t = QuantTensor::from_raw(n, n, w.clone(), 1.0, -127, 127)?;
        let layer_ms: Vec<f64> = cfg
            .nodes
            .iter()
            .map(|&v| {
                let adj = random_batch(&mut rng, cfg.batch, v);
                let x: Vec<i8> = (0..adj.len() * n)
                    .map(|_| rng.gen_range(-127..=127))
                    .collect();
                median_ms(cfg.repetitions, cfg.warmup, || {
                    black_box(reference_layer(&adj, &x, &w, n));
                })
            })
            .collect();
        for &d in &cfg.digests {
            let mut err = None;
            let hash_ms = median_ms(cfg.repetitions, cfg.warmup, || {
                if let Err(e) = LayerLedger::build(black_box(&t), d) {
                    err = Some(e);
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            let (storage_bytes, ratio) = hash_overhead(n, n, d);
            for (&nodes, &lm) in cfg.nodes.iter().zip(&layer_ms) {
                rows.push(OverheadRow {
                    size: n,
                    digest: d,
                    nodes,
                    storage_bytes,
                    storage_ratio: round_sig(ratio),
                    hash_ms: round_sig(hash_ms),
                    layer_ms: round_sig(lm),
                });
            }
        }
    }
    Ok(rows)
}
