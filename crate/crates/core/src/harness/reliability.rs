use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{round_sig, to_csv};
use crate::digest::blake2b;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReliabilityConfig {
    /// Side lengths of the square matrices.
    pub sizes: Vec<usize>,
    pub flips: Vec<usize>,
    pub digests: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for ReliabilityConfig {
    fn default() -> Self {
        Self {
            sizes: (1..=10).map(|i| 100 * i).collect(),
            flips: vec![1, 5, 10],
            digests: vec![1, 2, 3],
            trials: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityRow {
    pub size: usize,
    pub flips: usize,
    pub digest: usize,
    pub trials: usize,
    /// Flip sets whose digest matched the original matrix.
    pub misses: usize,
    /// Unflipped matrices whose digest changed.
    pub false_alarms: usize,
    pub miss_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub rows: Vec<ReliabilityRow>,
}

impl ReliabilityTable {
    /// Total misses and trials over every row with digest size `d`.
    pub fn totals(&self, d: usize) -> (usize, usize) {
        self.rows
            .iter()
            .filter(|r| r.digest == d)
            .fold((0, 0), |(m, t), r| (m + r.misses, t + r.trials))
    }

    pub fn to_csv(&self) -> Result<String> {
        to_csv(
            &self.rows,
            &[
                "size",
                "flips",
                "digest",
                "trials",
                "misses",
                "false_alarms",
                "miss_rate",
            ],
        )
    }
}

/// For each `(size, flips)` cell, flips `flips` bits at distinct random
/// cells of fresh uniform INT8 matrices and checks whether a `d`-byte digest
/// of the whole matrix still matches. Every digest size sees the same
/// matrices and flip sets.
pub fn reliability_study(cfg: &ReliabilityConfig) -> Result<ReliabilityTable> {
    if cfg.sizes.contains(&0) || cfg.digests.iter().any(|d| !(1..=64).contains(d)) {
        return Err(invalid("sizes must be positive and digests within 1..=64"));
    }
    if let Some(&k) = cfg
        .flips
        .iter()
        .find(|&&k| cfg.sizes.iter().any(|&n| k > n * n))
    {
        return Err(invalid(format!("{k} flips exceed a matrix's cells")));
    }
    let cells: Vec<(usize, usize)> = cfg
        .sizes
        .iter()
        .flat_map(|&n| cfg.flips.iter().map(move |&k| (n, k)))
        .collect();
    let counts: Vec<Vec<(usize, usize)>> = cells
        .par_iter()
        .enumerate()
        .map(|(ci, &(n, k))| {
            let mut per_digest = vec![(0, 0); cfg.digests.len()];
            for trial in 0..cfg.trials {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream((ci * cfg.trials + trial) as u64);
                let mut original = vec![0u8; n * n];
                rng.fill_bytes(&mut original);
                let mut mutated = original.clone();
                for cell in sample(&mut rng, n * n, k) {
                    mutated[cell] ^= 1 << rng.gen_range(0..8);
                }
                for (slot, &d) in per_digest.iter_mut().zip(&cfg.digests) {
                    let same = blake2b(d, &original) == blake2b(d, &mutated);
                    if k > 0 && same {
                        slot.0 += 1;
                    }
                    if k == 0 && !same {
                        slot.1 += 1;
                    }
                }
            }
            per_digest
        })
        .collect();
    let mut rows = Vec::new();
    for (&(size, flips), per_digest) in cells.iter().zip(counts) {
        for (&digest, (misses, false_alarms)) in cfg.digests.iter().zip(per_digest) {
            let miss_rate = round_sig(misses as f64 / cfg.trials.max(1) as f64);
            rows.push(ReliabilityRow {
                size,
                flips,
                digest,
                trials: cfg.trials,
                misses,
                false_alarms,
                miss_rate,
            });
        }
    }
    Ok(ReliabilityTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flips_never_alarm() {
        let cfg = ReliabilityConfig {
            sizes: vec![8],
            flips: vec![0],
            digests: vec![1],
            trials: 50,
            seed: 3,
        };
        let t = reliability_study(&cfg).unwrap();
        assert_eq!((t.rows[0].misses, t.rows[0].false_alarms), (0, 0));
    }

    #[test]
    fn deterministic() {
        let cfg = ReliabilityConfig {
            sizes: vec![10, 20],
            flips: vec![1, 3],
            digests: vec![1],
            trials: 40,
            seed: 9,
        };
        assert_eq!(
            reliability_study(&cfg).unwrap(),
            reliability_study(&cfg).unwrap()
        );
    }
}
