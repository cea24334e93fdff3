//! Group signatures with zeroing recovery.
//!
//! Each layer is flattened row-major and cut into consecutive groups. A
//! group's signature is a few bits derived from its bytes; on mismatch the
//! whole group is zeroed. Zeroing rarely reproduces the original bytes, so
//! this defense limits damage but does not restore the model.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gnn::model::GinModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadarChecksum {
    /// XOR of the group bytes, folded down to the signature width. Every
    /// single-bit flip changes exactly one signature bit.
    Fold,
    /// Group sum modulo `2^sig_bits`. A sign-bit flip moves the sum by 128
    /// and therefore escapes 2- and 3-bit signatures.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RadarConfig {
    pub group_size: usize,
    pub sig_bits: u8,
    pub checksum: RadarChecksum,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            sig_bits: 2,
            checksum: RadarChecksum::Fold,
        }
    }
}

impl RadarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(invalid("group size must be at least 1"));
        }
        if !(2..=3).contains(&self.sig_bits) {
            return Err(invalid("signature width must be 2 or 3 bits"));
        }
        Ok(())
    }
}

pub fn signature(group: &[i8], cfg: &RadarConfig) -> u8 {
    let mask = (1u8 << cfg.sig_bits) - 1;
    match cfg.checksum {
        RadarChecksum::Fold => {
            let x = group.iter().fold(0u8, |acc, &v| acc ^ v as u8);
            (0..8)
                .step_by(cfg.sig_bits as usize)
                .fold(0u8, |acc, shift| acc ^ ((x >> shift) & mask))
        }
        RadarChecksum::Additive => {
            let sum: i64 = group.iter().map(|&v| v as i64).sum();
            sum.rem_euclid(1i64 << cfg.sig_bits) as u8
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadarState {
    pub config: RadarConfig,
    /// Per layer, one signature per group.
    pub signatures: Vec<Vec<u8>>,
}

impl RadarState {
    pub fn group_of(&self, row: usize, col: usize, cols: usize) -> usize {
        (row * cols + col) / self.config.group_size
    }
}

pub fn radar_protect(model: &GinModel, cfg: RadarConfig) -> Result<RadarState> {
    cfg.validate()?;
    let signatures = model
        .weights
        .iter()
        .map(|t| {
            t.values()
                .chunks(cfg.group_size)
                .map(|g| signature(g, &cfg))
                .collect()
        })
        .collect();
    Ok(RadarState {
        config: cfg,
        signatures,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RadarReport {
    /// `(layer, group)` pairs whose signature mismatched.
    pub flagged: Vec<(usize, usize)>,
    pub zeroed_cells: usize,
}

impl RadarReport {
    pub fn attack_detected(&self) -> bool {
        !self.flagged.is_empty()
    }
}

/// Recomputes signatures and zeroes every mismatching group.
pub fn radar_detect_and_zero(model: &mut GinModel, state: &RadarState) -> Result<RadarReport> {
    if model.weights.len() != state.signatures.len() {
        return Err(invalid("state does not match the model's layer count"));
    }
    let cfg = state.config;
    let mut report = RadarReport::default();
    for (l, t) in model.weights.iter_mut().enumerate() {
        let cols = t.cols();
        let n_groups = t.len().div_ceil(cfg.group_size);
        if state.signatures[l].len() != n_groups {
            return Err(invalid(format!("layer {l}: signature count mismatch")));
        }
        for g in 0..n_groups {
            let lo = g * cfg.group_size;
            let hi = (lo + cfg.group_size).min(t.len());
            if signature(&t.values()[lo..hi], &cfg) == state.signatures[l][g] {
                continue;
            }
            report.flagged.push((l, g));
            for i in lo..hi {
                let (r, c) = (i / cols, i % cols);
                if t.get(r, c) != 0 {
                    t.set(r, c, 0);
                    report.zeroed_cells += 1;
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::flipped;

    fn additive() -> RadarConfig {
        RadarConfig {
            checksum: RadarChecksum::Additive,
            ..RadarConfig::default()
        }
    }

    #[test]
    fn signature_examples() {
        assert_eq!(signature(&[0; 16], &RadarConfig::default()), 0);
        assert_eq!(signature(&[0; 16], &additive()), 0);
        let g: Vec<i8> = (1..=16).collect();
        assert_eq!(signature(&g, &additive()), 0);
    }

    #[test]
    fn msb_flip_escapes_additive_but_not_fold() {
        let g: Vec<i8> = (1..=16).collect();
        let mut h = g.clone();
        h[4] = flipped(h[4], 7);
        assert_eq!(signature(&g, &additive()), signature(&h, &additive()));
        assert_ne!(
            signature(&g, &RadarConfig::default()),
            signature(&h, &RadarConfig::default())
        );
    }

    #[test]
    fn fold_catches_every_single_flip() {
        for sig_bits in [2, 3] {
            let cfg = RadarConfig {
                sig_bits,
                ..RadarConfig::default()
            };
            let g: Vec<i8> = vec![3, -7, 100, 0, 55, -128, 1, 9];
            for i in 0..g.len() {
                for bit in 0..8 {
                    let mut h = g.clone();
                    h[i] = flipped(h[i], bit);
                    assert_ne!(signature(&g, &cfg), signature(&h, &cfg));
                }
            }
        }
    }
}
