//! Row, column and layer digests of the deployed integer weights.

use serde::{Deserialize, Serialize};

use crate::digest::{cross_digest, dynamic_digest_size, layer_digest, LAYER_DIGEST_BYTES};
use crate::error::{invalid, Result};
use crate::gnn::model::GinModel;
use crate::quant::{QuantTensor, WeightBounds};

use super::honeypot::Cell;

/// How many bytes each row or column digest keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DigestSizing {
    Fixed(usize),
    /// Grown with matrix area up to `max` bytes.
    Dynamic {
        max: usize,
    },
}

impl Default for DigestSizing {
    fn default() -> Self {
        DigestSizing::Fixed(2)
    }
}

impl DigestSizing {
    pub fn size_for(&self, rows: usize, cols: usize) -> Result<usize> {
        match *self {
            DigestSizing::Fixed(d) if (1..=64).contains(&d) => Ok(d),
            DigestSizing::Fixed(d) => Err(invalid(format!("digest size {d} outside 1..=64"))),
            DigestSizing::Dynamic { max } => dynamic_digest_size(rows, cols, max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerLedger {
    pub rows: usize,
    pub cols: usize,
    pub digest_size: usize,
    /// `rows * digest_size` bytes, row `i` at `i * digest_size`.
    pub row_digests: Vec<u8>,
    pub col_digests: Vec<u8>,
    pub layer_digest: [u8; LAYER_DIGEST_BYTES],
    pub bounds: WeightBounds,
}

fn concat_digests(sums: &[i64], d: usize) -> Vec<u8> {
    sums.iter().flat_map(|&s| cross_digest(s, d)).collect()
}

fn mismatches(sums: &[i64], sealed: &[u8], d: usize) -> Vec<usize> {
    sums.iter()
        .enumerate()
        .filter(|&(i, &s)| cross_digest(s, d) != sealed[i * d..(i + 1) * d])
        .map(|(i, _)| i)
        .collect()
}

impl LayerLedger {
    pub fn build(t: &QuantTensor, d: usize) -> Result<Self> {
        Ok(Self {
            rows: t.rows(),
            cols: t.cols(),
            digest_size: d,
            row_digests: concat_digests(&t.row_sums(), d),
            col_digests: concat_digests(&t.col_sums(), d),
            layer_digest: layer_digest(t),
            bounds: t.compute_bounds()?,
        })
    }

    pub fn row_digest(&self, i: usize) -> &[u8] {
        &self.row_digests[i * self.digest_size..(i + 1) * self.digest_size]
    }

    pub fn col_digest(&self, j: usize) -> &[u8] {
        &self.col_digests[j * self.digest_size..(j + 1) * self.digest_size]
    }

    pub fn matches(&self, t: &QuantTensor) -> bool {
        t.dim() == (self.rows, self.cols) && layer_digest(t) == self.layer_digest
    }

    /// Rows and columns whose digests no longer match.
    pub fn localize(&self, t: &QuantTensor) -> (Vec<usize>, Vec<usize>) {
        (
            mismatches(&t.row_sums(), &self.row_digests, self.digest_size),
            mismatches(&t.col_sums(), &self.col_digests, self.digest_size),
        )
    }

    /// `(rows + cols) * d + 4`.
    pub fn hash_bytes(&self) -> usize {
        self.row_digests.len() + self.col_digests.len() + LAYER_DIGEST_BYTES
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashLedger {
    pub layers: Vec<LayerLedger>,
}

pub fn build_ledger(model: &GinModel, sizing: DigestSizing) -> Result<HashLedger> {
    let layers = model
        .weights
        .iter()
        .map(|t| LayerLedger::build(t, sizing.size_for(t.rows(), t.cols())?))
        .collect::<Result<Vec<_>>>()?;
    Ok(HashLedger { layers })
}

fn check_shape(model: &GinModel, ledger: &HashLedger) -> bool {
    model.weights.len() == ledger.layers.len()
}

/// Indices of layers whose 4-byte digest no longer matches.
pub fn tampered_layers(model: &GinModel, ledger: &HashLedger) -> Vec<usize> {
    if !check_shape(model, ledger) {
        return (0..ledger.layers.len().max(model.weights.len())).collect();
    }
    ledger
        .layers
        .iter()
        .zip(&model.weights)
        .enumerate()
        .filter(|(_, (l, t))| !l.matches(t))
        .map(|(i, _)| i)
        .collect()
}

/// True when any layer digest changed.
pub fn monitor(model: &GinModel, ledger: &HashLedger) -> bool {
    !tampered_layers(model, ledger).is_empty()
}

/// True iff every layer digest matches the sealed ledger.
pub fn verify(model: &GinModel, ledger: &HashLedger) -> bool {
    !monitor(model, ledger)
}

/// Mismatching rows and columns of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSuspects {
    pub layer: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl LayerSuspects {
    pub fn candidates(&self) -> impl Iterator<Item = Cell> + '_ {
        self.rows
            .iter()
            .flat_map(move |&r| self.cols.iter().map(move |&c| (self.layer, r, c)))
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.rows.binary_search(&row).is_ok() && self.cols.binary_search(&col).is_ok()
    }
}

/// Layers with at least one mismatching row or column.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SuspectSet {
    pub layers: Vec<LayerSuspects>,
}

impl SuspectSet {
    pub fn is_empty(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.rows.is_empty() || l.cols.is_empty())
    }

    /// Row x column products of every layer.
    pub fn candidates(&self) -> Vec<Cell> {
        self.layers.iter().flat_map(|l| l.candidates()).collect()
    }

    pub fn contains(&self, cell: Cell) -> bool {
        self.layers
            .iter()
            .any(|l| l.layer == cell.0 && l.contains(cell.1, cell.2))
    }
}

/// Suspect rows and columns per layer. Flips whose deltas cancel along a
/// row (or column) leave that sum intact; when the layer digest still
/// mismatches and one axis shows nothing, every index on it is suspect.
pub fn localize(model: &GinModel, ledger: &HashLedger) -> SuspectSet {
    let layers = ledger
        .layers
        .iter()
        .zip(&model.weights)
        .enumerate()
        .filter_map(|(i, (l, t))| {
            let (mut rows, mut cols) = l.localize(t);
            if !l.matches(t) {
                if rows.is_empty() {
                    rows = (0..l.rows).collect();
                }
                if cols.is_empty() {
                    cols = (0..l.cols).collect();
                }
            }
            (!rows.is_empty() || !cols.is_empty()).then_some(LayerSuspects {
                layer: i,
                rows,
                cols,
            })
        })
        .collect();
    SuspectSet { layers }
}

/// Storage of the sealed state relative to the INT8 weights it protects.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    /// Row, column and layer digests.
    pub hash_bytes: usize,
    /// Two bytes of sealed bounds per layer.
    pub bounds_bytes: usize,
    /// Honeypot indices, saliency values and sealed cells.
    pub registry_bytes: usize,
    pub weight_bytes: usize,
}

impl Overhead {
    pub fn hash_ratio(&self) -> f64 {
        self.hash_bytes as f64 / self.weight_bytes as f64
    }

    pub fn total_bytes(&self) -> usize {
        self.hash_bytes + self.bounds_bytes + self.registry_bytes
    }

    pub fn total_ratio(&self) -> f64 {
        self.total_bytes() as f64 / self.weight_bytes as f64
    }
}

/// Digest bytes for one `n x m` layer with `d`-byte cross digests and the
/// ratio to its `n m` weight bytes.
pub fn hash_overhead(n: usize, m: usize, d: usize) -> (usize, f64) {
    let bytes = (n + m) * d + LAYER_DIGEST_BYTES;
    (bytes, bytes as f64 / (n * m) as f64)
}

pub fn ledger_overhead(ledger: &HashLedger, registry_bytes: usize) -> Overhead {
    Overhead {
        hash_bytes: ledger.layers.iter().map(LayerLedger::hash_bytes).sum(),
        bounds_bytes: 2 * ledger.layers.len(),
        registry_bytes,
        weight_bytes: ledger.layers.iter().map(|l| l.rows * l.cols).sum(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_overhead_example() {
        let (bytes, ratio) = hash_overhead(128, 128, 2);
        assert_eq!(bytes, 516);
        assert!((ratio * 100.0 - 3.149).abs() < 5e-4);
        let (b1, _) = hash_overhead(128, 128, 1);
        let (b4, _) = hash_overhead(128, 128, 4);
        assert_eq!(b4 - 4, 2 * (516 - 4));
        assert_eq!(b1 - 4, (516 - 4) / 2);
    }

    #[test]
    fn fixed_sizing_bounds() {
        assert!(DigestSizing::Fixed(0).size_for(2, 2).is_err());
        assert_eq!(
            DigestSizing::Dynamic { max: 8 }.size_for(256, 256).unwrap(),
            2
        );
    }
}
