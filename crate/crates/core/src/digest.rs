//! Blake2b digests over quantized weights.

use blake2b_simd::Params;

use crate::error::{invalid, Result};
use crate::quant::QuantTensor;

/// Size of the whole-matrix verification digest, in bytes.
pub const LAYER_DIGEST_BYTES: usize = 4;

/// Blake2b with a `len`-byte output (1 to 64).
pub fn blake2b(len: usize, bytes: &[u8]) -> Vec<u8> {
    Params::new()
        .hash_length(len)
        .hash(bytes)
        .as_bytes()
        .to_vec()
}

/// Digest of a row or column sum, serialized as little-endian i64.
pub fn cross_digest(sum: i64, d: usize) -> Vec<u8> {
    blake2b(d, &sum.to_le_bytes())
}

/// `len`-byte digest of a tensor's raw values in row-major order.
pub fn tensor_digest(t: &QuantTensor, len: usize) -> Vec<u8> {
    blake2b(len, &t.as_bytes())
}

pub fn layer_digest(t: &QuantTensor) -> [u8; LAYER_DIGEST_BYTES] {
    let mut out = [0u8; LAYER_DIGEST_BYTES];
    out.copy_from_slice(&tensor_digest(t, LAYER_DIGEST_BYTES));
    out
}

/// Cross-digest size grown with matrix area: `min(max(1, floor(log2(n m) / 8)), max_d)`.
pub fn dynamic_digest_size(rows: usize, cols: usize, max_d: usize) -> Result<usize> {
    if rows == 0 || cols == 0 {
        return Err(invalid("matrix must be non-empty"));
    }
    if max_d == 0 || max_d > 64 {
        return Err(invalid("maximum digest size must lie in 1..=64"));
    }
    let area = (rows as f64) * (cols as f64);
    let d = (area.log2() / 8.0).floor() as usize;
    Ok(d.clamp(1, max_d))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dynamic_sizes() {
        assert_eq!(dynamic_digest_size(256, 256, 8).unwrap(), 2);
        assert_eq!(dynamic_digest_size(16, 16, 8).unwrap(), 1);
        assert_eq!(dynamic_digest_size(2, 2, 8).unwrap(), 1);
        assert_eq!(dynamic_digest_size(1 << 20, 1 << 20, 3).unwrap(), 3);
        assert!(dynamic_digest_size(0, 3, 8).is_err());
    }

    #[test]
    fn digest_lengths() {
        assert_eq!(cross_digest(-5, 3).len(), 3);
        assert_ne!(cross_digest(1, 8), cross_digest(2, 8));
        let t = QuantTensor::zeros(2, 2, 1.0);
        assert_eq!(layer_digest(&t).len(), 4);
    }
}
