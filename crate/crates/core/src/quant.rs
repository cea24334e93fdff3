//! INT8 scale quantization and two's-complement bit manipulation.
//!
//! Weights are stored as `i8` with a per-tensor scale `s` and clip bounds
//! `[a, b]`:
//!
//! ```text
//! quantize:   q = clip(round(w / s), a, b)     (ties away from zero)
//! dequantize: w = q * s
//! ```
//!
//! Bit 7 is the sign bit. Flips are applied to the raw byte, so a flipped
//! value may leave `[a, b]`; that is how out-of-distribution weights arise.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Symmetric bound used by the per-layer max-abs scale fit.
pub const SYMMETRIC_QMAX: i8 = 127;

/// An `rows x cols` matrix of INT8 values with its scale and clip range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantTensor {
    rows: usize,
    cols: usize,
    values: Vec<i8>,
    scale: f64,
    qmin: i8,
    qmax: i8,
}

/// A single committed bit flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitFlipEvent {
    pub layer: usize,
    pub row: usize,
    pub col: usize,
    pub bit: u8,
    pub before: i8,
    pub after: i8,
}

/// Value range `[lower, upper]` observed in a quantized layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightBounds {
    pub lower: i8,
    pub upper: i8,
}

/// Outcome of [`msb_unset_repair`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsbRepair {
    pub value: i8,
    pub changed: bool,
    pub in_range: bool,
}

impl WeightBounds {
    pub fn new(lower: i8, upper: i8) -> Result<Self> {
        if lower > upper {
            return Err(invalid(format!("bounds lower {lower} > upper {upper}")));
        }
        Ok(Self { lower, upper })
    }

    pub fn contains(&self, value: i8) -> bool {
        self.lower <= value && value <= self.upper
    }
}

fn check_range(scale: f64, qmin: i8, qmax: i8) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(invalid(format!(
            "scale must be positive and finite, got {scale}"
        )));
    }
    if qmin > qmax {
        return Err(invalid(format!("qmin {qmin} > qmax {qmax}")));
    }
    Ok(())
}

/// Quantizes a real matrix with the given scale and clip range.
pub fn quantize(weights: &Array2<f64>, scale: f64, qmin: i8, qmax: i8) -> Result<QuantTensor> {
    check_range(scale, qmin, qmax)?;
    let (rows, cols) = weights.dim();
    let mut values = Vec::with_capacity(rows * cols);
    for &w in weights.iter() {
        if !w.is_finite() {
            return Err(invalid("non-finite weight"));
        }
        // f64::round rounds half away from zero.
        let q = (w / scale).round().clamp(qmin as f64, qmax as f64);
        values.push(q as i8);
    }
    Ok(QuantTensor {
        rows,
        cols,
        values,
        scale,
        qmin,
        qmax,
    })
}

/// Max-abs symmetric scale: `max|W| / 127`, or 1.0 for an all-zero matrix.
pub fn symmetric_scale(weights: &Array2<f64>) -> f64 {
    let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max_abs > 0.0 {
        max_abs / SYMMETRIC_QMAX as f64
    } else {
        1.0
    }
}

/// Quantizes with the symmetric max-abs scale and range `[-127, 127]`.
pub fn quantize_symmetric(weights: &Array2<f64>) -> Result<QuantTensor> {
    quantize(
        weights,
        symmetric_scale(weights),
        -SYMMETRIC_QMAX,
        SYMMETRIC_QMAX,
    )
}

/// Straight-through gradient for the quantizer.
///
/// The upstream gradient passes where `qmin <= preclip / scale <= qmax` and is
/// zeroed in the clipped region.
pub fn ste_backward(
    upstream: &Array2<f64>,
    preclip: &Array2<f64>,
    qmin: i8,
    qmax: i8,
    scale: f64,
) -> Result<Array2<f64>> {
    check_range(scale, qmin, qmax)?;
    if upstream.dim() != preclip.dim() {
        return Err(invalid(format!(
            "shape mismatch: upstream {:?} vs preclip {:?}",
            upstream.dim(),
            preclip.dim()
        )));
    }
    let (lo, hi) = (qmin as f64, qmax as f64);
    let mut out = upstream.clone();
    ndarray::Zip::from(&mut out).and(preclip).for_each(|g, &w| {
        let x = w / scale;
        if !(lo <= x && x <= hi) {
            *g = 0.0;
        }
    });
    Ok(out)
}

impl QuantTensor {
    /// Builds a tensor from raw values. Values outside `[qmin, qmax]` are rejected.
    pub fn from_values(
        rows: usize,
        cols: usize,
        values: Vec<i8>,
        scale: f64,
        qmin: i8,
        qmax: i8,
    ) -> Result<Self> {
        check_range(scale, qmin, qmax)?;
        if values.len() != rows * cols {
            return Err(invalid(format!(
                "expected {} values for {rows}x{cols}, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v < qmin || v > qmax) {
            return Err(invalid(format!("value {v} outside [{qmin}, {qmax}]")));
        }
        Ok(Self {
            rows,
            cols,
            values,
            scale,
            qmin,
            qmax,
        })
    }

    /// Like [`QuantTensor::from_values`] but accepts values outside the clip
    /// range, as found in attacked weights loaded from disk.
    pub fn from_raw(
        rows: usize,
        cols: usize,
        values: Vec<i8>,
        scale: f64,
        qmin: i8,
        qmax: i8,
    ) -> Result<Self> {
        check_range(scale, qmin, qmax)?;
        if values.len() != rows * cols {
            return Err(invalid("value count does not match dims"));
        }
        Ok(Self {
            rows,
            cols,
            values,
            scale,
            qmin,
            qmax,
        })
    }

    pub fn zeros(rows: usize, cols: usize, scale: f64) -> Self {
        Self {
            rows,
            cols,
            values: vec![0; rows * cols],
            scale,
            qmin: -SYMMETRIC_QMAX,
            qmax: SYMMETRIC_QMAX,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dim(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn qmin(&self) -> i8 {
        self.qmin
    }

    pub fn qmax(&self) -> i8 {
        self.qmax
    }

    /// Row-major values.
    pub fn values(&self) -> &[i8] {
        &self.values
    }

    /// Row-major values reinterpreted as raw bytes.
    pub fn as_bytes(&self) -> Vec<u8> {
        self.values.iter().map(|&v| v as u8).collect()
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.values[row * self.cols + col]
    }

    /// Overwrites one cell. The value is stored verbatim, even outside the clip range.
    pub fn set(&mut self, row: usize, col: usize, value: i8) {
        self.values[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[i8] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    fn check_index(&self, row: usize, col: usize) -> Result<()> {
        if row >= self.rows || col >= self.cols {
            return Err(invalid(format!(
                "index ({row}, {col}) out of range for {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// XORs bit `bit` of cell `(row, col)` and returns `(before, after)`.
    pub fn flip_bit(&mut self, row: usize, col: usize, bit: u8) -> Result<(i8, i8)> {
        self.check_index(row, col)?;
        if bit > 7 {
            return Err(invalid(format!("bit index {bit} not in [0, 7]")));
        }
        let idx = row * self.cols + col;
        let before = self.values[idx];
        let after = flipped(before, bit);
        self.values[idx] = after;
        Ok((before, after))
    }

    pub fn dequantize(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.rows, self.cols), |(r, c)| {
            self.values[r * self.cols + c] as f64 * self.scale
        })
    }

    pub fn compute_bounds(&self) -> Result<WeightBounds> {
        let lower = self.values.iter().copied().min();
        let upper = self.values.iter().copied().max();
        match (lower, upper) {
            (Some(lower), Some(upper)) => Ok(WeightBounds { lower, upper }),
            _ => Err(invalid("cannot compute bounds of an empty tensor")),
        }
    }

    /// Signed sum of each row, in 64-bit arithmetic.
    pub fn row_sums(&self) -> Vec<i64> {
        self.values
            .chunks(self.cols.max(1))
            .take(self.rows)
            .map(|r| r.iter().map(|&v| v as i64).sum())
            .collect()
    }

    /// Signed sum of each column, in 64-bit arithmetic.
    pub fn col_sums(&self) -> Vec<i64> {
        let mut sums = vec![0i64; self.cols];
        for row in self.values.chunks(self.cols.max(1)).take(self.rows) {
            for (s, &v) in sums.iter_mut().zip(row) {
                *s += v as i64;
            }
        }
        sums
    }

    /// Number of nonzero entries.
    pub fn nnz(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }
}

/// `value` with bit `bit` toggled.
pub fn flipped(value: i8, bit: u8) -> i8 {
    ((value as u8) ^ (1u8 << bit)) as i8
}

/// Repairs an out-of-range value by clearing set bits from the MSB down.
///
/// Before each bit is examined the scan stops if the value already lies in
/// `bounds`. Bits are only ever cleared, never set.
pub fn msb_unset_repair(value: i8, bounds: WeightBounds) -> MsbRepair {
    let mut bits = value as u8;
    for bit in (0..8u8).rev() {
        if bounds.contains(bits as i8) {
            break;
        }
        bits &= !(1u8 << bit);
    }
    let repaired = bits as i8;
    MsbRepair {
        value: repaired,
        changed: repaired != value,
        in_range: bounds.contains(repaired),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn quantize_examples() {
        let t = quantize(&array![[0.0]], 0.5, -128, 127).unwrap();
        assert_eq!(t.values(), &[0]);

        // -0.26 / 0.5 = -0.52 rounds to -1
        let t = quantize(&array![[1.0, -0.26]], 0.5, -128, 127).unwrap();
        assert_eq!(t.values(), &[2, -1]);

        let t = quantize(&array![[100.0]], 0.5, -128, 127).unwrap();
        assert_eq!(t.values(), &[127]);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        let t = quantize(&array![[0.25, -0.25, 0.75]], 0.5, -128, 127).unwrap();
        assert_eq!(t.values(), &[1, -1, 2]);
    }

    #[test]
    fn quantize_rejects_bad_input() {
        assert!(quantize(&array![[1.0]], 0.0, -128, 127).is_err());
        assert!(quantize(&array![[1.0]], -1.0, -128, 127).is_err());
        assert!(quantize(&array![[f64::NAN]], 0.5, -128, 127).is_err());
        assert!(quantize(&array![[f64::INFINITY]], 0.5, -128, 127).is_err());
        assert!(quantize(&array![[1.0]], 0.5, 10, -10).is_err());
    }

    #[test]
    fn dequantize_examples() {
        let t = QuantTensor::from_values(1, 1, vec![0], 0.5, -128, 127).unwrap();
        assert_eq!(t.dequantize(), array![[0.0]]);
        let t = QuantTensor::from_values(1, 2, vec![2, -1], 0.5, -128, 127).unwrap();
        assert_eq!(t.dequantize(), array![[1.0, -0.5]]);
    }

    #[test]
    fn ste_examples() {
        let up = array![[1.0, -2.0], [3.0, 0.5]];
        let pre = array![[0.1, -0.2], [0.3, 0.0]];
        assert_eq!(ste_backward(&up, &pre, -127, 127, 0.01).unwrap(), up);

        let pre = array![[5.0, -0.2], [0.3, 0.0]];
        // 5.0 / 0.01 = 500 > 127
        let g = ste_backward(&up, &pre, -127, 127, 0.01).unwrap();
        assert_eq!(g, array![[0.0, -2.0], [3.0, 0.5]]);

        let zero = Array2::zeros((2, 2));
        assert_eq!(ste_backward(&zero, &pre, -127, 127, 0.01).unwrap(), zero);

        assert!(ste_backward(&up, &array![[1.0]], -127, 127, 0.01).is_err());
    }

    #[test]
    fn flip_examples() {
        let mut t = QuantTensor::from_values(1, 2, vec![0, 6], 1.0, -128, 127).unwrap();
        assert_eq!(t.flip_bit(0, 0, 0).unwrap(), (0, 1));
        assert_eq!(t.flip_bit(0, 1, 7).unwrap(), (6, -122));
        assert_eq!(t.flip_bit(0, 1, 7).unwrap(), (-122, 6));
        assert!(t.flip_bit(1, 0, 0).is_err());
        assert!(t.flip_bit(0, 2, 0).is_err());
        assert!(t.flip_bit(0, 0, 8).is_err());
    }

    #[test]
    fn flip_may_leave_clip_range() {
        let mut t = QuantTensor::from_values(1, 1, vec![0], 1.0, -127, 127).unwrap();
        t.flip_bit(0, 0, 7).unwrap();
        assert_eq!(t.get(0, 0), -128);
    }

    #[test]
    fn bounds_examples() {
        let b = |v: Vec<i8>| {
            QuantTensor::from_values(1, v.len(), v, 1.0, -128, 127)
                .unwrap()
                .compute_bounds()
                .unwrap()
        };
        assert_eq!(
            b(vec![-50, 60]),
            WeightBounds {
                lower: -50,
                upper: 60
            }
        );
        assert_eq!(b(vec![0]), WeightBounds { lower: 0, upper: 0 });
        assert_eq!(
            b(vec![5, -3, 7]),
            WeightBounds {
                lower: -3,
                upper: 7
            }
        );
        let empty = QuantTensor::from_values(0, 0, vec![], 1.0, -128, 127).unwrap();
        assert!(empty.compute_bounds().is_err());
    }

    #[test]
    fn msb_repair_worked_example() {
        let bounds = WeightBounds::new(-50, 60).unwrap();
        // 11000110 -> 01000110 (70) -> 00000110 (6)
        let r = msb_unset_repair(-58, bounds);
        assert_eq!(
            r,
            MsbRepair {
                value: 6,
                changed: true,
                in_range: true
            }
        );

        let r = msb_unset_repair(14, bounds);
        assert_eq!(
            r,
            MsbRepair {
                value: 14,
                changed: false,
                in_range: true
            }
        );
    }

    #[test]
    fn msb_repair_traces() {
        let bounds = WeightBounds::new(1, 10).unwrap();
        // 40 = 00101000: clearing bit 5 gives 8, which is in range.
        let r = msb_unset_repair(40, bounds);
        assert_eq!(
            r,
            MsbRepair {
                value: 8,
                changed: true,
                in_range: true
            }
        );
        // 48 = 00110000 -> 16 -> 0, and 0 < 1.
        let r = msb_unset_repair(48, bounds);
        assert_eq!(
            r,
            MsbRepair {
                value: 0,
                changed: true,
                in_range: false
            }
        );
    }

    #[test]
    fn row_and_col_sums() {
        let t = QuantTensor::from_values(2, 3, vec![1, 2, 3, -4, 5, 127], 1.0, -128, 127).unwrap();
        assert_eq!(t.row_sums(), vec![6, 128]);
        assert_eq!(t.col_sums(), vec![-3, 7, 130]);
    }

    fn arb_bounds() -> impl Strategy<Value = WeightBounds> {
        (any::<i8>(), any::<i8>()).prop_map(|(a, b)| WeightBounds {
            lower: a.min(b),
            upper: a.max(b),
        })
    }

    proptest! {
        #[test]
        fn round_trip_within_half_scale(
            vals in proptest::collection::vec(-127.0f64..127.0, 1..40),
            scale in 0.001f64..10.0,
        ) {
            let w = Array2::from_shape_vec((1, vals.len()), vals.iter().map(|v| v * scale).collect()).unwrap();
            let t = quantize(&w, scale, -128, 127).unwrap();
            let back = t.dequantize();
            for (a, b) in back.iter().zip(w.iter()) {
                prop_assert!((a - b).abs() <= scale / 2.0 + 1e-12 * scale.max(1.0) * 128.0);
            }
        }

        #[test]
        fn flip_is_involution(v in any::<i8>(), bit in 0u8..8) {
            let mut t = QuantTensor::from_raw(1, 1, vec![v], 1.0, -128, 127).unwrap();
            let (before, after) = t.flip_bit(0, 0, bit).unwrap();
            prop_assert_eq!(after, ((before as u8) ^ (1 << bit)) as i8);
            t.flip_bit(0, 0, bit).unwrap();
            prop_assert_eq!(t.get(0, 0), v);
        }

        #[test]
        fn msb_repair_only_clears_bits(v in any::<i8>(), bounds in arb_bounds()) {
            let r = msb_unset_repair(v, bounds);
            prop_assert_eq!((r.value as u8) & !(v as u8), 0);
            prop_assert_eq!(r.in_range, bounds.contains(r.value));
            if bounds.contains(v) {
                prop_assert_eq!(r.value, v);
                prop_assert!(!r.changed);
            }
        }

        #[test]
        fn bounds_bracket_all(vals in proptest::collection::vec(any::<i8>(), 1..64)) {
            let t = QuantTensor::from_raw(1, vals.len(), vals.clone(), 1.0, -128, 127).unwrap();
            let b = t.compute_bounds().unwrap();
            prop_assert!(vals.iter().all(|&v| b.contains(v)));
        }
    }
}
