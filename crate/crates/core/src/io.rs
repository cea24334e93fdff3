//! Versioned little-endian file formats.
//!
//! Every file is `magic (4) | version (u16) | payload length (u64) |
//! payload | Blake2b-8 of everything before it`. Models additionally get a
//! JSON sidecar that mirrors shapes and hyperparameters.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array1;
use serde::Serialize;

use crate::baselines::neuropots::{NeuropotSeal, NeuropotsState};
use crate::baselines::radar::{RadarChecksum, RadarConfig, RadarState};
use crate::crossfire::{HashLedger, HoneypotRegistry, LayerHoneypots, LayerLedger};
use crate::digest::{blake2b, LAYER_DIGEST_BYTES};
use crate::error::{Error, Result};
use crate::gnn::model::{Architecture, GinModel, TensorRole};
use crate::quant::{QuantTensor, WeightBounds};

pub const FORMAT_VERSION: u16 = 1;
pub const MODEL_MAGIC: [u8; 4] = *b"CFGN";
pub const LEDGER_MAGIC: [u8; 4] = *b"CFLG";
pub const REGISTRY_MAGIC: [u8; 4] = *b"CFHP";
pub const RADAR_MAGIC: [u8; 4] = *b"CFRD";
pub const NEUROPOTS_MAGIC: [u8; 4] = *b"CFNP";
const CHECKSUM_BYTES: usize = 8;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn i8(&mut self, v: i8) {
        self.0.push(v as u8);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err("unexpected end of payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn i8(&mut self) -> Result<i8> {
        Ok(self.u8()? as i8)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    /// A count that must fit in the remaining payload at `unit` bytes each.
    fn count(&mut self, unit: usize) -> Result<usize> {
        let n = self.u32()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(format_err(format!("count {n} exceeds payload")));
        }
        Ok(n)
    }
    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err("trailing bytes in payload"));
        }
        Ok(())
    }
}

/// Wraps `payload` in the container envelope.
pub fn seal_container(magic: [u8; 4], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(payload.len() + 22);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let sum = blake2b(CHECKSUM_BYTES, &out);
    out.extend_from_slice(&sum);
    out
}

/// Checks magic, version, length and checksum; returns the payload.
pub fn open_container(magic: [u8; 4], bytes: &[u8]) -> Result<&[u8]> {
    const HEADER: usize = 4 + 2 + 8;
    if bytes.len() < HEADER + CHECKSUM_BYTES {
        return Err(format_err("file too short"));
    }
    if bytes[..4] != magic {
        return Err(format_err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[..4]),
            String::from_utf8_lossy(&magic)
        )));
    }
    let (body, sum) = bytes.split_at(bytes.len() - CHECKSUM_BYTES);
    if blake2b(CHECKSUM_BYTES, body) != sum {
        return Err(format_err("checksum mismatch"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    if len != body.len() - HEADER {
        return Err(format_err("payload length mismatch"));
    }
    Ok(&body[HEADER..])
}

pub fn encode_model(m: &GinModel) -> Vec<u8> {
    let mut w = Writer::default();
    let a = m.arch;
    w.u32(a.depth);
    w.u32(a.in_dim);
    w.u32(a.hidden);
    w.u32(a.tasks);
    w.f64(a.eps);
    w.u32(m.weights.len());
    for ((t, b), g) in m.weights.iter().zip(&m.biases).zip(&m.gains) {
        w.u32(t.rows());
        w.u32(t.cols());
        w.f64(t.scale());
        w.i8(t.qmin());
        w.i8(t.qmax());
        w.bytes(&t.as_bytes());
        b.iter().for_each(|&v| w.f64(v));
        g.iter().for_each(|&v| w.f64(v));
    }
    w.u64(m.seed);
    seal_container(MODEL_MAGIC, &w.0)
}

pub fn decode_model(bytes: &[u8]) -> Result<GinModel> {
    let mut r = Reader {
        buf: open_container(MODEL_MAGIC, bytes)?,
        pos: 0,
    };
    let (depth, in_dim, hidden, tasks) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let mut arch = Architecture::new(in_dim, hidden, depth, tasks)?;
    arch.eps = r.f64()?;
    let n = r.u32()?;
    if n != arch.n_tensors() {
        return Err(format_err(format!(
            "expected {} tensors, found {n}",
            arch.n_tensors()
        )));
    }
    let (mut weights, mut biases, mut gains) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let (rows, cols) = (r.u32()?, r.u32()?);
        if (rows, cols) != arch.tensor_shape(i) {
            return Err(format_err(format!("tensor {i} has shape {rows}x{cols}")));
        }
        let (scale, qmin, qmax) = (r.f64()?, r.i8()?, r.i8()?);
        let values = r.take(rows * cols)?.iter().map(|&b| b as i8).collect();
        weights.push(QuantTensor::from_raw(
            rows, cols, values, scale, qmin, qmax,
        )?);
        biases.push(Array1::from(
            (0..rows).map(|_| r.f64()).collect::<Result<Vec<_>>>()?,
        ));
        gains.push(Array1::from(
            (0..cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?,
        ));
    }
    let seed = r.u64()?;
    r.finish()?;
    Ok(GinModel {
        arch,
        weights,
        biases,
        gains,
        seed,
    })
}

#[derive(Serialize)]
struct TensorInfo {
    index: usize,
    role: String,
    rows: usize,
    cols: usize,
    scale: f64,
    qmin: i8,
    qmax: i8,
}

#[derive(Serialize)]
struct ModelSidecar {
    format: &'static str,
    version: u16,
    architecture: Architecture,
    tensors: Vec<TensorInfo>,
    seed: u64,
}

pub fn model_sidecar(m: &GinModel) -> Result<String> {
    let tensors = m
        .weights
        .iter()
        .enumerate()
        .map(|(i, t)| TensorInfo {
            index: i,
            role: match m.arch.role(i) {
                TensorRole::MlpIn(k) => format!("block{k}.mlp_in"),
                TensorRole::MlpOut(k) => format!("block{k}.mlp_out"),
                TensorRole::Head => "head".into(),
            },
            rows: t.rows(),
            cols: t.cols(),
            scale: t.scale(),
            qmin: t.qmin(),
            qmax: t.qmax(),
        })
        .collect();
    let car = ModelSidecar {
        format: "CFGN",
        version: FORMAT_VERSION,
        architecture: m.arch,
        tensors,
        seed: m.seed,
    };
    Ok(serde_json::to_string_pretty(&car)?)
}

/// Writes the model and its `.json` sidecar next to it.
pub fn write_model(path: &Path, m: &GinModel) -> Result<()> {
    fs::write(path, encode_model(m))?;
    fs::write(path.with_extension("json"), model_sidecar(m)?)?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<GinModel> {
    decode_model(&fs::read(path)?)
}

pub fn encode_ledger(l: &HashLedger) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(l.layers.len());
    for layer in &l.layers {
        w.u32(layer.rows);
        w.u32(layer.cols);
        w.u32(layer.digest_size);
        w.bytes(&layer.row_digests);
        w.bytes(&layer.col_digests);
        w.bytes(&layer.layer_digest);
        w.i8(layer.bounds.lower);
        w.i8(layer.bounds.upper);
    }
    seal_container(LEDGER_MAGIC, &w.0)
}

pub fn decode_ledger(bytes: &[u8]) -> Result<HashLedger> {
    let mut r = Reader {
        buf: open_container(LEDGER_MAGIC, bytes)?,
        pos: 0,
    };
    let n = r.count(14)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let (rows, cols, d) = (r.u32()?, r.u32()?, r.u32()?);
        if d == 0 || d > 64 {
            return Err(format_err(format!("digest size {d} out of range")));
        }
        let row_digests = r.take(rows * d)?.to_vec();
        let col_digests = r.take(cols * d)?.to_vec();
        let mut layer_digest = [0u8; LAYER_DIGEST_BYTES];
        layer_digest.copy_from_slice(r.take(LAYER_DIGEST_BYTES)?);
        let bounds = WeightBounds::new(r.i8()?, r.i8()?)?;
        layers.push(LayerLedger {
            rows,
            cols,
            digest_size: d,
            row_digests,
            col_digests,
            layer_digest,
            bounds,
        });
    }
    r.finish()?;
    Ok(HashLedger { layers })
}

pub fn encode_registry(reg: &HoneypotRegistry) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(reg.layers.len());
    for l in &reg.layers {
        w.u32(l.tensor);
        w.f64(l.gamma_l);
        w.u32(l.indices.len());
        l.indices.iter().for_each(|&i| w.u32(i));
        l.saliency.iter().for_each(|&s| w.f64(s));
    }
    w.u32(reg.n_sealed());
    for ((t, row, col), v) in reg.sealed_entries() {
        w.u32(t);
        w.u32(row);
        w.u32(col);
        w.i8(v);
    }
    seal_container(REGISTRY_MAGIC, &w.0)
}

pub fn decode_registry(bytes: &[u8]) -> Result<HoneypotRegistry> {
    let mut r = Reader {
        buf: open_container(REGISTRY_MAGIC, bytes)?,
        pos: 0,
    };
    let n = r.count(16)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let tensor = r.u32()?;
        let gamma_l = r.f64()?;
        let k = r.count(12)?;
        let indices = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let saliency = (0..k).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        layers.push(LayerHoneypots {
            tensor,
            indices,
            saliency,
            gamma_l,
        });
    }
    let m = r.count(13)?;
    let mut sealed = BTreeMap::new();
    for _ in 0..m {
        let cell = (r.u32()?, r.u32()?, r.u32()?);
        sealed.insert(cell, r.i8()?);
    }
    r.finish()?;
    Ok(HoneypotRegistry::from_parts(layers, sealed))
}

pub fn encode_radar(s: &RadarState) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(s.config.group_size);
    w.u8(s.config.sig_bits);
    w.u8(match s.config.checksum {
        RadarChecksum::Fold => 0,
        RadarChecksum::Additive => 1,
    });
    w.u32(s.signatures.len());
    for sig in &s.signatures {
        w.u32(sig.len());
        w.bytes(sig);
    }
    seal_container(RADAR_MAGIC, &w.0)
}

pub fn decode_radar(bytes: &[u8]) -> Result<RadarState> {
    let mut r = Reader {
        buf: open_container(RADAR_MAGIC, bytes)?,
        pos: 0,
    };
    let group_size = r.u32()?;
    let sig_bits = r.u8()?;
    let checksum = match r.u8()? {
        0 => RadarChecksum::Fold,
        1 => RadarChecksum::Additive,
        other => return Err(format_err(format!("unknown checksum kind {other}"))),
    };
    let config = RadarConfig {
        group_size,
        sig_bits,
        checksum,
    };
    config.validate()?;
    let n = r.count(4)?;
    let mut signatures = Vec::with_capacity(n);
    for _ in 0..n {
        let k = r.count(1)?;
        signatures.push(r.take(k)?.to_vec());
    }
    r.finish()?;
    Ok(RadarState { config, signatures })
}

pub fn encode_neuropots(s: &NeuropotsState) -> Vec<u8> {
    let mut w = Writer::default();
    w.f64(s.gamma);
    w.u32(s.seals.len());
    for seal in &s.seals {
        w.u32(seal.tensor);
        w.u32(seal.neuron);
        w.u8(seal.checksum);
        w.u32(seal.cells.len());
        for &((t, row, col), v) in &seal.cells {
            w.u32(t);
            w.u32(row);
            w.u32(col);
            w.i8(v);
        }
    }
    seal_container(NEUROPOTS_MAGIC, &w.0)
}

pub fn decode_neuropots(bytes: &[u8]) -> Result<NeuropotsState> {
    let mut r = Reader {
        buf: open_container(NEUROPOTS_MAGIC, bytes)?,
        pos: 0,
    };
    let gamma = r.f64()?;
    let n = r.count(13)?;
    let mut seals = Vec::with_capacity(n);
    for _ in 0..n {
        let (tensor, neuron, checksum) = (r.u32()?, r.u32()?, r.u8()?);
        let k = r.count(13)?;
        let cells = (0..k)
            .map(|_| Ok(((r.u32()?, r.u32()?, r.u32()?), r.i8()?)))
            .collect::<Result<Vec<_>>>()?;
        seals.push(NeuropotSeal {
            tensor,
            neuron,
            cells,
            checksum,
        });
    }
    r.finish()?;
    Ok(NeuropotsState { gamma, seals })
}
