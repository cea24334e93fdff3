//! Bit-flip attacks on INT8 graph isomorphism networks and the defenses
//! that detect, localize and repair them.

pub mod attack;
pub mod baselines;
pub mod crossfire;
pub mod digest;
pub mod error;
pub mod gnn;
pub mod harness;
pub mod io;
pub mod quant;

pub use error::{Error, Result};
pub use quant::{BitFlipEvent, QuantTensor, WeightBounds};
