//! Comparison defenses: RADAR-style group signatures and NeuroPots honeypots.

pub mod neuropots;
pub mod radar;

pub use neuropots::{
    neuropots_detect_and_refresh, neuropots_protect, HoneypotSelection, NeuropotsConfig,
    NeuropotsReport, NeuropotsState,
};
pub use radar::{
    radar_detect_and_zero, radar_protect, RadarChecksum, RadarConfig, RadarReport, RadarState,
};
