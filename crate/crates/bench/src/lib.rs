//! Scenarios shared by the benchmarks.

use stagepool_core::{named_preset, SimConfig};

/// A named preset trimmed to `duration` seconds at the given arrival rate.
pub fn scenario(preset: &str, rate: f64, duration: f64) -> SimConfig {
    let mut cfg = named_preset(preset).unwrap_or_else(|| panic!("unknown preset {preset}"));
    cfg.arrivals.rate = rate;
    cfg.duration = duration;
    cfg.warmup = duration / 10.0;
    cfg
}
