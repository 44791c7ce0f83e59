//! Deterministic multi-device simulation: a world of moving phones and
//! beacons, a partitionable network to one broker, and a scenario runner
//! whose traces depend only on (script, config, seed).

pub mod runner;
pub mod script;
pub mod world;

use awarenet_core::device::DeviceConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use runner::{run_scenario, DeviceTrace, ExpectationResult, Sim, Trace};
pub use script::Script;
pub use world::{radio_scan, World, WorldError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("script: {0}")]
    Script(String),
    #[error("step {step} ({tag}): {message}")]
    Step { step: usize, tag: &'static str, message: String },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("step {step} ({tag}) failed: {actual}")]
    ExpectationFailed { step: usize, tag: &'static str, actual: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub radio_range_m: f64,
    /// Upper bound of the uniform per-axis GPS error.
    pub gps_jitter_m: f64,
    pub device: DeviceConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { radio_range_m: 10.0, gps_jitter_m: 0.0, device: DeviceConfig::default() }
    }
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Script(format!("config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config() {
        let c = SimConfig::from_toml("radio_range_m = 25.0\n[device.presence]\nscan_period_ms = 10000\n").unwrap();
        assert_eq!(c.radio_range_m, 25.0);
        assert_eq!(c.device.presence.scan_period_ms, 10_000);
        assert_eq!(c.device.presence.exit_after_misses, 2);
        assert_eq!(c.device.triggers.geofence_radius_m, 100.0);
        assert!(SimConfig::from_toml("bogus = 1").is_err());
    }
}
