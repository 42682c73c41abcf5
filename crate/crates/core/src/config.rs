//! Reproducible run configuration: one structured document covering every
//! module's settings, with a stable digest embedded in all artifacts.

use crate::admm::AdmmSettings;
use crate::gat::TrainConfig;
use crate::micp::MicpConfig;
use crate::oracle::{BnbSettings, DataGenConfig};
use crate::qp::QpSettings;
use crate::scene::{ScenarioConfig, Workspace};
use crate::sim::SimConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("failed to serialize config: {0}")]
    Serialize(String),
}

/// Every tunable in one document. All fields have defaults; commands take the
/// seed on the command line.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub workspace: Workspace,
    pub scenario: ScenarioConfig,
    pub micp: MicpConfig,
    pub qp: QpSettings,
    pub bnb: BnbSettings,
    pub datagen: DataGenRanges,
    pub train: TrainConfig,
    pub admm: AdmmSettings,
    pub sim: SimConfig,
}

/// Scenario-distribution ranges for dataset generation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenRanges {
    /// Inclusive range of robot counts per scenario.
    pub robots_min: usize,
    pub robots_max: usize,
    /// Inclusive range of obstacle counts per scenario.
    pub obstacles_min: usize,
    pub obstacles_max: usize,
    /// Fraction of records assigned to the training split.
    pub train_fraction: f64,
}

impl Default for DataGenRanges {
    fn default() -> Self {
        Self {
            robots_min: 2,
            robots_max: 5,
            obstacles_min: 0,
            obstacles_max: 2,
            train_fraction: 0.9,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(toml::from_str(&text)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Serialize(e.to_string()))
    }

    /// Stable digest: same config, same digest.
    pub fn digest(&self) -> String {
        digest_of(self)
    }

    /// The generation config consumed by the oracle.
    pub fn datagen_config(&self) -> DataGenConfig {
        DataGenConfig {
            robots_range: (self.datagen.robots_min, self.datagen.robots_max),
            obstacles_range: (self.datagen.obstacles_min, self.datagen.obstacles_max),
            workspace: self.workspace.clone(),
            scenario: self.scenario.clone(),
            micp: self.micp.clone(),
            qp: self.qp.clone(),
            bnb: self.bnb.clone(),
            train_fraction: self.datagen.train_fraction,
        }
    }
}

/// Hex SHA-256 of a value's canonical JSON serialization. Struct field order
/// is fixed at compile time, so equal values serialize identically.
pub fn digest_of<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("serializable config");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let out = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in out {
        use std::fmt::Write;
        let _ = write!(hex, "{byte:02x}");
    }
    hex
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = RunConfig::default();
        let b = RunConfig::default();
        assert_eq!(a.digest(), b.digest());
        let mut c = RunConfig::default();
        c.micp.horizon = 7;
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn toml_round_trip() {
        let a = RunConfig::default();
        let text = a.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(a.digest(), back.digest());
    }
}
