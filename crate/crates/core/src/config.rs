//! Cluster configuration file (TOML).
//!
//! ```toml
//! version = 1
//! controller_addr = "127.0.0.1:7400"
//! noise = false
//!
//! [scheduler]
//! policy = "edf"
//! fair = true
//!
//! [controller]
//! min_replicas = 1
//!
//! [profiles.small-gpu]
//! name = "small-gpu"
//! kind = "virtual-gpu"
//! # ... every DeviceProfile field
//!
//! [[workers]]
//! id = "w1"
//! profile = "virtual-gpu"
//! ```
//!
//! Workers may name a profile from the `[profiles]` table or a built-in one
//! (`virtual-gpu`, `virtual-cpu-core`, `virtual-accelerator`, `cpu-reference`).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::ControllerConfig;
use crate::predictor::{DeviceProfile, NoiseModel, ProfileError};
use crate::worker::WorkerConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerDef {
    pub id: String,
    pub profile: String,
    /// Overrides `scheduler.host_cache_bytes` for this worker.
    pub host_cache_bytes: Option<u64>,
    /// Listen address in networked mode.
    pub addr: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub version: u32,
    pub controller_addr: String,
    /// Multiplicative lognormal noise on execution times.
    pub noise: bool,
    /// Ratio of the noise's 99.9th percentile to its mean.
    pub noise_p999_ratio: f64,
    pub scheduler: WorkerConfig,
    pub controller: ControllerConfig,
    pub profiles: BTreeMap<String, DeviceProfile>,
    pub workers: Vec<WorkerDef>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            controller_addr: "127.0.0.1:7400".into(),
            noise: false,
            noise_p999_ratio: crate::predictor::NOISE_P999_RATIO,
            scheduler: WorkerConfig::default(),
            controller: ControllerConfig::default(),
            profiles: BTreeMap::new(),
            workers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unsupported config version {0} (expected {CONFIG_VERSION})")]
    Version(u32),
    #[error("worker `{worker}` references undefined profile `{profile}`")]
    UndefinedProfile { worker: String, profile: String },
    #[error("duplicate worker id `{0}`")]
    DuplicateWorker(String),
    #[error("address `{0}` is used more than once")]
    DuplicateAddress(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("{0}")]
    Invalid(String),
}

impl ClusterConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("cluster config serializes")
    }

    pub fn profile(&self, name: &str) -> Option<DeviceProfile> {
        self.profiles.get(name).cloned().or_else(|| DeviceProfile::builtin(name))
    }

    pub fn noise_model(&self) -> NoiseModel {
        if self.noise {
            NoiseModel::with_p999_ratio(self.noise_p999_ratio)
        } else {
            NoiseModel::NONE
        }
    }

    pub fn worker_config(&self, def: &WorkerDef) -> WorkerConfig {
        let mut c = self.scheduler.clone();
        if let Some(b) = def.host_cache_bytes {
            c.host_cache_bytes = b;
        }
        c
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.version != CONFIG_VERSION {
            return Err(ConfigError::Version(self.version));
        }
        for p in self.profiles.values() {
            p.validate()?;
        }
        let mut ids = BTreeSet::new();
        let mut addrs = BTreeSet::from([self.controller_addr.clone()]);
        for w in &self.workers {
            if !ids.insert(&w.id) {
                return Err(ConfigError::DuplicateWorker(w.id.clone()));
            }
            if self.profile(&w.profile).is_none() {
                return Err(ConfigError::UndefinedProfile {
                    worker: w.id.clone(),
                    profile: w.profile.clone(),
                });
            }
            if let Some(a) = &w.addr {
                if !addrs.insert(a.clone()) {
                    return Err(ConfigError::DuplicateAddress(a.clone()));
                }
            }
        }
        if self.noise && !(self.noise_p999_ratio > 1.0) {
            return Err(ConfigError::Invalid("noise_p999_ratio must exceed 1".into()));
        }
        let c = &self.controller;
        if !(c.utilization_target > 0.0 && c.utilization_target <= 1.0) {
            return Err(ConfigError::Invalid("controller.utilization_target must be in (0, 1]".into()));
        }
        if !(c.demand_window_ms > 0.0 && c.heartbeat_ms > 0.0) {
            return Err(ConfigError::Invalid("controller windows must be positive".into()));
        }
        if self.scheduler.admission_ceiling_ms <= 0.0 {
            return Err(ConfigError::Invalid("scheduler.admission_ceiling_ms must be positive".into()));
        }
        Ok(())
    }
}
