//! Scenario files: cluster, models, workloads, faults and optional
//! baseline and sweep settings, in one TOML document.

use std::path::{Path, PathBuf};

use infershare_core::config::{ClusterConfig, ConfigError};
use infershare_core::manifest::{bundled, parse_manifest, ModelManifest};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::WorkloadSpec;

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub tenant: String,
    pub name: String,
    /// A bundled manifest (`resnet18`, `tiny-mlp`, ...).
    pub bundled: Option<String>,
    /// A manifest document, relative to the scenario file.
    pub path: Option<PathBuf>,
    /// Synthetic model costing `flops` per sample.
    pub flops: Option<usize>,
    /// Overrides the declared footprint.
    pub footprint_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// The worker stops: in-flight work is lost and heartbeats cease.
    Fail,
    /// The worker comes back empty.
    Rejoin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Fault {
    pub worker: String,
    pub at_s: f64,
    pub kind: FaultKind,
}

/// One dedicated VM per model, started on demand and torn down when idle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VmBaseline {
    pub profile: String,
    #[serde(default = "default_cold_start")]
    pub cold_start_s: f64,
    #[serde(default = "default_teardown")]
    pub idle_teardown_s: f64,
}

fn default_cold_start() -> f64 {
    12.0
}

fn default_teardown() -> f64 {
    600.0
}

/// Forced device-hit ratios to run a saturating workload at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub h_min: f64,
    pub h_max: f64,
    pub step: f64,
}

impl SweepSpec {
    pub fn points(&self) -> Vec<f64> {
        let n = ((self.h_max - self.h_min) / self.step).round() as usize;
        (0..=n)
            .map(|i| ((self.h_min + i as f64 * self.step) * 1e9).round() / 1e9)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub duration_s: f64,
    /// Requests arriving before this are served but left out of the metrics.
    #[serde(default)]
    pub warmup_s: f64,
    #[serde(default)]
    pub seed: u64,
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub models: Vec<ModelSpec>,
    #[serde(default)]
    pub workloads: Vec<WorkloadSpec>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    pub vm_baseline: Option<VmBaseline>,
    pub sweep: Option<SweepSpec>,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("scenario parse error: {0}")]
    Parse(String),
    #[error("unsupported scenario version {0} (expected {SCENARIO_VERSION})")]
    Version(u32),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        let s: Self = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut s = Self::from_toml(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.version != SCENARIO_VERSION {
            return Err(ScenarioError::Version(self.version));
        }
        self.cluster.validate()?;
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if !(self.duration_s > 0.0) || !(self.warmup_s >= 0.0 && self.warmup_s < self.duration_s) {
            return invalid("need duration_s > warmup_s >= 0".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for m in &self.models {
            let sources = [m.bundled.is_some(), m.path.is_some(), m.flops.is_some()];
            if sources.iter().filter(|s| **s).count() != 1 {
                return invalid(format!(
                    "model {}/{}: give exactly one of bundled, path, flops",
                    m.tenant, m.name
                ));
            }
            if !ids.insert(format!("{}/{}", m.tenant, m.name)) {
                return invalid(format!("model {}/{} listed twice", m.tenant, m.name));
            }
        }
        for w in &self.workloads {
            if !ids.contains(&w.model_id()) {
                return invalid(format!("workload references unknown model {}", w.model_id()));
            }
            if w.batch == 0 || !(0.0..=1.0).contains(&w.force_miss_ratio) {
                return invalid(format!("workload {}: batch >= 1 and force_miss_ratio in [0, 1]", w.model_id()));
            }
        }
        for f in &self.faults {
            if !self.cluster.workers.iter().any(|w| w.id == f.worker) {
                return invalid(format!("fault names unknown worker {}", f.worker));
            }
        }
        if let Some(vm) = &self.vm_baseline {
            if self.cluster.profile(&vm.profile).is_none() {
                return invalid(format!("vm_baseline profile {} is undefined", vm.profile));
            }
        }
        if let Some(sw) = &self.sweep {
            if !(sw.step > 0.0 && sw.h_min <= sw.h_max && sw.h_min >= 0.0 && sw.h_max <= 1.0) {
                return invalid("sweep needs 0 <= h_min <= h_max <= 1 and step > 0".into());
            }
        }
        Ok(())
    }

    /// Builds the manifest for `spec`, named `spec.name`.
    pub fn manifest(&self, spec: &ModelSpec) -> Result<ModelManifest, ScenarioError> {
        let mut m = if let Some(name) = &spec.bundled {
            bundled::by_name(name).ok_or_else(|| ScenarioError::Invalid(format!("no bundled model `{name}`")))?
        } else if let Some(p) = &spec.path {
            let path = self.base_dir.join(p);
            let text = std::fs::read_to_string(&path).map_err(|e| ScenarioError::Io {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            parse_manifest(&text).map_err(|e| ScenarioError::Invalid(e.to_string()))?
        } else {
            let flops = spec.flops.expect("validated");
            bundled::synthetic(&spec.name, flops, spec.footprint_bytes.unwrap_or(1 << 20))
        };
        m.model_name = spec.name.clone();
        if let Some(f) = spec.footprint_bytes {
            m.declared_footprint_bytes = f;
        }
        Ok(m)
    }
}
