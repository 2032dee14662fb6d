use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::bundled;

/// What kind of execution resource a profile describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceKind {
    /// Real CPU execution through the reference executor.
    CpuReference,
    VirtualCpuCore,
    VirtualGpu,
    VirtualAccelerator,
}

impl DeviceKind {
    /// CPU kinds execute straight out of host memory: there is no separate
    /// device copy, so a host-resident model is already executable.
    pub fn executes_from_host(self) -> bool {
        matches!(self, DeviceKind::CpuReference | DeviceKind::VirtualCpuCore)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceKind::CpuReference => "cpu-reference",
            DeviceKind::VirtualCpuCore => "virtual-cpu-core",
            DeviceKind::VirtualGpu => "virtual-gpu",
            DeviceKind::VirtualAccelerator => "virtual-accelerator",
        }
    }
}

impl fmt::Display for DeviceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("profile `{profile}`: {field} must be > 0")]
    NonPositive { profile: String, field: &'static str },
    #[error("profile `{profile}`: batch efficiency {detail}")]
    BatchEfficiency { profile: String, detail: String },
}

/// An execution resource with its throughput, memory, links and price.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub name: String,
    pub kind: DeviceKind,
    pub effective_flops_per_sec: f64,
    pub device_memory_bytes: u64,
    /// Host memory to device memory, bytes/s.
    pub host_to_device_bandwidth: f64,
    /// Remote model store to host memory, bytes/s.
    pub fetch_bandwidth: f64,
    pub cost_per_hour: f64,
    pub max_batch: u32,
    /// `(batch, throughput multiplier)` points, sorted by batch, starting at
    /// `(1, 1.0)`. Interpolated linearly in log(batch).
    pub batch_efficiency: Vec<(u32, f64)>,
}

/// Flops of the bundled resnet18 manifest at batch 1.
pub fn resnet18_flops() -> u64 {
    crate::manifest::model_flops(&bundled::resnet18(), 1).expect("bundled manifest is valid")
}

/// Measured resnet18 latency on one V100, in seconds.
pub const GPU_RESNET18_SECS: f64 = 0.97e-3;
/// Measured resnet18 latency on one CPU core, in seconds.
pub const CPU_RESNET18_SECS: f64 = 190.80e-3;
/// Batched GPU throughput and the batch that achieves it.
pub const GPU_BATCHED_THROUGHPUT: f64 = 4083.0;
pub const GPU_UNBATCHED_THROUGHPUT: f64 = 1031.0;
pub const GPU_BATCHED_SIZE: u32 = 256;

impl DeviceProfile {
    /// V100-class GPU calibrated so resnet18 takes 0.97 ms at batch 1.
    pub fn virtual_gpu() -> Self {
        Self {
            name: "virtual-gpu".into(),
            kind: DeviceKind::VirtualGpu,
            effective_flops_per_sec: resnet18_flops() as f64 / GPU_RESNET18_SECS,
            device_memory_bytes: 16 << 30,
            host_to_device_bandwidth: 12e9,
            fetch_bandwidth: 1e9,
            cost_per_hour: 2.55,
            max_batch: GPU_BATCHED_SIZE,
            batch_efficiency: vec![
                (1, 1.0),
                (
                    GPU_BATCHED_SIZE,
                    GPU_BATCHED_THROUGHPUT / GPU_UNBATCHED_THROUGHPUT,
                ),
            ],
        }
    }

    /// One cloud CPU core calibrated so resnet18 takes 190.80 ms.
    pub fn virtual_cpu_core() -> Self {
        Self {
            name: "virtual-cpu-core".into(),
            kind: DeviceKind::VirtualCpuCore,
            effective_flops_per_sec: resnet18_flops() as f64 / CPU_RESNET18_SECS,
            device_memory_bytes: 4 << 30,
            host_to_device_bandwidth: 12e9,
            fetch_bandwidth: 1e9,
            cost_per_hour: 0.0348,
            max_batch: 1,
            batch_efficiency: vec![(1, 1.0)],
        }
    }

    /// Illustrative accelerator: GPU-class speed with 64 GB of device memory.
    pub fn virtual_accelerator() -> Self {
        Self {
            name: "virtual-accelerator".into(),
            kind: DeviceKind::VirtualAccelerator,
            device_memory_bytes: 64 << 30,
            ..Self::virtual_gpu()
        }
    }

    /// This process's CPU running the reference executor. The flop rate is a
    /// prior; measurements replace it after the first few requests.
    pub fn cpu_reference() -> Self {
        Self {
            name: "cpu-reference".into(),
            kind: DeviceKind::CpuReference,
            effective_flops_per_sec: 1e9,
            device_memory_bytes: 4 << 30,
            host_to_device_bandwidth: 12e9,
            fetch_bandwidth: 1e9,
            cost_per_hour: 0.0348,
            max_batch: 64,
            batch_efficiency: vec![(1, 1.0)],
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "virtual-gpu" => Some(Self::virtual_gpu()),
            "virtual-cpu-core" => Some(Self::virtual_cpu_core()),
            "virtual-accelerator" => Some(Self::virtual_accelerator()),
            "cpu-reference" => Some(Self::cpu_reference()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        let positive = |v: f64, field| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ProfileError::NonPositive {
                    profile: self.name.clone(),
                    field,
                })
            }
        };
        positive(self.effective_flops_per_sec, "effective_flops_per_sec")?;
        positive(self.host_to_device_bandwidth, "host_to_device_bandwidth")?;
        positive(self.fetch_bandwidth, "fetch_bandwidth")?;
        positive(self.cost_per_hour, "cost_per_hour")?;
        positive(self.device_memory_bytes as f64, "device_memory_bytes")?;
        positive(self.max_batch as f64, "max_batch")?;
        let bad = |detail: String| ProfileError::BatchEfficiency {
            profile: self.name.clone(),
            detail,
        };
        match self.batch_efficiency.first() {
            Some(&(1, m)) if m == 1.0 => {}
            _ => return Err(bad("must start at (1, 1.0)".into())),
        }
        for pair in self.batch_efficiency.windows(2) {
            let ((b0, m0), (b1, m1)) = (pair[0], pair[1]);
            if b1 <= b0 || m1 < m0 {
                return Err(bad(format!(
                    "must be increasing in batch and non-decreasing in multiplier at ({b0}, {m0}) -> ({b1}, {m1})"
                )));
            }
        }
        Ok(())
    }

    /// Throughput multiplier at `batch`.
    pub fn batch_efficiency(&self, batch: u32) -> f64 {
        let table = &self.batch_efficiency;
        let Some(&(first_b, first_m)) = table.first() else {
            return 1.0;
        };
        if batch <= first_b {
            return first_m;
        }
        for pair in table.windows(2) {
            let ((b0, m0), (b1, m1)) = (pair[0], pair[1]);
            if batch <= b1 {
                let t = ((batch as f64).ln() - (b0 as f64).ln())
                    / ((b1 as f64).ln() - (b0 as f64).ln());
                return m0 + t * (m1 - m0);
            }
        }
        table.last().map(|&(_, m)| m).unwrap_or(1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in ["virtual-gpu", "virtual-cpu-core", "virtual-accelerator", "cpu-reference"] {
            DeviceProfile::builtin(name).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn efficiency_interpolates_in_log_batch() {
        let p = DeviceProfile::virtual_gpu();
        assert_eq!(p.batch_efficiency(1), 1.0);
        let top = GPU_BATCHED_THROUGHPUT / GPU_UNBATCHED_THROUGHPUT;
        assert_eq!(p.batch_efficiency(256), top);
        assert_eq!(p.batch_efficiency(1000), top);
        // log2(16) / log2(256) = 1/2 of the way.
        let mid = p.batch_efficiency(16);
        assert!((mid - (1.0 + 0.5 * (top - 1.0))).abs() < 1e-12);
        let mut prev = 0.0;
        for b in 1..=300 {
            let m = p.batch_efficiency(b);
            assert!(m >= prev);
            prev = m;
        }
    }

    #[test]
    fn decreasing_table_rejected() {
        let mut p = DeviceProfile::virtual_gpu();
        p.batch_efficiency = vec![(1, 1.0), (8, 2.0), (16, 1.5)];
        assert!(p.validate().is_err());
        p.batch_efficiency = vec![(2, 1.0)];
        assert!(p.validate().is_err());
        p.batch_efficiency = vec![(1, 1.0)];
        p.fetch_bandwidth = 0.0;
        assert!(p.validate().is_err());
    }
}
