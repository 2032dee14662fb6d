//! Analytic cost model: execution and transfer times, completion estimates,
//! cost per inference and the hit-ratio breakeven point.

mod calibration;
mod device;
mod noise;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use calibration::{CalibrationEntry, CalibrationKey, CalibrationState, DEFAULT_DECAY, MIN_SAMPLES};
pub use device::{
    resnet18_flops, DeviceKind, DeviceProfile, ProfileError, CPU_RESNET18_SECS,
    GPU_BATCHED_SIZE, GPU_BATCHED_THROUGHPUT, GPU_RESNET18_SECS, GPU_UNBATCHED_THROUGHPUT,
};
pub use noise::{NoiseModel, NOISE_P999_RATIO};

use crate::manifest::{model_flops, ModelManifest};
use crate::time::{self, Nanos};

/// Every execution takes at least this long.
pub const MIN_EXEC_NS: Nanos = 10_000;
/// Standard normal quantile at 0.99.
pub const Z_99: f64 = 2.326_347_874_040_841;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PredictError {
    #[error("model `{0}` is not hosted by this worker")]
    UnknownModel(String),
    #[error("flop count failed: {0}")]
    Flops(String),
}

/// Where a model's weights are relative to the executing device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Residency {
    DeviceHit,
    HostHit,
    Cold,
}

impl Residency {
    pub fn as_str(self) -> &'static str {
        match self {
            Residency::DeviceHit => "device-hit",
            Residency::HostHit => "host-hit",
            Residency::Cold => "cold",
        }
    }
}

/// Predicted breakdown of one request's latency, all durations from `now`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub queue_ns: Nanos,
    pub fetch_ns: Nanos,
    pub transfer_ns: Nanos,
    pub exec_ns: Nanos,
    pub total_ns: Nanos,
    pub p99_ns: Nanos,
}

impl LatencyEstimate {
    pub fn total_ms(&self) -> f64 {
        time::to_ms(self.total_ns)
    }

    pub fn p99_ms(&self) -> f64 {
        time::to_ms(self.p99_ns)
    }
}

/// Residency of a model as seen by a new request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelView {
    pub residency: Residency,
    /// Set while a device copy is in flight: time until it lands.
    pub in_flight_ready_in_ns: Option<Nanos>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CacheOccupancy {
    pub device_used: u64,
    pub device_capacity: u64,
    pub host_used: u64,
    pub host_capacity: u64,
}

/// Read-only view of a worker's queues at `timestamp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerQueueSnapshot {
    pub worker_id: String,
    pub timestamp: Nanos,
    pub policy: String,
    /// Time until the transfer resource would start work placed behind
    /// everything already ahead of a new arrival.
    pub transfer_ahead_ns: Nanos,
    /// Same for the execute resource.
    pub execute_ahead_ns: Nanos,
    pub pending_requests: usize,
    pub models: BTreeMap<String, ModelView>,
    pub cache: CacheOccupancy,
}

/// Analytic execution time at `batch`, ignoring calibration.
pub fn analytic_exec_ns(flops: u64, device: &DeviceProfile, batch: u32) -> Nanos {
    let rate = device.effective_flops_per_sec * device.batch_efficiency(batch.max(1));
    let ns = (flops as f64 / rate * 1e9).round() as Nanos;
    ns.max(MIN_EXEC_NS)
}

/// Execution time of `manifest` at `batch` on `device`. Uses the calibrated
/// mean once enough samples exist.
pub fn predict_exec(
    manifest: &ModelManifest,
    device: &DeviceProfile,
    batch: u32,
    cal: Option<&CalibrationState>,
) -> Result<Nanos, PredictError> {
    let key = CalibrationKey::new(&manifest.model_name, &device.name, batch);
    if let Some(e) = cal.and_then(|c| c.trusted(&key)) {
        return Ok((e.mean_ns.round() as Nanos).max(MIN_EXEC_NS));
    }
    let flops = model_flops(manifest, batch.max(1) as usize)
        .map_err(|e| PredictError::Flops(e.to_string()))?;
    Ok(analytic_exec_ns(flops, device, batch))
}

/// `(fetch_ns, copy_ns)` needed to make the model executable.
pub fn predict_transfer(footprint_bytes: u64, device: &DeviceProfile, residency: Residency) -> (Nanos, Nanos) {
    let fetch = || time::secs(footprint_bytes as f64 / device.fetch_bandwidth);
    let copy = || {
        if device.kind.executes_from_host() {
            0
        } else {
            time::secs(footprint_bytes as f64 / device.host_to_device_bandwidth)
        }
    };
    match residency {
        Residency::DeviceHit => (0, 0),
        Residency::HostHit => (0, copy()),
        Residency::Cold => (fetch(), copy()),
    }
}

/// Completion estimate for a request of `batch` on `manifest` placed at the
/// back of the worker described by `view`.
pub fn estimate_completion(
    manifest: &ModelManifest,
    batch: u32,
    view: &WorkerQueueSnapshot,
    device: &DeviceProfile,
    cal: Option<&CalibrationState>,
) -> Result<LatencyEstimate, PredictError> {
    let model = view
        .models
        .get(&manifest.model_name)
        .ok_or_else(|| PredictError::UnknownModel(manifest.model_name.clone()))?;
    estimate_with(manifest, batch, *model, view.transfer_ahead_ns, view.execute_ahead_ns, device, cal)
}

/// Core of [`estimate_completion`] with the queue terms passed explicitly.
pub fn estimate_with(
    manifest: &ModelManifest,
    batch: u32,
    model: ModelView,
    transfer_ahead_ns: Nanos,
    execute_ahead_ns: Nanos,
    device: &DeviceProfile,
    cal: Option<&CalibrationState>,
) -> Result<LatencyEstimate, PredictError> {
    let exec = predict_exec(manifest, device, batch, cal)?;
    let (fetch, copy, ready) = match model.in_flight_ready_in_ns {
        Some(ready) => (0, 0, ready),
        None => {
            let (f, c) = predict_transfer(manifest.declared_footprint_bytes, device, model.residency);
            let ready = if f + c == 0 { 0 } else { transfer_ahead_ns + f + c };
            (f, c, ready)
        }
    };
    let total = ready.max(execute_ahead_ns) + exec;
    let sd = cal
        .and_then(|c| c.trusted(&CalibrationKey::new(&manifest.model_name, &device.name, batch)))
        .map_or(0.0, |e| e.std_dev_ns());
    Ok(LatencyEstimate {
        queue_ns: total - fetch - copy - exec,
        fetch_ns: fetch,
        transfer_ns: copy,
        exec_ns: exec,
        total_ns: total,
        p99_ns: total + (Z_99 * sd).round() as Nanos,
    })
}

/// Dollars per million inferences at `throughput` inferences/s.
pub fn cost_per_million(device: &DeviceProfile, throughput_per_sec: f64) -> f64 {
    device.cost_per_hour / (throughput_per_sec * 3600.0) * 1e6
}

/// Device-hit ratio at which execution and host-to-device copying take equal
/// time per request. Above it, execution is the bottleneck.
pub fn breakeven_hit_ratio(manifest: &ModelManifest, device: &DeviceProfile) -> Result<f64, PredictError> {
    let exec = predict_exec(manifest, device, 1, None)? as f64;
    let (_, copy) = predict_transfer(manifest.declared_footprint_bytes, device, Residency::HostHit);
    if copy == 0 {
        return Ok(0.0);
    }
    Ok((1.0 - exec / copy as f64).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::bundled;

    fn view(models: &[(&str, Residency)], transfer_ahead: Nanos, execute_ahead: Nanos) -> WorkerQueueSnapshot {
        WorkerQueueSnapshot {
            worker_id: "w".into(),
            timestamp: 0,
            policy: "fifo".into(),
            transfer_ahead_ns: transfer_ahead,
            execute_ahead_ns: execute_ahead,
            pending_requests: 0,
            models: models
                .iter()
                .map(|(m, r)| {
                    (
                        m.to_string(),
                        ModelView {
                            residency: *r,
                            in_flight_ready_in_ns: None,
                        },
                    )
                })
                .collect(),
            cache: CacheOccupancy::default(),
        }
    }

    #[test]
    fn resnet18_on_virtual_gpu() {
        let m = bundled::resnet18();
        let gpu = DeviceProfile::virtual_gpu();
        assert_eq!(predict_exec(&m, &gpu, 1, None).unwrap(), 970_000);
        assert_eq!(predict_transfer(m.declared_footprint_bytes, &gpu, Residency::HostHit), (0, 6_500_000));
        assert_eq!(
            predict_transfer(m.declared_footprint_bytes, &gpu, Residency::Cold),
            (78_000_000, 6_500_000)
        );
        let cpu = DeviceProfile::virtual_cpu_core();
        assert_eq!(predict_exec(&m, &cpu, 1, None).unwrap(), 190_800_000);
    }

    #[test]
    fn idle_host_hit_is_copy_plus_exec() {
        let m = bundled::resnet18();
        let gpu = DeviceProfile::virtual_gpu();
        let e = estimate_completion(&m, 1, &view(&[("resnet18", Residency::HostHit)], 0, 0), &gpu, None).unwrap();
        assert_eq!(e.total_ms(), 7.47);
        assert_eq!(e.queue_ns, 0);
    }

    #[test]
    fn queued_device_hit_waits_for_execute_drain() {
        let m = bundled::resnet18();
        let gpu = DeviceProfile::virtual_gpu();
        let e = estimate_completion(
            &m,
            1,
            &view(&[("resnet18", Residency::DeviceHit)], 0, time::ms(13.0)),
            &gpu,
            None,
        )
        .unwrap();
        assert_eq!(e.total_ms(), 13.97);
        assert_eq!(e.queue_ns, time::ms(13.0));
    }

    #[test]
    fn unknown_model() {
        let m = bundled::resnet18();
        let err = estimate_completion(&m, 1, &view(&[], 0, 0), &DeviceProfile::virtual_gpu(), None);
        assert_eq!(err, Err(PredictError::UnknownModel("resnet18".into())));
    }

    #[test]
    fn gpu_cost_per_million() {
        let gpu = DeviceProfile::virtual_gpu();
        let unbatched = cost_per_million(&gpu, GPU_UNBATCHED_THROUGHPUT);
        let batched = cost_per_million(&gpu, GPU_BATCHED_THROUGHPUT);
        assert!((unbatched - 0.687).abs() < 5e-4, "{unbatched}");
        assert!((batched - 0.173).abs() < 5e-4, "{batched}");
        let cpu = cost_per_million(&DeviceProfile::virtual_cpu_core(), 1000.0 / 190.80);
        assert!((cpu - 1.844).abs() < 5e-4, "{cpu}");
    }

    #[test]
    fn resnet18_breakeven() {
        let r = breakeven_hit_ratio(&bundled::resnet18(), &DeviceProfile::virtual_gpu()).unwrap();
        assert!((r - (1.0 - 0.97 / 6.5)).abs() < 1e-12);
        assert_eq!(breakeven_hit_ratio(&bundled::resnet18(), &DeviceProfile::virtual_cpu_core()).unwrap(), 0.0);
    }

    #[test]
    fn calibration_takes_over_after_min_samples() {
        let m = bundled::resnet18();
        let gpu = DeviceProfile::virtual_gpu();
        let mut cal = CalibrationState::default();
        let key = CalibrationKey::new("resnet18", "virtual-gpu", 1);
        for _ in 0..MIN_SAMPLES - 1 {
            cal.observe_ns(key.clone(), 2_000_000);
        }
        assert_eq!(predict_exec(&m, &gpu, 1, Some(&cal)).unwrap(), 970_000);
        cal.observe_ns(key, 2_000_000);
        assert_eq!(predict_exec(&m, &gpu, 1, Some(&cal)).unwrap(), 2_000_000);
    }
}
