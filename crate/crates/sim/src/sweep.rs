//! Device-hit ratio sweep: where the bottleneck moves from weight copies to
//! execution.

use serde::{Deserialize, Serialize};

use crate::engine::{run_simulation, SimError};
use crate::scenario::Scenario;
use crate::trace::TraceRecord;
use infershare_core::time::to_secs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub hit_ratio: f64,
    pub throughput_per_s: f64,
    pub transfer_utilization: f64,
    pub exec_utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    /// Hit ratio at which transfer and execute utilization cross, by linear
    /// interpolation between neighbouring points.
    pub crossover: Option<f64>,
}

/// Runs the scenario once per hit ratio in its `[sweep]` table, forcing
/// `1 - h` of every workload's requests to copy weights.
pub fn run_sweep(scenario: &Scenario, seed: u64) -> Result<SweepResult, SimError> {
    let spec = scenario
        .sweep
        .as_ref()
        .ok_or_else(|| SimError::ConfigInvalid("scenario has no [sweep] table".into()))?;
    let mut points = Vec::new();
    for h in spec.points() {
        let mut s = scenario.clone();
        s.sweep = None;
        for w in &mut s.workloads {
            w.force_miss_ratio = (1.0 - h).clamp(0.0, 1.0);
        }
        let out = run_simulation(&s, seed)?;
        let (throughput_per_s, transfer_utilization, exec_utilization) = served_window(&out.trace);
        points.push(SweepPoint {
            hit_ratio: h,
            throughput_per_s,
            transfer_utilization,
            exec_utilization,
        });
    }
    let crossover = crossover(&points);
    Ok(SweepResult { points, crossover })
}

/// Throughput and per-resource occupancy of the requests completed inside
/// the measured window. Copies that run ahead of execution are counted when
/// their request completes, so a backlog does not read as saturation.
fn served_window(trace: &[TraceRecord]) -> (f64, f64, f64) {
    let Some(TraceRecord::Meta {
        duration_ns, warmup_ns, ..
    }) = trace.first()
    else {
        return (0.0, 0.0, 0.0);
    };
    let (mut n, mut transfer, mut exec) = (0u64, 0u64, 0u64);
    for r in trace {
        if let TraceRecord::Done {
            end,
            transfer_ns,
            device_busy_ns,
            ..
        } = r
        {
            if end >= warmup_ns && end < duration_ns {
                n += 1;
                transfer += transfer_ns;
                exec += device_busy_ns;
            }
        }
    }
    let span = (duration_ns - warmup_ns) as f64;
    (n as f64 / to_secs(duration_ns - warmup_ns), transfer as f64 / span, exec as f64 / span)
}

/// First sign change of transfer minus execute utilization.
pub fn crossover(points: &[SweepPoint]) -> Option<f64> {
    let d = |p: &SweepPoint| p.transfer_utilization - p.exec_utilization;
    points.windows(2).find_map(|w| {
        let (a, b) = (d(&w[0]), d(&w[1]));
        if a == 0.0 {
            Some(w[0].hit_ratio)
        } else if a > 0.0 && b <= 0.0 {
            Some(w[0].hit_ratio + (w[1].hit_ratio - w[0].hit_ratio) * a / (a - b))
        } else {
            None
        }
    })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for p in &self.points {
            w.serialize(p).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(h: f64, t: f64, e: f64) -> SweepPoint {
        SweepPoint {
            hit_ratio: h,
            throughput_per_s: 0.0,
            transfer_utilization: t,
            exec_utilization: e,
        }
    }

    #[test]
    fn interpolates_the_sign_change() {
        let p = [pt(0.8, 1.0, 0.8), pt(0.9, 0.6, 1.0)];
        let c = crossover(&p).unwrap();
        assert!((c - (0.8 + 0.1 * 0.2 / 0.6)).abs() < 1e-12);
    }

    #[test]
    fn no_crossing_is_none() {
        assert_eq!(crossover(&[pt(0.5, 1.0, 0.5), pt(0.6, 1.0, 0.6)]), None);
    }
}
