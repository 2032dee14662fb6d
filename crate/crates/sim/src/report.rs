//! Metrics as a pure fold over a trace.

use std::collections::{BTreeMap, BTreeSet};

use infershare_core::time::{to_ms, to_secs, Nanos};
use serde::{Deserialize, Serialize};

use crate::billing::{BillingLedger, TenantCharge};
use crate::trace::TraceRecord;

/// Nearest-rank percentile of an ascending slice: the smallest value with at
/// least `p` percent of the samples at or below it.
pub fn nearest_rank<T: Copy>(sorted: &[T], p: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (p * sorted.len() as f64 / 100.0).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub tenant: String,
    pub model: String,
    pub arrivals: u64,
    pub done: u64,
    pub rejected: u64,
    pub failed: u64,
    pub unfinished: u64,
    pub rerouted: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Execution alone, from start to end on the device.
    pub exec_mean_ms: f64,
    pub exec_p99_ms: f64,
    pub slo_violation_fraction: f64,
    pub rejection_fraction: f64,
    pub device_hit_ratio: f64,
    pub host_hit_ratio: f64,
    pub cold_ratio: f64,
    pub throughput_per_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkerMetrics {
    pub worker: String,
    pub profile: String,
    pub transfer_utilization: f64,
    pub exec_utilization: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    pub warmup_s: f64,
    pub arrivals: u64,
    pub done: u64,
    pub rejected: u64,
    pub failed: u64,
    pub unfinished: u64,
    /// Time-averaged number of completed requests in the system.
    pub mean_in_system: f64,
    pub models: Vec<ModelMetrics>,
    pub workers: Vec<WorkerMetrics>,
    pub tenants: Vec<TenantCharge>,
    pub total_usd: f64,
}

#[derive(Default)]
struct Acc {
    arrivals: u64,
    rejected: u64,
    failed: u64,
    unfinished: u64,
    rerouted: u64,
    latencies: Vec<Nanos>,
    exec: Vec<Nanos>,
    with_deadline: u64,
    violations: u64,
    residency: BTreeMap<String, u64>,
}

fn ratio(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        n as f64 / d as f64
    }
}

fn mean_ms(v: &[Nanos]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        to_ms(v.iter().sum::<Nanos>()) / v.len() as f64
    }
}

/// Folds a trace into a report. Requests arriving before the warmup end are
/// billed but excluded from every other figure.
pub fn compute_report(trace: &[TraceRecord]) -> MetricsReport {
    let mut name = String::new();
    let mut seed = 0;
    let mut duration = 0;
    let mut warmup = 0;
    let mut profiles = BTreeMap::new();
    for r in trace {
        if let TraceRecord::Meta {
            name: n,
            seed: s,
            duration_ns,
            warmup_ns,
            workers,
        } = r
        {
            name = n.clone();
            seed = *s;
            duration = *duration_ns;
            warmup = *warmup_ns;
            for w in workers {
                profiles.insert(w.id.clone(), w.profile.clone());
            }
        }
    }
    let measured = |arrival: Nanos| arrival >= warmup;
    let elapsed = duration.saturating_sub(warmup);

    let mut ledger = BillingLedger::new();
    let mut acc: BTreeMap<(String, String), Acc> = BTreeMap::new();
    let mut rerouted_ids = BTreeSet::new();
    let mut busy: BTreeMap<String, ((Nanos, Nanos), (Nanos, Nanos))> = BTreeMap::new();
    let mut in_system_ns: u128 = 0;
    for r in trace {
        if let TraceRecord::Rerouted { id, .. } = r {
            rerouted_ids.insert(*id);
        }
    }
    for r in trace {
        ledger.charge_record(r);
        match r {
            TraceRecord::Done {
                id,
                tenant,
                model,
                arrival,
                exec_start,
                end,
                residency,
                deadline_ns,
                ..
            } if measured(*arrival) => {
                let a = acc.entry((tenant.clone(), model.clone())).or_default();
                a.arrivals += 1;
                a.rerouted += rerouted_ids.contains(id) as u64;
                let latency = end - arrival;
                a.latencies.push(latency);
                a.exec.push(end - exec_start);
                if let Some(d) = deadline_ns {
                    a.with_deadline += 1;
                    a.violations += (latency > *d) as u64;
                }
                *a.residency.entry(residency.clone()).or_default() += 1;
                let lo = (*arrival).max(warmup);
                let hi = (*end).min(duration);
                in_system_ns += hi.saturating_sub(lo) as u128;
            }
            TraceRecord::Rejected {
                id, tenant, model, arrival, ..
            } if measured(*arrival) => {
                let a = acc.entry((tenant.clone(), model.clone())).or_default();
                a.arrivals += 1;
                a.rejected += 1;
                a.rerouted += rerouted_ids.contains(id) as u64;
            }
            TraceRecord::Failed {
                id, tenant, model, arrival, ..
            } if measured(*arrival) => {
                let a = acc.entry((tenant.clone(), model.clone())).or_default();
                a.arrivals += 1;
                a.failed += 1;
                a.rerouted += rerouted_ids.contains(id) as u64;
            }
            TraceRecord::Unfinished {
                id, tenant, model, arrival,
            } if measured(*arrival) => {
                let a = acc.entry((tenant.clone(), model.clone())).or_default();
                a.arrivals += 1;
                a.unfinished += 1;
                a.rerouted += rerouted_ids.contains(id) as u64;
            }
            TraceRecord::Busy {
                worker,
                at,
                transfer_ns,
                exec_ns,
            } => {
                let e = busy.entry(worker.clone()).or_default();
                if *at <= warmup {
                    e.0 = (*transfer_ns, *exec_ns);
                }
                e.1 = (*transfer_ns, *exec_ns);
            }
            _ => {}
        }
    }

    let mut report = MetricsReport {
        name,
        seed,
        duration_s: to_secs(duration),
        warmup_s: to_secs(warmup),
        mean_in_system: if elapsed == 0 {
            0.0
        } else {
            in_system_ns as f64 / elapsed as f64
        },
        ..Default::default()
    };
    for ((tenant, model), mut a) in acc {
        a.latencies.sort_unstable();
        a.exec.sort_unstable();
        let done = a.latencies.len() as u64;
        let pick = |v: &[Nanos], p| nearest_rank(v, p).map_or(0.0, to_ms);
        let res = |k: &str| ratio(a.residency.get(k).copied().unwrap_or(0), done);
        report.arrivals += a.arrivals;
        report.done += done;
        report.rejected += a.rejected;
        report.failed += a.failed;
        report.unfinished += a.unfinished;
        report.models.push(ModelMetrics {
            tenant,
            model,
            arrivals: a.arrivals,
            done,
            rejected: a.rejected,
            failed: a.failed,
            unfinished: a.unfinished,
            rerouted: a.rerouted,
            mean_ms: mean_ms(&a.latencies),
            p50_ms: pick(&a.latencies, 50.0),
            p99_ms: pick(&a.latencies, 99.0),
            max_ms: a.latencies.last().map_or(0.0, |v| to_ms(*v)),
            exec_mean_ms: mean_ms(&a.exec),
            exec_p99_ms: pick(&a.exec, 99.0),
            slo_violation_fraction: ratio(a.violations, a.with_deadline),
            rejection_fraction: ratio(a.rejected, a.arrivals),
            device_hit_ratio: res("device-hit"),
            host_hit_ratio: res("host-hit"),
            cold_ratio: res("cold") + res("vm-cold"),
            throughput_per_s: if elapsed == 0 { 0.0 } else { done as f64 / to_secs(elapsed) },
        });
    }
    for (worker, profile) in profiles {
        let (start, end) = busy.get(&worker).copied().unwrap_or_default();
        let util = |a: Nanos, b: Nanos| if elapsed == 0 { 0.0 } else { b.saturating_sub(a) as f64 / elapsed as f64 };
        report.workers.push(WorkerMetrics {
            transfer_utilization: util(start.0, end.0),
            exec_utilization: util(start.1, end.1),
            worker,
            profile,
        });
    }
    report.tenants = ledger.charges();
    report.total_usd = ledger.total_usd();
    report
}

impl MetricsReport {
    pub fn model(&self, tenant: &str, model: &str) -> Option<&ModelMetrics> {
        self.models.iter().find(|m| m.tenant == tenant && m.model == model)
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerMetrics> {
        self.workers.iter().find(|w| w.worker == id)
    }

    pub fn tenant_usd(&self, tenant: &str) -> f64 {
        self.tenants.iter().find(|t| t.tenant == tenant).map_or(0.0, |t| t.usd)
    }

    fn csv_of<T: Serialize>(rows: &[T], header: &[&str]) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        if rows.is_empty() {
            w.write_record(header).expect("in-memory write");
        }
        for r in rows {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// One row per (tenant, model).
    pub fn models_csv(&self) -> String {
        Self::csv_of(&self.models, &MODEL_COLUMNS)
    }

    pub fn workers_csv(&self) -> String {
        Self::csv_of(&self.workers, &["worker", "profile", "transfer_utilization", "exec_utilization"])
    }

    pub fn tenants_csv(&self) -> String {
        Self::csv_of(&self.tenants, &["tenant", "requests", "device_ns", "transfer_ns", "usd"])
    }

    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `models.csv`, `workers.csv`, `tenants.csv` and `summary.json`.
    pub fn write_dir(&self, dir: &std::path::Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("models.csv"), self.models_csv())?;
        std::fs::write(dir.join("workers.csv"), self.workers_csv())?;
        std::fs::write(dir.join("tenants.csv"), self.tenants_csv())?;
        std::fs::write(dir.join("summary.json"), self.summary_json())
    }
}

/// Header row of `models.csv`.
pub const MODEL_COLUMNS: [&str; 20] = [
    "tenant",
    "model",
    "arrivals",
    "done",
    "rejected",
    "failed",
    "unfinished",
    "rerouted",
    "mean_ms",
    "p50_ms",
    "p99_ms",
    "max_ms",
    "exec_mean_ms",
    "exec_p99_ms",
    "slo_violation_fraction",
    "rejection_fraction",
    "device_hit_ratio",
    "host_hit_ratio",
    "cold_ratio",
    "throughput_per_s",
];
