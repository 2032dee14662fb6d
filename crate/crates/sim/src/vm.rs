//! Per-tenant VM baseline: every model gets its own dedicated machine that
//! boots on the first request after an idle teardown and bills for uptime.

use std::collections::BTreeMap;

use infershare_core::predictor::predict_exec;
use infershare_core::time::{secs, to_secs, Nanos};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::SimError;
use crate::report::{compute_report, MetricsReport};
use crate::scenario::Scenario;
use crate::trace::TraceRecord;
use crate::workload::{generate_arrivals, stream_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmSummary {
    pub tenant: String,
    pub model: String,
    pub boots: u64,
    /// Requests that waited for a boot.
    pub cold_requests: u64,
    pub uptime_s: f64,
    /// Uptime times the hourly rate.
    pub usd: f64,
}

#[derive(Debug, Clone)]
pub struct VmOutput {
    pub trace: Vec<TraceRecord>,
    pub report: MetricsReport,
    pub vms: Vec<VmSummary>,
}

struct Vm {
    boot_start: Nanos,
    ready: Nanos,
}

/// Replays the scenario's workloads against one FIFO VM per model.
pub fn run_vm_baseline(scenario: &Scenario, seed: u64) -> Result<VmOutput, SimError> {
    scenario.validate()?;
    let base = scenario
        .vm_baseline
        .as_ref()
        .ok_or_else(|| SimError::ConfigInvalid("scenario has no [vm_baseline] table".into()))?;
    let profile = scenario.cluster.profile(&base.profile).expect("validated");
    let noise = scenario.cluster.noise_model();
    let cold = secs(base.cold_start_s);
    let teardown = secs(base.idle_teardown_s);
    let end = secs(scenario.duration_s);

    // (arrival, workload index, per-workload sequence) per model.
    let mut per_model: BTreeMap<String, Vec<(Nanos, usize)>> = BTreeMap::new();
    for (i, w) in scenario.workloads.iter().enumerate() {
        for t in generate_arrivals(w, seed, scenario.duration_s)? {
            per_model.entry(w.model_id()).or_default().push((t, i));
        }
    }
    let mut done = Vec::new();
    let mut vms = Vec::new();
    for (model_id, mut arrivals) in per_model {
        arrivals.sort();
        let first = &scenario.workloads[arrivals[0].1];
        let spec = scenario
            .models
            .iter()
            .find(|m| m.tenant == first.tenant && m.name == first.model)
            .expect("validated");
        let manifest = scenario.manifest(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "\u{0}vm", &model_id));
        let mut vm: Option<Vm> = None;
        let mut free = 0;
        let mut summary = VmSummary {
            tenant: first.tenant.clone(),
            model: model_id.clone(),
            boots: 0,
            cold_requests: 0,
            uptime_s: 0.0,
            usd: 0.0,
        };
        let mut uptime = 0;
        for (t, wi) in arrivals {
            let w = &scenario.workloads[wi];
            if let Some(v) = &vm {
                let down_at = free.max(v.ready) + teardown;
                if t >= down_at {
                    uptime += down_at - v.boot_start;
                    vm = None;
                }
            }
            let v = vm.get_or_insert_with(|| {
                summary.boots += 1;
                Vm {
                    boot_start: t,
                    ready: t + cold,
                }
            });
            let waited = t < v.ready;
            summary.cold_requests += waited as u64;
            let exec = predict_exec(&manifest, &profile, w.batch, None)
                .map_err(|e| SimError::ConfigInvalid(e.to_string()))?;
            let exec = noise.perturb(exec, &mut rng);
            let start = t.max(v.ready).max(free);
            free = start + exec;
            done.push(TraceRecord::Done {
                id: 0,
                tenant: w.tenant.clone(),
                model: model_id.clone(),
                worker: format!("vm:{model_id}"),
                arrival: t,
                admitted: t,
                exec_start: start,
                end: free,
                residency: if waited { "vm-cold" } else { "device-hit" }.into(),
                batch: w.batch,
                executed_batch: w.batch,
                device_busy_ns: exec,
                transfer_ns: 0,
                cost_per_hour: profile.cost_per_hour,
                estimate_ns: free - t,
                deadline_ns: w.deadline_ms.map(infershare_core::time::ms),
            });
        }
        if let Some(v) = &vm {
            let down_at = (free.max(v.ready) + teardown).min(end.max(free));
            uptime += down_at - v.boot_start;
        }
        summary.uptime_s = to_secs(uptime);
        summary.usd = summary.uptime_s * profile.cost_per_hour / 3600.0;
        vms.push(summary);
    }
    done.sort_by_key(|r| match r {
        TraceRecord::Done { arrival, model, .. } => (*arrival, model.clone()),
        _ => unreachable!(),
    });
    let mut trace = vec![TraceRecord::Meta {
        name: format!("{}-vm-baseline", scenario.name),
        seed,
        duration_ns: end,
        warmup_ns: secs(scenario.warmup_s),
        workers: Vec::new(),
    }];
    for (n, mut r) in done.into_iter().enumerate() {
        if let TraceRecord::Done { id, .. } = &mut r {
            *id = n as u64 + 1;
        }
        trace.push(r);
    }
    let report = compute_report(&trace);
    Ok(VmOutput { trace, report, vms })
}

impl VmOutput {
    pub fn vms_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for v in &self.vms {
            w.serialize(v).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}
