//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fail.

mod common;
#[path = "../../core/tests/common/mod.rs"]
mod manifests;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use infershare_core::executor::{execute_model, execute_model_counted, generate_weights, Tensor};
use infershare_core::manifest::bundled::{self, ManifestBuilder};
use infershare_core::manifest::flops::flops_by_layer;
use infershare_core::manifest::{Conv2dParams, LayerOp, TensorShape, MODEL_INPUT};
use infershare_core::predictor::{
    cost_per_million, predict_exec, predict_transfer, DeviceKind, DeviceProfile, Residency,
};
use infershare_core::time::{ms, secs, to_ms, Nanos};
use infershare_core::worker::{
    Admission, InferenceRequest, Policy, RequestState, VirtualRunner, Worker, WorkerConfig, WorkerEvent,
};
use infershare_sim::sweep::run_sweep;
use infershare_sim::trace::write_jsonl;
use infershare_sim::vm::run_vm_baseline;
use infershare_sim::workload::generate_arrivals;
use infershare_sim::{nearest_rank, run_simulation, BillingLedger, Scenario, TraceRecord};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dollars per million.
const COST_TOL: f64 = 0.01;
const GPU_COST: f64 = 0.69;
const CPU_COST: f64 = 1.84;
const COPY_NS: Nanos = 6_500_000;
const HOST_HIT_NS: Nanos = 7_470_000;
const KNEE: f64 = 0.85;
const KNEE_TOL: f64 = 0.01;
const P99_OVER_MEAN: f64 = 1.15;
const SCHED_INSTANCES: usize = 1000;
const SCHED_MAX_N: usize = 6;
const VM_COLD_NS: Nanos = 12_000_000_000;
const RANDOM_SHAPES: u64 = 100;
const FUZZ_FRAMES: usize = 100_000;
const CACHE_EVENTS: usize = 10_000;
const BILLING_CASES: u64 = 20;

type Outcome = Result<String, String>;

fn scenario(name: &str) -> Scenario {
    Scenario::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../sim/scenarios").join(format!("{name}.toml")))
        .unwrap()
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn post_warmup_done(trace: &[TraceRecord], warmup: Nanos) -> impl Iterator<Item = &TraceRecord> {
    trace.iter().filter(move |r| matches!(r, TraceRecord::Done { arrival, .. } if *arrival >= warmup))
}

fn economics() -> Outcome {
    let gpu = DeviceProfile::virtual_gpu();
    let cpu = DeviceProfile::virtual_cpu_core();
    let r18 = bundled::resnet18();
    let thr = |d: &DeviceProfile| 1e9 / predict_exec(&r18, d, 1, None).unwrap() as f64;
    let (g, c) = (cost_per_million(&gpu, thr(&gpu)), cost_per_million(&cpu, thr(&cpu)));
    check(
        (g - GPU_COST).abs() <= COST_TOL && (c - CPU_COST).abs() <= COST_TOL,
        format!("gpu ${g:.4}/M (want {GPU_COST}), cpu ${c:.4}/M (want {CPU_COST})"),
    )
}

fn transfer() -> Outcome {
    let gpu = DeviceProfile::virtual_gpu();
    let m = bundled::resnet18();
    let (fetch, copy) = predict_transfer(m.declared_footprint_bytes, &gpu, Residency::HostHit);
    let mut r = VirtualRunner::new(Worker::new("w1", gpu, WorkerConfig::default()));
    r.worker.load_model(m, 0).unwrap();
    let rec = r.run_request(InferenceRequest::new(1, "t", "resnet18", r.now())).unwrap();
    let latency = rec.exec_end_ns - rec.arrival_ns;
    check(
        fetch == 0 && copy == COPY_NS && rec.residency == Residency::HostHit && latency == HOST_HIT_NS,
        format!("copy {copy} ns, host-hit latency {latency} ns ({:?})", rec.residency),
    )
}

fn knee() -> Outcome {
    let s = scenario("hitratio-sweep");
    let r = run_sweep(&s, s.seed).unwrap();
    let x = r.crossover.ok_or("no crossover")?;
    check((x - KNEE).abs() <= KNEE_TOL, format!("crossover at hit ratio {x:.4} over {} points", r.points.len()))
}

fn predictability() -> Outcome {
    let s = scenario("steady");
    let out = run_simulation(&s, s.seed).unwrap();
    let mut worst: f64 = 0.0;
    let mut e2e: f64 = 0.0;
    for m in &out.report.models {
        worst = worst.max(m.exec_p99_ms / m.exec_mean_ms);
        e2e = e2e.max(m.p99_ms / m.mean_ms);
    }
    let mut quiet = s.clone();
    quiet.cluster.noise = false;
    let out = run_simulation(&quiet, quiet.seed).unwrap();
    let mut exact = 0;
    let mut off = 0;
    for r in &out.trace {
        if let TraceRecord::Done {
            arrival,
            end,
            estimate_ns,
            ..
        } = r
        {
            if end - arrival == *estimate_ns {
                exact += 1;
            } else {
                off += 1;
            }
        }
    }
    check(
        worst <= P99_OVER_MEAN && off == 0 && exact > 0,
        format!(
            "worst exec p99/mean {worst:.3} (end-to-end {e2e:.3}); noiseless fifo {exact} exact, {off} off estimate"
        ),
    )
}

fn test_gpu() -> DeviceProfile {
    DeviceProfile {
        name: "test-gpu".into(),
        kind: DeviceKind::VirtualGpu,
        effective_flops_per_sec: 1e9,
        device_memory_bytes: 1 << 30,
        host_to_device_bandwidth: 1e9,
        fetch_bandwidth: 1e8,
        cost_per_hour: 1.0,
        max_batch: 4,
        batch_efficiency: vec![(1, 1.0), (4, 2.0)],
    }
}

/// Completion times of jobs costing `costs_us` queued behind a 1 ms blocker,
/// measured from the blocker's end.
fn run_serial(policy: Policy, costs_us: &[u64], deadlines_us: Option<&[u64]>) -> BTreeMap<u64, Nanos> {
    let config = WorkerConfig {
        policy,
        ..Default::default()
    };
    let mut r = VirtualRunner::new(Worker::new("w", test_gpu(), config));
    r.worker.load_model(bundled::synthetic("block", 1_000_000, 1000), 0).unwrap();
    for (i, c) in costs_us.iter().enumerate() {
        r.worker.load_model(bundled::synthetic(&format!("j{i}"), (*c * 1000) as usize, 1000), 0).unwrap();
        r.run_request(InferenceRequest::new(1000 + i as u64, "t", &format!("j{i}"), r.now())).unwrap();
    }
    r.run_request(InferenceRequest::new(999, "t", "block", r.now())).unwrap();
    let t0 = r.now();
    r.submit(InferenceRequest::new(0, "t", "block", t0)).unwrap();
    let start = t0 + ms(1.0);
    for i in 0..costs_us.len() {
        let mut req = InferenceRequest::new(1 + i as u64, "t", &format!("j{i}"), t0);
        if let Some(d) = deadlines_us {
            req.deadline_ns = Some(ms(1.0) + d[i] * 1000);
        }
        r.submit(req).unwrap();
    }
    r.run_until_idle().unwrap();
    r.completed
        .iter()
        .filter(|c| (1..=costs_us.len() as u64).contains(&c.request_id))
        .map(|c| (c.request_id, c.exec_end_ns - start))
        .collect()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

fn scheduler_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (mut srpt_bad, mut edf_bad, mut feasible) = (0, 0, 0);
    for _ in 0..SCHED_INSTANCES {
        let n = rng.random_range(1..=SCHED_MAX_N);
        let costs: Vec<u64> = (0..n).map(|_| rng.random_range(10..5000)).collect();
        let deadlines: Vec<u64> = (0..n).map(|_| rng.random_range(10..12000)).collect();
        let orders = permutations(n);
        let best = orders
            .iter()
            .map(|o| {
                let mut t = 0;
                o.iter()
                    .map(|&j| {
                        t += costs[j] * 1000;
                        t
                    })
                    .sum::<u64>()
            })
            .min()
            .unwrap() as f64
            / n as f64;
        for policy in [Policy::Srpt, Policy::MinAvgLatency] {
            let done = run_serial(policy, &costs, None);
            let mean = done.values().sum::<Nanos>() as f64 / n as f64;
            if done.len() != n || mean != best {
                srpt_bad += 1;
            }
        }
        let any = orders.iter().any(|o| {
            let mut t = 0;
            o.iter().all(|&j| {
                t += costs[j];
                t <= deadlines[j]
            })
        });
        if any {
            feasible += 1;
            let done = run_serial(Policy::Edf, &costs, Some(&deadlines));
            if done.len() != n || done.iter().any(|(id, t)| *t > deadlines[*id as usize - 1] * 1000) {
                edf_bad += 1;
            }
        }
    }
    check(
        srpt_bad == 0 && edf_bad == 0,
        format!(
            "{SCHED_INSTANCES} instances: srpt/min-avg-latency mismatches {srpt_bad}; edf misses {edf_bad} of {feasible} feasible"
        ),
    )
}

fn cold_start() -> Outcome {
    let s = scenario("sporadic");
    let out = run_simulation(&s, s.seed).unwrap();
    let warm = secs(s.warmup_s);
    let mut worst = 0;
    let mut cold = 0;
    for r in post_warmup_done(&out.trace, warm) {
        if let TraceRecord::Done {
            arrival, end, residency, ..
        } = r
        {
            worst = worst.max(end - arrival);
            cold += (residency == "cold") as u32;
        }
    }
    let rep = &out.report;
    let all_done = rep.done == rep.arrivals && rep.done > 0;

    let v = scenario("vm-baseline");
    let shared = run_simulation(&v, v.seed).unwrap();
    let shared_cold = post_warmup_done(&shared.trace, secs(v.warmup_s))
        .filter(|r| matches!(r, TraceRecord::Done { residency, .. } if residency == "cold"))
        .count();
    let vm = run_vm_baseline(&v, v.seed).unwrap();
    let base = v.vm_baseline.as_ref().unwrap();
    let short_boots = vm
        .trace
        .iter()
        .filter(|r| matches!(r, TraceRecord::Done { arrival, end, residency, .. } if residency == "vm-cold" && end - arrival < VM_COLD_NS))
        .count();
    // Boots expected from the arrival gaps alone.
    let exec = predict_exec(&bundled::resnet18(), &DeviceProfile::virtual_gpu(), 1, None).unwrap();
    let mut boots_ok = true;
    let mut boots = 0;
    for w in &v.workloads {
        let mut expected = 0;
        let mut free_at: Option<Nanos> = None;
        for t in generate_arrivals(w, v.seed, v.duration_s).unwrap() {
            free_at = Some(match free_at {
                Some(f) if t <= f + secs(base.idle_teardown_s) => f.max(t) + exec,
                _ => {
                    expected += 1;
                    t + secs(base.cold_start_s) + exec
                }
            });
        }
        let got = vm.vms.iter().find(|x| x.tenant == w.tenant).map(|x| x.boots).unwrap_or(0);
        boots_ok &= got == expected;
        boots += got;
    }
    check(
        all_done && cold == 0 && worst <= HOST_HIT_NS && shared_cold == 0 && short_boots == 0 && boots_ok && boots > 0,
        format!(
            "sporadic {} done, max {:.2} ms, {cold} cold; vm baseline {boots} boots (oracle match {boots_ok}), {short_boots} under 12 s; shared {shared_cold} cold",
            rep.done,
            to_ms(worst)
        ),
    )
}

fn elasticity() -> Outcome {
    let s = scenario("burst");
    let out = run_simulation(&s, s.seed).unwrap();
    let gpu = DeviceProfile::virtual_gpu();
    let m = bundled::resnet18();
    let exec = predict_exec(&m, &gpu, 1, None).unwrap();
    let (fetch, copy) = predict_transfer(m.declared_footprint_bytes, &gpu, Residency::Cold);
    let per_replica = 1e9 / exec as f64;
    let target = (3000.0 / (s.cluster.controller.utilization_target * per_replica)).ceil() as usize;
    let step = secs(10.0);
    let window = ms(s.cluster.controller.demand_window_ms);
    let deadline = step + window + fetch;
    let reached = out
        .trace
        .iter()
        .find_map(|r| match r {
            TraceRecord::Replicas { at, count, .. } if *at >= step && *count >= target => Some(*at),
            _ => None,
        })
        .ok_or(format!("never reached {target} replicas"))?;
    let mut lat: Vec<Nanos> = out
        .trace
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Done { arrival, end, .. } if *arrival >= step && *arrival <= reached + window => {
                Some(end - arrival)
            }
            _ => None,
        })
        .collect();
    lat.sort_unstable();
    let p99 = nearest_rank(&lat, 99.0).unwrap_or(0);
    let bound = ms(s.cluster.scheduler.admission_ceiling_ms) + copy + exec;
    check(
        reached <= deadline && p99 <= bound,
        format!(
            "{target} replicas at {:.3} s (limit {:.3} s); transition p99 {:.2} ms (bound {:.2} ms)",
            reached as f64 / 1e9,
            deadline as f64 / 1e9,
            to_ms(p99),
            to_ms(bound)
        ),
    )
}

/// Victim p99 over every post-warmup arrival. Refused or unfinished requests
/// count as unbounded.
fn victim_p99(s: &Scenario) -> (f64, u64) {
    let out = run_simulation(s, s.seed).unwrap();
    let warm = secs(s.warmup_s);
    let mut lat: Vec<Nanos> = Vec::new();
    let mut refused = 0;
    for r in &out.trace {
        match r {
            TraceRecord::Done {
                tenant, arrival, end, ..
            } if tenant == "victim" && *arrival >= warm => lat.push(end - arrival),
            TraceRecord::Rejected { tenant, arrival, .. }
            | TraceRecord::Failed { tenant, arrival, .. }
            | TraceRecord::Unfinished { tenant, arrival, .. }
                if tenant == "victim" && *arrival >= warm =>
            {
                lat.push(Nanos::MAX);
                refused += 1;
            }
            _ => {}
        }
    }
    lat.sort_unstable();
    let p99 = nearest_rank(&lat, 99.0).unwrap();
    (if p99 == Nanos::MAX { f64::INFINITY } else { to_ms(p99) }, refused)
}

fn isolation() -> Outcome {
    let s = scenario("isolation");
    let (shared, shared_refused) = victim_p99(&s);
    let mut alone = s.clone();
    alone.workloads.retain(|w| w.tenant == "victim");
    let (alone, _) = victim_p99(&alone);
    let mut fifo = s.clone();
    fifo.cluster.scheduler.policy = Policy::Fifo;
    fifo.cluster.scheduler.fair = false;
    fifo.cluster.scheduler.tenant_ceiling_ms = None;
    let (fifo, fifo_refused) = victim_p99(&fifo);
    let exec = to_ms(predict_exec(&bundled::resnet18(), &DeviceProfile::virtual_gpu(), 1, None).unwrap());
    let bound = 2.0 * alone + 3.0 * exec;
    check(
        shared <= bound && fifo > shared,
        format!(
            "victim p99 {shared:.2} ms under fair+edf ({shared_refused} refused, bound {bound:.2}, alone {alone:.2}); fifo {fifo:.2} ms ({fifo_refused} refused)"
        ),
    )
}

fn random_input(seed: u64, batch: usize, dims: &[usize]) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = batch * dims.iter().product::<usize>();
    Tensor::new(batch, dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn executor() -> Outcome {
    let mut failures = Vec::new();

    let mut b = ManifestBuilder::new("id", TensorShape::variable(vec![5]));
    b.layer(
        "fc",
        LayerOp::Dense {
            in_features: 5,
            out_features: 5,
        },
        &[MODEL_INPUT],
    );
    let m = b.finish(0, None);
    let mut w = generate_weights(&m);
    let fc = w.layers.get_mut("fc").unwrap();
    fc.kernel = (0..25).map(|i| if i % 6 == 0 { 1.0 } else { 0.0 }).collect();
    fc.bias = vec![0.0; 5];
    let x = Tensor::new(2, vec![5], vec![0.0, -0.5, 1.0, 2.0, 3.5, 9.0, 8.0, -7.0, 6.0, 5.0]).unwrap();
    if execute_model(&m, &w, &x).unwrap() != x {
        failures.push("identity dense");
    }

    let mut b = ManifestBuilder::new("sm", TensorShape::variable(vec![4]));
    b.layer("prob", LayerOp::Softmax, &[MODEL_INPUT]);
    let m = b.finish(0, None);
    let w = generate_weights(&m);
    let run = |v: Vec<f64>| execute_model(&m, &w, &Tensor::new(1, vec![4], v).unwrap()).unwrap().values;
    if run(vec![3.0; 4]).iter().any(|p| (p - 0.25).abs() > 1e-15) {
        failures.push("softmax uniform");
    }
    let a = run(vec![0.1, 2.0, -1.0, 0.5]);
    let swapped = run(vec![0.5, -1.0, 2.0, 0.1]);
    if a != vec![swapped[3], swapped[2], swapped[1], swapped[0]] {
        failures.push("softmax symmetry");
    }

    // Hand-computed 2x2 kernels over the 3x3 input 1..9.
    for (stride, pad, want) in [(1, 0, [37.5, 47.5, 67.5, 77.5]), (2, 1, [4.5, 18.5, 36.5, 77.5])] {
        let mut b = ManifestBuilder::new("conv", TensorShape::variable(vec![1, 3, 3]));
        b.layer(
            "c",
            LayerOp::Conv2d(Conv2dParams {
                in_channels: 1,
                out_channels: 1,
                kernel_h: 2,
                kernel_w: 2,
                stride,
                pad,
            }),
            &[MODEL_INPUT],
        );
        let m = b.finish(0, None);
        let mut w = generate_weights(&m);
        let c = w.layers.get_mut("c").unwrap();
        c.kernel = vec![1.0, 2.0, 3.0, 4.0];
        c.bias = vec![0.5];
        let x = Tensor::new(1, vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        if execute_model(&m, &w, &x).unwrap().values != want {
            failures.push("hand conv");
        }
    }

    let mut stacked_bad = 0;
    let mut count_bad = 0;
    for seed in 0..RANDOM_SHAPES {
        let m = manifests::random_manifest(seed);
        let w = generate_weights(&m);
        let batch = 1 + (seed % 3) as usize;
        let x = random_input(seed, batch, &m.input_shape.dims);
        let (y, counts) = execute_model_counted(&m, &w, &x).unwrap();
        let expected: Vec<u64> = flops_by_layer(&m, batch).unwrap().into_iter().map(|(_, f)| f).collect();
        count_bad += (counts != expected) as u32;
        let rows: Vec<Tensor> = (0..batch).map(|b| execute_model(&m, &w, &x.sample(b)).unwrap()).collect();
        stacked_bad += (y != Tensor::stack(&rows).unwrap()) as u32;
    }
    check(
        failures.is_empty() && stacked_bad == 0 && count_bad == 0,
        format!(
            "oracle failures {failures:?}; {RANDOM_SHAPES} random shapes: {count_bad} op-count and {stacked_bad} batch-stacking mismatches"
        ),
    )
}

fn jsonl(trace: &[TraceRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    write_jsonl(trace, &mut out).unwrap();
    out
}

/// Drives one random request stream through a small cache, checking the
/// capacity and pin invariants after every event.
fn cache_stream(seed: u64, policy: Policy) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut profile = test_gpu();
    profile.device_memory_bytes = 3_000_000;
    let config = WorkerConfig {
        policy,
        fair: rng.random_bool(0.5),
        batching: rng.random_bool(0.5),
        host_cache_bytes: rng.random_range(1_500_000..4_500_000),
        admission_ceiling_ms: 200.0,
        ..Default::default()
    };
    let mut r = VirtualRunner::new(Worker::new("w", profile, config));
    let n_models = rng.random_range(2..8);
    for i in 0..n_models {
        let bytes = rng.random_range(200_000..1_500_000);
        r.worker.load_model(bundled::synthetic(&format!("m{i}"), 100_000 + 50_000 * i, bytes), 0).unwrap();
    }
    let inv = |r: &VirtualRunner| r.worker.cache().check_invariants();
    let mut events = 0;
    let mut t: Nanos = 0;
    let mut admitted = 0;
    for i in 0..2000u64 {
        t += rng.random_range(0..3000) * 1000;
        while r.step(t).map_err(|e| e.to_string())? {
            events += 1;
            inv(&r)?;
        }
        r.advance_to(t).unwrap();
        let model = format!("m{}", rng.random_range(0..n_models));
        let mut req = InferenceRequest::new(i, &format!("t{}", rng.random_range(0..3)), &model, t);
        req.force_transfer = rng.random_bool(0.2);
        if rng.random_bool(0.3) {
            req = req.with_deadline_ms(rng.random_range(1..40) as f64);
        }
        if let Ok(Admission::Admitted(_)) = r.submit(req) {
            admitted += 1;
        }
        events += 1;
        inv(&r)?;
        if i % 7 == 0 {
            r.reroute_check().unwrap();
            inv(&r)?;
        }
    }
    while r.step(Nanos::MAX).map_err(|e| e.to_string())? {
        events += 1;
        inv(&r)?;
    }
    let rerouted = r.events.iter().filter(|e| matches!(e, WorkerEvent::Rerouted { .. })).count();
    if r.completed.len() + rerouted != admitted || !r.worker.is_idle() {
        return Err(format!("seed {seed}: {admitted} admitted, {} done, {rerouted} rerouted", r.completed.len()));
    }
    if (0..2000).any(|id| r.worker.state(id) == Some(RequestState::Executing)) {
        return Err(format!("seed {seed}: request left executing"));
    }
    Ok(events)
}

fn determinism() -> Outcome {
    let mut differing = Vec::new();
    for name in ["steady", "burst", "isolation", "failover"] {
        let s = scenario(name);
        let a = run_simulation(&s, s.seed).unwrap();
        let b = run_simulation(&s, s.seed).unwrap();
        if jsonl(&a.trace) != jsonl(&b.trace) || a.report.summary_json() != b.report.summary_json() {
            differing.push(name);
        }
    }
    let fuzz = common::fuzz_frames(0xACCE, FUZZ_FRAMES);
    let mut events = 0;
    let mut errors = Vec::new();
    for (i, policy) in Policy::ALL.iter().cycle().take(8).enumerate() {
        match cache_stream(i as u64, *policy) {
            Ok(n) => events += n,
            Err(e) => errors.push(e),
        }
    }
    check(
        differing.is_empty() && fuzz.frames >= FUZZ_FRAMES && errors.is_empty() && events >= CACHE_EVENTS,
        format!(
            "reruns differ: {differing:?}; {} fuzz frames without a crash; {events} cache events, errors {errors:?}",
            fuzz.frames
        ),
    )
}

fn two_tenant(x: &[f64], y: &[f64], gap_s: f64) -> Scenario {
    let list = |ts: &[f64]| {
        ts.iter()
            .map(|t| format!("{}", if *t >= 4.0 { t + gap_s } else { *t }))
            .collect::<Vec<_>>()
            .join(", ")
    };
    Scenario::from_toml(&format!(
        r#"
version = 1
name = "billing"
duration_s = {}
[cluster.scheduler]
policy = "fifo"
[[cluster.workers]]
id = "w1"
profile = "virtual-gpu"
[[models]]
tenant = "x"
name = "r"
bundled = "resnet18"
[[models]]
tenant = "y"
name = "r"
bundled = "resnet18"
[[workloads]]
tenant = "x"
model = "r"
pattern = {{ kind = "replay", times_s = [{}] }}
[[workloads]]
tenant = "y"
model = "r"
pattern = {{ kind = "replay", times_s = [{}] }}
"#,
        10.0 + gap_s,
        list(x),
        list(y)
    ))
    .unwrap()
}

fn billing() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut ledger_bad = 0;
    let mut sim_bad = 0;
    for case in 0..BILLING_CASES {
        let mut charges: Vec<(&str, Nanos, f64, Nanos)> = (0..rng.random_range(1..60))
            .map(|_| {
                (
                    if rng.random_bool(0.5) { "x" } else { "y" },
                    rng.random_range(10_000..200_000_000),
                    if rng.random_bool(0.5) { 2.55 } else { 0.1 },
                    rng.random_range(0..10_000_000),
                )
            })
            .collect();
        let total = |cs: &[(&str, Nanos, f64, Nanos)]| {
            let mut l = BillingLedger::new();
            for (t, d, c, x) in cs {
                l.charge(t, *d, *c, *x);
            }
            (l.usd("x").to_bits(), l.usd("y").to_bits())
        };
        let first = total(&charges);
        for _ in 0..10 {
            charges.shuffle(&mut rng);
            ledger_bad += (total(&charges) != first) as u32;
        }

        let n = rng.random_range(1..25);
        // After the initial 78 ms load.
        let mut times: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..8.0)).collect();
        times.sort_by(f64::total_cmp);
        let shift = rng.random_range(0.0..0.5);
        let shifted: Vec<f64> = times.iter().map(|t| t + shift).collect();
        let a = run_simulation(&two_tenant(&times, &shifted, 0.0), case).unwrap().report;
        let b = run_simulation(&two_tenant(&shifted, &times, 0.0), case).unwrap().report;
        let idle = run_simulation(&two_tenant(&times, &shifted, 3600.0), case).unwrap().report;
        let each = n as f64 * 0.00097 / 3600.0 * 2.55;
        let bits = |r: &infershare_sim::MetricsReport, t: &str| r.tenant_usd(t).to_bits();
        let ok = bits(&a, "x") == bits(&a, "y")
            && bits(&a, "x") == bits(&b, "x")
            && bits(&a, "x") == bits(&idle, "x")
            && bits(&a, "y") == bits(&idle, "y")
            && (a.tenant_usd("x") - each).abs() < 1e-15;
        sim_bad += (!ok) as u32;
    }
    check(
        ledger_bad == 0 && sim_bad == 0,
        format!(
            "{BILLING_CASES} cases: {ledger_bad} ledger permutations differ; {sim_bad} two-tenant runs break swap or idle invariance"
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("economics", economics),
        ("transfer arithmetic", transfer),
        ("break-even knee", knee),
        ("predictability envelope", predictability),
        ("scheduler oracle", scheduler_oracle),
        ("cold-start avoidance", cold_start),
        ("elasticity", elasticity),
        ("isolation", isolation),
        ("executor correctness", executor),
        ("determinism and safety", determinism),
        ("billing", billing),
    ];
    let results: Vec<(Outcome, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = criteria
            .iter()
            .map(|(_, f)| {
                s.spawn(move || {
                    let t = Instant::now();
                    (f(), t.elapsed().as_secs_f64())
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| (Err(format!("panicked: {e:?}")), 0.0)))
            .collect()
    });
    let mut failed = 0;
    for (i, ((name, _), (outcome, took))) in criteria.iter().zip(results).enumerate() {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} [{}] {name}: {detail} ({took:.1} s)", i + 1);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
