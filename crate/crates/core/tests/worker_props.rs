use std::collections::{BTreeMap, BTreeSet};

use infershare_core::manifest::bundled;
use infershare_core::predictor::{DeviceKind, DeviceProfile};
use infershare_core::time::{ms, Nanos};
use infershare_core::worker::*;
use proptest::prelude::*;
use proptest::strategy::ValueTree;

fn test_gpu(device_bytes: u64) -> DeviceProfile {
    DeviceProfile {
        name: "test-gpu".into(),
        kind: DeviceKind::VirtualGpu,
        effective_flops_per_sec: 1e9,
        device_memory_bytes: device_bytes,
        host_to_device_bandwidth: 1e9,
        fetch_bandwidth: 1e8,
        cost_per_hour: 1.0,
        max_batch: 4,
        batch_efficiency: vec![(1, 1.0), (4, 2.0)],
    }
}

#[derive(Debug, Clone)]
struct Arrival {
    gap_us: u64,
    model: usize,
    tenant: usize,
    forced: bool,
    deadline_ms: Option<u32>,
}

fn arrival() -> impl Strategy<Value = Arrival> {
    (0u64..3000, 0usize..8, 0usize..3, prop::bool::weighted(0.2), prop::option::weighted(0.3, 1u32..40)).prop_map(
        |(gap_us, model, tenant, forced, deadline_ms)| Arrival {
            gap_us,
            model,
            tenant,
            forced,
            deadline_ms,
        },
    )
}

fn policy() -> impl Strategy<Value = Policy> {
    prop::sample::select(Policy::ALL.to_vec())
}

/// Runs a random stream, checking cache invariants after every event.
/// Returns the number of events processed.
fn drive(
    policy: Policy,
    fair: bool,
    batching: bool,
    sizes_kb: &[u64],
    host_kb: u64,
    stream: &[Arrival],
) -> Result<usize, TestCaseError> {
    let config = WorkerConfig {
        policy,
        fair,
        batching,
        host_cache_bytes: host_kb * 1000,
        admission_ceiling_ms: 200.0,
        ..Default::default()
    };
    let mut r = VirtualRunner::new(Worker::new("w", test_gpu(3_000_000), config));
    for (i, kb) in sizes_kb.iter().enumerate() {
        let m = bundled::synthetic(&format!("m{i}"), 100_000 + 50_000 * i, kb * 1000);
        r.worker.load_model(m, 0).unwrap();
    }
    let mut events = 0;
    let mut t: Nanos = 0;
    let mut seen_executing = BTreeSet::new();
    let mut admitted = BTreeSet::new();
    let check = |r: &VirtualRunner| r.worker.cache().check_invariants().map_err(TestCaseError::fail);
    for (i, a) in stream.iter().enumerate() {
        t += a.gap_us * 1000;
        while r.step(t).map_err(|e| TestCaseError::fail(e.to_string()))? {
            events += 1;
            check(&r)?;
            for id in &admitted {
                if r.worker.state(*id) == Some(RequestState::Executing) {
                    seen_executing.insert(*id);
                }
            }
        }
        r.advance_to(t).unwrap();
        let model = format!("m{}", a.model % sizes_kb.len());
        let mut req = InferenceRequest::new(i as u64, &format!("t{}", a.tenant), &model, t);
        req.force_transfer = a.forced;
        if let Some(d) = a.deadline_ms {
            req = req.with_deadline_ms(d as f64);
        }
        if let Ok(Admission::Admitted(_)) = r.submit(req) {
            admitted.insert(i as u64);
        }
        events += 1;
        check(&r)?;
        if i % 7 == 0 {
            r.reroute_check().unwrap();
            check(&r)?;
        }
    }
    while r.step(Nanos::MAX).unwrap() {
        events += 1;
        check(&r)?;
    }
    let done: BTreeSet<u64> = r.completed.iter().map(|c| c.request_id).collect();
    let rerouted: BTreeSet<u64> = r
        .events
        .iter()
        .filter_map(|e| match e {
            WorkerEvent::Rerouted { request, .. } => Some(request.request_id),
            _ => None,
        })
        .collect();
    // Every admitted request ends exactly once; executing never reroutes.
    prop_assert!(done.is_disjoint(&rerouted));
    let ended: BTreeSet<u64> = done.union(&rerouted).copied().collect();
    prop_assert_eq!(&ended, &admitted);
    prop_assert!(seen_executing.is_subset(&done));
    prop_assert!(r.worker.is_idle());
    let dev = r.worker.cache().device.as_ref().unwrap();
    prop_assert!(dev.entries().all(|e| e.pinned_count == 0));
    Ok(events)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cache_capacity_and_pins_hold(
        policy in policy(),
        fair in any::<bool>(),
        batching in any::<bool>(),
        sizes_kb in prop::collection::vec(200u64..1500, 2..8),
        host_extra_kb in 0u64..3000,
        stream in prop::collection::vec(arrival(), 100..400),
    ) {
        let host_kb = 1500 + host_extra_kb;
        drive(policy, fair, batching, &sizes_kb, host_kb, &stream)?;
    }
}

#[test]
fn long_random_stream_exceeds_ten_thousand_events() {
    let mut runner = proptest::test_runner::TestRunner::deterministic();
    let stream = prop::collection::vec(arrival(), 6000)
        .new_tree(&mut runner)
        .unwrap()
        .current();
    let events = drive(Policy::Edf, true, false, &[400, 900, 1200, 700, 1500], 3000, &stream).unwrap();
    assert!(events >= 10_000, "{events}");
}

fn brute_force_min_mean(costs: &[Nanos]) -> f64 {
    fn permute(rest: &mut Vec<Nanos>, t: Nanos, acc: Nanos, best: &mut Nanos) {
        if rest.is_empty() {
            *best = (*best).min(acc);
            return;
        }
        for i in 0..rest.len() {
            let c = rest.remove(i);
            permute(rest, t + c, acc + t + c, best);
            rest.insert(i, c);
        }
    }
    let mut best = Nanos::MAX;
    permute(&mut costs.to_vec(), 0, 0, &mut best);
    best as f64 / costs.len() as f64
}

fn any_feasible(costs: &[Nanos], deadlines: &[Nanos]) -> bool {
    fn go(left: &mut Vec<usize>, t: Nanos, costs: &[Nanos], deadlines: &[Nanos]) -> bool {
        if left.is_empty() {
            return true;
        }
        for i in 0..left.len() {
            let j = left.remove(i);
            let done = t + costs[j];
            if done <= deadlines[j] && go(left, done, costs, deadlines) {
                left.insert(i, j);
                return true;
            }
            left.insert(i, j);
        }
        false
    }
    go(&mut (0..costs.len()).collect(), 0, costs, deadlines)
}

/// Queues `costs_us` behind a 1 ms blocker on a warm device and returns the
/// completion time of each, measured from the blocker's end.
fn run_serial(policy: Policy, costs_us: &[u64], deadlines_us: Option<&[u64]>) -> BTreeMap<u64, Nanos> {
    let config = WorkerConfig {
        policy,
        ..Default::default()
    };
    let mut r = VirtualRunner::new(Worker::new("w", test_gpu(1 << 30), config));
    r.worker.load_model(bundled::synthetic("block", 1_000_000, 1000), 0).unwrap();
    for (i, c) in costs_us.iter().enumerate() {
        r.worker.load_model(bundled::synthetic(&format!("j{i}"), (*c * 1000) as usize, 1000), 0).unwrap();
        r.run_request(InferenceRequest::new(1000 + i as u64, "t", &format!("j{i}"), r.now())).unwrap();
    }
    r.run_request(InferenceRequest::new(999, "t", "block", r.now())).unwrap();
    let t0 = r.now();
    r.submit(InferenceRequest::new(0, "t", "block", t0)).unwrap();
    let start = t0 + ms(1.0);
    for (i, _) in costs_us.iter().enumerate() {
        let mut req = InferenceRequest::new(1 + i as u64, "t", &format!("j{i}"), t0);
        if let Some(d) = deadlines_us {
            req.deadline_ns = Some(ms(1.0) + d[i] * 1000);
        }
        match r.submit(req).unwrap() {
            Admission::Admitted(_) => {}
            Admission::Rejected { .. } => {}
        }
    }
    r.run_until_idle().unwrap();
    r.completed
        .iter()
        .filter(|c| (1..=costs_us.len() as u64).contains(&c.request_id))
        .map(|c| (c.request_id, c.exec_end_ns - start))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn srpt_matches_brute_force(costs in prop::collection::vec(10u64..5000, 1..=6)) {
        let oracle = brute_force_min_mean(&costs.iter().map(|c| c * 1000).collect::<Vec<_>>());
        for policy in [Policy::Srpt, Policy::MinAvgLatency] {
            let done = run_serial(policy, &costs, None);
            prop_assert_eq!(done.len(), costs.len());
            let mean = done.values().sum::<Nanos>() as f64 / costs.len() as f64;
            prop_assert_eq!(mean, oracle);
        }
    }

    #[test]
    fn edf_meets_deadlines_when_feasible(
        jobs in prop::collection::vec((10u64..3000, 10u64..12000), 1..=6)
    ) {
        let costs: Vec<u64> = jobs.iter().map(|j| j.0).collect();
        let deadlines: Vec<u64> = jobs.iter().map(|j| j.1).collect();
        if any_feasible(&costs, &deadlines) {
            let done = run_serial(Policy::Edf, &costs, Some(&deadlines));
            prop_assert_eq!(done.len(), costs.len());
            for (id, t) in done {
                prop_assert!(t <= deadlines[id as usize - 1] * 1000);
            }
        }
    }
}
