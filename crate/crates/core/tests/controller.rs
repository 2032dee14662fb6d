use std::collections::{BTreeMap, BTreeSet};

use infershare_core::controller::*;
use infershare_core::manifest::bundled;
use infershare_core::predictor::DeviceProfile;
use infershare_core::time::{ms, secs, Nanos};
use proptest::prelude::*;

const GIB: u64 = 1 << 30;

fn cluster(n: usize, config: ControllerConfig) -> Controller {
    let mut c = Controller::new(config);
    for i in 1..=n {
        c.register_worker(&format!("w{i}"), DeviceProfile::virtual_gpu(), 64 * GIB, 0);
    }
    c
}

/// Acknowledges every outstanding load; returns (worker, model) pairs loaded.
fn settle(c: &mut Controller, now: Nanos) -> Vec<(String, String)> {
    let mut loaded = Vec::new();
    loop {
        let loads: Vec<(String, String)> = c
            .drain_commands()
            .into_iter()
            .filter_map(|cmd| match cmd {
                Command::LoadModel { worker_id, manifest } => Some((worker_id, manifest.model_name.clone())),
                _ => None,
            })
            .collect();
        if loads.is_empty() {
            return loaded;
        }
        for (w, m) in &loads {
            c.ack_load(w, m, now);
            c.check_coherence().unwrap();
        }
        loaded.extend(loads);
    }
}

fn beat_all(c: &mut Controller, now: Nanos) {
    let alive: Vec<String> = c.workers().filter(|w| w.alive).map(|w| w.worker_id.clone()).collect();
    for w in alive {
        c.heartbeat(&Heartbeat { worker_id: w, ..Default::default() }, now).unwrap();
    }
}

fn info(id: &str, load: f64) -> WorkerInfo {
    WorkerInfo {
        worker_id: id.into(),
        profile: DeviceProfile::virtual_gpu(),
        host_cache_bytes: 64 * GIB,
        load_ewma: load,
        assigned: BTreeMap::new(),
        device_resident: BTreeSet::new(),
        pending_ns: 0,
        last_heartbeat: 0,
        alive: true,
        exclusive_for: None,
    }
}

#[test]
fn place_prefers_least_loaded() {
    let workers = [info("w1", 0.9), info("w2", 0.1), info("w3", 0.5)];
    let m = bundled::resnet18();
    let req = PlacementRequest {
        model_id: "m",
        manifest: &m,
        demand_per_replica: 0.0,
    };
    let none = BTreeSet::new();
    assert_eq!(place(&workers, &req, 1, &none).unwrap(), ["w2"]);
    assert_eq!(place(&workers, &req, 2, &none).unwrap(), ["w2", "w3"]);
    assert!(matches!(
        place(&workers, &req, 4, &none),
        Err(ControllerError::InsufficientCapacity { wanted: 4, available: 3, .. })
    ));
}

#[test]
fn first_upload_lands_on_first_idle_worker() {
    let mut c = cluster(3, ControllerConfig::default());
    let ep = c.upload_model("acme", bundled::resnet18(), 0).unwrap();
    assert_eq!(ep.model_id, "acme/resnet18");
    // Routable at once, with no replica until the load acknowledges.
    assert_eq!(c.routes().replicas(&ep.model_id), Some(&[][..]));
    assert_eq!(c.entry(&ep.model_id).unwrap().state, EntryState::Registering);
    assert_eq!(settle(&mut c, 0), [("w1".to_string(), ep.model_id.clone())]);
    assert_eq!(c.entry(&ep.model_id).unwrap().state, EntryState::Active);
    assert_eq!(c.routes().replicas(&ep.model_id).unwrap()[0].worker_id, "w1");
}

#[test]
fn uploads_spread_across_idle_workers() {
    let mut c = cluster(3, ControllerConfig::default());
    for name in ["a", "b", "c"] {
        c.upload_model("t", bundled::synthetic(name, 1000, 1000), 0).unwrap();
    }
    let placed: Vec<String> = settle(&mut c, 0).into_iter().map(|(w, _)| w).collect();
    assert_eq!(placed, ["w1", "w2", "w3"]);
}

#[test]
fn unknown_kind_fails_validation() {
    let mut c = cluster(1, ControllerConfig::default());
    let doc = bundled::TINY_MLP_DOC.replace("relu1 relu", "relu1 custom_op");
    let err = c.upload_document("t", &doc, 0).unwrap_err();
    assert!(matches!(err, ControllerError::ValidationFailed(ref f) if f[0].contains("custom_op")), "{err}");
    let mut bad = bundled::tiny_mlp();
    bad.total_weight_bytes += 4;
    assert!(matches!(c.upload_model("t", bad, 0), Err(ControllerError::ValidationFailed(_))));
}

#[test]
fn oversized_model_goes_to_host_executing_worker() {
    let mut c = Controller::new(ControllerConfig::default());
    let mut small = DeviceProfile::virtual_gpu();
    small.device_memory_bytes = 50_000_000;
    c.register_worker("gpu1", small.clone(), 64 * GIB, 0);
    c.register_worker("gpu2", small, 64 * GIB, 0);
    c.register_worker("cpu1", DeviceProfile::cpu_reference(), 8 * GIB, 0);
    // 78 MB fits no device but fits every host cache.
    c.upload_model("t", bundled::resnet18(), 0).unwrap();
    assert_eq!(settle(&mut c, 0)[0].0, "cpu1");

    let mut tiny_host = Controller::new(ControllerConfig::default());
    tiny_host.register_worker("cpu1", DeviceProfile::cpu_reference(), 10_000_000, 0);
    assert!(matches!(
        tiny_host.upload_model("t", bundled::resnet18(), 0),
        Err(ControllerError::InsufficientCapacity { .. })
    ));
}

#[test]
fn quotas_and_duplicates() {
    let config = ControllerConfig {
        max_models_per_tenant: Some(1),
        ..Default::default()
    };
    let mut c = cluster(1, config);
    c.upload_model("t", bundled::tiny_mlp(), 0).unwrap();
    assert!(matches!(c.upload_model("t", bundled::tiny_mlp(), 0), Err(ControllerError::DuplicateModel(_))));
    assert!(matches!(c.upload_model("t", bundled::dense_1000(), 0), Err(ControllerError::QuotaExceeded { .. })));
    c.upload_model("u", bundled::tiny_mlp(), 0).unwrap();

    let bytes = ControllerConfig {
        max_bytes_per_tenant: Some(80_000_000),
        ..Default::default()
    };
    let mut c = cluster(1, bytes);
    c.upload_model("t", bundled::resnet18(), 0).unwrap();
    assert!(matches!(c.upload_model("t", bundled::dense_1000(), 0), Err(ControllerError::QuotaExceeded { .. })));
}

#[test]
fn target_replica_arithmetic() {
    // 1200 inf/s against 1031 inf/s replicas run at 80%: ceil(1200 / 824.8).
    assert_eq!(target_replicas(1200.0, 1031.0, 0.8, 1), 2);
    assert_eq!(target_replicas(0.0, 1031.0, 0.8, 1), 1);
    assert_eq!(target_replicas(3000.0, 1031.0, 0.8, 1), 4);
    let thr = model_throughput(&bundled::resnet18(), &DeviceProfile::virtual_gpu());
    assert!((thr - 1e3 / 0.97).abs() < 1e-6, "{thr}");
}

#[test]
fn demand_step_rescales_within_one_window() {
    let mut c = cluster(5, ControllerConfig::default());
    let id = c.upload_model("t", bundled::resnet18(), 0).unwrap().model_id;
    settle(&mut c, 0);
    let window = secs(1.0);
    for k in 1..=5u64 {
        c.report_demand(&[(id.clone(), 300)].into());
        beat_all(&mut c, k * window);
        c.tick(k * window);
        settle(&mut c, k * window);
        assert_eq!(c.entry(&id).unwrap().replicas.len(), 1);
    }
    c.report_demand(&[(id.clone(), 3000)].into());
    beat_all(&mut c, 6 * window);
    c.tick(6 * window);
    assert_eq!(c.entry(&id).unwrap().target, 4);
    settle(&mut c, 6 * window);
    assert_eq!(c.entry(&id).unwrap().replicas.len(), 4);
    assert_eq!(c.routes().replicas(&id).unwrap().len(), 4);

    // Demand gone: one replica shed per window down to the floor, never zero.
    for k in 7..=20u64 {
        beat_all(&mut c, k * window);
        c.tick(k * window);
        settle(&mut c, k * window);
        c.check_coherence().unwrap();
    }
    assert_eq!(c.entry(&id).unwrap().replicas.len(), 1);
}

#[test]
fn ewma_alone_lags_a_step() {
    let config = ControllerConfig {
        fast_attack: false,
        ..Default::default()
    };
    let mut c = cluster(5, config);
    let id = c.upload_model("t", bundled::resnet18(), 0).unwrap().model_id;
    settle(&mut c, 0);
    c.report_demand(&[(id.clone(), 3000)].into());
    c.tick(secs(1.0));
    // 0.3 * 3000 = 900 inf/s: two replicas, not four.
    assert_eq!(c.entry(&id).unwrap().target, 2);
}

fn saturated(workers: usize, heavy_share: f64) -> (Controller, String, Vec<String>) {
    let config = ControllerConfig {
        utilization_target: 1.0,
        ..Default::default()
    };
    let mut c = Controller::new(config);
    c.register_worker("w1", DeviceProfile::virtual_gpu(), 64 * GIB, 0);
    let heavy = c.upload_model("t", bundled::resnet18(), 0).unwrap().model_id;
    let lights: Vec<String> = (0..3)
        .map(|i| c.upload_model("t", bundled::synthetic(&format!("light{i}"), 1_000_000, 1 << 20), 0).unwrap().model_id)
        .collect();
    settle(&mut c, 0);
    for i in 2..=workers {
        c.register_worker(&format!("w{i}"), DeviceProfile::virtual_gpu(), 64 * GIB, 0);
    }
    c.set_demand(&heavy, heavy_share * 1e3 / 0.97).unwrap();
    for (i, l) in lights.iter().enumerate() {
        c.set_demand(l, 10.0 * (i + 1) as f64).unwrap();
    }
    (c, heavy, lights)
}

#[test]
fn saturation_moves_light_models_off() {
    let (mut c, heavy, lights) = saturated(3, 0.9);
    let plan = c.migrate_for_saturation("w1").unwrap();
    assert_eq!(plan.heavy_model.as_deref(), Some(heavy.as_str()));
    // Heaviest light model first; nothing moves the heavy one.
    let moved: Vec<&str> = plan.moves.iter().map(|m| m.model_id.as_str()).collect();
    assert_eq!(moved, [&lights[2], &lights[1], &lights[0]]);
    assert!(plan.insufficient_capacity.is_empty());
    c.apply_migration(&plan);
    // Until each load acknowledges, the source still routes.
    for l in &lights {
        assert_eq!(c.routes().replicas(l).unwrap().len(), 1);
    }
    settle(&mut c, 0);
    for l in &lights {
        let r = c.routes().replicas(l).unwrap();
        assert_eq!(r.len(), 1);
        assert_ne!(r[0].worker_id, "w1");
    }
    assert_eq!(c.entry(&heavy).unwrap().replicas, ["w1"]);
    assert_eq!(c.worker("w1").unwrap().assigned.len(), 1);
}

#[test]
fn below_threshold_plans_nothing() {
    let (c, _, _) = saturated(3, 0.5);
    assert!(c.migrate_for_saturation("w1").unwrap().is_empty());
}

#[test]
fn partial_migration_reports_capacity() {
    let (mut c, _, lights) = saturated(1, 0.9);
    // One other worker, with room for two of the three 1 MiB models.
    c.register_worker("w2", DeviceProfile::virtual_gpu(), (2 << 20) + 1000, 0);
    let plan = c.migrate_for_saturation("w1").unwrap();
    assert_eq!(plan.moves.len(), 2);
    assert_eq!(plan.insufficient_capacity, [lights[0].clone()]);
}

#[test]
fn every_instant_of_a_migration_has_a_replica() {
    let (mut c, heavy, lights) = saturated(3, 0.9);
    // The window's own counts, so closing it keeps the same demand.
    let mut counts: BTreeMap<String, u64> = [(heavy, (0.9e3 / 0.97) as u64)].into();
    for (i, l) in lights.iter().enumerate() {
        counts.insert(l.clone(), 10 * (i as u64 + 1));
    }
    c.report_demand(&counts);
    c.tick(secs(1.0));
    let cmds = c.drain_commands();
    for cmd in cmds {
        if let Command::LoadModel { worker_id, manifest } = cmd {
            c.ack_load(&worker_id, &manifest.model_name, secs(1.0));
            for l in &lights {
                assert!(!c.routes().replicas(l).unwrap().is_empty());
            }
            c.check_coherence().unwrap();
        }
    }
    assert!(c.worker("w1").unwrap().exclusive_for.is_some());
}

#[test]
fn failed_worker_is_replaced_and_unrouted() {
    let config = ControllerConfig {
        min_replicas: 2,
        ..Default::default()
    };
    let mut c = cluster(3, config);
    let id = c.upload_model("t", bundled::resnet18(), 0).unwrap().model_id;
    settle(&mut c, 0);
    assert_eq!(c.entry(&id).unwrap().replicas, ["w1", "w2"]);
    let hb = ms(500.0);
    // w2 and w3 keep beating; w1 goes quiet after t = 0.
    for k in 1..=4u64 {
        for w in ["w2", "w3"] {
            c.heartbeat(&Heartbeat { worker_id: w.into(), ..Default::default() }, k * hb).unwrap();
        }
        c.tick(k * hb);
    }
    // Three missed intervals end at 1.5 s; the tick at 2.0 s declares it.
    assert!(!c.worker("w1").unwrap().alive);
    let routed: Vec<&str> = c.routes().replicas(&id).unwrap().iter().map(|r| r.worker_id.as_str()).collect();
    assert_eq!(routed, ["w2"]);
    assert_eq!(settle(&mut c, 4 * hb), [("w3".to_string(), id.clone())]);
    assert_eq!(c.routes().replicas(&id).unwrap().len(), 2);
}

#[test]
fn single_replica_failure_reports_unavailability() {
    let mut c = cluster(2, ControllerConfig::default());
    let id = c.upload_model("t", bundled::resnet18(), 0).unwrap().model_id;
    settle(&mut c, 0);
    let before = c.routes().version;
    let actions = c.handle_worker_failure("w1", secs(1.0));
    assert_eq!(actions.affected, [id.clone()]);
    assert_eq!(actions.unavailable, [id.clone()]);
    assert_eq!(actions.placed, [(id.clone(), "w2".to_string())]);
    assert!(actions.routing_version > before);
    assert!(c.routes().replicas(&id).unwrap().is_empty());
}

#[test]
fn rejoining_worker_starts_empty() {
    let mut c = cluster(2, ControllerConfig::default());
    let id = c.upload_model("t", bundled::resnet18(), 0).unwrap().model_id;
    settle(&mut c, 0);
    c.handle_worker_failure("w1", secs(1.0));
    settle(&mut c, secs(1.0));
    c.heartbeat(&Heartbeat { worker_id: "w1".into(), ..Default::default() }, secs(2.0)).unwrap();
    let w1 = c.worker("w1").unwrap();
    assert!(w1.alive && w1.assigned.is_empty());
    assert_eq!(c.entry(&id).unwrap().replicas, ["w2"]);
}

#[test]
fn journal_restores_registry_and_adopts_loaded_replicas() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("controller.journal");
    {
        let mut c = Controller::with_journal(ControllerConfig::default(), &path).unwrap();
        c.register_worker("w1", DeviceProfile::virtual_gpu(), 64 * GIB, 0);
        c.upload_model("t", bundled::resnet18(), 0).unwrap();
        c.upload_model("t", bundled::tiny_mlp(), 0).unwrap();
        c.delete_model("t/tiny-mlp").unwrap();
    }
    let mut c = Controller::with_journal(ControllerConfig::default(), &path).unwrap();
    let ids: Vec<&str> = c.entries().map(|e| e.model_id.as_str()).collect();
    assert_eq!(ids, ["t/resnet18"]);
    assert_eq!(c.entry("t/resnet18").unwrap().manifest.model_name, "t/resnet18");
    c.register_worker("w1", DeviceProfile::virtual_gpu(), 64 * GIB, 0);
    c.heartbeat(
        &Heartbeat {
            worker_id: "w1".into(),
            hosted: vec!["t/resnet18".into()],
            ..Default::default()
        },
        0,
    )
    .unwrap();
    assert_eq!(c.entry("t/resnet18").unwrap().replicas, ["w1"]);
    c.check_coherence().unwrap();
}

#[test]
fn routes_exclude_unacknowledged_workers() {
    let mut c = cluster(3, ControllerConfig::default());
    let id = c.upload_model("t", bundled::resnet18(), 0).unwrap().model_id;
    let mut r = Router::new();
    for cmd in c.drain_commands() {
        if let Command::PublishRoutes(t) = cmd {
            r.apply(t);
        }
    }
    assert_eq!(r.rank(&id, |_| None), Err(RouteError::ModelUnavailable(id.clone())));
    c.ack_load("w1", &id, 0);
    for cmd in c.drain_commands() {
        if let Command::PublishRoutes(t) = cmd {
            r.apply(t);
        }
    }
    assert_eq!(r.rank(&id, |_| None).unwrap(), ["w1"]);
}

#[derive(Debug, Clone)]
enum Op {
    Upload(u8),
    Delete(u8),
    Ack,
    Demand(u8, u16),
    Tick,
    Fail(u8),
    Beat(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..6).prop_map(Op::Upload),
        (0u8..6).prop_map(Op::Delete),
        Just(Op::Ack),
        Just(Op::Ack),
        ((0u8..6), 0u16..5000).prop_map(|(m, n)| Op::Demand(m, n)),
        Just(Op::Tick),
        (1u8..=4).prop_map(Op::Fail),
        (1u8..=4).prop_map(Op::Beat),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// Routes only ever name live, acknowledged replicas, and versions only grow.
    #[test]
    fn routing_stays_coherent(ops in prop::collection::vec(op(), 1..80)) {
        let mut c = cluster(4, ControllerConfig::default());
        let mut now = 0;
        let mut version = c.routes().version;
        let mut pending: Vec<(String, String)> = Vec::new();
        for op in ops {
            match op {
                Op::Upload(i) => { let _ = c.upload_model("t", bundled::synthetic(&format!("m{i}"), 1_000_000, 1 << 20), now); }
                Op::Delete(i) => { let _ = c.delete_model(&format!("t/m{i}")); }
                Op::Ack => {
                    for (w, m) in pending.drain(..) {
                        c.ack_load(&w, &m, now);
                    }
                }
                Op::Demand(i, n) => c.report_demand(&[(format!("t/m{i}"), n as u64)].into()),
                Op::Tick => { now += ms(500.0); c.tick(now); }
                Op::Fail(w) => { c.handle_worker_failure(&format!("w{w}"), now); }
                Op::Beat(w) => { c.heartbeat(&Heartbeat { worker_id: format!("w{w}"), ..Default::default() }, now).unwrap(); }
            }
            for cmd in c.drain_commands() {
                match cmd {
                    Command::LoadModel { worker_id, manifest } => pending.push((worker_id, manifest.model_name.clone())),
                    Command::PublishRoutes(t) => {
                        prop_assert!(t.version > version);
                        version = t.version;
                    }
                    Command::EvictModel { .. } => {}
                }
            }
            prop_assert!(c.check_coherence().is_ok(), "{:?}", c.check_coherence());
        }
    }

    #[test]
    fn target_is_monotone_in_demand(a in 0.0f64..1e5, b in 0.0f64..1e5, thr in 1.0f64..5000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(target_replicas(lo, thr, 0.8, 1) <= target_replicas(hi, thr, 0.8, 1));
    }
}
