//! The cluster under virtual time: controller, router and workers driven
//! through one event queue.

use std::collections::BTreeMap;
use std::sync::Arc;

use infershare_core::controller::{Command, Controller, ControllerEvent, Heartbeat, ReplicaLoad, RouteError, Router};
use infershare_core::manifest::ModelManifest;
use infershare_core::predictor::{predict_exec, DeviceProfile, NoiseModel};
use infershare_core::time::{ms, secs, Nanos};
use infershare_core::worker::{
    Admission, InferenceRequest, RejectReason, RequestId, RequestInput, Worker, WorkerConfig, WorkerError,
    WorkerEvent,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::events::EventQueue;
use crate::report::{compute_report, MetricsReport};
use crate::scenario::{FaultKind, Scenario, ScenarioError};
use crate::trace::{TraceRecord, WorkerMeta};
use crate::workload::{forced_miss, generate_arrivals, WorkloadError};

/// How long in-flight requests may keep running after the last arrival.
pub const DRAIN_LIMIT_S: f64 = 60.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("worker {worker}: {source}")]
    Worker { worker: String, source: WorkerError },
}

impl From<ScenarioError> for SimError {
    fn from(e: ScenarioError) -> Self {
        SimError::ConfigInvalid(e.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub trace: Vec<TraceRecord>,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Transfer,
    Execute,
}

#[derive(Debug, Clone)]
enum Ev {
    Arrival { workload: usize },
    StageDone { worker: usize, epoch: u64, stage: Stage },
    LoadDone { worker: usize, epoch: u64, manifest: Arc<ModelManifest> },
    Heartbeat { worker: usize, epoch: u64 },
    Tick,
    Fault { index: usize },
    Warmup,
    End,
}

struct SimWorker {
    id: String,
    profile: DeviceProfile,
    config: WorkerConfig,
    worker: Worker,
    alive: bool,
    epoch: u64,
    rng: ChaCha8Rng,
    /// Busy time of earlier incarnations.
    busy_offset: (Nanos, Nanos),
    last_beat: (Nanos, Nanos),
}

impl SimWorker {
    fn busy(&self) -> (Nanos, Nanos) {
        let (t, e) = self.worker.busy_ns();
        (self.busy_offset.0 + t, self.busy_offset.1 + e)
    }
}

struct Live {
    tenant: String,
    model: String,
    arrival: Nanos,
    deadline: Option<Nanos>,
}

struct Engine<'a> {
    sc: &'a Scenario,
    q: EventQueue<Ev>,
    controller: Controller,
    router: Router,
    workers: Vec<SimWorker>,
    noise: NoiseModel,
    arrivals: Vec<Vec<Nanos>>,
    cursor: Vec<usize>,
    next_id: RequestId,
    live: BTreeMap<RequestId, Live>,
    trace: Vec<TraceRecord>,
    heartbeat_ns: Nanos,
    end: Nanos,
    ended: bool,
}

/// Runs `scenario` with `seed` in place of its own.
pub fn run_simulation(scenario: &Scenario, seed: u64) -> Result<SimOutput, SimError> {
    scenario.validate()?;
    let trace = Engine::new(scenario, seed)?.run()?;
    let report = compute_report(&trace);
    Ok(SimOutput { trace, report })
}

/// Runs `scenario` with its own seed.
pub fn run_scenario(scenario: &Scenario) -> Result<SimOutput, SimError> {
    run_simulation(scenario, scenario.seed)
}

fn worker_seed(seed: u64, id: &str) -> u64 {
    crate::workload::stream_seed(seed, "\u{0}worker", id)
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, seed: u64) -> Result<Self, SimError> {
        let cluster = &sc.cluster;
        let workers = cluster
            .workers
            .iter()
            .map(|def| {
                let profile = cluster.profile(&def.profile).expect("validated");
                let config = cluster.worker_config(def);
                SimWorker {
                    worker: Worker::new(&def.id, profile.clone(), config.clone()),
                    id: def.id.clone(),
                    profile,
                    config,
                    alive: true,
                    epoch: 0,
                    rng: ChaCha8Rng::seed_from_u64(worker_seed(seed, &def.id)),
                    busy_offset: (0, 0),
                    last_beat: (0, 0),
                }
            })
            .collect();
        let arrivals = sc
            .workloads
            .iter()
            .map(|w| generate_arrivals(w, seed, sc.duration_s))
            .collect::<Result<Vec<_>, _>>()?;
        let mut engine = Engine {
            sc,
            q: EventQueue::new(),
            controller: Controller::new(cluster.controller.clone()),
            router: Router::new(),
            workers,
            noise: cluster.noise_model(),
            cursor: vec![0; arrivals.len()],
            arrivals,
            next_id: 1,
            live: BTreeMap::new(),
            trace: Vec::new(),
            heartbeat_ns: ms(cluster.controller.heartbeat_ms).max(1),
            end: secs(sc.duration_s),
            ended: false,
        };
        engine.trace.push(TraceRecord::Meta {
            name: sc.name.clone(),
            seed,
            duration_ns: engine.end,
            warmup_ns: secs(sc.warmup_s),
            workers: engine
                .workers
                .iter()
                .map(|w| WorkerMeta {
                    id: w.id.clone(),
                    profile: w.profile.name.clone(),
                    cost_per_hour: w.profile.cost_per_hour,
                })
                .collect(),
        });
        for w in &engine.workers {
            engine
                .controller
                .register_worker(&w.id, w.profile.clone(), w.config.host_cache_bytes, 0);
        }
        for spec in &sc.models {
            let manifest = sc.manifest(spec)?;
            engine
                .controller
                .upload_model(&spec.tenant, manifest, 0)
                .map_err(|e| SimError::ConfigInvalid(format!("model {}/{}: {e}", spec.tenant, spec.name)))?;
        }
        engine.pump_controller(0)?;
        for i in 0..engine.arrivals.len() {
            if let Some(&t) = engine.arrivals[i].first() {
                engine.q.push(t, Ev::Arrival { workload: i });
            }
        }
        for i in 0..engine.workers.len() {
            engine.q.push(engine.heartbeat_ns, Ev::Heartbeat { worker: i, epoch: 0 });
        }
        engine.q.push(engine.next_tick(0), Ev::Tick);
        for (index, f) in sc.faults.iter().enumerate() {
            engine.q.push(secs(f.at_s), Ev::Fault { index });
        }
        if sc.warmup_s > 0.0 {
            engine.q.push(secs(sc.warmup_s), Ev::Warmup);
        }
        engine.q.push(engine.end, Ev::End);
        Ok(engine)
    }

    fn next_tick(&self, now: Nanos) -> Nanos {
        let beat = (now / self.heartbeat_ns + 1) * self.heartbeat_ns;
        let window = self.controller.next_window();
        if window > now {
            beat.min(window)
        } else {
            beat
        }
    }

    fn run(mut self) -> Result<Vec<TraceRecord>, SimError> {
        let drain_end = self.end + secs(DRAIN_LIMIT_S);
        while let Some((now, ev)) = self.q.pop() {
            if self.ended && (self.live.is_empty() || now > drain_end) {
                break;
            }
            match ev {
                Ev::Arrival { workload } => self.on_arrival(workload, now)?,
                Ev::StageDone { worker, epoch, stage } => self.on_stage_done(worker, epoch, stage, now)?,
                Ev::LoadDone {
                    worker,
                    epoch,
                    manifest,
                } => self.on_load_done(worker, epoch, manifest, now)?,
                Ev::Heartbeat { worker, epoch } => self.on_heartbeat(worker, epoch, now)?,
                Ev::Tick => {
                    let counts = self.router.take_counts();
                    self.controller.report_demand(&counts);
                    self.controller.tick(now);
                    self.pump_controller(now)?;
                    self.q.push(self.next_tick(now), Ev::Tick);
                }
                Ev::Fault { index } => self.on_fault(index, now)?,
                Ev::Warmup => self.record_busy(now),
                Ev::End => {
                    self.record_busy(now);
                    self.ended = true;
                    if self.live.is_empty() {
                        break;
                    }
                }
            }
        }
        let rest = std::mem::take(&mut self.live);
        for (id, l) in rest {
            self.trace.push(TraceRecord::Unfinished {
                id,
                tenant: l.tenant,
                model: l.model,
                arrival: l.arrival,
            });
        }
        Ok(self.trace)
    }

    fn record_busy(&mut self, now: Nanos) {
        for w in &self.workers {
            let (t, e) = w.busy();
            self.trace.push(TraceRecord::Busy {
                worker: w.id.clone(),
                at: now,
                transfer_ns: t,
                exec_ns: e,
            });
        }
    }

    fn on_arrival(&mut self, wl: usize, now: Nanos) -> Result<(), SimError> {
        let spec = &self.sc.workloads[wl];
        let k = self.cursor[wl];
        self.cursor[wl] += 1;
        if let Some(&t) = self.arrivals[wl].get(k + 1) {
            self.q.push(t.max(now), Ev::Arrival { workload: wl });
        }
        let id = self.next_id;
        self.next_id += 1;
        let model_id = spec.model_id();
        let mut req = InferenceRequest::new(id, &spec.tenant, &model_id, now).with_batch(spec.batch);
        req.input = RequestInput::Size { bytes: 0 };
        if let Some(d) = spec.deadline_ms {
            req = req.with_deadline_ms(d);
        }
        if forced_miss(k as u64, spec.force_miss_ratio) {
            req = req.forced();
        }
        self.live.insert(
            id,
            Live {
                tenant: spec.tenant.clone(),
                model: model_id,
                arrival: now,
                deadline: spec.deadline_ms.map(ms),
            },
        );
        self.dispatch(req, now)
    }

    /// Routes `req`; records a terminal record if no worker takes it.
    fn dispatch(&mut self, req: InferenceRequest, now: Nanos) -> Result<(), SimError> {
        let id = req.request_id;
        let model = req.model_id.clone();
        let loads: BTreeMap<String, ReplicaLoad> = self
            .router
            .table()
            .replicas(&model)
            .unwrap_or_default()
            .iter()
            .filter_map(|r| {
                let w = self.workers.iter().find(|w| w.id == r.worker_id && w.alive)?;
                Some((
                    r.worker_id.clone(),
                    ReplicaLoad {
                        device_resident: w.worker.device_resident(&model),
                        pending_ns: w.worker.execute_ahead_ns(now),
                    },
                ))
            })
            .collect();
        let workers = &mut self.workers;
        let mut touched = Vec::new();
        let routed = self.router.dispatch(
            &model,
            |w| loads.get(w).copied(),
            |w| {
                let Some(i) = workers.iter().position(|x| x.id == w) else {
                    return Err(WorkerError::Unreachable(w.to_string()));
                };
                if !workers[i].alive {
                    return Err(WorkerError::Unreachable(w.to_string()));
                }
                touched.push(i);
                workers[i].worker.admit(req.clone(), now)
            },
        );
        let reject = |this: &mut Self, worker: Option<String>, reason: String| {
            if let Some(l) = this.live.remove(&id) {
                this.trace.push(TraceRecord::Rejected {
                    id,
                    tenant: l.tenant,
                    model: l.model,
                    arrival: l.arrival,
                    at: now,
                    worker,
                    reason,
                });
            }
        };
        match routed {
            Err(RouteError::ModelUnavailable(_)) => reject(self, None, "model-unavailable".into()),
            Ok(d) => match d.outcome {
                Ok(Admission::Admitted(_)) => {}
                Ok(Admission::Rejected {
                    reason: RejectReason::WouldMissDeadline,
                    ..
                }) => reject(self, Some(d.worker_id), "would-miss-deadline".into()),
                Err(WorkerError::Overloaded { .. }) => reject(self, Some(d.worker_id), "overloaded".into()),
                Err(WorkerError::UnknownModel(_)) => reject(self, Some(d.worker_id), "unknown-model".into()),
                Err(WorkerError::Unreachable(w)) => {
                    if let Some(l) = self.live.remove(&id) {
                        self.trace.push(TraceRecord::Failed {
                            id,
                            tenant: l.tenant,
                            model: l.model,
                            arrival: l.arrival,
                            at: now,
                            worker: w,
                            reason: "worker unreachable".into(),
                        });
                    }
                }
                Err(e) => {
                    return Err(SimError::Worker {
                        worker: d.worker_id,
                        source: e,
                    })
                }
            },
        }
        touched.dedup();
        for i in touched {
            self.drain_worker(i, now)?;
        }
        Ok(())
    }

    fn drain_worker(&mut self, i: usize, now: Nanos) -> Result<(), SimError> {
        let mut reroute = Vec::new();
        let w = &mut self.workers[i];
        for ev in w.worker.drain_outbox() {
            match ev {
                WorkerEvent::StartTransfer { fetch_ns, copy_ns, .. } => {
                    self.q.push(
                        now + fetch_ns + copy_ns,
                        Ev::StageDone {
                            worker: i,
                            epoch: w.epoch,
                            stage: Stage::Transfer,
                        },
                    );
                }
                WorkerEvent::StartExecute {
                    model_id,
                    batch,
                    predicted_ns,
                    ..
                } => {
                    // The device runs at its true cost, not the worker's belief.
                    let true_ns = w
                        .worker
                        .manifest(&model_id)
                        .and_then(|m| predict_exec(m, &w.profile, batch, None).ok())
                        .unwrap_or(predicted_ns);
                    let d = self.noise.perturb(true_ns, &mut w.rng);
                    self.q.push(
                        now + d,
                        Ev::StageDone {
                            worker: i,
                            epoch: w.epoch,
                            stage: Stage::Execute,
                        },
                    );
                }
                WorkerEvent::Completed(r) => {
                    let deadline_ns = self.live.remove(&r.request_id).and_then(|l| l.deadline);
                    self.trace.push(TraceRecord::Done {
                        id: r.request_id,
                        tenant: r.tenant_id,
                        model: r.model_id,
                        worker: r.worker_id,
                        arrival: r.arrival_ns,
                        admitted: r.admitted_ns,
                        exec_start: r.exec_start_ns,
                        end: r.exec_end_ns,
                        residency: r.residency.as_str().into(),
                        batch: r.batch,
                        executed_batch: r.executed_batch,
                        device_busy_ns: r.device_busy_ns,
                        transfer_ns: r.fetch_ns + r.copy_ns,
                        cost_per_hour: r.cost_per_hour,
                        estimate_ns: r.estimate.total_ns,
                        deadline_ns,
                    });
                }
                WorkerEvent::Rerouted { request, .. } => {
                    self.trace.push(TraceRecord::Rerouted {
                        id: request.request_id,
                        at: now,
                        from: w.id.clone(),
                    });
                    reroute.push(*request);
                }
                WorkerEvent::Failed { request_id, reason } => {
                    if let Some(l) = self.live.remove(&request_id) {
                        self.trace.push(TraceRecord::Failed {
                            id: request_id,
                            tenant: l.tenant,
                            model: l.model,
                            arrival: l.arrival,
                            at: now,
                            worker: w.id.clone(),
                            reason,
                        });
                    }
                }
                WorkerEvent::CacheThrash(c) => self.trace.push(TraceRecord::Thrash {
                    at: now,
                    worker: w.id.clone(),
                    model: c.model_id,
                }),
                WorkerEvent::ModelEvicted { .. } => {}
            }
        }
        for req in reroute {
            self.dispatch(req, now)?;
        }
        Ok(())
    }

    fn on_stage_done(&mut self, i: usize, epoch: u64, stage: Stage, now: Nanos) -> Result<(), SimError> {
        let w = &mut self.workers[i];
        if !w.alive || w.epoch != epoch {
            return Ok(());
        }
        let r = match stage {
            Stage::Transfer => w.worker.complete_transfer(now),
            Stage::Execute => w.worker.complete_execute(now, None),
        };
        r.map_err(|source| SimError::Worker {
            worker: w.id.clone(),
            source,
        })?;
        self.drain_worker(i, now)?;
        let w = &mut self.workers[i];
        if stage == Stage::Execute && w.worker.has_deadline_requests() {
            w.worker.reroute_check(now);
            self.drain_worker(i, now)?;
        }
        Ok(())
    }

    fn on_load_done(&mut self, i: usize, epoch: u64, manifest: Arc<ModelManifest>, now: Nanos) -> Result<(), SimError> {
        let w = &mut self.workers[i];
        if !w.alive || w.epoch != epoch {
            return Ok(());
        }
        let model_id = manifest.model_name.clone();
        match w.worker.load_model((*manifest).clone(), now) {
            Ok(()) => self.controller.ack_load(&w.id, &model_id, now),
            Err(_) => self.controller.load_failed(&w.id, &model_id),
        }
        self.drain_worker(i, now)?;
        self.pump_controller(now)
    }

    fn on_heartbeat(&mut self, i: usize, epoch: u64, now: Nanos) -> Result<(), SimError> {
        let w = &mut self.workers[i];
        if !w.alive || w.epoch != epoch {
            return Ok(());
        }
        let busy = w.busy();
        let elapsed = now.saturating_sub(w.last_beat.0).max(1);
        let hb = Heartbeat {
            worker_id: w.id.clone(),
            busy_fraction: (busy.1 - w.last_beat.1) as f64 / elapsed as f64,
            hosted: w.worker.model_ids().cloned().collect(),
            device_resident: w.worker.device_resident_models(),
            pending_ns: w.worker.execute_ahead_ns(now),
        };
        w.last_beat = (now, busy.1);
        self.q.push(now + self.heartbeat_ns, Ev::Heartbeat { worker: i, epoch });
        // Unknown workers cannot happen: every worker registers at start.
        let _ = self.controller.heartbeat(&hb, now);
        self.pump_controller(now)
    }

    fn on_fault(&mut self, index: usize, now: Nanos) -> Result<(), SimError> {
        let f = &self.sc.faults[index];
        let i = self.workers.iter().position(|w| w.id == f.worker).expect("validated");
        match f.kind {
            FaultKind::Fail => {
                let w = &mut self.workers[i];
                if !w.alive {
                    return Ok(());
                }
                let lost = w.worker.abort_all();
                w.busy_offset = w.busy();
                w.alive = false;
                w.epoch += 1;
                w.worker = Worker::new(&w.id, w.profile.clone(), w.config.clone());
                let id = w.id.clone();
                self.trace.push(TraceRecord::WorkerDown { at: now, worker: id.clone() });
                for rid in lost {
                    if let Some(l) = self.live.remove(&rid) {
                        self.trace.push(TraceRecord::Failed {
                            id: rid,
                            tenant: l.tenant,
                            model: l.model,
                            arrival: l.arrival,
                            at: now,
                            worker: id.clone(),
                            reason: "worker failed".into(),
                        });
                    }
                }
            }
            FaultKind::Rejoin => {
                let w = &mut self.workers[i];
                if w.alive {
                    return Ok(());
                }
                w.alive = true;
                w.epoch += 1;
                w.last_beat = (now, w.busy().1);
                let (id, profile, bytes, epoch) = (w.id.clone(), w.profile.clone(), w.config.host_cache_bytes, w.epoch);
                self.trace.push(TraceRecord::WorkerUp { at: now, worker: id.clone() });
                self.controller.register_worker(&id, profile, bytes, now);
                self.q.push(now + self.heartbeat_ns, Ev::Heartbeat { worker: i, epoch });
                self.pump_controller(now)?;
            }
        }
        Ok(())
    }

    /// Carries out controller commands until none are left.
    fn pump_controller(&mut self, now: Nanos) -> Result<(), SimError> {
        loop {
            for ev in self.controller.drain_events() {
                if let ControllerEvent::ReplicaReady { model_id, .. } | ControllerEvent::ReplicaRemoved { model_id, .. } = &ev {
                    let count = self.controller.entry(model_id).map_or(0, |e| e.replicas.len());
                    self.trace.push(TraceRecord::Replicas {
                        at: now,
                        model: model_id.clone(),
                        count,
                    });
                }
                self.trace.push(TraceRecord::Control { at: now, event: ev });
            }
            let cmds = self.controller.drain_commands();
            if cmds.is_empty() {
                return Ok(());
            }
            for c in cmds {
                match c {
                    Command::PublishRoutes(table) => {
                        self.router.apply(table);
                    }
                    Command::LoadModel { worker_id, manifest } => {
                        let Some(i) = self.workers.iter().position(|w| w.id == worker_id && w.alive) else {
                            continue;
                        };
                        let w = &self.workers[i];
                        let fetch = secs(manifest.declared_footprint_bytes as f64 / w.profile.fetch_bandwidth);
                        self.q.push(
                            now + fetch,
                            Ev::LoadDone {
                                worker: i,
                                epoch: w.epoch,
                                manifest,
                            },
                        );
                    }
                    Command::EvictModel { worker_id, model_id } => {
                        let Some(i) = self.workers.iter().position(|w| w.id == worker_id && w.alive) else {
                            continue;
                        };
                        let _ = self.workers[i].worker.evict_model(&model_id);
                        self.drain_worker(i, now)?;
                    }
                }
            }
        }
    }
}
