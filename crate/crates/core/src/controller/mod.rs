//! The controller: model registry, placement, demand-driven replication,
//! saturation migration, failure recovery and routing-table publication.
//!
//! Like [`crate::worker::Worker`], the controller is a synchronous state
//! machine. Callers feed it uploads, load acknowledgements, heartbeats,
//! demand reports and clock ticks; it answers with [`Command`]s in an
//! outbox. The simulator and the networked server drive the same code.

pub mod journal;
pub mod placement;
pub mod routing;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{parse_manifest, validate_manifest, ModelManifest};
use crate::predictor::{predict_exec, DeviceProfile};
use crate::time::{self, Nanos};
use journal::{Journal, JournalError, JournalOp};
pub use placement::{place, PlacementRequest};
pub use routing::{Dispatch, ReplicaLoad, RouteEntry, RouteError, Router, RoutingTable};

pub type WorkerId = String;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Fraction of a replica's throughput that scaling aims to use.
    pub utilization_target: f64,
    /// Share of one worker's capacity that makes a model "heavy".
    pub saturation_threshold: f64,
    pub demand_window_ms: f64,
    pub heartbeat_ms: f64,
    /// Heartbeat intervals a worker may miss before it is declared failed.
    pub missed_heartbeats: u32,
    /// Weight of the newest window in the demand and load EWMAs.
    pub demand_decay: f64,
    pub min_replicas: usize,
    /// Scale up on the latest window alone when it exceeds the EWMA.
    pub fast_attack: bool,
    pub max_models_per_tenant: Option<usize>,
    pub max_bytes_per_tenant: Option<u64>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            utilization_target: 0.8,
            saturation_threshold: 0.7,
            demand_window_ms: 1000.0,
            heartbeat_ms: 500.0,
            missed_heartbeats: 3,
            demand_decay: 0.3,
            min_replicas: 1,
            fast_attack: true,
            max_models_per_tenant: None,
            max_bytes_per_tenant: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryState {
    Registering,
    Active,
    Migrating,
    Deleted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub model_id: String,
    pub tenant_id: String,
    /// Manifest as shipped to workers: `model_name` equals `model_id`.
    pub manifest: Arc<ModelManifest>,
    /// Workers that acknowledged the load.
    pub replicas: Vec<WorkerId>,
    /// Workers asked to load and not yet acknowledged.
    pub loading: BTreeSet<WorkerId>,
    /// Inferences per second.
    pub demand_ewma: f64,
    /// Rate over the most recent closed window.
    pub demand_recent: f64,
    pub window_count: u64,
    pub target: usize,
    pub state: EntryState,
}

impl RegistryEntry {
    fn demand_estimate(&self, fast_attack: bool) -> f64 {
        if fast_attack {
            self.demand_ewma.max(self.demand_recent)
        } else {
            self.demand_ewma
        }
    }

    fn footprint(&self) -> u64 {
        self.manifest.declared_footprint_bytes
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerInfo {
    pub worker_id: WorkerId,
    pub profile: DeviceProfile,
    pub host_cache_bytes: u64,
    /// Busy fraction of the execute resource, smoothed over heartbeats.
    pub load_ewma: f64,
    /// Models placed here (loaded or loading) and their footprints.
    pub assigned: BTreeMap<String, u64>,
    pub device_resident: BTreeSet<String>,
    pub pending_ns: Nanos,
    pub last_heartbeat: Nanos,
    pub alive: bool,
    /// Set while one heavy model has this worker to itself.
    pub exclusive_for: Option<String>,
}

/// Periodic worker report.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Heartbeat {
    pub worker_id: WorkerId,
    /// Execute busy fraction since the previous heartbeat.
    pub busy_fraction: f64,
    /// Models the worker has registered.
    pub hosted: Vec<String>,
    pub device_resident: Vec<String>,
    pub pending_ns: Nanos,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    LoadModel {
        worker_id: WorkerId,
        manifest: Arc<ModelManifest>,
    },
    EvictModel {
        worker_id: WorkerId,
        model_id: String,
    },
    PublishRoutes(Arc<RoutingTable>),
}

/// Notable decisions, for traces and logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ControllerEvent {
    Scaled { model_id: String, from: usize, to: usize },
    ReplicaReady { model_id: String, worker_id: WorkerId },
    ReplicaRemoved { model_id: String, worker_id: WorkerId },
    WorkerFailed { worker_id: WorkerId },
    WorkerJoined { worker_id: WorkerId },
    Migration { worker_id: WorkerId, heavy_model: String, moves: usize, unplaced: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub model_id: String,
    pub tenant_id: String,
    pub routing_version: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Move {
    pub model_id: String,
    pub from: WorkerId,
    pub to: WorkerId,
}

/// Evacuation of a worker for one heavy model. Moves run load on target,
/// then route flip, then evict on source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MigrationPlan {
    pub worker_id: WorkerId,
    pub heavy_model: Option<String>,
    pub moves: Vec<Move>,
    /// Models that found no other worker and stay put.
    pub insufficient_capacity: Vec<String>,
}

impl MigrationPlan {
    pub fn is_empty(&self) -> bool {
        self.moves.is_empty() && self.insufficient_capacity.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RecoveryActions {
    pub worker_id: WorkerId,
    pub affected: Vec<String>,
    pub placed: Vec<(String, WorkerId)>,
    /// Models left with no routable replica until a load acknowledges.
    pub unavailable: Vec<String>,
    pub routing_version: u64,
}

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("manifest rejected: {}", .0.join("; "))]
    ValidationFailed(Vec<String>),
    #[error("tenant `{tenant_id}` quota exceeded: {detail}")]
    QuotaExceeded { tenant_id: String, detail: String },
    #[error("model `{0}` already exists")]
    DuplicateModel(String),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown worker `{0}`")]
    UnknownWorker(String),
    #[error("cannot place `{model_id}`: {wanted} replica(s) wanted, {available} worker(s) fit")]
    InsufficientCapacity {
        model_id: String,
        wanted: usize,
        available: usize,
    },
    #[error(transparent)]
    Journal(#[from] JournalError),
}

/// Inferences per second one replica of `manifest` sustains on `device`
/// at batch 1.
pub fn model_throughput(manifest: &ModelManifest, device: &DeviceProfile) -> f64 {
    let exec = predict_exec(manifest, device, 1, None).unwrap_or(crate::predictor::MIN_EXEC_NS);
    1e9 / exec as f64
}

/// Replicas needed so each runs at no more than `utilization` of
/// `throughput`, and never fewer than `min_replicas`.
pub fn target_replicas(demand: f64, throughput: f64, utilization: f64, min_replicas: usize) -> usize {
    let needed = (demand / (utilization * throughput)).ceil();
    (needed.max(0.0) as usize).max(min_replicas)
}

pub struct Controller {
    config: ControllerConfig,
    workers: BTreeMap<WorkerId, WorkerInfo>,
    models: BTreeMap<String, RegistryEntry>,
    routes: Arc<RoutingTable>,
    /// Pending moves: (model, target) -> source.
    moves: BTreeMap<(String, WorkerId), WorkerId>,
    next_window: Nanos,
    outbox: Vec<Command>,
    events: Vec<ControllerEvent>,
    journal: Option<Journal>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Self {
        let next_window = time::ms(config.demand_window_ms);
        Self {
            config,
            workers: BTreeMap::new(),
            models: BTreeMap::new(),
            routes: Arc::new(RoutingTable::default()),
            moves: BTreeMap::new(),
            next_window,
            outbox: Vec::new(),
            events: Vec::new(),
            journal: None,
        }
    }

    /// Opens the journal at `path` and restores the registry from it.
    /// Restored models hold no replicas until workers report or placement
    /// runs on the next tick.
    pub fn with_journal(config: ControllerConfig, path: &Path) -> Result<Self, ControllerError> {
        let (journal, ops) = Journal::open(path)?;
        let mut c = Self::new(config);
        for op in ops {
            match op {
                JournalOp::Upload {
                    tenant_id,
                    model_id,
                    manifest,
                } => {
                    let manifest = parse_manifest(&manifest)
                        .map_err(|e| ControllerError::ValidationFailed(vec![e.to_string()]))?;
                    c.insert_entry(&tenant_id, &model_id, manifest);
                }
                JournalOp::Delete { model_id } => {
                    c.models.remove(&model_id);
                }
            }
        }
        c.journal = Some(journal);
        c.publish_routes();
        Ok(c)
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn routes(&self) -> &Arc<RoutingTable> {
        &self.routes
    }

    pub fn entry(&self, model_id: &str) -> Option<&RegistryEntry> {
        self.models.get(model_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.models.values()
    }

    pub fn worker(&self, worker_id: &str) -> Option<&WorkerInfo> {
        self.workers.get(worker_id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerInfo> {
        self.workers.values()
    }

    pub fn drain_commands(&mut self) -> Vec<Command> {
        std::mem::take(&mut self.outbox)
    }

    pub fn drain_events(&mut self) -> Vec<ControllerEvent> {
        std::mem::take(&mut self.events)
    }

    fn heartbeat_ns(&self) -> Nanos {
        time::ms(self.config.heartbeat_ms)
    }

    /// Adds a worker, or resets one that comes back after being declared
    /// failed: it starts over with nothing assigned.
    pub fn register_worker(&mut self, worker_id: &str, profile: DeviceProfile, host_cache_bytes: u64, now: Nanos) {
        let fresh = WorkerInfo {
            worker_id: worker_id.to_string(),
            profile,
            host_cache_bytes,
            load_ewma: 0.0,
            assigned: BTreeMap::new(),
            device_resident: BTreeSet::new(),
            pending_ns: 0,
            last_heartbeat: now,
            alive: true,
            exclusive_for: None,
        };
        match self.workers.get_mut(worker_id) {
            Some(w) if w.alive => w.last_heartbeat = now,
            _ => {
                self.workers.insert(worker_id.to_string(), fresh);
                self.events.push(ControllerEvent::WorkerJoined {
                    worker_id: worker_id.to_string(),
                });
            }
        }
    }

    /// Parses and uploads a manifest document.
    pub fn upload_document(&mut self, tenant_id: &str, text: &str, now: Nanos) -> Result<Endpoint, ControllerError> {
        let manifest = parse_manifest(text).map_err(|e| ControllerError::ValidationFailed(vec![e.to_string()]))?;
        self.upload_model(tenant_id, manifest, now)
    }

    pub fn upload_model(
        &mut self,
        tenant_id: &str,
        mut manifest: ModelManifest,
        _now: Nanos,
    ) -> Result<Endpoint, ControllerError> {
        let report = validate_manifest(&manifest);
        if !report.is_ok() {
            return Err(ControllerError::ValidationFailed(
                report.findings.iter().map(|f| f.to_string()).collect(),
            ));
        }
        let model_id = format!("{tenant_id}/{}", manifest.model_name);
        if self.models.contains_key(&model_id) {
            return Err(ControllerError::DuplicateModel(model_id));
        }
        let owned: Vec<&RegistryEntry> = self.models.values().filter(|e| e.tenant_id == tenant_id).collect();
        if let Some(max) = self.config.max_models_per_tenant {
            if owned.len() >= max {
                return Err(ControllerError::QuotaExceeded {
                    tenant_id: tenant_id.into(),
                    detail: format!("{max} model(s) allowed"),
                });
            }
        }
        if let Some(max) = self.config.max_bytes_per_tenant {
            let used: u64 = owned.iter().map(|e| e.footprint()).sum();
            if used + manifest.declared_footprint_bytes > max {
                return Err(ControllerError::QuotaExceeded {
                    tenant_id: tenant_id.into(),
                    detail: format!("{used} + {} bytes exceeds {max}", manifest.declared_footprint_bytes),
                });
            }
        }
        let document = manifest.to_document();
        manifest.model_name = model_id.clone();
        let chosen = place(
            self.workers.values(),
            &PlacementRequest {
                model_id: &model_id,
                manifest: &manifest,
                demand_per_replica: 0.0,
            },
            self.config.min_replicas.max(1),
            &BTreeSet::new(),
        )?;
        if let Some(j) = &mut self.journal {
            j.append(&JournalOp::Upload {
                tenant_id: tenant_id.into(),
                model_id: model_id.clone(),
                manifest: document,
            })?;
        }
        self.insert_entry(tenant_id, &model_id, manifest);
        for w in chosen {
            self.start_load(&model_id, &w);
        }
        self.publish_routes();
        Ok(Endpoint {
            model_id,
            tenant_id: tenant_id.into(),
            routing_version: self.routes.version,
        })
    }

    fn insert_entry(&mut self, tenant_id: &str, model_id: &str, mut manifest: ModelManifest) {
        manifest.model_name = model_id.to_string();
        self.models.insert(
            model_id.to_string(),
            RegistryEntry {
                model_id: model_id.to_string(),
                tenant_id: tenant_id.to_string(),
                manifest: Arc::new(manifest),
                replicas: Vec::new(),
                loading: BTreeSet::new(),
                demand_ewma: 0.0,
                demand_recent: 0.0,
                window_count: 0,
                target: self.config.min_replicas.max(1),
                state: EntryState::Registering,
            },
        );
    }

    pub fn delete_model(&mut self, model_id: &str) -> Result<(), ControllerError> {
        let entry = self
            .models
            .remove(model_id)
            .ok_or_else(|| ControllerError::UnknownModel(model_id.into()))?;
        if let Some(j) = &mut self.journal {
            j.append(&JournalOp::Delete {
                model_id: model_id.into(),
            })?;
        }
        self.moves.retain(|(m, _), _| m != model_id);
        self.publish_routes();
        for w in entry.replicas.iter().chain(&entry.loading) {
            self.unassign(model_id, w);
        }
        Ok(())
    }

    fn start_load(&mut self, model_id: &str, worker_id: &str) {
        let entry = self.models.get_mut(model_id).expect("registered");
        entry.loading.insert(worker_id.to_string());
        let manifest = entry.manifest.clone();
        let bytes = entry.footprint();
        if let Some(w) = self.workers.get_mut(worker_id) {
            w.assigned.insert(model_id.to_string(), bytes);
        }
        self.outbox.push(Command::LoadModel {
            worker_id: worker_id.to_string(),
            manifest,
        });
    }

    /// Forgets the placement and tells the worker to drop the model.
    fn unassign(&mut self, model_id: &str, worker_id: &str) {
        if let Some(w) = self.workers.get_mut(worker_id) {
            w.assigned.remove(model_id);
            w.device_resident.remove(model_id);
            if w.alive {
                self.outbox.push(Command::EvictModel {
                    worker_id: worker_id.to_string(),
                    model_id: model_id.to_string(),
                });
            }
        }
    }

    /// A worker finished loading `model_id`.
    pub fn ack_load(&mut self, worker_id: &str, model_id: &str, _now: Nanos) {
        let alive = self.workers.get(worker_id).is_some_and(|w| w.alive);
        let Some(entry) = self.models.get_mut(model_id) else {
            if alive {
                self.outbox.push(Command::EvictModel {
                    worker_id: worker_id.into(),
                    model_id: model_id.into(),
                });
            }
            return;
        };
        if !alive || !entry.loading.remove(worker_id) {
            return;
        }
        if !entry.replicas.iter().any(|w| w == worker_id) {
            entry.replicas.push(worker_id.to_string());
        }
        if entry.state == EntryState::Registering {
            entry.state = EntryState::Active;
        }
        self.events.push(ControllerEvent::ReplicaReady {
            model_id: model_id.into(),
            worker_id: worker_id.into(),
        });
        // Route flip first, then retire the source of a finished move.
        self.publish_routes();
        if let Some(source) = self.moves.remove(&(model_id.to_string(), worker_id.to_string())) {
            self.remove_replica(model_id, &source);
        }
        let entry = self.models.get_mut(model_id).expect("still registered");
        if entry.state == EntryState::Migrating && !self.moves.keys().any(|(m, _)| m == model_id) {
            entry.state = EntryState::Active;
        }
    }

    /// A worker could not load `model_id`; placement retries on a later tick.
    pub fn load_failed(&mut self, worker_id: &str, model_id: &str) {
        if let Some(entry) = self.models.get_mut(model_id) {
            entry.loading.remove(worker_id);
        }
        self.moves.remove(&(model_id.to_string(), worker_id.to_string()));
        if let Some(w) = self.workers.get_mut(worker_id) {
            w.assigned.remove(model_id);
        }
    }

    /// Drops one acknowledged replica: routes first, then the eviction.
    fn remove_replica(&mut self, model_id: &str, worker_id: &str) {
        let Some(entry) = self.models.get_mut(model_id) else {
            return;
        };
        entry.replicas.retain(|w| w != worker_id);
        self.events.push(ControllerEvent::ReplicaRemoved {
            model_id: model_id.into(),
            worker_id: worker_id.into(),
        });
        self.publish_routes();
        self.unassign(model_id, worker_id);
    }

    pub fn heartbeat(&mut self, hb: &Heartbeat, now: Nanos) -> Result<(), ControllerError> {
        let decay = self.config.demand_decay;
        let w = self
            .workers
            .get_mut(&hb.worker_id)
            .ok_or_else(|| ControllerError::UnknownWorker(hb.worker_id.clone()))?;
        if !w.alive {
            // Back from the dead: start over.
            w.alive = true;
            w.assigned.clear();
            w.exclusive_for = None;
            w.load_ewma = 0.0;
            self.events.push(ControllerEvent::WorkerJoined {
                worker_id: hb.worker_id.clone(),
            });
        }
        w.last_heartbeat = now;
        w.load_ewma = decay * hb.busy_fraction + (1.0 - decay) * w.load_ewma;
        w.pending_ns = hb.pending_ns;
        let resident: BTreeSet<String> = hb.device_resident.iter().cloned().collect();
        let routes_changed = resident != w.device_resident;
        w.device_resident = resident;
        // Adopt registered models the worker already holds.
        let mut adopted = false;
        for model_id in &hb.hosted {
            let Some(entry) = self.models.get_mut(model_id) else {
                continue;
            };
            let w = self.workers.get_mut(&hb.worker_id).expect("checked");
            if !entry.replicas.contains(&hb.worker_id) && !entry.loading.contains(&hb.worker_id) {
                entry.replicas.push(hb.worker_id.clone());
                w.assigned.insert(model_id.clone(), entry.footprint());
                if entry.state == EntryState::Registering {
                    entry.state = EntryState::Active;
                }
                adopted = true;
            }
        }
        if adopted || routes_changed {
            self.publish_routes();
        }
        Ok(())
    }

    /// Adds router-observed request counts to the current demand window.
    pub fn report_demand(&mut self, counts: &BTreeMap<String, u64>) {
        for (model_id, n) in counts {
            if let Some(e) = self.models.get_mut(model_id) {
                e.window_count += n;
            }
        }
    }

    /// Pins a model's demand estimate, as an operator would ahead of a
    /// planned event. Takes effect on the next decision.
    pub fn set_demand(&mut self, model_id: &str, rate: f64) -> Result<(), ControllerError> {
        let e = self
            .models
            .get_mut(model_id)
            .ok_or_else(|| ControllerError::UnknownModel(model_id.into()))?;
        e.demand_ewma = rate;
        e.demand_recent = rate;
        Ok(())
    }

    /// Start of the next demand window.
    pub fn next_window(&self) -> Nanos {
        self.next_window
    }

    /// Failure detection, window closing, scaling, re-placement and
    /// saturation checks due at `now`.
    pub fn tick(&mut self, now: Nanos) {
        let limit = self.heartbeat_ns() * self.config.missed_heartbeats as Nanos;
        let dead: Vec<WorkerId> = self
            .workers
            .values()
            .filter(|w| w.alive && now.saturating_sub(w.last_heartbeat) > limit)
            .map(|w| w.worker_id.clone())
            .collect();
        for w in dead {
            self.handle_worker_failure(&w, now);
        }
        let window = time::ms(self.config.demand_window_ms).max(1);
        let mut closed = false;
        while now >= self.next_window {
            let secs = time::to_secs(window);
            let decay = self.config.demand_decay;
            for e in self.models.values_mut() {
                let rate = e.window_count as f64 / secs;
                e.demand_recent = rate;
                e.demand_ewma = decay * rate + (1.0 - decay) * e.demand_ewma;
                e.window_count = 0;
            }
            self.next_window += window;
            closed = true;
        }
        if closed {
            let ids: Vec<String> = self.models.keys().cloned().collect();
            for id in &ids {
                self.rescale(id);
            }
            let workers: Vec<WorkerId> = self.workers.keys().cloned().collect();
            for w in workers {
                self.release_exclusive(&w);
                if let Ok(plan) = self.migrate_for_saturation(&w) {
                    if plan.heavy_model.is_some() && !plan.is_empty() {
                        self.apply_migration(&plan);
                    }
                }
            }
        }
        self.reconcile();
    }

    fn reference_profile(&self, entry: &RegistryEntry) -> Option<&DeviceProfile> {
        entry
            .replicas
            .iter()
            .chain(&entry.loading)
            .filter_map(|w| self.workers.get(w))
            .map(|w| &w.profile)
            .next()
            .or_else(|| self.workers.values().find(|w| w.alive).map(|w| &w.profile))
    }

    /// Target replica count for `model_id` under current demand.
    pub fn scale_replicas(&self, model_id: &str) -> Option<usize> {
        let entry = self.models.get(model_id)?;
        let min = self.config.min_replicas.max(1);
        let Some(profile) = self.reference_profile(entry) else {
            return Some(min);
        };
        let thr = model_throughput(&entry.manifest, profile);
        Some(target_replicas(
            entry.demand_estimate(self.config.fast_attack),
            thr,
            self.config.utilization_target,
            min,
        ))
    }

    fn rescale(&mut self, model_id: &str) {
        let Some(target) = self.scale_replicas(model_id) else {
            return;
        };
        let entry = self.models.get_mut(model_id).expect("exists");
        if entry.target != target {
            self.events.push(ControllerEvent::Scaled {
                model_id: model_id.into(),
                from: entry.target,
                to: target,
            });
            entry.target = target;
        }
        let moving = self.moves.keys().any(|(m, _)| m == model_id);
        let entry = &self.models[model_id];
        if target < entry.replicas.len() && entry.loading.is_empty() && !moving {
            // Shed one replica per window, the most recently added.
            let victim = entry.replicas.last().cloned().expect("non-empty");
            self.remove_replica(model_id, &victim);
        }
    }

    /// Places replicas for every model below its target.
    fn reconcile(&mut self) {
        let ids: Vec<String> = self.models.keys().cloned().collect();
        for id in ids {
            let entry = &self.models[&id];
            let have = entry.replicas.len() + entry.loading.len();
            if have >= entry.target {
                continue;
            }
            let want = entry.target - have;
            let per_replica = entry.demand_estimate(self.config.fast_attack) / entry.target as f64;
            let manifest = entry.manifest.clone();
            let req = PlacementRequest {
                model_id: &id,
                manifest: &manifest,
                demand_per_replica: per_replica,
            };
            // Take as many as fit; the rest waits for capacity.
            let chosen = match place(self.workers.values(), &req, want, &BTreeSet::new()) {
                Ok(c) => c,
                Err(ControllerError::InsufficientCapacity { available, .. }) if available > 0 => {
                    place(self.workers.values(), &req, available, &BTreeSet::new()).unwrap_or_default()
                }
                Err(_) => Vec::new(),
            };
            for w in chosen {
                self.start_load(&id, &w);
            }
        }
    }

    fn share(&self, model_id: &str, worker: &WorkerInfo) -> f64 {
        let Some(e) = self.models.get(model_id) else {
            return 0.0;
        };
        let replicas = e.replicas.len().max(1) as f64;
        e.demand_estimate(self.config.fast_attack) / replicas / model_throughput(&e.manifest, &worker.profile)
    }

    fn release_exclusive(&mut self, worker_id: &str) {
        let Some(w) = self.workers.get(worker_id) else {
            return;
        };
        if let Some(m) = &w.exclusive_for {
            if !w.assigned.contains_key(m) || self.share(m, w) < self.config.saturation_threshold {
                self.workers.get_mut(worker_id).expect("exists").exclusive_for = None;
            }
        }
    }

    /// Plans the evacuation of `worker_id` if one of its models uses at
    /// least the saturation threshold of its capacity. Lighter models move
    /// heaviest first; each move goes where placement would put a new
    /// replica. Nothing is applied.
    pub fn migrate_for_saturation(&self, worker_id: &str) -> Result<MigrationPlan, ControllerError> {
        let w = self
            .workers
            .get(worker_id)
            .ok_or_else(|| ControllerError::UnknownWorker(worker_id.into()))?;
        let mut plan = MigrationPlan {
            worker_id: worker_id.into(),
            ..Default::default()
        };
        if !w.alive || w.exclusive_for.is_some() {
            return Ok(plan);
        }
        let hosted: Vec<&String> = w
            .assigned
            .keys()
            .filter(|m| self.models.get(*m).is_some_and(|e| e.replicas.iter().any(|r| r == worker_id)))
            .collect();
        let heavy = hosted
            .iter()
            .map(|m| (self.share(m, w), *m))
            .filter(|(s, _)| *s >= self.config.saturation_threshold)
            .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(a.1)));
        let Some((_, heavy)) = heavy else {
            return Ok(plan);
        };
        plan.heavy_model = Some(heavy.clone());
        let mut others: Vec<&RegistryEntry> = w
            .assigned
            .keys()
            .filter(|m| *m != heavy)
            .filter_map(|m| self.models.get(m))
            .collect();
        others.sort_by(|a, b| {
            let (da, db) = (a.demand_estimate(self.config.fast_attack), b.demand_estimate(self.config.fast_attack));
            db.total_cmp(&da).then(a.model_id.cmp(&b.model_id))
        });
        // Place on a scratch copy so later moves see earlier ones.
        let mut scratch = self.workers.clone();
        let exclude: BTreeSet<WorkerId> = [worker_id.to_string()].into();
        for e in others {
            let req = PlacementRequest {
                model_id: &e.model_id,
                manifest: &e.manifest,
                demand_per_replica: e.demand_estimate(self.config.fast_attack) / e.replicas.len().max(1) as f64,
            };
            match place(scratch.values(), &req, 1, &exclude) {
                Ok(mut to) => {
                    let to = to.remove(0);
                    scratch
                        .get_mut(&to)
                        .expect("placed on known worker")
                        .assigned
                        .insert(e.model_id.clone(), e.footprint());
                    plan.moves.push(Move {
                        model_id: e.model_id.clone(),
                        from: worker_id.into(),
                        to,
                    });
                }
                Err(_) => plan.insufficient_capacity.push(e.model_id.clone()),
            }
        }
        Ok(plan)
    }

    /// Starts every move of `plan` and reserves the worker for the heavy model.
    pub fn apply_migration(&mut self, plan: &MigrationPlan) {
        for mv in &plan.moves {
            self.start_load(&mv.model_id, &mv.to);
            self.moves
                .insert((mv.model_id.clone(), mv.to.clone()), mv.from.clone());
            if let Some(e) = self.models.get_mut(&mv.model_id) {
                e.state = EntryState::Migrating;
            }
        }
        if let Some(w) = self.workers.get_mut(&plan.worker_id) {
            w.exclusive_for = plan.heavy_model.clone();
        }
        self.events.push(ControllerEvent::Migration {
            worker_id: plan.worker_id.clone(),
            heavy_model: plan.heavy_model.clone().unwrap_or_default(),
            moves: plan.moves.len(),
            unplaced: plan.insufficient_capacity.len(),
        });
    }

    /// Removes a dead worker from every replica set, republishes routes and
    /// re-places the lost replicas.
    pub fn handle_worker_failure(&mut self, worker_id: &str, _now: Nanos) -> RecoveryActions {
        let mut actions = RecoveryActions {
            worker_id: worker_id.into(),
            ..Default::default()
        };
        let Some(w) = self.workers.get_mut(worker_id) else {
            return actions;
        };
        w.alive = false;
        w.assigned.clear();
        w.device_resident.clear();
        w.exclusive_for = None;
        self.events.push(ControllerEvent::WorkerFailed {
            worker_id: worker_id.into(),
        });
        // Moves into the dead worker are off; moves out of it are moot.
        self.moves.retain(|(_, to), from| to != worker_id && from != worker_id);
        for e in self.models.values_mut() {
            let had = e.replicas.len() + e.loading.len();
            e.replicas.retain(|r| r != worker_id);
            e.loading.remove(worker_id);
            if e.replicas.len() + e.loading.len() < had {
                actions.affected.push(e.model_id.clone());
            }
        }
        self.publish_routes();
        let before: BTreeMap<String, BTreeSet<WorkerId>> = actions
            .affected
            .iter()
            .map(|m| (m.clone(), self.models[m].loading.clone()))
            .collect();
        self.reconcile();
        for (m, old) in before {
            let e = &self.models[&m];
            for w in e.loading.difference(&old) {
                actions.placed.push((m.clone(), w.clone()));
            }
            if e.replicas.is_empty() {
                actions.unavailable.push(m.clone());
            }
        }
        actions.routing_version = self.routes.version;
        actions
    }

    fn publish_routes(&mut self) {
        let routes = self
            .models
            .values()
            .map(|e| {
                let list = e
                    .replicas
                    .iter()
                    .filter_map(|r| self.workers.get(r))
                    .filter(|w| w.alive)
                    .map(|w| RouteEntry {
                        worker_id: w.worker_id.clone(),
                        device_resident: w.device_resident.contains(&e.model_id),
                        pending_ns: w.pending_ns,
                    })
                    .collect();
                (e.model_id.clone(), list)
            })
            .collect();
        self.routes = Arc::new(RoutingTable {
            version: self.routes.version + 1,
            routes,
        });
        self.outbox.push(Command::PublishRoutes(self.routes.clone()));
    }

    /// Every routed worker is alive and acknowledged the model.
    pub fn check_coherence(&self) -> Result<(), String> {
        for (model_id, list) in &self.routes.routes {
            let entry = self
                .models
                .get(model_id)
                .ok_or_else(|| format!("route for unregistered `{model_id}`"))?;
            for r in list {
                if !entry.replicas.contains(&r.worker_id) {
                    return Err(format!("`{model_id}` routed to unacknowledged `{}`", r.worker_id));
                }
                if !self.workers.get(&r.worker_id).is_some_and(|w| w.alive) {
                    return Err(format!("`{model_id}` routed to dead `{}`", r.worker_id));
                }
            }
        }
        Ok(())
    }
}
