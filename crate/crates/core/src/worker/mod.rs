//! Worker: one long-lived process hosting many tenants' models.
//!
//! [`Worker`] is a synchronous state machine. Callers pass the current time
//! into every operation and drain [`WorkerEvent`]s from its outbox: a
//! `StartTransfer` or `StartExecute` asks the caller to occupy that resource
//! and report back with [`Worker::complete_transfer`] or
//! [`Worker::complete_execute`]. The simulator and the network server drive
//! the same code with virtual and wall-clock time respectively.

mod cache;
mod queue;
mod runner;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{
    CacheEntry, CacheError, CacheWarning, Level, LevelCache, ResidencyCache, ResidencyJob,
    ResidencyPlan,
};
pub use queue::{Candidate, PickMode, Policy, QueueKey, RequestId, ResourceQueue};
pub use runner::VirtualRunner;

use crate::executor::{self, generate_weights, ExecError, Tensor, WeightStore};
use crate::manifest::ModelManifest;
use crate::predictor::{
    estimate_with, predict_exec, predict_transfer, CacheOccupancy, CalibrationKey,
    CalibrationState, DeviceProfile, LatencyEstimate, ModelView, Residency, WorkerQueueSnapshot,
};
use crate::time::{self, Nanos};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorkerConfig {
    pub policy: Policy,
    /// Weighted round-robin across tenants ahead of the policy.
    pub fair: bool,
    pub tenant_weights: BTreeMap<String, u32>,
    /// Coalesce queued same-model requests into one execution.
    pub batching: bool,
    pub host_cache_bytes: u64,
    /// Per-resource pending-work ceiling for admission.
    pub admission_ceiling_ms: f64,
    /// Per-tenant pending execute work ceiling, if any.
    pub tenant_ceiling_ms: Option<f64>,
    pub thrash_window: u64,
    pub calibration_decay: f64,
}

impl Default for WorkerConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Fifo,
            fair: false,
            tenant_weights: BTreeMap::new(),
            batching: false,
            host_cache_bytes: 64 << 30,
            admission_ceiling_ms: 1000.0,
            tenant_ceiling_ms: None,
            thrash_window: 100,
            calibration_decay: crate::predictor::DEFAULT_DECAY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RequestInput {
    /// Simulation mode: size only.
    Size { bytes: u64 },
    Tensor { tensor: Tensor },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRequest {
    pub request_id: RequestId,
    pub tenant_id: String,
    pub model_id: String,
    pub batch: u32,
    pub input: RequestInput,
    pub arrival_ns: Nanos,
    /// Relative to arrival.
    pub deadline_ns: Option<Nanos>,
    /// Treat the device copy as missing even if resident.
    #[serde(default)]
    pub force_transfer: bool,
}

impl InferenceRequest {
    pub fn new(request_id: RequestId, tenant_id: &str, model_id: &str, arrival_ns: Nanos) -> Self {
        Self {
            request_id,
            tenant_id: tenant_id.to_string(),
            model_id: model_id.to_string(),
            batch: 1,
            input: RequestInput::Size { bytes: 0 },
            arrival_ns,
            deadline_ns: None,
            force_transfer: false,
        }
    }

    pub fn with_deadline_ms(mut self, ms: f64) -> Self {
        self.deadline_ns = Some(time::ms(ms));
        self
    }

    pub fn with_batch(mut self, batch: u32) -> Self {
        self.batch = batch.max(1);
        self
    }

    pub fn with_input(mut self, tensor: Tensor) -> Self {
        self.batch = tensor.batch as u32;
        self.input = RequestInput::Tensor { tensor };
        self
    }

    pub fn forced(mut self) -> Self {
        self.force_transfer = true;
        self
    }

    pub fn deadline_abs(&self) -> Option<Nanos> {
        self.deadline_ns.map(|d| self.arrival_ns + d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RequestState {
    QueuedTransfer,
    QueuedExecute,
    Transferring,
    Executing,
    Done,
    Rejected,
    Cancelled,
    Rerouted,
}

impl RequestState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            RequestState::Done | RequestState::Rejected | RequestState::Cancelled | RequestState::Rerouted
        )
    }

    /// Edges of the request lifecycle.
    pub fn can_transition_to(self, next: RequestState) -> bool {
        use RequestState::*;
        match (self, next) {
            (QueuedTransfer, Transferring | QueuedExecute | Cancelled | Rerouted) => true,
            (Transferring, QueuedExecute | Cancelled) => true,
            (QueuedExecute, Executing | Cancelled | Rerouted) => true,
            (Executing, Done | Cancelled) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resource {
    Transfer,
    Execute,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorkerError {
    #[error("model `{0}` is not registered on this worker")]
    UnknownModel(String),
    #[error("{resource:?} pending work {pending_ms} ms exceeds ceiling {ceiling_ms} ms")]
    Overloaded {
        resource: Resource,
        pending_ms: f64,
        ceiling_ms: f64,
    },
    #[error("model `{model_id}` footprint {bytes} B exceeds capacity {capacity} B")]
    ModelTooLarge {
        model_id: String,
        bytes: u64,
        capacity: u64,
    },
    #[error("no evictable cache space for `{0}`")]
    InsufficientCapacity(String),
    #[error("request {0} already known")]
    DuplicateRequest(RequestId),
    #[error("request {0} was cancelled")]
    Cancelled(RequestId),
    #[error("device fault: {0}")]
    DeviceFault(String),
    #[error("worker `{0}` is unreachable")]
    Unreachable(String),
    #[error("no {0:?} stage is running")]
    Idle(Resource),
    #[error(transparent)]
    Exec(#[from] ExecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    WouldMissDeadline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Admission {
    Admitted(LatencyEstimate),
    Rejected {
        reason: RejectReason,
        estimate: LatencyEstimate,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RerouteAction {
    Keep,
    CancelAndReroute(LatencyEstimate),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvictOutcome {
    Removed,
    /// Removal happens once in-flight requests finish.
    Deferred,
}

/// Everything observed about one finished request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub request_id: RequestId,
    pub tenant_id: String,
    pub model_id: String,
    pub worker_id: String,
    pub device: String,
    pub batch: u32,
    /// Size of the coalesced execution this request ran in.
    pub executed_batch: u32,
    pub residency: Residency,
    pub arrival_ns: Nanos,
    pub admitted_ns: Nanos,
    pub transfer_start_ns: Option<Nanos>,
    pub transfer_end_ns: Option<Nanos>,
    /// Realized fetch and copy of this request's own transfer.
    pub fetch_ns: Nanos,
    pub copy_ns: Nanos,
    pub exec_start_ns: Nanos,
    pub exec_end_ns: Nanos,
    /// This request's share of execute occupancy.
    pub device_busy_ns: Nanos,
    pub estimate: LatencyEstimate,
    pub cost_per_hour: f64,
    #[serde(skip)]
    pub output: Option<Tensor>,
}

impl CompletionRecord {
    pub fn latency_ns(&self) -> Nanos {
        self.exec_end_ns - self.arrival_ns
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkerEvent {
    StartTransfer {
        request_id: RequestId,
        model_id: String,
        fetch_ns: Nanos,
        copy_ns: Nanos,
    },
    StartExecute {
        request_ids: Vec<RequestId>,
        model_id: String,
        batch: u32,
        predicted_ns: Nanos,
    },
    Completed(Box<CompletionRecord>),
    Rerouted {
        request: Box<InferenceRequest>,
        estimate: LatencyEstimate,
    },
    Failed {
        request_id: RequestId,
        reason: String,
    },
    CacheThrash(CacheWarning),
    ModelEvicted {
        model_id: String,
    },
}

#[derive(Debug, Clone)]
struct HostedModel {
    manifest: Arc<ModelManifest>,
    weights: Option<Arc<WeightStore>>,
    live_requests: usize,
    evicting: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Role {
    /// Executes without waiting for a transfer.
    Ready,
    /// Owns a transfer that the listed requests also wait on.
    Leader { followers: Vec<RequestId> },
    Follower { leader: RequestId },
}

#[derive(Debug, Clone)]
struct Tracked {
    req: InferenceRequest,
    state: RequestState,
    residency: Residency,
    admitted_ns: Nanos,
    estimate: LatencyEstimate,
    exec_ns: Nanos,
    /// Transfer this request would need if it led one.
    fetch_ns: Nanos,
    copy_ns: Nanos,
    role: Role,
    device_pinned: bool,
    ready_pred: Nanos,
    done_pred: Nanos,
    transfer_start: Option<Nanos>,
    transfer_end: Option<Nanos>,
    own_fetch: Nanos,
    own_copy: Nanos,
}

#[derive(Debug, Clone)]
struct ActiveTransfer {
    leader: RequestId,
    model_id: String,
    start: Nanos,
    fetch_ns: Nanos,
    copy_ns: Nanos,
    /// The device entry was created for this transfer.
    creates_entry: bool,
    fetched: bool,
    host_pinned: bool,
}

#[derive(Debug, Clone)]
struct ActiveExec {
    ids: Vec<RequestId>,
    model_id: String,
    batch: u32,
    start: Nanos,
    predicted_ns: Nanos,
}

enum Attach {
    DeviceHit,
    Follow(RequestId),
    Lead,
}

pub struct Worker {
    id: String,
    profile: DeviceProfile,
    config: WorkerConfig,
    models: BTreeMap<String, HostedModel>,
    cache: ResidencyCache,
    calibration: CalibrationState,
    requests: HashMap<RequestId, Tracked>,
    transfer_q: ResourceQueue,
    exec_q: ResourceQueue,
    active_transfer: Option<ActiveTransfer>,
    active_exec: Option<ActiveExec>,
    /// Queued (not started) leader per model, for non-forced requests.
    model_leader: HashMap<String, RequestId>,
    transfer_stalled: bool,
    transfer_free_at: Nanos,
    exec_free_at: Nanos,
    dirty: bool,
    max_arrival: Nanos,
    seq: u64,
    busy_transfer_ns: Nanos,
    busy_exec_ns: Nanos,
    outbox: Vec<WorkerEvent>,
}

impl Worker {
    pub fn new(id: &str, profile: DeviceProfile, config: WorkerConfig) -> Self {
        let device_capacity = (!profile.kind.executes_from_host()).then_some(profile.device_memory_bytes);
        let mut cache = ResidencyCache::new(config.host_cache_bytes, device_capacity);
        cache.thrash_window = config.thrash_window;
        let weights = config.tenant_weights.clone();
        Self {
            id: id.to_string(),
            transfer_q: ResourceQueue::new(config.policy, config.fair, weights.clone()),
            exec_q: ResourceQueue::new(config.policy, config.fair, weights),
            calibration: CalibrationState::new(config.calibration_decay),
            profile,
            config,
            models: BTreeMap::new(),
            cache,
            requests: HashMap::new(),
            active_transfer: None,
            active_exec: None,
            model_leader: HashMap::new(),
            transfer_stalled: false,
            transfer_free_at: 0,
            exec_free_at: 0,
            dirty: false,
            max_arrival: 0,
            seq: 0,
            busy_transfer_ns: 0,
            busy_exec_ns: 0,
            outbox: Vec::new(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn profile(&self) -> &DeviceProfile {
        &self.profile
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    pub fn cache(&self) -> &ResidencyCache {
        &self.cache
    }

    pub fn calibration(&self) -> &CalibrationState {
        &self.calibration
    }

    pub fn manifest(&self, model_id: &str) -> Option<&Arc<ModelManifest>> {
        self.models.get(model_id).map(|m| &m.manifest)
    }

    pub fn has_model(&self, model_id: &str) -> bool {
        self.models.get(model_id).is_some_and(|m| !m.evicting)
    }

    pub fn model_ids(&self) -> impl Iterator<Item = &String> {
        self.models.keys()
    }

    pub fn state(&self, id: RequestId) -> Option<RequestState> {
        self.requests.get(&id).map(|t| t.state)
    }

    pub fn pending_requests(&self) -> usize {
        self.requests.len()
    }

    pub fn is_idle(&self) -> bool {
        self.requests.is_empty() && self.active_transfer.is_none() && self.active_exec.is_none()
    }

    /// Cumulative occupied time of each resource.
    pub fn busy_ns(&self) -> (Nanos, Nanos) {
        (self.busy_transfer_ns, self.busy_exec_ns)
    }

    /// Execute work queued or running, as seen by admission.
    pub fn execute_ahead_ns(&self, now: Nanos) -> Nanos {
        self.remaining_exec(now) + self.exec_q.pending_work_ns()
    }

    /// Whether `model_id` sits loaded in device memory (or in host memory
    /// on devices that execute from it).
    pub fn device_resident(&self, model_id: &str) -> bool {
        self.cache
            .get(Level::Device, model_id)
            .is_some_and(|e| !e.loading)
    }

    /// Models with a loaded copy at the execution level.
    pub fn device_resident_models(&self) -> Vec<String> {
        self.models.keys().filter(|m| self.device_resident(m)).cloned().collect()
    }

    pub fn drain_outbox(&mut self) -> Vec<WorkerEvent> {
        std::mem::take(&mut self.outbox)
    }

    fn exact_fifo(&self) -> bool {
        self.config.policy == Policy::Fifo && !self.config.fair && !self.config.batching
    }

    /// Registers a model and makes it host-resident.
    pub fn load_model(&mut self, manifest: ModelManifest, now: Nanos) -> Result<(), WorkerError> {
        let id = manifest.model_name.clone();
        let bytes = manifest.declared_footprint_bytes;
        let capacity = self.cache.exec_level().capacity;
        if bytes > capacity {
            return Err(WorkerError::ModelTooLarge {
                model_id: id,
                bytes,
                capacity,
            });
        }
        if let Some(m) = self.models.get_mut(&id) {
            // Reload cancels a pending eviction.
            m.evicting = false;
        }
        if self.cache.get(Level::Host, &id).is_none() {
            let plan = self
                .cache
                .ensure_resident(&id, bytes, Level::Host, self.seq)
                .map_err(|e| match e {
                    CacheError::ModelTooLarge { bytes, capacity, .. } => WorkerError::ModelTooLarge {
                        model_id: id.clone(),
                        bytes,
                        capacity,
                    },
                    CacheError::NoSpace { .. } => WorkerError::InsufficientCapacity(id.clone()),
                })?;
            self.apply_plan(&plan, now, false);
        }
        if !self.models.contains_key(&id) {
            let weights = (self.profile.kind == crate::predictor::DeviceKind::CpuReference)
                .then(|| Arc::new(generate_weights(&manifest)));
            self.models.insert(
                id,
                HostedModel {
                    manifest: Arc::new(manifest),
                    weights,
                    live_requests: 0,
                    evicting: false,
                },
            );
        }
        Ok(())
    }

    /// Unregisters a model, once no request still uses it.
    pub fn evict_model(&mut self, model_id: &str) -> Result<EvictOutcome, WorkerError> {
        let m = self
            .models
            .get_mut(model_id)
            .filter(|m| !m.evicting)
            .ok_or_else(|| WorkerError::UnknownModel(model_id.into()))?;
        if m.live_requests > 0 {
            m.evicting = true;
            return Ok(EvictOutcome::Deferred);
        }
        self.remove_model(model_id);
        Ok(EvictOutcome::Removed)
    }

    fn remove_model(&mut self, model_id: &str) {
        self.models.remove(model_id);
        self.cache.remove_model(model_id);
        self.model_leader.remove(model_id);
    }

    fn apply_plan(&mut self, plan: &ResidencyPlan, now: Nanos, loading: bool) {
        for w in &plan.warnings {
            self.outbox.push(WorkerEvent::CacheThrash(w.clone()));
        }
        self.cache.apply(plan, now, self.seq, loading);
    }

    fn attach_for(&self, req: &InferenceRequest) -> Attach {
        if req.force_transfer {
            return Attach::Lead;
        }
        if let Some(e) = self.cache.get(Level::Device, &req.model_id) {
            if !e.loading {
                return Attach::DeviceHit;
            }
            if let Some(a) = &self.active_transfer {
                if a.model_id == req.model_id {
                    return Attach::Follow(a.leader);
                }
            }
        }
        match self.model_leader.get(&req.model_id) {
            Some(&l) => Attach::Follow(l),
            None => Attach::Lead,
        }
    }

    fn lead_residency(&self, model_id: &str) -> Residency {
        match self.cache.get(Level::Host, model_id) {
            Some(e) if !e.loading && self.cache.unified() => Residency::DeviceHit,
            Some(e) if !e.loading => Residency::HostHit,
            _ => Residency::Cold,
        }
    }

    fn remaining_transfer(&self, now: Nanos) -> Nanos {
        self.active_transfer
            .as_ref()
            .map_or(0, |a| (a.start + a.fetch_ns + a.copy_ns).saturating_sub(now))
    }

    fn remaining_exec(&self, now: Nanos) -> Nanos {
        self.active_exec
            .as_ref()
            .map_or(0, |a| (a.start + a.predicted_ns).saturating_sub(now))
    }

    fn predict_exec_ns(&self, manifest: &ModelManifest, batch: u32) -> Nanos {
        predict_exec(manifest, &self.profile, batch, Some(&self.calibration))
            .expect("registered manifests are valid")
    }

    /// Predicted time at which request `id` becomes ready to execute.
    fn projected_ready(&self, id: RequestId, now: Nanos) -> Nanos {
        let t = &self.requests[&id];
        if self.exact_fifo() {
            return t.ready_pred.max(now);
        }
        match &t.role {
            Role::Ready => now,
            Role::Follower { leader } => self.projected_ready(*leader, now),
            Role::Leader { .. } => {
                if let Some(a) = self.active_transfer.as_ref().filter(|a| a.leader == id) {
                    return (a.start + a.fetch_ns + a.copy_ns).max(now);
                }
                let key = self.transfer_q.key_for(&self.transfer_candidate(id));
                now + self.remaining_transfer(now)
                    + self.transfer_q.work_ahead(&t.req.tenant_id, &key)
                    + t.fetch_ns
                    + t.copy_ns
            }
        }
    }

    fn projected_done(&self, id: RequestId, now: Nanos) -> Nanos {
        let t = &self.requests[&id];
        if self.exact_fifo() {
            return t.done_pred;
        }
        let key = self.exec_q.key_for(&self.exec_candidate(id));
        let exec_ahead = now + self.remaining_exec(now) + self.exec_q.work_ahead(&t.req.tenant_id, &key);
        self.projected_ready(id, now).max(exec_ahead) + t.exec_ns
    }

    fn transfer_candidate(&self, id: RequestId) -> Candidate {
        let t = &self.requests[&id];
        Candidate {
            id,
            tenant: t.req.tenant_id.clone(),
            arrival: t.req.arrival_ns,
            deadline_abs: t.req.deadline_abs(),
            work_ns: t.fetch_ns + t.copy_ns,
            ready: true,
        }
    }

    fn exec_candidate(&self, id: RequestId) -> Candidate {
        let t = &self.requests[&id];
        Candidate {
            id,
            tenant: t.req.tenant_id.clone(),
            arrival: t.req.arrival_ns,
            deadline_abs: t.req.deadline_abs(),
            work_ns: t.exec_ns,
            ready: matches!(t.role, Role::Ready),
        }
    }

    /// Estimate for `req` if admitted now, without admitting it.
    pub fn estimate(&mut self, req: &InferenceRequest, now: Nanos) -> Result<LatencyEstimate, WorkerError> {
        if self.dirty {
            self.recompute_predictions(now);
        }
        let model = self
            .models
            .get(&req.model_id)
            .filter(|m| !m.evicting)
            .ok_or_else(|| WorkerError::UnknownModel(req.model_id.clone()))?;
        let manifest = model.manifest.clone();
        Ok(self.estimate_for(req, &manifest, &self.attach_for(req), now))
    }

    fn estimate_for(&self, req: &InferenceRequest, manifest: &ModelManifest, attach: &Attach, now: Nanos) -> LatencyEstimate {
        let view = match attach {
            Attach::DeviceHit => ModelView {
                residency: Residency::DeviceHit,
                in_flight_ready_in_ns: None,
            },
            Attach::Follow(l) => ModelView {
                residency: self.requests[l].residency,
                in_flight_ready_in_ns: Some(self.projected_ready(*l, now) - now),
            },
            Attach::Lead => ModelView {
                residency: self.lead_residency(&req.model_id),
                in_flight_ready_in_ns: None,
            },
        };
        let (transfer_ahead, exec_ahead) = if self.exact_fifo() {
            (
                self.transfer_free_at.saturating_sub(now),
                self.exec_free_at.saturating_sub(now),
            )
        } else {
            let (f, c) = predict_transfer(manifest.declared_footprint_bytes, &self.profile, view.residency);
            let probe = Candidate {
                id: req.request_id,
                tenant: req.tenant_id.clone(),
                arrival: req.arrival_ns,
                deadline_abs: req.deadline_abs(),
                work_ns: f + c,
                ready: true,
            };
            let tkey = self.transfer_q.key_for(&probe);
            let ekey = self.exec_q.key_for(&Candidate {
                work_ns: self.predict_exec_ns(manifest, req.batch),
                ..probe
            });
            (
                self.remaining_transfer(now) + self.transfer_q.work_ahead(&req.tenant_id, &tkey),
                self.remaining_exec(now) + self.exec_q.work_ahead(&req.tenant_id, &ekey),
            )
        };
        estimate_with(
            manifest,
            req.batch,
            view,
            transfer_ahead,
            exec_ahead,
            &self.profile,
            Some(&self.calibration),
        )
        .expect("registered manifests are valid")
    }

    /// Admission control followed by enqueueing.
    pub fn admit(&mut self, req: InferenceRequest, now: Nanos) -> Result<Admission, WorkerError> {
        if self.requests.contains_key(&req.request_id) {
            return Err(WorkerError::DuplicateRequest(req.request_id));
        }
        let estimate = self.estimate(&req, now)?;
        let manifest = self.models[&req.model_id].manifest.clone();
        let attach = self.attach_for(&req);

        let ceiling = time::ms(self.config.admission_ceiling_ms);
        let transfer_pending = self.remaining_transfer(now) + self.transfer_q.pending_work_ns();
        let exec_pending = self.remaining_exec(now) + self.exec_q.pending_work_ns();
        let overloaded = |resource, pending: Nanos, ceiling: Nanos| WorkerError::Overloaded {
            resource,
            pending_ms: time::to_ms(pending),
            ceiling_ms: time::to_ms(ceiling),
        };
        if matches!(attach, Attach::Lead) && estimate.fetch_ns + estimate.transfer_ns > 0 && transfer_pending > ceiling {
            return Err(overloaded(Resource::Transfer, transfer_pending, ceiling));
        }
        if exec_pending > ceiling {
            return Err(overloaded(Resource::Execute, exec_pending, ceiling));
        }
        if let Some(tc) = self.config.tenant_ceiling_ms {
            let tc = time::ms(tc);
            let mut own = self.exec_q.tenant_work_ns(&req.tenant_id);
            if let Some(a) = &self.active_exec {
                if a.ids.iter().any(|id| self.requests[id].req.tenant_id == req.tenant_id) {
                    own += self.remaining_exec(now);
                }
            }
            if own > tc {
                return Err(overloaded(Resource::Execute, own, tc));
            }
        }
        if let Some(d) = req.deadline_ns {
            if estimate.total_ns > d {
                return Ok(Admission::Rejected {
                    reason: RejectReason::WouldMissDeadline,
                    estimate,
                });
            }
        }

        self.seq += 1;
        let id = req.request_id;
        let lead_res = self.lead_residency(&req.model_id);
        let (fetch_ns, copy_ns) = predict_transfer(manifest.declared_footprint_bytes, &self.profile, lead_res);
        let exec_ns = estimate.exec_ns;
        let (role, residency, state) = match attach {
            Attach::DeviceHit => {
                self.cache.pin(Level::Device, &req.model_id);
                self.cache.touch(Level::Device, &req.model_id, now, self.seq);
                (Role::Ready, Residency::DeviceHit, RequestState::QueuedExecute)
            }
            Attach::Follow(leader) => {
                let res = self.requests[&leader].residency;
                (Role::Follower { leader }, res, RequestState::QueuedExecute)
            }
            Attach::Lead => (Role::Leader { followers: Vec::new() }, lead_res, RequestState::QueuedTransfer),
        };
        let mut device_pinned = matches!(attach, Attach::DeviceHit);
        if let Attach::Follow(leader) = attach {
            if let Role::Leader { followers } = &mut self.requests.get_mut(&leader).expect("leader").role {
                followers.push(id);
            }
            // Following an in-flight copy: the entry exists, hold it now.
            if self.active_transfer.as_ref().is_some_and(|a| a.leader == leader) {
                self.cache.pin(Level::Device, &req.model_id);
                device_pinned = true;
            }
        }
        let ready_pred = match attach {
            Attach::DeviceHit => now,
            Attach::Follow(l) => self.requests[&l].ready_pred,
            Attach::Lead => {
                let r = self.transfer_free_at.max(now) + fetch_ns + copy_ns;
                self.transfer_free_at = r;
                r
            }
        };
        let done_pred = ready_pred.max(self.exec_free_at) + exec_ns;
        self.exec_free_at = done_pred;
        // Drain shortcuts assume admission in arrival order.
        if req.arrival_ns < self.max_arrival {
            self.dirty = true;
        }
        self.max_arrival = self.max_arrival.max(req.arrival_ns);
        let lead = matches!(attach, Attach::Lead);
        if lead && !req.force_transfer {
            self.model_leader.insert(req.model_id.clone(), id);
        }
        self.models.get_mut(&req.model_id).expect("registered").live_requests += 1;
        self.requests.insert(
            id,
            Tracked {
                req,
                state,
                residency,
                admitted_ns: now,
                estimate,
                exec_ns,
                fetch_ns,
                copy_ns,
                role,
                device_pinned,
                ready_pred,
                done_pred,
                transfer_start: None,
                transfer_end: None,
                own_fetch: 0,
                own_copy: 0,
            },
        );
        if lead {
            let c = self.transfer_candidate(id);
            self.transfer_q.insert(c);
        }
        let c = self.exec_candidate(id);
        self.exec_q.insert(c);
        self.pump(now);
        Ok(Admission::Admitted(estimate))
    }

    /// Starts whatever work the free resources can take.
    fn pump(&mut self, now: Nanos) {
        loop {
            let mut progressed = false;
            if self.active_transfer.is_none() {
                progressed |= self.start_transfer(now);
            }
            if self.active_exec.is_none() {
                progressed |= self.start_exec(now);
            }
            if !progressed {
                break;
            }
        }
    }

    /// Returns true if queue state changed.
    fn start_transfer(&mut self, now: Nanos) -> bool {
        let Some(id) = self.transfer_q.peek(PickMode::ReadyOnly) else {
            self.transfer_stalled = false;
            return false;
        };
        let t = &self.requests[&id];
        let model_id = t.req.model_id.clone();
        let forced = t.req.force_transfer;
        let bytes = self.models[&model_id].manifest.declared_footprint_bytes;
        let device_entry = self.cache.get(Level::Device, &model_id).cloned();

        if !forced {
            if let Some(e) = &device_entry {
                debug_assert!(!e.loading, "free transfer resource with loading entry");
                // Landed since admission: no copy needed.
                self.transfer_q.pick(PickMode::ReadyOnly);
                self.release_leader_as_ready(id, &model_id, true);
                return true;
            }
        }

        // A forced copy over a resident device entry still needs a host source.
        let target = if device_entry.is_some() { Level::Host } else { Level::Device };
        let plan = match self.cache.ensure_resident(&model_id, bytes, target, self.seq) {
            Ok(p) => p,
            Err(CacheError::NoSpace { .. }) => {
                if !self.transfer_stalled {
                    self.transfer_stalled = true;
                    self.dirty = true;
                    return true;
                }
                return false;
            }
            Err(e) => {
                self.transfer_q.pick(PickMode::ReadyOnly);
                self.fail_request(id, e.to_string());
                return true;
            }
        };
        self.transfer_stalled = false;
        self.transfer_q.pick(PickMode::ReadyOnly);
        let creates_entry = device_entry.is_none();
        let fetched = plan.jobs.iter().any(|j| matches!(j, ResidencyJob::Fetch { .. }));
        self.apply_plan(&plan, now, true);
        let (fetch_ns, copy_ns) = predict_transfer(
            bytes,
            &self.profile,
            if fetched { Residency::Cold } else { Residency::HostHit },
        );
        let host_pinned = !self.cache.unified();
        if host_pinned {
            self.cache.pin(Level::Host, &model_id);
        }
        let followers = match &self.requests[&id].role {
            Role::Leader { followers } => followers.clone(),
            _ => Vec::new(),
        };
        for rid in std::iter::once(id).chain(followers) {
            let t = self.requests.get_mut(&rid).expect("tracked");
            if !t.device_pinned {
                t.device_pinned = true;
                self.cache.pin(Level::Device, &model_id);
            }
        }
        if self.model_leader.get(&model_id) == Some(&id) {
            self.model_leader.remove(&model_id);
        }
        let t = self.requests.get_mut(&id).expect("tracked");
        debug_assert!(t.state.can_transition_to(RequestState::Transferring));
        t.state = RequestState::Transferring;
        t.transfer_start = Some(now);
        t.own_fetch = fetch_ns;
        t.own_copy = copy_ns;
        if fetch_ns != t.fetch_ns || copy_ns != t.copy_ns {
            self.dirty = true;
        }
        self.active_transfer = Some(ActiveTransfer {
            leader: id,
            model_id: model_id.clone(),
            start: now,
            fetch_ns,
            copy_ns,
            creates_entry,
            fetched,
            host_pinned,
        });
        self.outbox.push(WorkerEvent::StartTransfer {
            request_id: id,
            model_id,
            fetch_ns,
            copy_ns,
        });
        true
    }

    /// Marks a leader (and its followers) ready without a transfer of its own.
    fn release_leader_as_ready(&mut self, id: RequestId, model_id: &str, pin: bool) {
        if self.model_leader.get(model_id) == Some(&id) {
            self.model_leader.remove(model_id);
        }
        let followers = match std::mem::replace(&mut self.requests.get_mut(&id).expect("tracked").role, Role::Ready) {
            Role::Leader { followers } => followers,
            _ => Vec::new(),
        };
        for rid in std::iter::once(id).chain(followers) {
            let t = self.requests.get_mut(&rid).expect("tracked");
            t.role = Role::Ready;
            if t.state == RequestState::QueuedTransfer {
                t.state = RequestState::QueuedExecute;
            }
            if pin && !t.device_pinned {
                t.device_pinned = true;
                self.cache.pin(Level::Device, model_id);
            }
            self.exec_q.set_ready(rid);
        }
        self.dirty = true;
    }

    fn start_exec(&mut self, now: Nanos) -> bool {
        // FIFO holds the head back until ready, unless the transfer side is
        // stuck waiting for pinned memory that only executions release.
        let mode = if self.config.policy == Policy::Fifo && !self.config.fair && !self.transfer_stalled {
            PickMode::StrictHead
        } else {
            PickMode::ReadyOnly
        };
        let Some(first) = self.exec_q.pick(mode) else {
            return false;
        };
        let model_id = self.requests[&first].req.model_id.clone();
        let mut ids = vec![first];
        let mut batch = self.requests[&first].req.batch;
        if self.config.batching {
            for rid in self.exec_q.ready_in_order() {
                let t = &self.requests[&rid];
                if t.req.model_id == model_id && batch + t.req.batch <= self.profile.max_batch {
                    batch += t.req.batch;
                    ids.push(rid);
                }
            }
            for rid in &ids[1..] {
                self.exec_q.remove(*rid);
            }
        }
        let manifest = self.models[&model_id].manifest.clone();
        let predicted_ns = if ids.len() == 1 {
            self.requests[&first].exec_ns
        } else {
            self.predict_exec_ns(&manifest, batch)
        };
        self.cache.touch(Level::Device, &model_id, now, self.seq);
        for rid in &ids {
            let t = self.requests.get_mut(rid).expect("tracked");
            debug_assert!(t.state.can_transition_to(RequestState::Executing), "{:?}", t.state);
            t.state = RequestState::Executing;
        }
        self.active_exec = Some(ActiveExec {
            ids: ids.clone(),
            model_id: model_id.clone(),
            batch,
            start: now,
            predicted_ns,
        });
        self.outbox.push(WorkerEvent::StartExecute {
            request_ids: ids,
            model_id,
            batch,
            predicted_ns,
        });
        true
    }

    /// Reports that the running transfer finished at `now`.
    pub fn complete_transfer(&mut self, now: Nanos) -> Result<(), WorkerError> {
        let a = self.active_transfer.take().ok_or(WorkerError::Idle(Resource::Transfer))?;
        self.busy_transfer_ns += now - a.start;
        if now != a.start + a.fetch_ns + a.copy_ns {
            self.dirty = true;
        }
        if a.creates_entry {
            self.cache.mark_loaded(Level::Device, &a.model_id);
        }
        if a.fetched {
            self.cache.mark_loaded(Level::Host, &a.model_id);
        }
        if a.host_pinned {
            self.cache.unpin(Level::Host, &a.model_id);
        }
        if let Some(t) = self.requests.get_mut(&a.leader) {
            t.transfer_end = Some(now);
            t.state = RequestState::QueuedExecute;
        }
        self.release_leader_as_ready(a.leader, &a.model_id, false);
        self.pump(now);
        Ok(())
    }

    /// Reports that the running execution finished at `now`. `outputs`
    /// holds one tensor per request when the stage really computed.
    pub fn complete_execute(&mut self, now: Nanos, outputs: Option<Vec<Tensor>>) -> Result<(), WorkerError> {
        let a = self.active_exec.take().ok_or(WorkerError::Idle(Resource::Execute))?;
        let occupancy = now - a.start;
        self.busy_exec_ns += occupancy;
        if occupancy != a.predicted_ns {
            self.dirty = true;
        }
        self.calibration
            .observe_ns(CalibrationKey::new(&a.model_id, &self.profile.name, a.batch), occupancy);
        let mut outputs = outputs.map(|v| v.into_iter());
        let mut charged = 0;
        let n = a.ids.len();
        for (i, rid) in a.ids.iter().enumerate() {
            let t = self.requests.remove(rid).expect("tracked");
            let share = if i + 1 == n {
                occupancy - charged
            } else {
                occupancy * t.req.batch as u64 / a.batch as u64
            };
            charged += share;
            if t.device_pinned {
                self.cache.unpin(Level::Device, &a.model_id);
            }
            let record = CompletionRecord {
                request_id: *rid,
                tenant_id: t.req.tenant_id.clone(),
                model_id: t.req.model_id.clone(),
                worker_id: self.id.clone(),
                device: self.profile.name.clone(),
                batch: t.req.batch,
                executed_batch: a.batch,
                residency: t.residency,
                arrival_ns: t.req.arrival_ns,
                admitted_ns: t.admitted_ns,
                transfer_start_ns: t.transfer_start,
                transfer_end_ns: t.transfer_end,
                fetch_ns: t.own_fetch,
                copy_ns: t.own_copy,
                exec_start_ns: a.start,
                exec_end_ns: now,
                device_busy_ns: share,
                estimate: t.estimate,
                cost_per_hour: self.profile.cost_per_hour,
                output: outputs.as_mut().and_then(|o| o.next()),
            };
            self.outbox.push(WorkerEvent::Completed(Box::new(record)));
            self.release_model_ref(&a.model_id);
        }
        self.pump(now);
        Ok(())
    }

    fn release_model_ref(&mut self, model_id: &str) {
        let Some(m) = self.models.get_mut(model_id) else {
            return;
        };
        m.live_requests -= 1;
        if m.live_requests == 0 && m.evicting {
            self.remove_model(model_id);
            self.outbox.push(WorkerEvent::ModelEvicted {
                model_id: model_id.to_string(),
            });
        }
    }

    fn fail_request(&mut self, id: RequestId, reason: String) {
        self.detach(id);
        if let Some(t) = self.requests.remove(&id) {
            self.release_model_ref(&t.req.model_id);
        }
        self.outbox.push(WorkerEvent::Failed { request_id: id, reason });
        self.dirty = true;
    }

    /// Removes a queued request from queues and from its leader/follower
    /// group, promoting a follower if it led a queued transfer.
    fn detach(&mut self, id: RequestId) {
        self.transfer_q.remove(id);
        self.exec_q.remove(id);
        let Some(t) = self.requests.get(&id) else {
            return;
        };
        let model_id = t.req.model_id.clone();
        let role = t.role.clone();
        let pinned = t.device_pinned;
        if pinned {
            self.cache.unpin(Level::Device, &model_id);
            self.requests.get_mut(&id).expect("tracked").device_pinned = false;
        }
        match role {
            Role::Ready => {}
            Role::Follower { leader } => {
                if let Some(Role::Leader { followers }) = self.requests.get_mut(&leader).map(|l| &mut l.role) {
                    followers.retain(|f| *f != id);
                }
            }
            Role::Leader { followers } => {
                let in_flight = self.active_transfer.as_ref().is_some_and(|a| a.leader == id);
                assert!(!in_flight, "detaching a transferring request");
                if self.model_leader.get(&model_id) == Some(&id) {
                    self.model_leader.remove(&model_id);
                }
                if let Some((&new_leader, rest)) = followers.split_first() {
                    for f in rest {
                        self.requests.get_mut(f).expect("tracked").role = Role::Follower { leader: new_leader };
                    }
                    let nl = self.requests.get_mut(&new_leader).expect("tracked");
                    nl.role = Role::Leader {
                        followers: rest.to_vec(),
                    };
                    nl.state = RequestState::QueuedTransfer;
                    if !nl.req.force_transfer {
                        self.model_leader.insert(model_id, new_leader);
                    }
                    let c = self.transfer_candidate(new_leader);
                    self.transfer_q.insert(c);
                }
            }
        }
    }

    /// Re-estimates queued requests with deadlines; cancels the ones that
    /// would now miss. Executing and transferring requests are never listed.
    pub fn reroute_check(&mut self, now: Nanos) -> Vec<(RequestId, RerouteAction)> {
        if self.dirty {
            self.recompute_predictions(now);
        }
        let mut ids: Vec<RequestId> = self
            .requests
            .iter()
            .filter(|(_, t)| {
                t.req.deadline_ns.is_some()
                    && matches!(t.state, RequestState::QueuedTransfer | RequestState::QueuedExecute)
            })
            .map(|(id, _)| *id)
            .collect();
        ids.sort_unstable();
        let mut out = Vec::with_capacity(ids.len());
        let mut cancel = Vec::new();
        for id in ids {
            let done = self.projected_done(id, now);
            let t = &self.requests[&id];
            let deadline = t.req.deadline_abs().expect("filtered");
            if done > deadline {
                let exec = t.exec_ns;
                let estimate = LatencyEstimate {
                    queue_ns: done - now - exec,
                    fetch_ns: 0,
                    transfer_ns: 0,
                    exec_ns: exec,
                    total_ns: done - now,
                    p99_ns: done - now,
                };
                out.push((id, RerouteAction::CancelAndReroute(estimate)));
                cancel.push((id, estimate));
            } else {
                out.push((id, RerouteAction::Keep));
            }
        }
        for (id, estimate) in cancel {
            self.detach(id);
            let t = self.requests.remove(&id).expect("tracked");
            debug_assert!(t.state.can_transition_to(RequestState::Rerouted));
            self.release_model_ref(&t.req.model_id);
            self.outbox.push(WorkerEvent::Rerouted {
                request: Box::new(t.req),
                estimate,
            });
            self.dirty = true;
        }
        if !out.is_empty() {
            self.pump(now);
        }
        out
    }

    /// Client-initiated cancellation of a queued request.
    pub fn cancel(&mut self, id: RequestId, now: Nanos) -> Result<(), WorkerError> {
        let t = self.requests.get(&id).ok_or(WorkerError::Cancelled(id))?;
        if !matches!(t.state, RequestState::QueuedTransfer | RequestState::QueuedExecute) {
            return Err(WorkerError::Cancelled(id));
        }
        self.detach(id);
        let t = self.requests.remove(&id).expect("tracked");
        self.release_model_ref(&t.req.model_id);
        self.dirty = true;
        self.pump(now);
        Ok(())
    }

    /// Whether any queued request carries a deadline.
    pub fn has_deadline_requests(&self) -> bool {
        self.requests
            .values()
            .any(|t| t.req.deadline_ns.is_some() && !matches!(t.state, RequestState::Executing | RequestState::Transferring))
    }

    /// Replays queues in service order to refresh per-request predictions
    /// and drain times.
    fn recompute_predictions(&mut self, now: Nanos) {
        self.dirty = false;
        let mut t = now;
        if let Some(a) = &self.active_transfer {
            t = (a.start + a.fetch_ns + a.copy_ns).max(now);
            let leader = a.leader;
            self.set_group_ready(leader, t);
        }
        for id in self.transfer_q.ordered() {
            let tr = &self.requests[&id];
            t = t.max(now) + tr.fetch_ns + tr.copy_ns;
            self.set_group_ready(id, t);
        }
        self.transfer_free_at = t;
        let mut e = self
            .active_exec
            .as_ref()
            .map_or(now, |a| (a.start + a.predicted_ns).max(now));
        for id in self.exec_q.ordered() {
            let tr = self.requests.get_mut(&id).expect("tracked");
            if matches!(tr.role, Role::Ready) {
                tr.ready_pred = now;
            }
            e = tr.ready_pred.max(e) + tr.exec_ns;
            tr.done_pred = e;
        }
        self.exec_free_at = e;
    }

    fn set_group_ready(&mut self, leader: RequestId, at: Nanos) {
        let followers = match &self.requests[&leader].role {
            Role::Leader { followers } => followers.clone(),
            _ => Vec::new(),
        };
        for id in std::iter::once(leader).chain(followers) {
            self.requests.get_mut(&id).expect("tracked").ready_pred = at;
        }
    }

    /// Aborts every unfinished request, e.g. on a device fault. Returns the
    /// affected ids in ascending order.
    pub fn abort_all(&mut self) -> Vec<RequestId> {
        let mut ids: Vec<RequestId> = self.requests.keys().copied().collect();
        ids.sort_unstable();
        let model_ids: Vec<String> = self.requests.values().map(|t| t.req.model_id.clone()).collect();
        self.requests.clear();
        self.transfer_q = ResourceQueue::new(self.config.policy, self.config.fair, self.config.tenant_weights.clone());
        self.exec_q = ResourceQueue::new(self.config.policy, self.config.fair, self.config.tenant_weights.clone());
        self.active_transfer = None;
        self.active_exec = None;
        self.model_leader.clear();
        // Drop partially loaded entries and every pin.
        let mut fresh = ResidencyCache::new(self.cache.host.capacity, self.cache.device.as_ref().map(|d| d.capacity));
        fresh.thrash_window = self.cache.thrash_window;
        for lvl in [Level::Host, Level::Device] {
            let entries: Vec<CacheEntry> = match lvl {
                Level::Host => self.cache.host.entries().cloned().collect(),
                Level::Device => self.cache.device.iter().flat_map(|d| d.entries().cloned()).collect(),
            };
            for e in entries.into_iter().filter(|e| !e.loading) {
                let plan = ResidencyPlan {
                    jobs: vec![match lvl {
                        Level::Host => ResidencyJob::Fetch {
                            model_id: e.model_id.clone(),
                            bytes: e.bytes,
                        },
                        Level::Device => ResidencyJob::Transfer {
                            model_id: e.model_id.clone(),
                            bytes: e.bytes,
                        },
                    }],
                    ..Default::default()
                };
                fresh.apply(&plan, e.last_used_time, e.last_used_seq, false);
            }
        }
        self.cache = fresh;
        for m in model_ids {
            self.release_model_ref(&m);
        }
        self.transfer_stalled = false;
        self.dirty = true;
        ids
    }

    /// Inputs for running the active execution through the reference
    /// executor.
    pub fn execution_job(&self) -> Option<(Arc<ModelManifest>, Option<Arc<WeightStore>>, Vec<Option<Tensor>>)> {
        let a = self.active_exec.as_ref()?;
        let m = &self.models[&a.model_id];
        let inputs = a
            .ids
            .iter()
            .map(|id| match &self.requests[id].req.input {
                RequestInput::Tensor { tensor } => Some(tensor.clone()),
                RequestInput::Size { .. } => None,
            })
            .collect();
        Some((m.manifest.clone(), m.weights.clone(), inputs))
    }

    pub fn snapshot(&self, now: Nanos) -> WorkerQueueSnapshot {
        let models = self
            .models
            .iter()
            .filter(|(_, m)| !m.evicting)
            .map(|(id, _)| {
                let probe = InferenceRequest::new(0, "", id, now);
                let view = match self.attach_for(&probe) {
                    Attach::DeviceHit => ModelView {
                        residency: Residency::DeviceHit,
                        in_flight_ready_in_ns: None,
                    },
                    Attach::Follow(l) => ModelView {
                        residency: self.requests[&l].residency,
                        in_flight_ready_in_ns: Some(self.projected_ready(l, now).saturating_sub(now)),
                    },
                    Attach::Lead => ModelView {
                        residency: self.lead_residency(id),
                        in_flight_ready_in_ns: None,
                    },
                };
                (id.clone(), view)
            })
            .collect();
        let dev = self.cache.exec_level();
        WorkerQueueSnapshot {
            worker_id: self.id.clone(),
            timestamp: now,
            policy: self.config.policy.as_str().to_string(),
            transfer_ahead_ns: self.remaining_transfer(now) + self.transfer_q.pending_work_ns(),
            execute_ahead_ns: self.remaining_exec(now) + self.exec_q.pending_work_ns(),
            pending_requests: self.requests.len(),
            models,
            cache: CacheOccupancy {
                device_used: dev.used,
                device_capacity: dev.capacity,
                host_used: self.cache.host.used,
                host_capacity: self.cache.host.capacity,
            },
        }
    }
}

/// Runs one execution through the reference executor, splitting the
/// stacked output back per request.
pub fn run_reference(
    manifest: &ModelManifest,
    weights: &WeightStore,
    inputs: &[Option<Tensor>],
) -> Result<Vec<Tensor>, WorkerError> {
    let tensors: Vec<Tensor> = inputs
        .iter()
        .map(|t| t.clone().ok_or_else(|| WorkerError::DeviceFault("request carries no tensor".into())))
        .collect::<Result<_, _>>()?;
    let stacked = Tensor::stack(&tensors)?;
    let out = executor::execute_model(manifest, weights, &stacked)?;
    let mut split = Vec::with_capacity(tensors.len());
    let mut row = 0;
    for t in &tensors {
        let parts: Vec<Tensor> = (row..row + t.batch).map(|b| out.sample(b)).collect();
        split.push(Tensor::stack(&parts)?);
        row += t.batch;
    }
    Ok(split)
}
