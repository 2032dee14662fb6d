//! Greedy replica placement.

use std::collections::BTreeSet;

use super::{model_throughput, ControllerError, WorkerId, WorkerInfo};
use crate::manifest::ModelManifest;

/// What a placement needs to know about the model being placed.
#[derive(Debug, Clone)]
pub struct PlacementRequest<'a> {
    pub model_id: &'a str,
    pub manifest: &'a ModelManifest,
    /// Demand each new replica is expected to serve, in inferences/s.
    pub demand_per_replica: f64,
}

impl PlacementRequest<'_> {
    /// `w`'s load after taking on one replica.
    pub fn projected_load(&self, w: &WorkerInfo) -> f64 {
        if self.demand_per_replica <= 0.0 {
            return w.load_ewma;
        }
        w.load_ewma + self.demand_per_replica / model_throughput(self.manifest, &w.profile)
    }
}

/// Host bytes already promised to models placed on `w`.
fn committed_bytes(w: &WorkerInfo) -> u64 {
    w.assigned.values().sum()
}

/// Whether `w` can host the model at all: the execution level must hold it
/// and the host cache must keep every assigned model resident.
pub fn fits(w: &WorkerInfo, req: &PlacementRequest<'_>) -> bool {
    let exec_capacity = if w.profile.kind.executes_from_host() {
        w.host_cache_bytes
    } else {
        w.profile.device_memory_bytes
    };
    let bytes = req.manifest.declared_footprint_bytes;
    bytes <= exec_capacity && committed_bytes(w) + bytes <= w.host_cache_bytes
}

/// Picks `k` distinct workers for `req`, lowest projected load first, then
/// fewest assigned models, then worker id.
pub fn place<'a>(
    workers: impl IntoIterator<Item = &'a WorkerInfo>,
    req: &PlacementRequest<'_>,
    k: usize,
    exclude: &BTreeSet<WorkerId>,
) -> Result<Vec<WorkerId>, ControllerError> {
    let mut candidates: Vec<&WorkerInfo> = workers
        .into_iter()
        .filter(|w| w.alive && !exclude.contains(&w.worker_id))
        .filter(|w| !w.assigned.contains_key(req.model_id))
        .filter(|w| w.exclusive_for.as_deref().is_none_or(|m| m == req.model_id))
        .filter(|w| fits(w, req))
        .collect();
    if candidates.len() < k {
        return Err(ControllerError::InsufficientCapacity {
            model_id: req.model_id.to_string(),
            wanted: k,
            available: candidates.len(),
        });
    }
    candidates.sort_by(|a, b| {
        req.projected_load(a)
            .total_cmp(&req.projected_load(b))
            .then(a.assigned.len().cmp(&b.assigned.len()))
            .then(a.worker_id.cmp(&b.worker_id))
    });
    Ok(candidates.into_iter().take(k).map(|w| w.worker_id.clone()).collect())
}
