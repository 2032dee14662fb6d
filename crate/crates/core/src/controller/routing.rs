//! Versioned routing snapshots and the thin router that applies them.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::WorkerId;
use crate::predictor::{Residency, WorkerQueueSnapshot};
use crate::time::Nanos;
use crate::worker::{Admission, WorkerError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub worker_id: WorkerId,
    /// Device residency as of the worker's last heartbeat.
    pub device_resident: bool,
    /// Pending execute work as of the worker's last heartbeat.
    pub pending_ns: Nanos,
}

/// Immutable per-model replica lists. Routers only move to newer versions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    pub version: u64,
    pub routes: BTreeMap<String, Vec<RouteEntry>>,
}

impl RoutingTable {
    pub fn replicas(&self, model_id: &str) -> Option<&[RouteEntry]> {
        self.routes.get(model_id).map(Vec::as_slice)
    }
}

/// Live view of one replica, when the router can see it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicaLoad {
    pub device_resident: bool,
    pub pending_ns: Nanos,
}

impl ReplicaLoad {
    pub fn from_snapshot(snap: &WorkerQueueSnapshot, model_id: &str) -> Self {
        Self {
            device_resident: snap
                .models
                .get(model_id)
                .is_some_and(|v| v.residency == Residency::DeviceHit),
            pending_ns: snap.execute_ahead_ns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RouteError {
    #[error("model `{0}` has no routable replica")]
    ModelUnavailable(String),
}

/// Result of one routed submission.
#[derive(Debug, Clone, PartialEq)]
pub struct Dispatch {
    pub worker_id: WorkerId,
    pub outcome: Result<Admission, WorkerError>,
    /// Workers tried before `worker_id`.
    pub attempts: usize,
}

#[derive(Debug, Default)]
pub struct Router {
    table: Arc<RoutingTable>,
    /// Requests routed per model since the last demand report.
    counts: BTreeMap<String, u64>,
}

impl Router {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn table(&self) -> &Arc<RoutingTable> {
        &self.table
    }

    /// Installs `table` if it is newer than the current one.
    pub fn apply(&mut self, table: Arc<RoutingTable>) -> bool {
        if table.version > self.table.version {
            self.table = table;
            true
        } else {
            false
        }
    }

    /// Replicas of `model_id`, device-resident first, then least pending work.
    /// `probe` supplies live load where available; otherwise the table's
    /// heartbeat view is used.
    pub fn rank(
        &self,
        model_id: &str,
        probe: impl Fn(&str) -> Option<ReplicaLoad>,
    ) -> Result<Vec<WorkerId>, RouteError> {
        let entries = self
            .table
            .replicas(model_id)
            .filter(|r| !r.is_empty())
            .ok_or_else(|| RouteError::ModelUnavailable(model_id.to_string()))?;
        let mut ranked: Vec<(bool, Nanos, &str)> = entries
            .iter()
            .map(|e| {
                let load = probe(&e.worker_id).unwrap_or(ReplicaLoad {
                    device_resident: e.device_resident,
                    pending_ns: e.pending_ns,
                });
                (!load.device_resident, load.pending_ns, e.worker_id.as_str())
            })
            .collect();
        ranked.sort();
        Ok(ranked.into_iter().map(|(_, _, w)| w.to_string()).collect())
    }

    /// Routes one request: submits to the best replica and, if it refuses,
    /// to the next one once. The second refusal is surfaced as is.
    pub fn dispatch(
        &mut self,
        model_id: &str,
        probe: impl Fn(&str) -> Option<ReplicaLoad>,
        mut submit: impl FnMut(&str) -> Result<Admission, WorkerError>,
    ) -> Result<Dispatch, RouteError> {
        let ranked = self.rank(model_id, probe)?;
        *self.counts.entry(model_id.to_string()).or_default() += 1;
        let mut last = None;
        for (attempts, w) in ranked.into_iter().take(2).enumerate() {
            let outcome = submit(&w);
            let refused = matches!(
                outcome,
                Ok(Admission::Rejected { .. })
                    | Err(WorkerError::Overloaded { .. })
                    | Err(WorkerError::UnknownModel(_))
                    | Err(WorkerError::Unreachable(_))
            );
            last = Some(Dispatch {
                worker_id: w,
                outcome,
                attempts,
            });
            if !refused {
                break;
            }
        }
        Ok(last.expect("ranked list is non-empty"))
    }

    /// Takes the per-model routed counts accumulated since the last call.
    pub fn take_counts(&mut self) -> BTreeMap<String, u64> {
        std::mem::take(&mut self.counts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::LatencyEstimate;
    use crate::worker::RejectReason;

    fn table(routes: &[(&str, &[(&str, bool, Nanos)])]) -> Arc<RoutingTable> {
        Arc::new(RoutingTable {
            version: 1,
            routes: routes
                .iter()
                .map(|(m, rs)| {
                    let list = rs
                        .iter()
                        .map(|(w, d, p)| RouteEntry {
                            worker_id: w.to_string(),
                            device_resident: *d,
                            pending_ns: *p,
                        })
                        .collect();
                    (m.to_string(), list)
                })
                .collect(),
        })
    }

    fn admitted() -> Result<Admission, WorkerError> {
        Ok(Admission::Admitted(LatencyEstimate::default()))
    }

    #[test]
    fn single_replica_gets_everything() {
        let mut r = Router::new();
        r.apply(table(&[("m", &[("w1", false, 0)])]));
        let d = r.dispatch("m", |_| None, |_| admitted()).unwrap();
        assert_eq!(d.worker_id, "w1");
    }

    #[test]
    fn least_pending_among_resident() {
        let mut r = Router::new();
        r.apply(table(&[("m", &[("w1", true, 50_000_000), ("w2", true, 1_000_000)])]));
        assert_eq!(r.rank("m", |_| None).unwrap(), ["w2", "w1"]);
    }

    #[test]
    fn resident_beats_idle() {
        let mut r = Router::new();
        r.apply(table(&[("m", &[("w1", false, 0), ("w2", true, 9_000_000)])]));
        assert_eq!(r.rank("m", |_| None).unwrap(), ["w2", "w1"]);
    }

    #[test]
    fn deadline_refusal_retries_next_replica_once() {
        let mut r = Router::new();
        r.apply(table(&[("m", &[("w1", true, 50_000_000), ("w2", true, 1_000_000), ("w3", true, 90_000_000)])]));
        let mut tried = Vec::new();
        let d = r
            .dispatch("m", |_| None, |w| {
                tried.push(w.to_string());
                if w == "w2" {
                    Ok(Admission::Rejected {
                        reason: RejectReason::WouldMissDeadline,
                        estimate: LatencyEstimate::default(),
                    })
                } else {
                    admitted()
                }
            })
            .unwrap();
        assert_eq!(d.worker_id, "w1");
        assert_eq!(d.attempts, 1);

        tried.clear();
        let d = r
            .dispatch("m", |_| None, |w| {
                tried.push(w.to_string());
                Ok(Admission::Rejected {
                    reason: RejectReason::WouldMissDeadline,
                    estimate: LatencyEstimate::default(),
                })
            })
            .unwrap();
        assert_eq!(tried, ["w2", "w1"]);
        assert!(matches!(d.outcome, Ok(Admission::Rejected { .. })));
    }

    #[test]
    fn stale_tables_are_ignored() {
        let mut r = Router::new();
        let mut t = (*table(&[("m", &[("w1", false, 0)])])).clone();
        t.version = 5;
        assert!(r.apply(Arc::new(t.clone())));
        t.version = 4;
        t.routes.clear();
        assert!(!r.apply(Arc::new(t)));
        assert!(r.rank("m", |_| None).is_ok());
    }

    #[test]
    fn unknown_model_is_unavailable() {
        let mut r = Router::new();
        r.apply(table(&[("m", &[])]));
        assert_eq!(
            r.dispatch("m", |_| None, |_| admitted()).unwrap_err(),
            RouteError::ModelUnavailable("m".into())
        );
        assert!(r.rank("x", |_| None).is_err());
    }
}
