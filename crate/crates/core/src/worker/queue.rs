use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::time::Nanos;

pub type RequestId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    #[default]
    Fifo,
    Edf,
    Srpt,
    MinAvgLatency,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Fifo, Policy::Edf, Policy::Srpt, Policy::MinAvgLatency];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Fifo => "fifo",
            Policy::Edf => "edf",
            Policy::Srpt => "srpt",
            Policy::MinAvgLatency => "min-avg-latency",
        }
    }

    pub fn from_name(name: &str) -> Option<Policy> {
        Policy::ALL.into_iter().find(|p| p.as_str() == name)
    }

    /// Ordering key; smaller goes first. Ties break on `(arrival, id)`.
    /// With known serial costs, minimizing mean completion is
    /// shortest-job-first, so `MinAvgLatency` orders like `Srpt`.
    pub fn key(self, c: &Candidate) -> QueueKey {
        let primary = match self {
            Policy::Fifo => 0,
            Policy::Edf => c.deadline_abs.unwrap_or(Nanos::MAX),
            Policy::Srpt | Policy::MinAvgLatency => c.work_ns,
        };
        QueueKey {
            primary,
            arrival: c.arrival,
            id: c.id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueueKey {
    pub primary: u64,
    pub arrival: Nanos,
    pub id: RequestId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Candidate {
    pub id: RequestId,
    pub tenant: String,
    pub arrival: Nanos,
    pub deadline_abs: Option<Nanos>,
    /// Predicted occupancy of this resource.
    pub work_ns: Nanos,
    pub ready: bool,
}

/// Which entries a pick may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PickMode {
    /// Only the overall head, and only once it is ready.
    StrictHead,
    /// The best ready entry.
    ReadyOnly,
}

#[derive(Debug, Clone)]
struct Entry {
    tenant: String,
    key: QueueKey,
    work_ns: Nanos,
    ready: bool,
}

/// Pending requests for one resource, ordered by policy within each tenant.
/// With `fair` set, tenants take turns by weighted round-robin before the
/// policy orders requests inside a tenant.
#[derive(Debug, Clone)]
pub struct ResourceQueue {
    policy: Policy,
    fair: bool,
    weights: BTreeMap<String, u32>,
    tenants: BTreeMap<String, BTreeSet<QueueKey>>,
    entries: HashMap<RequestId, Entry>,
    pending_work_ns: Nanos,
    rr_last: Option<String>,
    rr_served: u32,
}

impl ResourceQueue {
    pub fn new(policy: Policy, fair: bool, weights: BTreeMap<String, u32>) -> Self {
        Self {
            policy,
            fair,
            weights,
            tenants: BTreeMap::new(),
            entries: HashMap::new(),
            pending_work_ns: 0,
            rr_last: None,
            rr_served: 0,
        }
    }

    pub fn policy(&self) -> Policy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: RequestId) -> bool {
        self.entries.contains_key(&id)
    }

    /// Sum of predicted work of everything queued.
    pub fn pending_work_ns(&self) -> Nanos {
        self.pending_work_ns
    }

    fn weight(&self, tenant: &str) -> u32 {
        self.weights.get(tenant).copied().unwrap_or(1).max(1)
    }

    pub fn key_for(&self, c: &Candidate) -> QueueKey {
        self.policy.key(c)
    }

    pub fn insert(&mut self, c: Candidate) {
        let key = self.policy.key(&c);
        self.tenants.entry(c.tenant.clone()).or_default().insert(key);
        self.pending_work_ns += c.work_ns;
        let prev = self.entries.insert(
            c.id,
            Entry {
                tenant: c.tenant,
                key,
                work_ns: c.work_ns,
                ready: c.ready,
            },
        );
        assert!(prev.is_none(), "request {} queued twice", c.id);
    }

    pub fn set_ready(&mut self, id: RequestId) {
        if let Some(e) = self.entries.get_mut(&id) {
            e.ready = true;
        }
    }

    pub fn is_ready(&self, id: RequestId) -> bool {
        self.entries.get(&id).is_some_and(|e| e.ready)
    }

    pub fn remove(&mut self, id: RequestId) -> bool {
        let Some(e) = self.entries.remove(&id) else {
            return false;
        };
        self.pending_work_ns -= e.work_ns;
        let set = self.tenants.get_mut(&e.tenant).expect("tenant set exists");
        set.remove(&e.key);
        if set.is_empty() {
            self.tenants.remove(&e.tenant);
        }
        true
    }

    /// Ids in policy order across tenants (fairness ignored).
    pub fn ordered(&self) -> Vec<RequestId> {
        let mut keys: Vec<QueueKey> = self.tenants.values().flat_map(|s| s.iter().copied()).collect();
        keys.sort();
        keys.into_iter().map(|k| k.id).collect()
    }

    fn first_ready(&self, tenant: &str) -> Option<QueueKey> {
        self.tenants
            .get(tenant)?
            .iter()
            .find(|k| self.entries[&k.id].ready)
            .copied()
    }

    /// Chooses the next request without removing it.
    pub fn peek(&self, mode: PickMode) -> Option<RequestId> {
        self.choose(mode).map(|(_, k)| k.id)
    }

    /// Chooses and removes the next request, advancing round-robin state.
    pub fn pick(&mut self, mode: PickMode) -> Option<RequestId> {
        let (tenant, key) = self.choose(mode)?;
        if self.fair {
            if self.rr_last.as_deref() == Some(tenant.as_str()) {
                self.rr_served += 1;
            } else {
                self.rr_last = Some(tenant);
                self.rr_served = 1;
            }
        }
        self.remove(key.id);
        Some(key.id)
    }

    fn choose(&self, mode: PickMode) -> Option<(String, QueueKey)> {
        if self.fair {
            return self.choose_fair();
        }
        match mode {
            PickMode::StrictHead => {
                let (tenant, key) = self
                    .tenants
                    .iter()
                    .filter_map(|(t, s)| s.first().map(|k| (t, *k)))
                    .min_by_key(|(_, k)| *k)?;
                self.entries[&key.id].ready.then(|| (tenant.clone(), key))
            }
            PickMode::ReadyOnly => self
                .tenants
                .keys()
                .filter_map(|t| self.first_ready(t).map(|k| (t, k)))
                .min_by_key(|(_, k)| *k)
                .map(|(t, k)| (t.clone(), k)),
        }
    }

    fn choose_fair(&self) -> Option<(String, QueueKey)> {
        let ready: Vec<(&String, QueueKey)> = self
            .tenants
            .keys()
            .filter_map(|t| self.first_ready(t).map(|k| (t, k)))
            .collect();
        if ready.is_empty() {
            return None;
        }
        if let Some(last) = &self.rr_last {
            if self.rr_served < self.weight(last) {
                if let Some((t, k)) = ready.iter().find(|(t, _)| *t == last) {
                    return Some(((*t).clone(), *k));
                }
            }
            // Next tenant after `last`, cyclically.
            let next = ready
                .iter()
                .find(|(t, _)| t.as_str() > last.as_str())
                .or_else(|| ready.first())
                .expect("non-empty");
            return Some((next.0.clone(), next.1));
        }
        Some((ready[0].0.clone(), ready[0].1))
    }

    /// Predicted work that would be served before a new entry with `key`
    /// from `tenant`. Exact without fairness; with fairness, assumes every
    /// tenant keeps its weighted share of turns.
    pub fn work_ahead(&self, tenant: &str, key: &QueueKey) -> Nanos {
        if !self.fair {
            return self
                .entries
                .values()
                .filter(|e| e.key < *key)
                .map(|e| e.work_ns)
                .sum();
        }
        let own: Vec<&QueueKey> = self
            .tenants
            .get(tenant)
            .map(|s| s.range(..*key).collect())
            .unwrap_or_default();
        let own_work: Nanos = own.iter().map(|k| self.entries[&k.id].work_ns).sum();
        let rounds = own.len() as u64 / self.weight(tenant) as u64 + 1;
        let others: Nanos = self
            .tenants
            .iter()
            .filter(|(t, _)| t.as_str() != tenant)
            .map(|(t, s)| {
                let take = (rounds * self.weight(t) as u64) as usize;
                s.iter().take(take).map(|k| self.entries[&k.id].work_ns).sum::<Nanos>()
            })
            .sum();
        own_work + others
    }

    /// Pending work of one tenant.
    pub fn tenant_work_ns(&self, tenant: &str) -> Nanos {
        self.tenants
            .get(tenant)
            .map(|s| s.iter().map(|k| self.entries[&k.id].work_ns).sum())
            .unwrap_or(0)
    }

    /// Ready entries in policy order, fairness ignored.
    pub fn ready_in_order(&self) -> Vec<RequestId> {
        self.ordered()
            .into_iter()
            .filter(|id| self.entries[id].ready)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: RequestId, tenant: &str, arrival: Nanos, work: Nanos, deadline: Option<Nanos>) -> Candidate {
        Candidate {
            id,
            tenant: tenant.into(),
            arrival,
            deadline_abs: deadline,
            work_ns: work,
            ready: true,
        }
    }

    fn drain(q: &mut ResourceQueue) -> Vec<RequestId> {
        std::iter::from_fn(|| q.pick(PickMode::ReadyOnly)).collect()
    }

    #[test]
    fn fifo_by_arrival() {
        let mut q = ResourceQueue::new(Policy::Fifo, false, BTreeMap::new());
        q.insert(cand(2, "t", 1, 1, None));
        q.insert(cand(1, "t", 0, 9, None));
        assert_eq!(drain(&mut q), vec![1, 2]);
    }

    #[test]
    fn srpt_picks_shortest() {
        let mut q = ResourceQueue::new(Policy::Srpt, false, BTreeMap::new());
        q.insert(cand(1, "t", 0, 5, None));
        q.insert(cand(2, "t", 0, 1, None));
        q.insert(cand(3, "t", 0, 3, None));
        assert_eq!(drain(&mut q), vec![2, 3, 1]);
    }

    #[test]
    fn edf_missing_deadline_goes_last() {
        let mut q = ResourceQueue::new(Policy::Edf, false, BTreeMap::new());
        q.insert(cand(1, "t", 0, 1, None));
        q.insert(cand(2, "t", 1, 1, Some(20)));
        q.insert(cand(3, "t", 2, 1, Some(4)));
        assert_eq!(drain(&mut q), vec![3, 2, 1]);
    }

    #[test]
    fn strict_head_waits_for_readiness() {
        let mut q = ResourceQueue::new(Policy::Fifo, false, BTreeMap::new());
        q.insert(Candidate {
            ready: false,
            ..cand(1, "t", 0, 1, None)
        });
        q.insert(cand(2, "t", 1, 1, None));
        assert_eq!(q.peek(PickMode::StrictHead), None);
        assert_eq!(q.peek(PickMode::ReadyOnly), Some(2));
        q.set_ready(1);
        assert_eq!(q.pick(PickMode::StrictHead), Some(1));
    }

    #[test]
    fn fair_alternates_and_respects_weights() {
        let mut q = ResourceQueue::new(Policy::Fifo, true, BTreeMap::new());
        for i in 0..4 {
            q.insert(cand(i, "a", i, 1, None));
        }
        q.insert(cand(10, "v", 100, 1, None));
        q.insert(cand(11, "v", 101, 1, None));
        assert_eq!(drain(&mut q), vec![0, 10, 1, 11, 2, 3]);

        let weights = BTreeMap::from([("a".to_string(), 2)]);
        let mut q = ResourceQueue::new(Policy::Fifo, true, weights);
        for i in 0..4 {
            q.insert(cand(i, "a", i, 1, None));
        }
        q.insert(cand(10, "v", 100, 1, None));
        q.insert(cand(11, "v", 101, 1, None));
        assert_eq!(drain(&mut q), vec![0, 1, 10, 2, 3, 11]);
    }

    #[test]
    fn work_ahead_counts_earlier_keys() {
        let mut q = ResourceQueue::new(Policy::Srpt, false, BTreeMap::new());
        q.insert(cand(1, "t", 0, 5, None));
        q.insert(cand(2, "t", 0, 1, None));
        let k = q.key_for(&cand(3, "t", 1, 3, None));
        assert_eq!(q.work_ahead("t", &k), 1);
        assert_eq!(q.pending_work_ns(), 6);
        q.remove(2);
        assert_eq!(q.pending_work_ns(), 5);
    }
}
