//! Two-level residency cache (host memory, device memory) with LRU eviction
//! and pinning.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Host,
    Device,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub model_id: String,
    pub level: Level,
    pub bytes: u64,
    pub last_used_time: Nanos,
    /// Request sequence number of the last use.
    pub last_used_seq: u64,
    pub pinned_count: u32,
    /// Space is reserved but the copy has not landed yet.
    pub loading: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ResidencyJob {
    Fetch { model_id: String, bytes: u64 },
    Transfer { model_id: String, bytes: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheWarning {
    /// The victim model.
    pub model_id: String,
    pub level: Level,
    /// Requests seen since the victim was last used.
    pub requests_since_use: u64,
}

/// Jobs and evictions that raise a model to a target level.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResidencyPlan {
    pub jobs: Vec<ResidencyJob>,
    pub evictions: Vec<(Level, String)>,
    pub warnings: Vec<CacheWarning>,
}

impl ResidencyPlan {
    pub fn is_empty(&self) -> bool {
        self.jobs.is_empty() && self.evictions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CacheError {
    #[error("model `{model_id}` needs {bytes} bytes but {level:?} capacity is {capacity}")]
    ModelTooLarge {
        model_id: String,
        level: Level,
        bytes: u64,
        capacity: u64,
    },
    /// Everything evictable is pinned or loading; retry after a release.
    #[error("no evictable space for `{model_id}` at {level:?}")]
    NoSpace { model_id: String, level: Level },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelCache {
    pub level: Level,
    pub capacity: u64,
    pub used: u64,
    entries: BTreeMap<String, CacheEntry>,
}

impl LevelCache {
    pub fn new(level: Level, capacity: u64) -> Self {
        Self {
            level,
            capacity,
            used: 0,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, model_id: &str) -> Option<&CacheEntry> {
        self.entries.get(model_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.entries.values()
    }

    /// LRU victims (by last use, then id) freeing enough room for `bytes`.
    fn victims(&self, model_id: &str, bytes: u64) -> Result<Vec<&CacheEntry>, CacheError> {
        if bytes > self.capacity {
            return Err(CacheError::ModelTooLarge {
                model_id: model_id.into(),
                level: self.level,
                bytes,
                capacity: self.capacity,
            });
        }
        let mut free = self.capacity - self.used;
        if free >= bytes {
            return Ok(Vec::new());
        }
        let mut candidates: Vec<&CacheEntry> = self
            .entries
            .values()
            .filter(|e| e.pinned_count == 0 && !e.loading && e.model_id != model_id)
            .collect();
        candidates.sort_by(|a, b| (a.last_used_time, &a.model_id).cmp(&(b.last_used_time, &b.model_id)));
        let mut out = Vec::new();
        for c in candidates {
            out.push(c);
            free += c.bytes;
            if free >= bytes {
                return Ok(out);
            }
        }
        Err(CacheError::NoSpace {
            model_id: model_id.into(),
            level: self.level,
        })
    }

    fn insert(&mut self, model_id: &str, bytes: u64, now: Nanos, seq: u64, loading: bool) {
        debug_assert!(!self.entries.contains_key(model_id));
        self.used += bytes;
        assert!(self.used <= self.capacity, "{:?} cache over capacity", self.level);
        self.entries.insert(
            model_id.to_string(),
            CacheEntry {
                model_id: model_id.to_string(),
                level: self.level,
                bytes,
                last_used_time: now,
                last_used_seq: seq,
                pinned_count: 0,
                loading,
            },
        );
    }

    fn remove(&mut self, model_id: &str) -> Option<CacheEntry> {
        let e = self.entries.remove(model_id)?;
        assert_eq!(e.pinned_count, 0, "evicting pinned entry `{model_id}`");
        self.used -= e.bytes;
        Some(e)
    }
}

/// Host and device caches. Devices that execute from host memory have no
/// separate device level: the host level serves both roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidencyCache {
    pub host: LevelCache,
    pub device: Option<LevelCache>,
    /// A victim used within this many requests raises a warning.
    pub thrash_window: u64,
}

impl ResidencyCache {
    pub fn new(host_capacity: u64, device_capacity: Option<u64>) -> Self {
        Self {
            host: LevelCache::new(Level::Host, host_capacity),
            device: device_capacity.map(|c| LevelCache::new(Level::Device, c)),
            thrash_window: 100,
        }
    }

    pub fn unified(&self) -> bool {
        self.device.is_none()
    }

    /// The level requests execute from.
    pub fn exec_level(&self) -> &LevelCache {
        self.device.as_ref().unwrap_or(&self.host)
    }

    fn level_mut(&mut self, level: Level) -> &mut LevelCache {
        match level {
            Level::Device => self.device.as_mut().unwrap_or(&mut self.host),
            Level::Host => &mut self.host,
        }
    }

    fn level(&self, level: Level) -> &LevelCache {
        match level {
            Level::Device => self.exec_level(),
            Level::Host => &self.host,
        }
    }

    /// Plans raising `model_id` to `target`. Nothing changes until
    /// [`ResidencyCache::apply`].
    pub fn ensure_resident(
        &self,
        model_id: &str,
        bytes: u64,
        target: Level,
        seq: u64,
    ) -> Result<ResidencyPlan, CacheError> {
        let mut plan = ResidencyPlan::default();
        let need_device = target == Level::Device && !self.unified();
        if need_device {
            let dev = self.device.as_ref().expect("checked");
            if bytes > dev.capacity {
                return Err(CacheError::ModelTooLarge {
                    model_id: model_id.into(),
                    level: Level::Device,
                    bytes,
                    capacity: dev.capacity,
                });
            }
            if dev.get(model_id).is_some() {
                return Ok(plan);
            }
        }
        if self.host.get(model_id).is_none() {
            for v in self.host.victims(model_id, bytes)? {
                self.note_eviction(&mut plan, v, seq);
            }
            plan.jobs.push(ResidencyJob::Fetch {
                model_id: model_id.into(),
                bytes,
            });
        }
        if need_device {
            let dev = self.device.as_ref().expect("checked");
            for v in dev.victims(model_id, bytes)? {
                self.note_eviction(&mut plan, v, seq);
            }
            plan.jobs.push(ResidencyJob::Transfer {
                model_id: model_id.into(),
                bytes,
            });
        }
        Ok(plan)
    }

    fn note_eviction(&self, plan: &mut ResidencyPlan, victim: &CacheEntry, seq: u64) {
        let since = seq.saturating_sub(victim.last_used_seq);
        if since < self.thrash_window {
            plan.warnings.push(CacheWarning {
                model_id: victim.model_id.clone(),
                level: victim.level,
                requests_since_use: since,
            });
        }
        plan.evictions.push((victim.level, victim.model_id.clone()));
    }

    /// Applies evictions and reserves space for every job. New entries are
    /// marked loading when `loading` is set.
    pub fn apply(&mut self, plan: &ResidencyPlan, now: Nanos, seq: u64, loading: bool) {
        for (level, id) in &plan.evictions {
            self.level_mut(*level).remove(id);
        }
        for job in &plan.jobs {
            match job {
                ResidencyJob::Fetch { model_id, bytes } => {
                    self.host.insert(model_id, *bytes, now, seq, loading);
                }
                ResidencyJob::Transfer { model_id, bytes } => {
                    self.level_mut(Level::Device).insert(model_id, *bytes, now, seq, loading);
                }
            }
        }
    }

    pub fn get(&self, level: Level, model_id: &str) -> Option<&CacheEntry> {
        self.level(level).get(model_id)
    }

    pub fn mark_loaded(&mut self, level: Level, model_id: &str) {
        if let Some(e) = self.level_mut(level).entries.get_mut(model_id) {
            e.loading = false;
        }
    }

    pub fn touch(&mut self, level: Level, model_id: &str, now: Nanos, seq: u64) {
        if let Some(e) = self.level_mut(level).entries.get_mut(model_id) {
            e.last_used_time = e.last_used_time.max(now);
            e.last_used_seq = e.last_used_seq.max(seq);
        }
    }

    pub fn pin(&mut self, level: Level, model_id: &str) {
        let e = self
            .level_mut(level)
            .entries
            .get_mut(model_id)
            .unwrap_or_else(|| panic!("pinning absent entry `{model_id}`"));
        e.pinned_count += 1;
    }

    pub fn unpin(&mut self, level: Level, model_id: &str) {
        let e = self
            .level_mut(level)
            .entries
            .get_mut(model_id)
            .unwrap_or_else(|| panic!("unpinning absent entry `{model_id}`"));
        assert!(e.pinned_count > 0, "unbalanced unpin of `{model_id}`");
        e.pinned_count -= 1;
    }

    /// Drops a model from every level. Entries must be unpinned.
    pub fn remove_model(&mut self, model_id: &str) {
        self.host.remove(model_id);
        if let Some(d) = self.device.as_mut() {
            d.remove(model_id);
        }
    }

    /// Checks byte accounting against the entries. Used by tests.
    pub fn check_invariants(&self) -> Result<(), String> {
        for lvl in std::iter::once(&self.host).chain(self.device.as_ref()) {
            let sum: u64 = lvl.entries.values().map(|e| e.bytes).sum();
            if sum != lvl.used {
                return Err(format!("{:?}: used {} but entries sum to {sum}", lvl.level, lvl.used));
            }
            if lvl.used > lvl.capacity {
                return Err(format!("{:?}: used {} > capacity {}", lvl.level, lvl.used, lvl.capacity));
            }
        }
        Ok(())
    }
}
