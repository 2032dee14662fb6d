use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::time::Nanos;

/// Weight given to each new observation.
pub const DEFAULT_DECAY: f64 = 0.05;
/// Observations needed before the EWMA replaces the analytic estimate.
pub const MIN_SAMPLES: u64 = 10;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CalibrationKey {
    pub model_id: String,
    pub device: String,
    pub batch: u32,
}

impl CalibrationKey {
    pub fn new(model_id: &str, device: &str, batch: u32) -> Self {
        Self {
            model_id: model_id.to_string(),
            device: device.to_string(),
            batch,
        }
    }
}

/// Exponentially weighted execution-time statistics, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub mean_ns: f64,
    pub var_ns2: f64,
    pub samples: u64,
}

impl CalibrationEntry {
    pub fn std_dev_ns(&self) -> f64 {
        self.var_ns2.max(0.0).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    pub decay: f64,
    entries: BTreeMap<CalibrationKey, CalibrationEntry>,
}

impl Default for CalibrationState {
    fn default() -> Self {
        Self::new(DEFAULT_DECAY)
    }
}

impl CalibrationState {
    pub fn new(decay: f64) -> Self {
        assert!(decay > 0.0 && decay <= 1.0, "decay must be in (0, 1]");
        Self {
            decay,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, key: &CalibrationKey) -> Option<&CalibrationEntry> {
        self.entries.get(key)
    }

    /// Entry usable for prediction, i.e. with enough samples.
    pub fn trusted(&self, key: &CalibrationKey) -> Option<&CalibrationEntry> {
        self.get(key).filter(|e| e.samples >= MIN_SAMPLES)
    }

    pub fn observe_ns(&mut self, key: CalibrationKey, observed_ns: Nanos) {
        let x = observed_ns as f64;
        let a = self.decay;
        self.entries
            .entry(key)
            .and_modify(|e| {
                let diff = x - e.mean_ns;
                e.mean_ns += a * diff;
                e.var_ns2 = (1.0 - a) * (e.var_ns2 + a * diff * diff);
                e.samples += 1;
            })
            .or_insert(CalibrationEntry {
                mean_ns: x,
                var_ns2: 0.0,
                samples: 1,
            });
    }

    pub fn observe_ms(&mut self, key: CalibrationKey, observed_ms: f64) {
        self.observe_ns(key, crate::time::ms(observed_ms));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
