//! Synthetic arrival streams.
//!
//! Each workload draws from its own ChaCha stream keyed by the run seed,
//! tenant and model, so adding or removing one workload leaves every other
//! workload's arrivals untouched.

use std::path::PathBuf;

use infershare_core::executor::weights::{fnv1a64, splitmix64};
use infershare_core::time::{secs, Nanos};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Pattern {
    Poisson {
        rate: f64,
    },
    /// Square wave: `low` for `period_s`, then `high` for `period_s`, repeating.
    Burst {
        low: f64,
        high: f64,
        period_s: f64,
    },
    /// Lone requests separated by `min_gap_s` plus an exponential gap, for a
    /// mean gap of `mean_gap_s`.
    Sporadic {
        mean_gap_s: f64,
        #[serde(default = "default_min_gap")]
        min_gap_s: f64,
    },
    /// Arrival times in seconds, inline or one per line in a file.
    Replay {
        #[serde(default)]
        times_s: Vec<f64>,
        path: Option<PathBuf>,
    },
}

fn default_min_gap() -> f64 {
    1.0
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub tenant: String,
    /// Model name as uploaded by `tenant`.
    pub model: String,
    pub pattern: Pattern,
    pub deadline_ms: Option<f64>,
    #[serde(default)]
    pub start_s: f64,
    /// Defaults to the rest of the run.
    pub duration_s: Option<f64>,
    #[serde(default = "one")]
    pub batch: u32,
    /// Fraction of requests that must copy weights to the device even when
    /// a copy is already there. Spread evenly, not sampled.
    #[serde(default)]
    pub force_miss_ratio: f64,
}

impl WorkloadSpec {
    pub fn model_id(&self) -> String {
        format!("{}/{}", self.tenant, self.model)
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("trace {path}: {reason}")]
    TraceParse { path: String, reason: String },
    #[error("workload {tenant}/{model}: {reason}")]
    Invalid { tenant: String, model: String, reason: String },
}

/// Seed of the stream for `(seed, tenant, model)`.
pub fn stream_seed(seed: u64, tenant: &str, model: &str) -> u64 {
    let key = fnv1a64(format!("{tenant}\0{model}").as_bytes());
    splitmix64(seed ^ splitmix64(key))
}

/// Whether request `k` (0-based) of a stream is a forced miss: exactly
/// `floor(n * ratio)` of the first `n` are.
pub fn forced_miss(k: u64, ratio: f64) -> bool {
    if ratio <= 0.0 {
        return false;
    }
    ((k + 1) as f64 * ratio).floor() > (k as f64 * ratio).floor()
}

fn parse_trace(path: &PathBuf) -> Result<Vec<f64>, WorkloadError> {
    let err = |reason: String| WorkloadError::TraceParse {
        path: path.display().to_string(),
        reason,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| (i, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            l.parse::<f64>()
                .ok()
                .filter(|t| t.is_finite() && *t >= 0.0)
                .ok_or_else(|| err(format!("line {}: `{l}` is not a time in seconds", i + 1)))
        })
        .collect()
}

/// Arrival times of `spec` within `[start_s, start_s + duration)`, where the
/// duration defaults to `horizon_s - start_s`.
pub fn generate_arrivals(spec: &WorkloadSpec, seed: u64, horizon_s: f64) -> Result<Vec<Nanos>, WorkloadError> {
    let invalid = |reason: &str| WorkloadError::Invalid {
        tenant: spec.tenant.clone(),
        model: spec.model.clone(),
        reason: reason.into(),
    };
    let start = spec.start_s;
    let end = start + spec.duration_s.unwrap_or(horizon_s - start);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &spec.tenant, &spec.model));
    let mut out = Vec::new();
    match &spec.pattern {
        Pattern::Poisson { rate } => {
            if !(*rate >= 0.0 && rate.is_finite()) {
                return Err(invalid("rate must be finite and non-negative"));
            }
            piecewise_poisson(&mut rng, start, end, |_| (*rate, f64::INFINITY), &mut out);
        }
        Pattern::Burst { low, high, period_s } => {
            if !(*low >= 0.0 && *high >= 0.0 && *period_s > 0.0) {
                return Err(invalid("burst needs non-negative rates and a positive period"));
            }
            piecewise_poisson(
                &mut rng,
                start,
                end,
                |t| {
                    let phase = ((t - start) / period_s).floor();
                    let rate = if phase as u64 % 2 == 0 { *low } else { *high };
                    (rate, start + (phase + 1.0) * period_s)
                },
                &mut out,
            );
        }
        Pattern::Sporadic { mean_gap_s, min_gap_s } => {
            if !(*mean_gap_s > *min_gap_s && *min_gap_s >= 0.0) {
                return Err(invalid("sporadic needs mean_gap_s > min_gap_s >= 0"));
            }
            let exp = Exp::new(1.0 / (mean_gap_s - min_gap_s)).expect("positive rate");
            let mut t = start;
            loop {
                t += min_gap_s + exp.sample(&mut rng);
                if t >= end {
                    break;
                }
                out.push(secs(t));
            }
        }
        Pattern::Replay { times_s, path } => {
            let mut times = times_s.clone();
            if let Some(p) = path {
                times.extend(parse_trace(p)?);
            }
            if times.windows(2).any(|w| w[1] < w[0]) {
                return Err(invalid("replay times must be non-decreasing"));
            }
            out.extend(times.into_iter().map(secs));
        }
    }
    Ok(out)
}

/// Poisson arrivals whose rate is constant on segments; `rate_at(t)` gives
/// the rate at `t` and the end of its segment.
fn piecewise_poisson(
    rng: &mut ChaCha8Rng,
    start: f64,
    end: f64,
    rate_at: impl Fn(f64) -> (f64, f64),
    out: &mut Vec<Nanos>,
) {
    let mut t = start;
    while t < end {
        let (rate, seg_end) = rate_at(t);
        let seg_end = seg_end.min(end);
        if rate <= 0.0 {
            t = seg_end;
            continue;
        }
        let gap = Exp::new(rate).expect("positive rate").sample(rng);
        if t + gap >= seg_end {
            // Memoryless: restart the draw at the boundary.
            t = seg_end;
            continue;
        }
        t += gap;
        out.push(secs(t));
    }
}
