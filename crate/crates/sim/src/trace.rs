//! Line-delimited trace records. The report is computed from these alone.

use std::io::{BufRead, Write};

use infershare_core::controller::ControllerEvent;
use infershare_core::time::Nanos;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerMeta {
    pub id: String,
    pub profile: String,
    pub cost_per_hour: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TraceRecord {
    Meta {
        name: String,
        seed: u64,
        duration_ns: Nanos,
        warmup_ns: Nanos,
        workers: Vec<WorkerMeta>,
    },
    Done {
        id: u64,
        tenant: String,
        model: String,
        worker: String,
        arrival: Nanos,
        admitted: Nanos,
        exec_start: Nanos,
        end: Nanos,
        /// `device-hit`, `host-hit`, `cold`, or `vm-cold` for a VM boot.
        residency: String,
        batch: u32,
        executed_batch: u32,
        device_busy_ns: Nanos,
        transfer_ns: Nanos,
        cost_per_hour: f64,
        estimate_ns: Nanos,
        deadline_ns: Option<Nanos>,
    },
    Rejected {
        id: u64,
        tenant: String,
        model: String,
        arrival: Nanos,
        at: Nanos,
        worker: Option<String>,
        reason: String,
    },
    Failed {
        id: u64,
        tenant: String,
        model: String,
        arrival: Nanos,
        at: Nanos,
        worker: String,
        reason: String,
    },
    /// Still in flight when the run ended.
    Unfinished {
        id: u64,
        tenant: String,
        model: String,
        arrival: Nanos,
    },
    Rerouted {
        id: u64,
        at: Nanos,
        from: String,
    },
    /// Cumulative occupied time of a worker's resources.
    Busy {
        worker: String,
        at: Nanos,
        transfer_ns: Nanos,
        exec_ns: Nanos,
    },
    Replicas {
        at: Nanos,
        model: String,
        count: usize,
    },
    Control {
        at: Nanos,
        event: ControllerEvent,
    },
    WorkerDown {
        at: Nanos,
        worker: String,
    },
    WorkerUp {
        at: Nanos,
        worker: String,
    },
    Thrash {
        at: Nanos,
        worker: String,
        model: String,
    },
}

impl TraceRecord {
    /// Request id of a terminal record.
    pub fn terminal_id(&self) -> Option<u64> {
        match self {
            Self::Done { id, .. } | Self::Rejected { id, .. } | Self::Failed { id, .. } | Self::Unfinished { id, .. } => {
                Some(*id)
            }
            _ => None,
        }
    }
}

pub fn write_jsonl<W: Write>(records: &[TraceRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TraceRecord>, String> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", i + 1))?);
    }
    Ok(out)
}
