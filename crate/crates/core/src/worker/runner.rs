use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::rngs::StdRng;
use rand::SeedableRng;

use super::{run_reference, Admission, CompletionRecord, InferenceRequest, Worker, WorkerError, WorkerEvent};
use crate::predictor::{predict_exec, DeviceKind, NoiseModel};
use crate::time::{Clock, Nanos, VirtualClock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stage {
    Transfer,
    Execute,
}

/// Drives a single [`Worker`] under virtual time: each started stage
/// completes after its predicted duration, with optional execution noise.
/// On `cpu-reference` devices the executor really runs; time stays virtual.
pub struct VirtualRunner {
    pub worker: Worker,
    clock: VirtualClock,
    pending: BinaryHeap<Reverse<(Nanos, u64, Stage)>>,
    seq: u64,
    noise: NoiseModel,
    rng: StdRng,
    pub completed: Vec<CompletionRecord>,
    /// Outbox events other than stage starts and completions.
    pub events: Vec<WorkerEvent>,
}

impl VirtualRunner {
    pub fn new(worker: Worker) -> Self {
        Self {
            worker,
            clock: VirtualClock::default(),
            pending: BinaryHeap::new(),
            seq: 0,
            noise: NoiseModel::NONE,
            rng: StdRng::seed_from_u64(0),
            completed: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn with_noise(mut self, noise: NoiseModel, seed: u64) -> Self {
        self.noise = noise;
        self.rng = StdRng::seed_from_u64(seed);
        self
    }

    pub fn now(&self) -> Nanos {
        self.clock.now()
    }

    /// Advances to the request's arrival and admits it.
    pub fn submit(&mut self, req: InferenceRequest) -> Result<Admission, WorkerError> {
        self.advance_to(req.arrival_ns.max(self.now()))?;
        let now = self.now();
        let out = self.worker.admit(req, now);
        self.collect()?;
        out
    }

    fn schedule(&mut self, at: Nanos, stage: Stage) {
        self.seq += 1;
        self.pending.push(Reverse((at, self.seq, stage)));
    }

    fn collect(&mut self) -> Result<(), WorkerError> {
        let now = self.now();
        for ev in self.worker.drain_outbox() {
            match ev {
                WorkerEvent::StartTransfer { fetch_ns, copy_ns, .. } => {
                    self.schedule(now + fetch_ns + copy_ns, Stage::Transfer);
                }
                WorkerEvent::StartExecute {
                    model_id,
                    batch,
                    predicted_ns,
                    ..
                } => {
                    // Noise applies to the device's true cost, not to the
                    // calibrated prediction.
                    let true_ns = self
                        .worker
                        .manifest(&model_id)
                        .and_then(|m| predict_exec(m, self.worker.profile(), batch, None).ok())
                        .unwrap_or(predicted_ns);
                    let d = self.noise.perturb(true_ns, &mut self.rng);
                    self.schedule(now + d, Stage::Execute);
                }
                WorkerEvent::Completed(r) => self.completed.push(*r),
                other => self.events.push(other),
            }
        }
        Ok(())
    }

    /// Processes one pending stage completion, if any is due by `limit`.
    pub fn step(&mut self, limit: Nanos) -> Result<bool, WorkerError> {
        match self.pending.peek() {
            Some(Reverse((t, _, _))) if *t <= limit => {}
            _ => return Ok(false),
        }
        let Reverse((t, _, stage)) = self.pending.pop().expect("peeked");
        self.clock.advance_to(t);
        match stage {
            Stage::Transfer => self.worker.complete_transfer(t)?,
            Stage::Execute => {
                let outputs = match self.worker.execution_job() {
                    Some((manifest, Some(weights), inputs))
                        if self.worker.profile().kind == DeviceKind::CpuReference
                            && inputs.iter().all(Option::is_some) =>
                    {
                        Some(run_reference(&manifest, &weights, &inputs)?)
                    }
                    _ => None,
                };
                self.worker.complete_execute(t, outputs)?;
            }
        }
        self.collect()?;
        Ok(true)
    }

    pub fn advance_to(&mut self, t: Nanos) -> Result<(), WorkerError> {
        while self.step(t)? {}
        if t > self.now() {
            self.clock.advance_to(t);
        }
        Ok(())
    }

    /// Runs the worker's reroute pass at the current time.
    pub fn reroute_check(&mut self) -> Result<Vec<(super::RequestId, super::RerouteAction)>, WorkerError> {
        let now = self.now();
        let out = self.worker.reroute_check(now);
        self.collect()?;
        Ok(out)
    }

    pub fn run_until_idle(&mut self) -> Result<(), WorkerError> {
        while self.step(Nanos::MAX)? {}
        Ok(())
    }

    /// Admits `req` and runs until it finishes.
    pub fn run_request(&mut self, req: InferenceRequest) -> Result<CompletionRecord, WorkerError> {
        let id = req.request_id;
        match self.submit(req)? {
            Admission::Admitted(_) => {}
            Admission::Rejected { .. } => return Err(WorkerError::Cancelled(id)),
        }
        loop {
            if let Some(pos) = self.completed.iter().position(|r| r.request_id == id) {
                return Ok(self.completed.remove(pos));
            }
            if !self.step(Nanos::MAX)? {
                return Err(WorkerError::Cancelled(id));
            }
        }
    }
}
