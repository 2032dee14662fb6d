//! Networked worker. Drives the worker state machine in real time: virtual
//! devices sleep for their modeled durations, `cpu-reference` devices run
//! the reference executor on a blocking thread.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::SeedableRng;
use serde_json::json;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{self, UnboundedSender};
use tokio::sync::oneshot;

use infershare_core::controller::Heartbeat;
use infershare_core::manifest::ModelManifest;
use infershare_core::predictor::{predict_exec, DeviceKind, DeviceProfile, NoiseModel};
use infershare_core::time::{to_ms, Clock, Nanos, WallClock};
use infershare_core::worker::{
    run_reference, Admission, CompletionRecord, InferenceRequest, RequestInput, Worker, WorkerConfig, WorkerError,
    WorkerEvent,
};

use crate::controller::protocol_error;
use crate::message::{ErrorBody, ErrorCode, Infer, InferResult, LoadAck, Message, Register, WireInput, WireTensor};
use crate::wire::{read_message, write_message, WireError};

#[derive(Debug, Clone)]
pub struct NodeOptions {
    pub worker_id: String,
    pub profile: DeviceProfile,
    pub config: WorkerConfig,
    pub noise: NoiseModel,
    pub seed: u64,
    pub heartbeat_ms: f64,
}

type Reply = Result<CompletionRecord, ErrorBody>;

struct Node {
    worker: Worker,
    clock: WallClock,
    waiters: HashMap<u64, oneshot::Sender<Reply>>,
    noise: NoiseModel,
    rng: StdRng,
}

#[derive(Clone)]
pub struct NodeHandle {
    inner: Arc<Mutex<Node>>,
}

impl NodeHandle {
    pub fn new(opts: &NodeOptions) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Node {
                worker: Worker::new(&opts.worker_id, opts.profile.clone(), opts.config.clone()),
                clock: WallClock::default(),
                waiters: HashMap::new(),
                noise: opts.noise,
                rng: StdRng::seed_from_u64(opts.seed),
            })),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Node> {
        self.inner.lock().expect("worker lock")
    }

    pub fn stats(&self) -> serde_json::Value {
        let n = self.lock();
        let now = n.clock.now();
        let (transfer_ns, exec_ns) = n.worker.busy_ns();
        json!({
            "role": "worker",
            "snapshot": n.worker.snapshot(now),
            "busy_transfer_ns": transfer_ns,
            "busy_exec_ns": exec_ns,
        })
    }

    /// Processes the worker outbox, starting timers for new stages.
    fn drain(&self, n: &mut Node) {
        for ev in n.worker.drain_outbox() {
            match ev {
                WorkerEvent::StartTransfer { fetch_ns, copy_ns, .. } => {
                    let h = self.clone();
                    tokio::spawn(async move {
                        tokio::time::sleep(Duration::from_nanos(fetch_ns + copy_ns)).await;
                        let mut n = h.lock();
                        let now = n.clock.now();
                        if n.worker.complete_transfer(now).is_ok() {
                            h.drain(&mut n);
                        }
                    });
                }
                WorkerEvent::StartExecute {
                    model_id,
                    batch,
                    predicted_ns,
                    ..
                } => self.start_execute(n, &model_id, batch, predicted_ns),
                WorkerEvent::Completed(r) => {
                    if let Some(tx) = n.waiters.remove(&r.request_id) {
                        let _ = tx.send(Ok(*r));
                    }
                }
                WorkerEvent::Rerouted { request, .. } => {
                    if let Some(tx) = n.waiters.remove(&request.request_id) {
                        let _ = tx.send(Err(ErrorBody {
                            request_id: Some(request.request_id),
                            code: ErrorCode::Rerouted,
                            message: "request would now miss its deadline here".into(),
                            findings: Vec::new(),
                        }));
                    }
                }
                WorkerEvent::Failed { request_id, reason } => {
                    if let Some(tx) = n.waiters.remove(&request_id) {
                        let _ = tx.send(Err(ErrorBody {
                            request_id: Some(request_id),
                            code: ErrorCode::Failed,
                            message: reason,
                            findings: Vec::new(),
                        }));
                    }
                }
                WorkerEvent::CacheThrash(_) | WorkerEvent::ModelEvicted { .. } => {}
            }
        }
    }

    fn start_execute(&self, n: &mut Node, model_id: &str, batch: u32, predicted_ns: Nanos) {
        let h = self.clone();
        let reference = match n.worker.execution_job() {
            Some((manifest, Some(weights), inputs))
                if n.worker.profile().kind == DeviceKind::CpuReference && inputs.iter().all(Option::is_some) =>
            {
                Some((manifest, weights, inputs))
            }
            _ => None,
        };
        if let Some((manifest, weights, inputs)) = reference {
            tokio::spawn(async move {
                let out = tokio::task::spawn_blocking(move || run_reference(&manifest, &weights, &inputs))
                    .await
                    .unwrap_or_else(|e| Err(WorkerError::DeviceFault(e.to_string())));
                h.finish_execute(out.ok());
            });
            return;
        }
        let true_ns = n
            .worker
            .manifest(model_id)
            .and_then(|m| predict_exec(m, n.worker.profile(), batch, None).ok())
            .unwrap_or(predicted_ns);
        let Node { noise, rng, .. } = n;
        let d = noise.perturb(true_ns, rng);
        tokio::spawn(async move {
            tokio::time::sleep(Duration::from_nanos(d)).await;
            h.finish_execute(None);
        });
    }

    fn finish_execute(&self, outputs: Option<Vec<infershare_core::executor::Tensor>>) {
        let mut n = self.lock();
        let now = n.clock.now();
        if n.worker.complete_execute(now, outputs).is_err() {
            return;
        }
        if n.worker.has_deadline_requests() {
            n.worker.reroute_check(now);
        }
        self.drain(&mut n);
    }

    /// Admits one request and waits for its completion.
    pub async fn infer(&self, inf: Infer) -> Message {
        let id = inf.request_id;
        let rx = {
            let mut n = self.lock();
            let now = n.clock.now();
            let mut req = InferenceRequest::new(id, &inf.tenant_id, &inf.model_id, now).with_batch(inf.batch);
            match &inf.input {
                WireInput::Size { bytes } => req.input = RequestInput::Size { bytes: *bytes },
                WireInput::Tensor { tensor } => match tensor.decode() {
                    Ok(t) => req = req.with_input(t),
                    Err(e) => return Message::error(Some(id), ErrorCode::MalformedPayload, e.to_string()),
                },
            }
            if let Some(d) = inf.deadline_ms {
                req = req.with_deadline_ms(d);
            }
            let admitted = n.worker.admit(req, now);
            let out = match admitted {
                Ok(Admission::Admitted(_)) => {
                    let (tx, rx) = oneshot::channel();
                    n.waiters.insert(id, tx);
                    Ok(rx)
                }
                Ok(Admission::Rejected { estimate, .. }) => Err(Message::error(
                    Some(id),
                    ErrorCode::WouldMissDeadline,
                    format!("estimated {:.3} ms exceeds the deadline", estimate.total_ms()),
                )),
                Err(e) => {
                    let code = match e {
                        WorkerError::UnknownModel(_) => ErrorCode::UnknownModel,
                        WorkerError::Overloaded { .. } => ErrorCode::Overloaded,
                        _ => ErrorCode::Failed,
                    };
                    Err(Message::error(Some(id), code, e.to_string()))
                }
            };
            self.drain(&mut n);
            match out {
                Ok(rx) => rx,
                Err(m) => return m,
            }
        };
        match rx.await {
            Ok(Ok(r)) => Message::InferResult(InferResult {
                request_id: id,
                model_id: r.model_id.clone(),
                worker_id: r.worker_id.clone(),
                residency: r.residency,
                latency_ms: to_ms(r.latency_ns()),
                estimate_ms: r.estimate.total_ms(),
                output: r.output.as_ref().map(WireTensor::encode),
            }),
            Ok(Err(e)) => Message::Error(e),
            Err(_) => Message::error(Some(id), ErrorCode::Failed, "worker dropped the request"),
        }
    }

    /// Fetches the model's weights (modeled by the fetch bandwidth), then
    /// registers it and acknowledges.
    async fn load(&self, manifest: ModelManifest) -> LoadAck {
        let bw = self.lock().worker.profile().fetch_bandwidth;
        let started = Instant::now();
        let fetch = Duration::from_secs_f64(manifest.declared_footprint_bytes as f64 / bw);
        tokio::time::sleep(fetch.saturating_sub(started.elapsed())).await;
        let model_id = manifest.model_name.clone();
        let mut n = self.lock();
        let now = n.clock.now();
        let res = n.worker.load_model(manifest, now);
        self.drain(&mut n);
        LoadAck {
            model_id,
            ok: res.is_ok(),
            error: res.err().map(|e| e.to_string()),
        }
    }

    fn heartbeat(&self, last: &mut (Nanos, Nanos)) -> Heartbeat {
        let n = self.lock();
        let now = n.clock.now();
        let busy = n.worker.busy_ns().1;
        let elapsed = now.saturating_sub(last.0).max(1);
        let hb = Heartbeat {
            worker_id: n.worker.id().to_string(),
            busy_fraction: (busy - last.1) as f64 / elapsed as f64,
            hosted: n.worker.model_ids().cloned().collect(),
            device_resident: n.worker.device_resident_models(),
            pending_ns: n.worker.execute_ahead_ns(now),
        };
        *last = (now, busy);
        hb
    }
}

/// Registers with the controller, keeps heartbeating, and serves inference
/// on `listener`. Returns when the controller connection closes.
pub async fn serve_worker(
    listener: TcpListener,
    controller_addr: &str,
    opts: NodeOptions,
    handle: NodeHandle,
) -> Result<(), WireError> {
    let addr = listener.local_addr()?.to_string();
    let h = handle.clone();
    tokio::spawn(async move {
        while let Ok((stream, _)) = listener.accept().await {
            let h = h.clone();
            tokio::spawn(async move {
                let _ = client_connection(stream, h).await;
            });
        }
    });

    let stream = TcpStream::connect(controller_addr).await?;
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if write_message(&mut wr, &m).await.is_err() {
                break;
            }
        }
    });
    let host_cache_bytes = opts.config.host_cache_bytes;
    let _ = tx.send(Message::Register(Register {
        worker_id: opts.worker_id.clone(),
        profile: opts.profile.clone(),
        host_cache_bytes,
        addr,
    }));
    let beat = handle.clone();
    let beat_tx = tx.clone();
    let period = Duration::from_secs_f64(opts.heartbeat_ms / 1e3);
    tokio::spawn(async move {
        let mut last = (0, 0);
        let mut every = tokio::time::interval(period);
        loop {
            every.tick().await;
            if beat_tx.send(Message::Heartbeat(beat.heartbeat(&mut last))).is_err() {
                break;
            }
        }
    });
    loop {
        let msg = match read_message(&mut rd).await {
            Ok(Some(m)) => m,
            Ok(None) => return Ok(()),
            Err(e) if e.recoverable() => continue,
            Err(e) => return Err(e),
        };
        match msg {
            Message::LoadModel { manifest } => {
                let h = handle.clone();
                let tx = tx.clone();
                tokio::spawn(async move {
                    let ack = h.load(*manifest).await;
                    let _ = tx.send(Message::LoadAck(ack));
                });
            }
            Message::EvictModel { model_id } => {
                let mut n = handle.lock();
                let _ = n.worker.evict_model(&model_id);
                handle.drain(&mut n);
            }
            _ => {}
        }
    }
}

async fn client_connection(stream: TcpStream, handle: NodeHandle) -> Result<(), WireError> {
    let _ = stream.set_nodelay(true);
    let (mut rd, mut wr) = stream.into_split();
    let (tx, mut rx) = mpsc::unbounded_channel::<Message>();
    let writer = tokio::spawn(async move {
        while let Some(m) = rx.recv().await {
            if write_message(&mut wr, &m).await.is_err() {
                break;
            }
        }
    });
    let result = loop {
        let msg = match read_message(&mut rd).await {
            Ok(Some(m)) => m,
            Ok(None) => break Ok(()),
            Err(e) => {
                let _ = tx.send(protocol_error(&e));
                if e.recoverable() {
                    continue;
                }
                break Err(e);
            }
        };
        respond(msg, &handle, &tx);
    };
    drop(tx);
    let _ = writer.await;
    result
}

fn respond(msg: Message, handle: &NodeHandle, tx: &UnboundedSender<Message>) {
    match msg {
        Message::Ping => {
            let _ = tx.send(Message::Pong);
        }
        Message::StatsRequest { request_id } => {
            let _ = tx.send(Message::Stats {
                request_id,
                stats: handle.stats(),
            });
        }
        Message::Infer(inf) => {
            let h = handle.clone();
            let tx = tx.clone();
            tokio::spawn(async move {
                let _ = tx.send(h.infer(inf).await);
            });
        }
        m => {
            let _ = tx.send(Message::error(
                m.request_id(),
                ErrorCode::Unexpected,
                format!("worker does not accept {:?} frames here", m.kind()),
            ));
        }
    }
}
