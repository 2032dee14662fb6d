//! Networked controller with the router colocated.
//!
//! Workers hold one long-lived connection open: they send `Register`,
//! `Heartbeat` and `LoadAck`, and receive `LoadModel` and `EvictModel` on it.
//! Clients send `UploadModel`, `DeleteModel`, `Infer` and `StatsRequest`;
//! inference is forwarded to a replica's own listener.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc::{self, UnboundedSender};

use infershare_core::config::ClusterConfig;
use infershare_core::controller::{Command, Controller, ControllerError, Router};
use infershare_core::time::{Clock, WallClock};

use crate::message::{ErrorBody, ErrorCode, Message, Uploaded};
use crate::wire::{read_message, write_message, WireError};

const RECENT_EVENTS: usize = 64;

struct WorkerLink {
    addr: String,
    tx: UnboundedSender<Message>,
}

struct State {
    controller: Controller,
    router: Router,
    counts: BTreeMap<String, u64>,
    links: BTreeMap<String, WorkerLink>,
    clock: WallClock,
    next_id: u64,
    recent: VecDeque<Value>,
}

impl State {
    fn now(&self) -> u64 {
        self.clock.now()
    }

    fn pump(&mut self) {
        loop {
            for ev in self.controller.drain_events() {
                if self.recent.len() == RECENT_EVENTS {
                    self.recent.pop_front();
                }
                self.recent.push_back(serde_json::to_value(&ev).expect("event serializes"));
            }
            let cmds = self.controller.drain_commands();
            if cmds.is_empty() {
                return;
            }
            for c in cmds {
                match c {
                    Command::PublishRoutes(table) => {
                        self.router.apply(table);
                    }
                    Command::LoadModel { worker_id, manifest } => {
                        if let Some(l) = self.links.get(&worker_id) {
                            let _ = l.tx.send(Message::LoadModel {
                                manifest: Box::new((*manifest).clone()),
                            });
                        }
                    }
                    Command::EvictModel { worker_id, model_id } => {
                        if let Some(l) = self.links.get(&worker_id) {
                            let _ = l.tx.send(Message::EvictModel { model_id });
                        }
                    }
                }
            }
        }
    }

    fn stats(&self) -> Value {
        let workers: Vec<Value> = self
            .controller
            .workers()
            .map(|w| {
                json!({
                    "worker_id": w.worker_id,
                    "profile": w.profile.name,
                    "alive": w.alive,
                    "addr": self.links.get(&w.worker_id).map(|l| l.addr.clone()),
                    "load_ewma": w.load_ewma,
                    "pending_ns": w.pending_ns,
                    "assigned": w.assigned.keys().collect::<Vec<_>>(),
                    "device_resident": w.device_resident,
                })
            })
            .collect();
        let models: Vec<Value> = self
            .controller
            .entries()
            .map(|e| {
                json!({
                    "model_id": e.model_id,
                    "tenant_id": e.tenant_id,
                    "state": e.state,
                    "replicas": e.replicas,
                    "loading": e.loading,
                    "target": e.target,
                    "demand_ewma": e.demand_ewma,
                })
            })
            .collect();
        json!({
            "role": "controller",
            "routing_version": self.router.table().version,
            "workers": workers,
            "models": models,
            "recent_events": self.recent,
        })
    }
}

#[derive(Clone)]
pub struct ControllerHandle {
    state: Arc<Mutex<State>>,
}

impl ControllerHandle {
    pub fn stats(&self) -> Value {
        self.state.lock().expect("controller lock").stats()
    }
}

/// Builds the controller from `config`, replaying `journal` when given.
pub fn controller_handle(config: &ClusterConfig, journal: Option<&Path>) -> Result<ControllerHandle, ControllerError> {
    let controller = match journal {
        Some(p) => Controller::with_journal(config.controller.clone(), p)?,
        None => Controller::new(config.controller.clone()),
    };
    Ok(ControllerHandle {
        state: Arc::new(Mutex::new(State {
            controller,
            router: Router::new(),
            counts: BTreeMap::new(),
            links: BTreeMap::new(),
            clock: WallClock::default(),
            next_id: 1,
            recent: VecDeque::new(),
        })),
    })
}

/// Accepts connections and runs the control loop until the listener fails.
pub async fn serve_controller(listener: TcpListener, handle: ControllerHandle) -> std::io::Result<()> {
    let heartbeat_ms = handle.state.lock().expect("controller lock").controller.config().heartbeat_ms;
    let ticker = handle.clone();
    tokio::spawn(async move {
        let mut every = tokio::time::interval(Duration::from_secs_f64(heartbeat_ms / 1e3));
        loop {
            every.tick().await;
            let mut s = ticker.state.lock().expect("controller lock");
            let counts = std::mem::take(&mut s.counts);
            s.controller.report_demand(&counts);
            let now = s.now();
            s.controller.tick(now);
            s.pump();
        }
    });
    loop {
        let (stream, _) = listener.accept().await?;
        let h = handle.clone();
        tokio::spawn(async move {
            let _ = connection(stream, h).await;
        });
    }
}

async fn connection(stream: TcpStream, handle: ControllerHandle) -> Result<(), WireError> {
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
    let mut registered: Option<String> = None;
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
        handle_message(msg, &handle, &tx, &mut registered);
    };
    if let Some(id) = registered {
        let mut s = handle.state.lock().expect("controller lock");
        if s.links.get(&id).is_some_and(|l| l.tx.same_channel(&tx)) {
            s.links.remove(&id);
        }
    }
    drop(tx);
    let _ = writer.await;
    result
}

pub(crate) fn protocol_error(e: &WireError) -> Message {
    use crate::frame::FrameError;
    let code = match e {
        WireError::Frame(FrameError::UnknownKind(_)) => ErrorCode::UnknownKind,
        WireError::Frame(FrameError::UnsupportedVersion(_)) => ErrorCode::UnsupportedVersion,
        _ => ErrorCode::MalformedPayload,
    };
    Message::error(None, code, e.to_string())
}

fn controller_error(request_id: u64, e: ControllerError) -> Message {
    let (code, findings) = match &e {
        ControllerError::ValidationFailed(f) => (ErrorCode::ValidationFailed, f.clone()),
        ControllerError::QuotaExceeded { .. } => (ErrorCode::QuotaExceeded, Vec::new()),
        ControllerError::DuplicateModel(_) => (ErrorCode::DuplicateModel, Vec::new()),
        ControllerError::UnknownModel(_) => (ErrorCode::ModelUnavailable, Vec::new()),
        ControllerError::InsufficientCapacity { .. } => (ErrorCode::ModelUnavailable, Vec::new()),
        _ => (ErrorCode::Unexpected, Vec::new()),
    };
    Message::Error(ErrorBody {
        request_id: Some(request_id),
        code,
        message: e.to_string(),
        findings,
    })
}

fn handle_message(
    msg: Message,
    handle: &ControllerHandle,
    tx: &UnboundedSender<Message>,
    registered: &mut Option<String>,
) {
    let reply = |m: Message| {
        let _ = tx.send(m);
    };
    match msg {
        Message::Ping => reply(Message::Pong),
        Message::Infer(inf) => {
            let h = handle.clone();
            let tx = tx.clone();
            tokio::spawn(async move {
                let out = forward_infer(&h, inf).await;
                let _ = tx.send(out);
            });
        }
        Message::StatsRequest { request_id } => {
            let stats = handle.stats();
            reply(Message::Stats { request_id, stats });
        }
        other => {
            let mut s = handle.state.lock().expect("controller lock");
            let now = s.now();
            let out = match other {
                Message::UploadModel(up) => Some(match s.controller.upload_document(&up.tenant_id, &up.manifest, now) {
                    Ok(ep) => Message::Uploaded(Uploaded {
                        request_id: up.request_id,
                        model_id: ep.model_id,
                        routing_version: ep.routing_version,
                    }),
                    Err(e) => controller_error(up.request_id, e),
                }),
                Message::DeleteModel { request_id, model_id } => Some(match s.controller.delete_model(&model_id) {
                    Ok(()) => Message::Deleted { request_id, model_id },
                    Err(e) => controller_error(request_id, e),
                }),
                Message::Register(r) => {
                    s.controller.register_worker(&r.worker_id, r.profile, r.host_cache_bytes, now);
                    s.links.insert(
                        r.worker_id.clone(),
                        WorkerLink {
                            addr: r.addr,
                            tx: tx.clone(),
                        },
                    );
                    *registered = Some(r.worker_id);
                    None
                }
                Message::Heartbeat(hb) => match s.controller.heartbeat(&hb, now) {
                    Ok(()) => None,
                    Err(e) => Some(Message::error(None, ErrorCode::Unexpected, e.to_string())),
                },
                Message::LoadAck(ack) => {
                    if let Some(w) = registered.as_deref() {
                        if ack.ok {
                            s.controller.ack_load(w, &ack.model_id, now);
                        } else {
                            s.controller.load_failed(w, &ack.model_id);
                        }
                    }
                    None
                }
                m => Some(Message::error(
                    m.request_id(),
                    ErrorCode::Unexpected,
                    format!("controller does not accept {:?} frames", m.kind()),
                )),
            };
            s.pump();
            if let Some(m) = out {
                reply(m);
            }
        }
    }
}

/// Sends `inf` to the best replica and, if it refuses, to the next one.
async fn forward_infer(handle: &ControllerHandle, mut inf: crate::message::Infer) -> Message {
    let client_id = inf.request_id;
    let targets = {
        let mut s = handle.state.lock().expect("controller lock");
        match s.router.rank(&inf.model_id, |_| None) {
            Ok(ranked) => {
                *s.counts.entry(inf.model_id.clone()).or_default() += 1;
                inf.request_id = s.next_id;
                s.next_id += 1;
                ranked
                    .into_iter()
                    .take(2)
                    .filter_map(|w| s.links.get(&w).map(|l| (w, l.addr.clone())))
                    .collect::<Vec<_>>()
            }
            Err(e) => return Message::error(Some(client_id), ErrorCode::ModelUnavailable, e.to_string()),
        }
    };
    let mut last = Message::error(
        Some(client_id),
        ErrorCode::ModelUnavailable,
        format!("model `{}` has no reachable replica", inf.model_id),
    );
    for (worker, addr) in targets {
        let out = match crate::client::request_at(&addr, &Message::Infer(inf.clone())).await {
            Ok(m) => m,
            Err(e) => {
                last = Message::error(
                    Some(client_id),
                    ErrorCode::ModelUnavailable,
                    format!("worker `{worker}` is unreachable: {e}"),
                );
                continue;
            }
        };
        match out {
            Message::InferResult(mut r) => {
                r.request_id = client_id;
                return Message::InferResult(r);
            }
            Message::Error(mut e) => {
                e.request_id = Some(client_id);
                let refused = e.code.is_refusal();
                last = Message::Error(e);
                if !refused {
                    break;
                }
            }
            other => {
                last = Message::error(
                    Some(client_id),
                    ErrorCode::Unexpected,
                    format!("worker replied with {:?}", other.kind()),
                );
                break;
            }
        }
    }
    last
}
