//! Typed payloads for each frame kind.

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use infershare_core::controller::Heartbeat;
use infershare_core::executor::Tensor;
use infershare_core::manifest::ModelManifest;
use infershare_core::predictor::{DeviceProfile, Residency};

use crate::frame::{encode_frame, Frame, FrameError, Kind};

pub const SCHEMA_VERSION: u64 = 1;

/// Tensor on the wire: per-sample dims plus little-endian f64 values in base64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub batch: usize,
    pub dims: Vec<usize>,
    pub data: String,
}

impl WireTensor {
    pub fn encode(t: &Tensor) -> Self {
        let bytes: Vec<u8> = t.values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self {
            batch: t.batch,
            dims: t.dims.clone(),
            data: STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Tensor, FrameError> {
        let bad = |m: String| FrameError::MalformedPayload(m);
        let bytes = STANDARD.decode(&self.data).map_err(|e| bad(format!("tensor data: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(bad("tensor data is not a whole number of f64 values".into()));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect();
        Tensor::new(self.batch, self.dims.clone(), values).map_err(|e| bad(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WireInput {
    Size { bytes: u64 },
    Tensor { tensor: WireTensor },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    ModelUnavailable,
    ValidationFailed,
    QuotaExceeded,
    DuplicateModel,
    WouldMissDeadline,
    Overloaded,
    Rerouted,
    Failed,
    UnknownModel,
    UnknownKind,
    MalformedPayload,
    UnsupportedVersion,
    Unexpected,
}

impl ErrorCode {
    /// Codes after which a router tries another replica.
    pub fn is_refusal(self) -> bool {
        matches!(
            self,
            ErrorCode::WouldMissDeadline | ErrorCode::Overloaded | ErrorCode::UnknownModel | ErrorCode::Rerouted
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Upload {
    pub request_id: u64,
    pub tenant_id: String,
    /// Manifest in its text document form.
    pub manifest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Uploaded {
    pub request_id: u64,
    pub model_id: String,
    pub routing_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Infer {
    pub request_id: u64,
    pub tenant_id: String,
    pub model_id: String,
    #[serde(default)]
    pub deadline_ms: Option<f64>,
    pub batch: u32,
    pub input: WireInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferResult {
    pub request_id: u64,
    pub model_id: String,
    pub worker_id: String,
    pub residency: Residency,
    pub latency_ms: f64,
    pub estimate_ms: f64,
    #[serde(default)]
    pub output: Option<WireTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Register {
    pub worker_id: String,
    pub profile: DeviceProfile,
    pub host_cache_bytes: u64,
    /// Where the worker accepts inference connections.
    pub addr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadAck {
    pub model_id: String,
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    #[serde(default)]
    pub request_id: Option<u64>,
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub findings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Ping,
    Pong,
    UploadModel(Upload),
    Uploaded(Uploaded),
    DeleteModel { request_id: u64, model_id: String },
    Deleted { request_id: u64, model_id: String },
    Infer(Infer),
    InferResult(InferResult),
    StatsRequest { request_id: u64 },
    Stats { request_id: u64, stats: Value },
    Register(Register),
    Heartbeat(Heartbeat),
    LoadModel { manifest: Box<ModelManifest> },
    LoadAck(LoadAck),
    EvictModel { model_id: String },
    Error(ErrorBody),
}

#[derive(Serialize, Deserialize)]
struct ModelRef {
    request_id: u64,
    model_id: String,
}

#[derive(Serialize, Deserialize)]
struct StatsBody {
    request_id: u64,
    #[serde(default)]
    stats: Value,
}

#[derive(Serialize, Deserialize)]
struct LoadBody {
    manifest: ModelManifest,
}

#[derive(Serialize, Deserialize)]
struct EvictBody {
    model_id: String,
}

impl Message {
    pub fn error(request_id: Option<u64>, code: ErrorCode, message: impl Into<String>) -> Self {
        Message::Error(ErrorBody {
            request_id,
            code,
            message: message.into(),
            findings: Vec::new(),
        })
    }

    pub fn kind(&self) -> Kind {
        match self {
            Message::Ping => Kind::Ping,
            Message::Pong => Kind::Pong,
            Message::UploadModel(_) => Kind::UploadModel,
            Message::Uploaded(_) => Kind::Uploaded,
            Message::DeleteModel { .. } => Kind::DeleteModel,
            Message::Deleted { .. } => Kind::Deleted,
            Message::Infer(_) => Kind::Infer,
            Message::InferResult(_) => Kind::InferResult,
            Message::StatsRequest { .. } => Kind::StatsRequest,
            Message::Stats { .. } => Kind::Stats,
            Message::Register(_) => Kind::Register,
            Message::Heartbeat(_) => Kind::Heartbeat,
            Message::LoadModel { .. } => Kind::LoadModel,
            Message::LoadAck(_) => Kind::LoadAck,
            Message::EvictModel { .. } => Kind::EvictModel,
            Message::Error(_) => Kind::Error,
        }
    }

    /// Request id carried by the payload, if the kind has one.
    pub fn request_id(&self) -> Option<u64> {
        match self {
            Message::UploadModel(m) => Some(m.request_id),
            Message::Uploaded(m) => Some(m.request_id),
            Message::Infer(m) => Some(m.request_id),
            Message::InferResult(m) => Some(m.request_id),
            Message::DeleteModel { request_id, .. }
            | Message::Deleted { request_id, .. }
            | Message::StatsRequest { request_id }
            | Message::Stats { request_id, .. } => Some(*request_id),
            Message::Error(e) => e.request_id,
            _ => None,
        }
    }

    pub fn payload(&self) -> Value {
        let body = match self {
            Message::Ping | Message::Pong => Value::Object(Default::default()),
            Message::UploadModel(m) => to_value(m),
            Message::Uploaded(m) => to_value(m),
            Message::DeleteModel { request_id, model_id } | Message::Deleted { request_id, model_id } => {
                to_value(&ModelRef {
                    request_id: *request_id,
                    model_id: model_id.clone(),
                })
            }
            Message::Infer(m) => to_value(m),
            Message::InferResult(m) => to_value(m),
            Message::StatsRequest { request_id } => to_value(&StatsBody {
                request_id: *request_id,
                stats: Value::Null,
            }),
            Message::Stats { request_id, stats } => to_value(&StatsBody {
                request_id: *request_id,
                stats: stats.clone(),
            }),
            Message::Register(m) => to_value(m),
            Message::Heartbeat(m) => to_value(m),
            Message::LoadModel { manifest } => to_value(&LoadBody {
                manifest: (**manifest).clone(),
            }),
            Message::LoadAck(m) => to_value(m),
            Message::EvictModel { model_id } => to_value(&EvictBody {
                model_id: model_id.clone(),
            }),
            Message::Error(m) => to_value(m),
        };
        let Value::Object(mut map) = body else {
            unreachable!("payloads are objects")
        };
        map.insert("v".into(), Value::from(SCHEMA_VERSION));
        Value::Object(map)
    }

    pub fn to_frame(&self) -> Result<Vec<u8>, FrameError> {
        let bytes = serde_json::to_vec(&self.payload()).expect("payload serializes");
        encode_frame(self.kind(), &bytes)
    }

    pub fn from_frame(frame: &Frame) -> Result<Message, FrameError> {
        Self::decode(frame.kind, &frame.payload)
    }

    pub fn decode(kind: Kind, payload: &[u8]) -> Result<Message, FrameError> {
        let value: Value =
            serde_json::from_slice(payload).map_err(|e| FrameError::MalformedPayload(e.to_string()))?;
        let Value::Object(mut map) = value else {
            return Err(FrameError::MalformedPayload("payload is not an object".into()));
        };
        match map.remove("v") {
            Some(Value::Number(n)) => match n.as_u64() {
                Some(SCHEMA_VERSION) => {}
                Some(v) if v > SCHEMA_VERSION => return Err(FrameError::UnsupportedVersion(v)),
                _ => return Err(FrameError::MalformedPayload(format!("bad schema version {n}"))),
            },
            Some(other) => return Err(FrameError::MalformedPayload(format!("bad schema version {other}"))),
            None => return Err(FrameError::MalformedPayload("missing schema version `v`".into())),
        }
        let body = Value::Object(map);
        Ok(match kind {
            Kind::Ping => Message::Ping,
            Kind::Pong => Message::Pong,
            Kind::UploadModel => Message::UploadModel(from_value(body)?),
            Kind::Uploaded => Message::Uploaded(from_value(body)?),
            Kind::DeleteModel => {
                let r: ModelRef = from_value(body)?;
                Message::DeleteModel {
                    request_id: r.request_id,
                    model_id: r.model_id,
                }
            }
            Kind::Deleted => {
                let r: ModelRef = from_value(body)?;
                Message::Deleted {
                    request_id: r.request_id,
                    model_id: r.model_id,
                }
            }
            Kind::Infer => Message::Infer(from_value(body)?),
            Kind::InferResult => Message::InferResult(from_value(body)?),
            Kind::StatsRequest => Message::StatsRequest {
                request_id: from_value::<StatsBody>(body)?.request_id,
            },
            Kind::Stats => {
                let s: StatsBody = from_value(body)?;
                Message::Stats {
                    request_id: s.request_id,
                    stats: s.stats,
                }
            }
            Kind::Register => Message::Register(from_value(body)?),
            Kind::Heartbeat => Message::Heartbeat(from_value(body)?),
            Kind::LoadModel => Message::LoadModel {
                manifest: Box::new(from_value::<LoadBody>(body)?.manifest),
            },
            Kind::LoadAck => Message::LoadAck(from_value(body)?),
            Kind::EvictModel => Message::EvictModel {
                model_id: from_value::<EvictBody>(body)?.model_id,
            },
            Kind::Error => Message::Error(from_value(body)?),
        })
    }
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("payload serializes")
}

fn from_value<T: DeserializeOwned>(v: Value) -> Result<T, FrameError> {
    serde_json::from_value(v).map_err(|e| FrameError::MalformedPayload(e.to_string()))
}
