//! Sample messages and the frame fuzzer shared by the test targets.
#![allow(dead_code)]

use infershare_cli::message::{
    ErrorBody, Infer, InferResult, LoadAck, Register, Upload, Uploaded, WireInput, WireTensor,
};
use infershare_cli::{decode_frame, ErrorCode, Kind, Message};
use infershare_core::controller::Heartbeat;
use infershare_core::executor::Tensor;
use infershare_core::manifest::bundled;
use infershare_core::predictor::{DeviceProfile, Residency};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One message of every kind.
pub fn sample_messages() -> Vec<Message> {
    let t = Tensor::new(2, vec![3], vec![0.5, -1.0, 2.25, 0.0, 1e-300, -7.0]).unwrap();
    vec![
        Message::Ping,
        Message::Pong,
        Message::UploadModel(Upload {
            request_id: 7,
            tenant_id: "acme".into(),
            manifest: bundled::tiny_mlp().to_document(),
        }),
        Message::Uploaded(Uploaded {
            request_id: 7,
            model_id: "acme/tiny-mlp".into(),
            routing_version: 3,
        }),
        Message::DeleteModel {
            request_id: 8,
            model_id: "acme/tiny-mlp".into(),
        },
        Message::Deleted {
            request_id: 8,
            model_id: "acme/tiny-mlp".into(),
        },
        Message::Infer(Infer {
            request_id: 9,
            tenant_id: "acme".into(),
            model_id: "acme/tiny-mlp".into(),
            deadline_ms: Some(25.0),
            batch: 2,
            input: WireInput::Tensor {
                tensor: WireTensor::encode(&t),
            },
        }),
        Message::InferResult(InferResult {
            request_id: 9,
            model_id: "acme/tiny-mlp".into(),
            worker_id: "w1".into(),
            residency: Residency::HostHit,
            latency_ms: 7.47,
            estimate_ms: 7.47,
            output: Some(WireTensor::encode(&t)),
        }),
        Message::StatsRequest { request_id: 10 },
        Message::Stats {
            request_id: 10,
            stats: serde_json::json!({"role": "worker", "pending": 0}),
        },
        Message::Register(Register {
            worker_id: "w1".into(),
            profile: DeviceProfile::virtual_gpu(),
            host_cache_bytes: 1 << 30,
            addr: "127.0.0.1:7501".into(),
        }),
        Message::Heartbeat(Heartbeat {
            worker_id: "w1".into(),
            busy_fraction: 0.25,
            hosted: vec!["acme/tiny-mlp".into()],
            device_resident: vec![],
            pending_ns: 970_000,
        }),
        Message::LoadModel {
            manifest: Box::new(bundled::tiny_mlp()),
        },
        Message::LoadAck(LoadAck {
            model_id: "acme/tiny-mlp".into(),
            ok: false,
            error: Some("no space".into()),
        }),
        Message::EvictModel {
            model_id: "acme/tiny-mlp".into(),
        },
        Message::Error(ErrorBody {
            request_id: Some(9),
            code: ErrorCode::ModelUnavailable,
            message: "model `acme/x` has no routable replica".into(),
            findings: vec!["a".into(), "b".into()],
        }),
    ]
}

#[derive(Debug, Default)]
pub struct FuzzStats {
    pub frames: usize,
    pub decoded: usize,
    pub messages: usize,
}

const JSON_BITS: [&str; 16] = [
    "{", "}", "\"v\":", "1", "2", "18446744073709551616", "-1", "\"request_id\":", "\"model_id\":", "\"x\"", ",",
    "null", "[", "]", "\"manifest\":", "true",
];

/// Feeds `n` hostile inputs through the frame and message decoders. Panics
/// propagate to the caller.
pub fn fuzz_frames(seed: u64, n: usize) -> FuzzStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let valid: Vec<Vec<u8>> = sample_messages().iter().map(|m| m.to_frame().unwrap()).collect();
    let mut stats = FuzzStats::default();
    for i in 0..n {
        let bytes: Vec<u8> = match i % 4 {
            0 => {
                let len = rng.random_range(0..64);
                (0..len).map(|_| rng.random()).collect()
            }
            1 => {
                let len: u32 = if rng.random_bool(0.5) { rng.random() } else { rng.random_range(0..300) };
                let mut b = len.to_be_bytes().to_vec();
                b.push(rng.random());
                let body = (len as usize).min(rng.random_range(0..300));
                b.extend((0..body).map(|_| rng.random::<u8>()));
                b
            }
            2 => {
                let mut b = valid[rng.random_range(0..valid.len())].clone();
                match rng.random_range(0..3) {
                    0 => b.truncate(rng.random_range(0..b.len())),
                    1 => {
                        for _ in 0..rng.random_range(1..6) {
                            let j = rng.random_range(0..b.len());
                            b[j] = rng.random();
                        }
                    }
                    _ => b.extend((0..rng.random_range(1..16)).map(|_| rng.random::<u8>())),
                }
                b
            }
            _ => {
                let body: String = (0..rng.random_range(0..24))
                    .map(|_| JSON_BITS[rng.random_range(0..JSON_BITS.len())])
                    .collect();
                let kind = Kind::ALL[rng.random_range(0..Kind::ALL.len())] as u8;
                let mut b = ((body.len() + 1) as u32).to_be_bytes().to_vec();
                b.push(kind);
                b.extend(body.as_bytes());
                b
            }
        };
        stats.frames += 1;
        if let Ok((frame, used)) = decode_frame(&bytes) {
            assert!(used <= bytes.len());
            stats.decoded += 1;
            if Message::from_frame(&frame).is_ok() {
                stats.messages += 1;
            }
        }
    }
    stats
}
