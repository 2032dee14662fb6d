//! Multi-tenant inference serving: model manifests, a reference executor,
//! the latency/cost predictor, and the worker and controller state machines.

pub mod config;
pub mod controller;
pub mod executor;
pub mod manifest;
pub mod predictor;
pub mod time;
pub mod worker;
