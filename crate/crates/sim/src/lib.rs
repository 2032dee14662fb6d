//! Deterministic discrete-event simulation of a shared inference cluster.
//!
//! A [`Scenario`] names the cluster, the models each tenant uploads, the
//! request streams and any injected faults. [`run_simulation`] replays it in
//! virtual time and returns the event trace plus the [`MetricsReport`] folded
//! from it.

pub mod billing;
pub mod engine;
pub mod events;
pub mod report;
pub mod scenario;
pub mod sweep;
pub mod trace;
pub mod vm;
pub mod workload;

pub use billing::{BillingLedger, TenantCharge};
pub use engine::{run_scenario, run_simulation, SimError, SimOutput};
pub use events::EventQueue;
pub use report::{compute_report, nearest_rank, MetricsReport, ModelMetrics, WorkerMetrics};
pub use scenario::{Scenario, ScenarioError};
pub use trace::TraceRecord;
pub use workload::{generate_arrivals, Pattern, WorkloadSpec};
