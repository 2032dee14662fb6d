//! Work-based charges: tenants pay for device time their completed requests
//! occupied, never for idle capacity.

use std::collections::BTreeMap;

use infershare_core::time::Nanos;
use infershare_core::worker::CompletionRecord;
use serde::{Deserialize, Serialize};

use crate::trace::TraceRecord;

const NANOS_PER_HOUR: f64 = 3600e9;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TenantCharge {
    pub tenant: String,
    pub requests: u64,
    pub device_ns: Nanos,
    pub transfer_ns: Nanos,
    pub usd: f64,
}

/// Accumulates integer nanoseconds per hourly rate, so the total does not
/// depend on the order requests were charged in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BillingLedger {
    /// Price of one hour of link time, 0 by default.
    pub link_cost_per_hour: f64,
    tenants: BTreeMap<String, Account>,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Account {
    requests: u64,
    transfer_ns: Nanos,
    /// Device nanoseconds keyed by the rate's bit pattern.
    by_rate: BTreeMap<u64, Nanos>,
}

impl BillingLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_link_cost(link_cost_per_hour: f64) -> Self {
        Self {
            link_cost_per_hour,
            ..Self::default()
        }
    }

    pub fn charge(&mut self, tenant: &str, device_ns: Nanos, cost_per_hour: f64, transfer_ns: Nanos) {
        let a = self.tenants.entry(tenant.to_string()).or_default();
        a.requests += 1;
        a.transfer_ns += transfer_ns;
        *a.by_rate.entry(cost_per_hour.to_bits()).or_default() += device_ns;
    }

    pub fn charge_completion(&mut self, r: &CompletionRecord) {
        self.charge(&r.tenant_id, r.device_busy_ns, r.cost_per_hour, r.fetch_ns + r.copy_ns);
    }

    /// Charges a `Done` record; every other record is free.
    pub fn charge_record(&mut self, r: &TraceRecord) {
        if let TraceRecord::Done {
            tenant,
            device_busy_ns,
            cost_per_hour,
            transfer_ns,
            ..
        } = r
        {
            self.charge(tenant, *device_busy_ns, *cost_per_hour, *transfer_ns);
        }
    }

    pub fn usd(&self, tenant: &str) -> f64 {
        self.tenants.get(tenant).map_or(0.0, |a| self.account_usd(a))
    }

    fn account_usd(&self, a: &Account) -> f64 {
        let device: f64 = a
            .by_rate
            .iter()
            .map(|(rate, ns)| *ns as f64 * f64::from_bits(*rate) / NANOS_PER_HOUR)
            .sum();
        device + a.transfer_ns as f64 * self.link_cost_per_hour / NANOS_PER_HOUR
    }

    pub fn charges(&self) -> Vec<TenantCharge> {
        self.tenants
            .iter()
            .map(|(t, a)| TenantCharge {
                tenant: t.clone(),
                requests: a.requests,
                device_ns: a.by_rate.values().sum(),
                transfer_ns: a.transfer_ns,
                usd: self.account_usd(a),
            })
            .collect()
    }

    pub fn total_usd(&self) -> f64 {
        self.tenants.values().map(|a| self.account_usd(a)).sum()
    }
}
