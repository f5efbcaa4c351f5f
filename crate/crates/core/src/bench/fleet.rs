use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::search::{build_latency_table, lookup_latency, DeviceProfile};
use crate::supernet::{ArchDescriptor, SupernetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetOptions {
    pub base_flops_per_ms: f64,
    /// Ratio between the fastest and slowest possible device.
    pub speed_spread: f64,
    pub per_layer_overhead_ms: f64,
    /// Latency bound as a fraction of the device's full-parent latency.
    pub bound_factor: f64,
}

impl Default for FleetOptions {
    fn default() -> Self {
        FleetOptions { base_flops_per_ms: 2e5, speed_spread: 4.0, per_layer_overhead_ms: 0.01, bound_factor: 0.6 }
    }
}

/// `k` devices with log-uniform speeds over `[base, base * spread]`, each
/// bounded at `bound_factor` times its own full-parent latency.
pub fn make_device_fleet(cfg: &SupernetConfig, k: usize, opts: &FleetOptions, seed: u64) -> Result<Vec<DeviceProfile>> {
    if !(opts.speed_spread >= 1.0) || !opts.speed_spread.is_finite() {
        return Err(CflError::Config(format!("speed_spread must be >= 1, got {}", opts.speed_spread)));
    }
    if !(opts.base_flops_per_ms > 0.0) || !(opts.bound_factor > 0.0) || !(opts.per_layer_overhead_ms >= 0.0) {
        return Err(CflError::Config(format!("invalid fleet options {:?}", opts)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_spread = opts.speed_spread.ln();
    let mut fleet: Vec<DeviceProfile> = (0..k)
        .map(|i| DeviceProfile {
            device_model: format!("dev{:02}", i),
            flops_per_ms: opts.base_flops_per_ms * (rng.random::<f64>() * log_spread).exp(),
            per_layer_overhead_ms: opts.per_layer_overhead_ms,
            latency_bound_ms: 1.0,
        })
        .collect();
    if k == 0 {
        return Ok(fleet);
    }
    let table = build_latency_table(cfg, &fleet)?;
    let full = ArchDescriptor::full(cfg);
    for p in fleet.iter_mut() {
        p.latency_bound_ms = opts.bound_factor * lookup_latency(&table, cfg, &full, p)?;
    }
    Ok(fleet)
}
