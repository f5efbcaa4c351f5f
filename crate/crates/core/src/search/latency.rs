use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::supernet::{ArchDescriptor, SupernetConfig, WIDTH_RATIOS};

/// Hardware profile of one simulated worker together with its latency bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub device_model: String,
    pub flops_per_ms: f64,
    pub per_layer_overhead_ms: f64,
    pub latency_bound_ms: f64,
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.flops_per_ms > 0.0) || !self.flops_per_ms.is_finite() {
            return Err(CflError::Config(format!(
                "device {}: flops_per_ms must be positive, got {}",
                self.device_model, self.flops_per_ms
            )));
        }
        if !(self.per_layer_overhead_ms >= 0.0) {
            return Err(CflError::Config(format!(
                "device {}: negative per-layer overhead {}",
                self.device_model, self.per_layer_overhead_ms
            )));
        }
        if !(self.latency_bound_ms > 0.0) {
            return Err(CflError::Config(format!(
                "device {}: latency bound must be positive, got {}",
                self.device_model, self.latency_bound_ms
            )));
        }
        Ok(())
    }
}

/// `(device_model, group, slot, ratio bucket)`
pub type LatencyKey = (String, usize, usize, usize);

/// Per-layer latencies in milliseconds; a submodel's latency is the sum over
/// its active layers plus a fixed per-layer overhead.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencyTable {
    entries: BTreeMap<LatencyKey, f64>,
}

/// Multiply-accumulate FLOPs of layer `(group, slot)` at ratio bucket `ratio`.
///
/// Input channels are taken at the parent's full width, so the cost is an
/// upper bound on what any submodel actually runs in that slot.
pub fn layer_flops(cfg: &SupernetConfig, group: usize, slot: usize, ratio: usize) -> f64 {
    let k = cfg.kernel_size;
    let cout = cfg.width_for(group, ratio);
    let cin = if slot == 0 { cfg.group_input_width(group) } else { cfg.max_widths[group] };
    let (h, w) = cfg.spatial_out(group);
    (2 * k * k * cin * cout * h * w) as f64
}

/// Table for every `(device, group, slot, ratio)` combination of `cfg`.
pub fn build_latency_table(cfg: &SupernetConfig, profiles: &[DeviceProfile]) -> Result<LatencyTable> {
    cfg.validate()?;
    if profiles.is_empty() {
        return Err(CflError::Config("latency table needs at least one device profile".into()));
    }
    let mut table = LatencyTable::default();
    for p in profiles {
        if !(p.flops_per_ms > 0.0) || !p.flops_per_ms.is_finite() {
            return Err(CflError::Config(format!(
                "device {}: flops_per_ms must be positive, got {}",
                p.device_model, p.flops_per_ms
            )));
        }
        for g in 0..cfg.num_groups {
            for d in 0..cfg.max_depth {
                for r in 0..WIDTH_RATIOS.len() {
                    table.insert(&p.device_model, g, d, r, layer_flops(cfg, g, d, r) / p.flops_per_ms)?;
                }
            }
        }
    }
    Ok(table)
}

/// Latency of `arch` on `profile`: table entries of active layers plus overhead.
pub fn lookup_latency(
    table: &LatencyTable,
    cfg: &SupernetConfig,
    arch: &ArchDescriptor,
    profile: &DeviceProfile,
) -> Result<f64> {
    arch.validate(cfg)?;
    let mut total = 0.0;
    for (g, group) in arch.channels.iter().enumerate() {
        for (d, idx) in group.iter().enumerate() {
            let r = cfg.ratio_bucket(g, idx.len()).ok_or_else(|| {
                CflError::Coverage(format!("group {} slot {} width {} matches no ratio bucket", g, d, idx.len()))
            })?;
            total += table.entry(&profile.device_model, g, d, r)?;
        }
    }
    Ok(total + profile.per_layer_overhead_ms * arch.active_layers() as f64)
}

impl LatencyTable {
    pub fn insert(&mut self, device: &str, group: usize, slot: usize, ratio: usize, ms: f64) -> Result<()> {
        if !(ms > 0.0) || !ms.is_finite() {
            return Err(CflError::Config(format!("latency entry must be positive and finite, got {}", ms)));
        }
        if ratio >= WIDTH_RATIOS.len() {
            return Err(CflError::Config(format!("ratio bucket {} out of range", ratio)));
        }
        self.entries.insert((device.to_string(), group, slot, ratio), ms);
        Ok(())
    }

    pub fn entry(&self, device: &str, group: usize, slot: usize, ratio: usize) -> Result<f64> {
        self.entries.get(&(device.to_string(), group, slot, ratio)).copied().ok_or_else(|| {
            CflError::Coverage(format!(
                "no latency entry for device={} g={} slot={} ratio={}",
                device,
                group,
                slot,
                WIDTH_RATIOS.get(ratio).copied().unwrap_or(f64::NAN)
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LatencyKey, &f64)> {
        self.entries.iter()
    }

    /// Lines of `device=<id> g=<g> slot=<d> ratio=<r> ms=<f64>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((dev, g, d, r), ms) in &self.entries {
            writeln!(out, "device={} g={} slot={} ratio={} ms={}", dev, g, d, WIDTH_RATIOS[*r], ms).unwrap();
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut table = LatencyTable::default();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || CflError::Parse(format!("malformed latency line '{}'", line));
            let mut parts = line.split_whitespace();
            let mut next = |key: &str| parts.next().and_then(|p| p.strip_prefix(key)).ok_or_else(bad);
            let device = next("device=")?.to_string();
            let g = next("g=")?.parse().map_err(|_| bad())?;
            let d = next("slot=")?.parse().map_err(|_| bad())?;
            let ratio: f64 = next("ratio=")?.parse().map_err(|_| bad())?;
            let ms = next("ms=")?.parse().map_err(|_| bad())?;
            let r = WIDTH_RATIOS.iter().position(|&x| x == ratio).ok_or_else(bad)?;
            table.insert(&device, g, d, r, ms)?;
        }
        Ok(table)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        Self::read_from(s.as_bytes())
    }
}
