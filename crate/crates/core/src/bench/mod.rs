//! Heterogeneous benchmark: quality-degraded data, label-skewed splits and
//! simulated device fleets.

mod dataset;
mod fleet;
mod partition;
mod quality;
mod synth;

pub use dataset::{load_idx, read_idx, Dataset};
pub use fleet::{make_device_fleet, FleetOptions};
pub use partition::{partition_noniid, partition_quality_iid, round_robin_dominant, Partition};
pub use quality::{gaussian_blur, gaussian_kernel, sharpen, total_variation, QualityLevel};
pub use synth::{synthetic_digits, SynthOptions};

#[cfg(test)]
mod tests;
