//! Round orchestration for the three training modes.

mod config;
mod data;
mod metrics;
mod run;

pub use config::{Mode, QualityAssignment, RunConfig};
pub use data::{assign_quality, build_federated_data, DataOptions, FederatedData, WorkerData};
pub use metrics::{fairness_metrics, Fairness};
pub use run::{
    build_fleet, network_config, run_experiment, run_experiment_with, summarize, RoundRecord, RunOutput, Simulation, Summary, WorkerRecord,
};

/// Independent seed for one `(tag, a, b)` use of a run seed.
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    let mut z = seed;
    for v in [tag, a, b] {
        z = splitmix(z ^ splitmix(v.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    z
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests;
