//! Latency-bounded submodel selection guided by an online accuracy predictor.

mod encode;
mod genetic;
mod latency;
mod predictor;

pub use encode::{encode_arch, TrainingProfile};
pub use genetic::{select_submodels, FnScorer, Genome, Scorer, SearchOptions, SearchStrategy, Selection};
pub use latency::{build_latency_table, layer_flops, lookup_latency, DeviceProfile, LatencyKey, LatencyTable};
pub use predictor::{train_predictor_round, AccuracyPredictor, PredictorOptions, RoundFit};

#[cfg(test)]
mod tests;
