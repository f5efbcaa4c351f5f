//! Elastic, layer-gated parent model.

mod arch;
mod config;
mod gates;
mod model;
mod train;

pub use arch::{ArchDescriptor, ChannelPolicy};
pub use config::{SupernetConfig, WIDTH_RATIOS};
pub use gates::{
    computation_percentage, hybrid_gate_update, hybrid_step, ExecutionMask, GatePhase, GatePolicy, GateStats,
    GateUpdate, HybridStep,
};
pub(crate) use model::{leaves, normal_tensor};
pub use model::{argmax_rows, layer_id, Batch, GateMode, GateRecord, LossGrads, Supernet};
pub use train::{evaluate, pretrain, train_local, Evaluation, LocalOutcome, LocalTraining, Pretraining};
