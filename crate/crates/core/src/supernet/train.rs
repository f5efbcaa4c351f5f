use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::nn::{sgd_step, ParamSet, Tensor};

use super::arch::ArchDescriptor;
use super::gates::{computation_percentage, hybrid_step, ExecutionMask, GatePhase, GatePolicy, GateStats, GateUpdate};
use super::model::{Batch, GateMode, Supernet};

impl Batch {
    /// Samples at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Result<Batch> {
        let x = self.x.gather_axis(0, idx)?;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        Ok(Batch { x, labels })
    }

    /// Mini-batches in a seeded random order; the last one may be short.
    pub fn shuffled_batches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Batch>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(|c| self.select(c)).collect()
    }

    pub fn concat(parts: &[Batch]) -> Result<Batch> {
        let first = parts.first().ok_or_else(|| CflError::Argument("nothing to concatenate".into()))?;
        let mut shape = first.x.shape().to_vec();
        shape[0] = parts.iter().map(Batch::len).sum();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.x.shape()[1..] != first.x.shape()[1..] {
                return Err(CflError::Structural(format!(
                    "cannot concatenate samples {:?} and {:?}",
                    first.x.shape(),
                    p.x.shape()
                )));
            }
            data.extend_from_slice(p.x.data());
            labels.extend_from_slice(&p.labels);
        }
        Ok(Batch { x: Tensor::new(shape, data)?, labels })
    }
}

/// Worker-side SGD settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Run the frozen gates greedily during training (otherwise every layer runs).
    pub gated: bool,
}

#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub model: ParamSet,
    pub batches: usize,
    pub computation: f64,
}

/// `epochs` passes of mini-batch SGD over `data` on the submodel `model`.
pub fn train_local(
    net: &Supernet,
    model: &ParamSet,
    arch: &ArchDescriptor,
    gates: &GatePolicy,
    data: &Batch,
    opts: &LocalTraining,
    seed: u64,
) -> Result<LocalOutcome> {
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(CflError::Config("local training needs epochs >= 1 and batch_size >= 1".into()));
    }
    let mode = if opts.gated { GateMode::Greedy } else { GateMode::AllOn };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = model.clone();
    let mut batches = 0;
    let mut masks: Vec<ExecutionMask> = Vec::new();
    for _ in 0..opts.epochs {
        for batch in data.shuffled_batches(opts.batch_size, &mut rng)? {
            let lg = net.loss_grads(&current, arch, gates, &batch, mode)?;
            masks.extend(net.execution_masks(arch, batch.len(), &lg.records));
            current = sgd_step(&current, &lg.model, opts.lr)?;
            batches += 1;
        }
    }
    let computation = if masks.is_empty() { 1.0 } else { computation_percentage(&masks)? };
    Ok(LocalOutcome { model: current, batches, computation })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub computation: f64,
}

/// Accuracy and computation percentage of a submodel on `data`.
pub fn evaluate(
    net: &Supernet,
    model: &ParamSet,
    arch: &ArchDescriptor,
    gates: &GatePolicy,
    data: &Batch,
    mode: GateMode,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(CflError::Argument("cannot evaluate on an empty set".into()));
    }
    const CHUNK: usize = 256;
    let mut correct = 0usize;
    let mut masks = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let part = data.select(chunk)?;
        let (pred, m) = net.predict(model, arch, gates, &part.x, mode)?;
        correct += pred.iter().zip(&part.labels).filter(|(p, y)| p == y).count();
        masks.extend(m);
    }
    Ok(Evaluation { accuracy: correct as f64 / data.len() as f64, computation: computation_percentage(&masks)? })
}

/// Server-side pre-training of the parent together with its gates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pretraining {
    pub epochs: usize,
    /// Leading epochs trained with soft gating before switching to sampled decisions.
    pub warmup_epochs: usize,
    pub lr: f64,
    pub gate_lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
}

impl Default for Pretraining {
    fn default() -> Self {
        Pretraining { epochs: 5, warmup_epochs: 3, lr: 0.05, gate_lr: 0.5, batch_size: 16, alpha: 0.1 }
    }
}

/// Trains the full parent and the gates on `data` with the hybrid schedule.
/// Returns per-epoch mean statistics.
pub fn pretrain(
    net: &Supernet,
    parent: &ParamSet,
    gates: &GatePolicy,
    data: &Batch,
    opts: &Pretraining,
    seed: u64,
) -> Result<(ParamSet, GatePolicy, Vec<GateStats>)> {
    if opts.alpha < 0.0 {
        return Err(CflError::Config(format!("gate reward alpha must be >= 0, got {}", opts.alpha)));
    }
    let arch = ArchDescriptor::full(net.config());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = parent.clone();
    let mut gates = gates.clone();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut step_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for epoch in 0..opts.epochs {
        let phase = if epoch < opts.warmup_epochs { GatePhase::Warmup } else { GatePhase::Reinforce };
        let mut acc = GateStats::default();
        let batches = data.shuffled_batches(opts.batch_size, &mut rng)?;
        for batch in &batches {
            step_seed = step_seed.wrapping_add(1);
            let update = GateUpdate { phase, alpha: opts.alpha, lr: opts.gate_lr, seed: step_seed };
            let step = hybrid_step(net, &model, &arch, &gates, batch, update)?;
            model = sgd_step(&model, &step.model_grads, opts.lr)?;
            gates = step.gates;
            acc.loss += step.stats.loss;
            acc.accuracy += step.stats.accuracy;
            acc.mean_reward += step.stats.mean_reward;
            acc.computation += step.stats.computation;
        }
        let k = batches.len().max(1) as f64;
        history.push(GateStats {
            loss: acc.loss / k,
            accuracy: acc.accuracy / k,
            mean_reward: acc.mean_reward / k,
            computation: acc.computation / k,
        });
    }
    Ok((model, gates, history))
}
