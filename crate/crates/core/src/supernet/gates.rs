//! Layer-skip gates and their hybrid supervised / policy-gradient training.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::nn::{sgd_step, sigmoid, ParamSet, Tensor};

use super::arch::ArchDescriptor;
use super::config::SupernetConfig;
use super::model::{layer_id, Batch, GateMode, GateRecord, Supernet};

/// Which layers ran for one sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionMask {
    /// Always-executed layers (stem plus the first layer of every group).
    pub mandatory: usize,
    /// Decisions for the skippable layers of the submodel, in layer order.
    pub skippable: Vec<bool>,
}

impl ExecutionMask {
    pub fn total(&self) -> usize {
        self.mandatory + self.skippable.len()
    }

    pub fn executed(&self) -> usize {
        self.mandatory + self.skippable.iter().filter(|&&e| e).count()
    }

    pub fn skipped_fraction(&self) -> f64 {
        if self.skippable.is_empty() {
            0.0
        } else {
            self.skippable.iter().filter(|&&e| !e).count() as f64 / self.skippable.len() as f64
        }
    }
}

/// Mean fraction of layers actually computed.
pub fn computation_percentage(masks: &[ExecutionMask]) -> Result<f64> {
    if masks.is_empty() {
        return Err(CflError::Argument("computation_percentage needs at least one mask".into()));
    }
    let total: f64 = masks.iter().map(|m| m.executed() as f64 / m.total() as f64).sum();
    Ok(total / masks.len() as f64)
}

/// Per skippable parent layer, an affine map from the pooled input feature to
/// `(execute, skip)` logits, plus the moving-average reward baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct GatePolicy {
    params: ParamSet,
    baseline: Option<f64>,
    pub baseline_decay: f64,
}

impl GatePolicy {
    /// Gates for every skippable slot of the parent. `exec_bias` is the
    /// initial execute-logit offset.
    pub fn new(cfg: &SupernetConfig, seed: u64, exec_bias: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for g in 0..cfg.num_groups {
            let width = cfg.max_widths[g];
            let dist = Normal::new(0.0, 0.1 / (width as f64).sqrt()).expect("positive std");
            for d in 1..cfg.max_depth {
                let w: Vec<f64> = (0..2 * width).map(|_| dist.sample(&mut rng)).collect();
                params.insert(
                    format!("gate.{}.w", layer_id(g, d)),
                    Tensor::new(vec![2, width], w).expect("shape"),
                );
                params.insert(
                    format!("gate.{}.b", layer_id(g, d)),
                    Tensor::new(vec![2], vec![exec_bias, 0.0]).expect("shape"),
                );
            }
        }
        GatePolicy { params, baseline: None, baseline_decay: 0.9 }
    }

    /// No gates at all; only usable with [`GateMode::AllOn`].
    pub fn empty() -> Self {
        GatePolicy { params: ParamSet::new(), baseline: None, baseline_decay: 0.9 }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_compatible(&params)?;
        self.params = params;
        Ok(())
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn set_baseline(&mut self, b: Option<f64>) {
        self.baseline = b;
    }

    /// `[p_execute, p_skip]` for each row of `pooled` at layer `(group, slot)`.
    pub fn probabilities(&self, group: usize, slot: usize, pooled: &Tensor) -> Result<Vec<[f64; 2]>> {
        let id = layer_id(group, slot);
        let w = self.params.require(&format!("gate.{}.w", id))?;
        let b = self.params.require(&format!("gate.{}.b", id))?;
        let width = w.shape()[1];
        if pooled.rank() != 2 || pooled.shape()[1] != width {
            return Err(CflError::Structural(format!(
                "gate {} expects [N, {}] input, got {:?}",
                id,
                width,
                pooled.shape()
            )));
        }
        Ok(pooled
            .data()
            .chunks(width)
            .map(|row| {
                let l0 = b.data()[0] + row.iter().zip(&w.data()[..width]).map(|(a, c)| a * c).sum::<f64>();
                let l1 = b.data()[1] + row.iter().zip(&w.data()[width..]).map(|(a, c)| a * c).sum::<f64>();
                let pe = sigmoid(l0 - l1);
                [pe, 1.0 - pe]
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GatePhase {
    /// Soft, probability-weighted execution trained on the task loss.
    Warmup,
    /// Sampled hard decisions trained with the score-function estimator.
    Reinforce,
}

#[derive(Debug, Clone, Copy)]
pub struct GateUpdate {
    pub phase: GatePhase,
    /// Weight of the skipped-layer fraction in the reward.
    pub alpha: f64,
    pub lr: f64,
    /// Seed of the sampled decisions in the reinforce phase.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub loss: f64,
    pub accuracy: f64,
    pub mean_reward: f64,
    pub computation: f64,
}

/// Output of one hybrid step, including model gradients of the same batch so
/// callers can train the parent alongside the gates.
#[derive(Debug, Clone)]
pub struct HybridStep {
    pub gates: GatePolicy,
    pub model_grads: ParamSet,
    pub stats: GateStats,
}

/// One hybrid gate-training step on `batch`.
///
/// Warm-up descends the task loss through soft gating. Reinforce samples hard
/// decisions and ascends `E[(R - b) * grad log pi]` with
/// `R = 1[correct] + alpha * skipped / skippable` and an exponential moving
/// average baseline `b` (initialised to the first batch's mean reward).
pub fn hybrid_step(
    net: &Supernet,
    model: &ParamSet,
    arch: &ArchDescriptor,
    gates: &GatePolicy,
    batch: &Batch,
    update: GateUpdate,
) -> Result<HybridStep> {
    if update.alpha < 0.0 || !update.alpha.is_finite() {
        return Err(CflError::Config(format!("gate reward alpha must be >= 0, got {}", update.alpha)));
    }
    let mode = match update.phase {
        GatePhase::Warmup => GateMode::Soft,
        GatePhase::Reinforce => GateMode::Sample(update.seed),
    };
    let lg = net.loss_grads(model, arch, gates, batch, mode)?;
    let n = batch.len();
    let accuracy = lg.correct.iter().filter(|&&c| c).count() as f64 / n as f64;
    let skipped = skipped_fractions(&lg.records, n);
    let computation = mean_computation(net.config(), arch, &lg.records, n);
    let rewards: Vec<f64> = lg
        .correct
        .iter()
        .zip(&skipped)
        .map(|(&c, &s)| if c { 1.0 } else { 0.0 } + update.alpha * s)
        .collect();
    let mean_reward = rewards.iter().sum::<f64>() / n as f64;

    let mut next = gates.clone();
    match update.phase {
        GatePhase::Warmup => {
            next.params = sgd_step(&gates.params, &lg.gates, update.lr)?;
        }
        GatePhase::Reinforce => {
            let baseline = gates.baseline.unwrap_or(mean_reward);
            let advantages: Vec<f64> = rewards.iter().map(|r| r - baseline).collect();
            let ascent = score_function_gradient(&gates.params, &lg.records, &advantages)?;
            next.params = gates.params.axpy(update.lr, &ascent)?;
            next.baseline =
                Some(gates.baseline_decay * baseline + (1.0 - gates.baseline_decay) * mean_reward);
        }
    }
    Ok(HybridStep {
        gates: next,
        model_grads: lg.model,
        stats: GateStats { loss: lg.loss, accuracy, mean_reward, computation },
    })
}

/// Gate-only form of [`hybrid_step`].
pub fn hybrid_gate_update(
    net: &Supernet,
    model: &ParamSet,
    arch: &ArchDescriptor,
    gates: &GatePolicy,
    batch: &Batch,
    update: GateUpdate,
) -> Result<(GatePolicy, GateStats)> {
    hybrid_step(net, model, arch, gates, batch, update).map(|s| (s.gates, s.stats))
}

fn skipped_fractions(records: &[GateRecord], n: usize) -> Vec<f64> {
    if records.is_empty() {
        return vec![0.0; n];
    }
    (0..n)
        .map(|s| records.iter().filter(|r| !r.executed[s]).count() as f64 / records.len() as f64)
        .collect()
}

fn mean_computation(cfg: &SupernetConfig, arch: &ArchDescriptor, records: &[GateRecord], n: usize) -> f64 {
    let mandatory = 1 + cfg.num_groups;
    let total = mandatory + arch.active_layers() - cfg.num_groups;
    let executed: usize = records.iter().map(|r| r.executed.iter().filter(|&&e| e).count()).sum();
    let skippable_total = (total - mandatory) * n;
    let executed = if records.is_empty() { skippable_total } else { executed };
    (mandatory * n + executed) as f64 / (total * n) as f64
}

/// Mean over samples of `advantage * d log pi(action) / d theta` for every gate.
fn score_function_gradient(params: &ParamSet, records: &[GateRecord], advantages: &[f64]) -> Result<ParamSet> {
    let mut grad = params.zeros_like();
    let n = advantages.len() as f64;
    for r in records {
        let id = layer_id(r.group, r.slot);
        let width = r.pooled.shape()[1];
        let mut gw = vec![0.0; 2 * width];
        let mut gb = [0.0; 2];
        for (s, row) in r.pooled.data().chunks(width).enumerate() {
            // d log pi(a) / d l_exec = 1[a = exec] - p_exec; the skip logit gets the negation.
            let score = if r.executed[s] { 1.0 } else { 0.0 } - r.p_exec[s];
            let coef = advantages[s] * score / n;
            for (j, &v) in row.iter().enumerate() {
                gw[j] += coef * v;
                gw[width + j] -= coef * v;
            }
            gb[0] += coef;
            gb[1] -= coef;
        }
        let wt = grad.get_mut(&format!("gate.{}.w", id)).ok_or_else(|| {
            CflError::Structural(format!("no gate parameters for layer {}", id))
        })?;
        for (a, b) in wt.data_mut().iter_mut().zip(gw) {
            *a += b;
        }
        let bt = grad.get_mut(&format!("gate.{}.b", id)).expect("bias present with weight");
        for (a, b) in bt.data_mut().iter_mut().zip(gb) {
            *a += b;
        }
    }
    Ok(grad)
}
