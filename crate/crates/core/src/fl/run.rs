use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{aggregate, apply_global_update, AlignedDelta};
use crate::bench::{make_device_fleet, FleetOptions};
use crate::error::{CflError, Result};
use crate::nn::ParamSet;
use crate::search::{
    build_latency_table, encode_arch, lookup_latency, select_submodels, AccuracyPredictor, DeviceProfile,
    LatencyTable, PredictorOptions, SearchOptions, TrainingProfile,
};
use crate::supernet::{
    evaluate, pretrain, train_local, ArchDescriptor, Batch, GateMode, GatePolicy, LocalTraining, Pretraining, Supernet,
    SupernetConfig,
};
use crate::QUALITY_LEVELS;

use super::config::{Mode, RunConfig};
use super::data::FederatedData;
use super::derive_seed;
use super::metrics::{fairness_metrics, Fairness};

const INITIAL_EXEC_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker: usize,
    pub quality: usize,
    pub device: String,
    /// `None` when the worker was excluded this round.
    pub arch: Option<String>,
    pub predicted: Option<f64>,
    pub latency_ms: Option<f64>,
    /// Simulated wall-clock time of local training.
    pub time_ms: f64,
    pub batches: usize,
    pub n_k: usize,
    /// Accuracy on the worker's local held-out share after training.
    pub local_accuracy: Option<f64>,
    /// Accuracy of the model the worker ends the round with, on the test
    /// set at the worker's quality level.
    pub test_accuracy: Option<f64>,
    pub computation: Option<f64>,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: Mode,
    pub workers: Vec<WorkerRecord>,
    /// Slowest participating worker; the round waits for all of them.
    pub round_time_ms: f64,
    /// Test accuracy per quality level.
    pub global_accuracy: Vec<f64>,
    pub global_computation: f64,
    pub aggregated: bool,
    pub predictor_train_mse: Option<f64>,
    pub predictor_val_mse: Option<f64>,
    pub predictor_frozen: bool,
    pub events: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub rounds: usize,
    pub workers: usize,
    /// Mean over workers of their last-round test accuracy.
    pub final_mean_accuracy: f64,
    pub final_accuracy_by_quality: Vec<f64>,
    pub accuracy_fairness: Fairness,
    /// Computed over each worker's mean simulated time per round.
    pub time_fairness: Fairness,
    pub mean_round_time_ms: f64,
    pub total_time_ms: f64,
    pub mean_computation: f64,
    pub aggregate_calls: usize,
    pub predictor_frozen_round: Option<usize>,
    pub excluded_worker_rounds: usize,
}

/// Per-worker result of the local step, before the server acts on it.
struct LocalResult {
    arch: ArchDescriptor,
    model: ParamSet,
    delta: ParamSet,
    batches: usize,
    latency_ms: f64,
    local_accuracy: f64,
}

/// Server state across rounds.
pub struct Simulation {
    cfg: RunConfig,
    net: Supernet,
    parent: ParamSet,
    gates: GatePolicy,
    /// Per-worker models, only used in independent mode.
    locals: Vec<ParamSet>,
    fleet: Vec<DeviceProfile>,
    table: LatencyTable,
    predictor: AccuracyPredictor,
    frozen_at: Option<usize>,
    aggregate_calls: usize,
    quality: Vec<usize>,
    train: Vec<Batch>,
    holdout: Vec<Batch>,
    test: Vec<Batch>,
    round: usize,
}

/// Parent config from the run config, adapted to the data's sample shape.
pub fn network_config(cfg: &RunConfig, data: &FederatedData) -> Result<SupernetConfig> {
    let mut net = cfg.supernet()?;
    net.input_shape = data.public.shape();
    net.num_classes = data.public.num_classes();
    net.validate()?;
    Ok(net)
}

/// Simulated fleet for `cfg` and the latency table covering it.
pub fn build_fleet(cfg: &RunConfig, net: &SupernetConfig) -> Result<(Vec<DeviceProfile>, LatencyTable)> {
    let opts = FleetOptions {
        base_flops_per_ms: cfg.base_flops_per_ms,
        speed_spread: cfg.speed_spread,
        bound_factor: cfg.bound_factor,
        ..FleetOptions::default()
    };
    let fleet = make_device_fleet(net, cfg.workers, &opts, derive_seed(cfg.seed, 24, 0, 0))?;
    let table = build_latency_table(net, &fleet)?;
    Ok((fleet, table))
}

impl Simulation {
    /// Validates the config, builds the fleet and pre-trains the parent and
    /// its gates on the public split.
    pub fn new(cfg: &RunConfig, data: &FederatedData) -> Result<Self> {
        cfg.validate()?;
        let (fleet, table) = build_fleet(cfg, &network_config(cfg, data)?)?;
        Self::with_fleet(cfg, data, fleet, table)
    }

    /// Like [`Simulation::new`] with a given fleet and latency table.
    pub fn with_fleet(cfg: &RunConfig, data: &FederatedData, fleet: Vec<DeviceProfile>, table: LatencyTable) -> Result<Self> {
        cfg.validate()?;
        let net = Supernet::new(network_config(cfg, data)?)?;
        let init = net.init_params(derive_seed(cfg.seed, 20, 0, 0));
        let gates = GatePolicy::new(net.config(), derive_seed(cfg.seed, 21, 0, 0), INITIAL_EXEC_BIAS);
        let (parent, gates) = if cfg.pretrain_epochs > 0 {
            let opts = Pretraining {
                epochs: cfg.pretrain_epochs,
                warmup_epochs: cfg.warmup_epochs,
                lr: cfg.lr,
                gate_lr: cfg.gate_lr,
                batch_size: cfg.batch_size,
                alpha: cfg.alpha,
            };
            let (p, g, _) = pretrain(&net, &init, &gates, &data.public.to_batch()?, &opts, derive_seed(cfg.seed, 22, 0, 0))?;
            (p, g)
        } else {
            (init, gates)
        };
        Self::assemble(cfg, data, parent, gates, fleet, table)
    }

    /// Starts from a given parent and gate policy, skipping pre-training.
    pub fn with_parent(cfg: &RunConfig, data: &FederatedData, parent: ParamSet, gates: GatePolicy) -> Result<Self> {
        cfg.validate()?;
        let (fleet, table) = build_fleet(cfg, &network_config(cfg, data)?)?;
        Self::assemble(cfg, data, parent, gates, fleet, table)
    }

    fn assemble(
        cfg: &RunConfig,
        data: &FederatedData,
        parent: ParamSet,
        gates: GatePolicy,
        fleet: Vec<DeviceProfile>,
        table: LatencyTable,
    ) -> Result<Self> {
        if data.workers.len() != cfg.workers || fleet.len() != cfg.workers {
            return Err(CflError::Config(format!(
                "config asks for {} workers but the data has {} and the fleet {}",
                cfg.workers,
                data.workers.len(),
                fleet.len()
            )));
        }
        let net = Supernet::new(network_config(cfg, data)?)?;
        let full = ArchDescriptor::full(net.config());
        net.check_model(&parent, &full)?;
        for p in &fleet {
            p.validate()?;
            lookup_latency(&table, net.config(), &full, p)?;
        }
        let popts = PredictorOptions { lr: cfg.predictor_lr, threshold: cfg.predictor_threshold, ..Default::default() };
        let predictor = AccuracyPredictor::new(net.config().encoding_len(), derive_seed(cfg.seed, 23, 0, 0), popts)?;
        let train = data.workers.iter().map(|w| w.train.to_batch()).collect::<Result<Vec<_>>>()?;
        let holdout = data.workers.iter().map(|w| w.holdout.to_batch()).collect::<Result<Vec<_>>>()?;
        let test = data.test.iter().map(|t| t.to_batch()).collect::<Result<Vec<_>>>()?;
        let locals = if cfg.mode == Mode::Independent { vec![parent.clone(); cfg.workers] } else { Vec::new() };
        Ok(Simulation {
            cfg: cfg.clone(),
            net,
            parent,
            gates,
            locals,
            fleet,
            table,
            predictor,
            frozen_at: None,
            aggregate_calls: 0,
            quality: data.workers.iter().map(|w| w.quality).collect(),
            train,
            holdout,
            test,
            round: 0,
        })
    }

    pub fn parent(&self) -> &ParamSet {
        &self.parent
    }

    pub fn net(&self) -> &Supernet {
        &self.net
    }

    pub fn gates(&self) -> &GatePolicy {
        &self.gates
    }

    pub fn fleet(&self) -> &[DeviceProfile] {
        &self.fleet
    }

    pub fn aggregate_calls(&self) -> usize {
        self.aggregate_calls
    }

    pub fn predictor_frozen_round(&self) -> Option<usize> {
        self.frozen_at
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    fn gated(&self) -> bool {
        self.cfg.mode == Mode::Cfl && self.cfg.gated
    }

    fn eval_mode(&self) -> GateMode {
        if self.gated() {
            GateMode::Greedy
        } else {
            GateMode::AllOn
        }
    }

    /// Submodel per worker for this round; `None` marks an excluded worker.
    fn select(&self, events: &mut Vec<String>) -> Result<Vec<Option<(ArchDescriptor, f64)>>> {
        let full = ArchDescriptor::full(self.net.config());
        if self.cfg.mode != Mode::Cfl {
            return Ok(vec![Some((full, f64::NAN)); self.cfg.workers]);
        }
        let workers: Vec<(DeviceProfile, usize)> =
            self.fleet.iter().cloned().zip(self.quality.iter().copied()).collect();
        let opts = SearchOptions {
            strategy: self.cfg.search_strategy,
            iterations: self.cfg.search_iterations,
            channel_policy: self.cfg.channel_policy,
            ..SearchOptions::default()
        };
        let seed = derive_seed(self.cfg.seed, 11, self.round as u64, 0);
        let picks = select_submodels(&self.predictor, &self.table, self.net.config(), &workers, &opts, seed)?;
        picks
            .into_iter()
            .enumerate()
            .map(|(k, pick)| match pick {
                Ok(sel) => Ok(Some((sel.arch, sel.predicted))),
                Err(CflError::Infeasible { bound_ms, tightest_ms }) => {
                    events.push(format!(
                        "straggler: worker {} excluded, bound {:.6} ms below tightest {:.6} ms",
                        k, bound_ms, tightest_ms
                    ));
                    Ok(None)
                }
                Err(e) => Err(e),
            })
            .collect()
    }

    /// One round: select, local training, align and aggregate, global
    /// update, predictor update.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let mut events = Vec::new();
        let picks = self.select(&mut events)?;
        let archs: Vec<Option<ArchDescriptor>> = picks.iter().map(|p| p.as_ref().map(|(a, _)| a.clone())).collect();
        let predicted: Vec<Option<f64>> = picks.iter().map(|p| p.as_ref().map(|(_, v)| *v)).collect();
        self.run_round_with(&archs, &predicted, events)
    }

    /// The round after selection, with the submodel of every worker given.
    pub fn run_round_with(
        &mut self,
        archs: &[Option<ArchDescriptor>],
        predicted: &[Option<f64>],
        mut events: Vec<String>,
    ) -> Result<RoundRecord> {
        if archs.len() != self.cfg.workers || predicted.len() != self.cfg.workers {
            return Err(CflError::Argument(format!("expected {} submodel slots", self.cfg.workers)));
        }
        let t = self.round;
        let results = self.local_step(archs, t)?;

        let mut aggregated = false;
        match self.cfg.mode {
            Mode::Independent => {
                for (k, r) in results.iter().enumerate() {
                    if let Some(r) = r {
                        self.locals[k] = r.model.clone();
                    }
                }
            }
            Mode::Cfl | Mode::UniformFl => {
                let aligned = results
                    .iter()
                    .enumerate()
                    .filter_map(|(k, r)| r.as_ref().map(|r| (k, r)))
                    .map(|(k, r)| AlignedDelta::align(&self.net, &r.delta, &r.arch, self.train[k].len(), k))
                    .collect::<Result<Vec<_>>>()?;
                if aligned.is_empty() {
                    events.push("no worker participated; parent unchanged".into());
                } else {
                    let delta = aggregate(&self.net, &aligned, self.cfg.aggregation)?;
                    self.aggregate_calls += 1;
                    self.parent = apply_global_update(&self.parent, &delta)?;
                    aggregated = true;
                }
            }
        }

        let (mut train_mse, mut val_mse) = (None, None);
        if self.cfg.mode == Mode::Cfl && self.frozen_at.is_none() {
            let cfg = self.net.config();
            let profiles = results
                .iter()
                .enumerate()
                .filter_map(|(k, r)| r.as_ref().map(|r| (k, r)))
                .map(|(k, r)| {
                    let q = self.quality[k];
                    TrainingProfile::new(t, q, encode_arch(cfg, &r.arch, q)?, r.local_accuracy)
                })
                .collect::<Result<Vec<_>>>()?;
            if !profiles.is_empty() {
                let fit = self.predictor.train_round(&profiles)?;
                train_mse = Some(fit.train_mse);
                val_mse = fit.val_mse;
                if fit.converged {
                    self.frozen_at = Some(t);
                    events.push(format!("predictor converged at round {}; frozen", t));
                }
            }
        }

        let workers = self.worker_records(&results, predicted)?;
        let (global_accuracy, global_computation) = self.global_accuracy(&workers)?;
        let round_time_ms = workers.iter().filter(|w| !w.excluded).map(|w| w.time_ms).fold(0.0, f64::max);
        self.round += 1;
        Ok(RoundRecord {
            round: t,
            mode: self.cfg.mode,
            workers,
            round_time_ms,
            global_accuracy,
            global_computation,
            aggregated,
            predictor_train_mse: train_mse,
            predictor_val_mse: val_mse,
            predictor_frozen: self.frozen_at.is_some(),
            events,
        })
    }

    fn local_step(&self, archs: &[Option<ArchDescriptor>], t: usize) -> Result<Vec<Option<LocalResult>>> {
        let local = LocalTraining {
            epochs: self.cfg.local_epochs,
            lr: self.cfg.lr,
            batch_size: self.cfg.batch_size,
            gated: self.gated(),
        };
        let mode = self.eval_mode();
        archs
            .par_iter()
            .enumerate()
            .map(|(k, arch)| {
                let Some(arch) = arch else { return Ok(None) };
                arch.validate(self.net.config())?;
                let start = match self.cfg.mode {
                    Mode::Independent => self.net.extract_submodel(&self.locals[k], arch)?,
                    _ => self.net.extract_submodel(&self.parent, arch)?,
                };
                let seed = derive_seed(self.cfg.seed, 10, t as u64, k as u64);
                let out = train_local(&self.net, &start, arch, &self.gates, &self.train[k], &local, seed)?;
                let delta = out.model.sub(&start)?;
                let local_accuracy = evaluate(&self.net, &out.model, arch, &self.gates, &self.holdout[k], mode)?.accuracy;
                let latency_ms = lookup_latency(&self.table, self.net.config(), arch, &self.fleet[k])?;
                Ok(Some(LocalResult { arch: arch.clone(), model: out.model, delta, batches: out.batches, latency_ms, local_accuracy }))
            })
            .collect()
    }

    /// The model worker `k` holds after the round.
    fn worker_model(&self, k: usize, arch: &ArchDescriptor) -> Result<ParamSet> {
        match self.cfg.mode {
            Mode::Independent => self.net.extract_submodel(&self.locals[k], arch),
            _ => self.net.extract_submodel(&self.parent, arch),
        }
    }

    fn worker_records(&self, results: &[Option<LocalResult>], predicted: &[Option<f64>]) -> Result<Vec<WorkerRecord>> {
        let mode = self.eval_mode();
        results
            .par_iter()
            .enumerate()
            .map(|(k, r)| {
                let q = self.quality[k];
                let mut rec = WorkerRecord {
                    worker: k,
                    quality: q,
                    device: self.fleet[k].device_model.clone(),
                    arch: None,
                    predicted: None,
                    latency_ms: None,
                    time_ms: 0.0,
                    batches: 0,
                    n_k: self.train[k].len(),
                    local_accuracy: None,
                    test_accuracy: None,
                    computation: None,
                    excluded: true,
                };
                if let Some(r) = r {
                    let model = self.worker_model(k, &r.arch)?;
                    let eval = evaluate(&self.net, &model, &r.arch, &self.gates, &self.test[q], mode)?;
                    rec.arch = Some(r.arch.to_line());
                    rec.predicted = predicted[k].filter(|p| p.is_finite());
                    rec.latency_ms = Some(r.latency_ms);
                    rec.time_ms = r.batches as f64 * r.latency_ms * self.cfg.cost_multiplier;
                    rec.batches = r.batches;
                    rec.local_accuracy = Some(r.local_accuracy);
                    rec.test_accuracy = Some(eval.accuracy);
                    rec.computation = Some(eval.computation);
                    rec.excluded = false;
                }
                Ok(rec)
            })
            .collect()
    }

    /// Accuracy per quality level of the shared parent. In independent mode
    /// there is no shared model: a level reports the mean test accuracy of
    /// the workers that hold data at that level, or of every worker's model
    /// when no worker does.
    fn global_accuracy(&self, workers: &[WorkerRecord]) -> Result<(Vec<f64>, f64)> {
        let full = ArchDescriptor::full(self.net.config());
        let mode = self.eval_mode();
        let evals = (0..QUALITY_LEVELS)
            .into_par_iter()
            .map(|q| {
                if self.cfg.mode != Mode::Independent {
                    let e = evaluate(&self.net, &self.parent, &full, &self.gates, &self.test[q], mode)?;
                    return Ok((e.accuracy, e.computation));
                }
                let at_level: Vec<&WorkerRecord> =
                    workers.iter().filter(|w| w.quality == q && w.test_accuracy.is_some()).collect();
                if !at_level.is_empty() {
                    let n = at_level.len() as f64;
                    let acc = at_level.iter().filter_map(|w| w.test_accuracy).sum::<f64>() / n;
                    let comp = at_level.iter().filter_map(|w| w.computation).sum::<f64>() / n;
                    return Ok((acc, comp));
                }
                let (mut acc, mut comp) = (0.0, 0.0);
                for m in &self.locals {
                    let e = evaluate(&self.net, m, &full, &self.gates, &self.test[q], mode)?;
                    acc += e.accuracy;
                    comp += e.computation;
                }
                let n = self.locals.len() as f64;
                Ok((acc / n, comp / n))
            })
            .collect::<Result<Vec<_>>>()?;
        let comp = evals.iter().map(|e| e.1).sum::<f64>() / evals.len() as f64;
        Ok((evals.into_iter().map(|e| e.0).collect(), comp))
    }
}

/// All round records of a run and its final summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub config: RunConfig,
    pub records: Vec<RoundRecord>,
    pub summary: Summary,
}

impl RunOutput {
    /// One JSON object per round, newline terminated.
    pub fn rounds_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out += &serde_json::to_string(r).map_err(|e| CflError::Parse(e.to_string()))?;
            out.push('\n');
        }
        Ok(out)
    }

    /// Writes `config.txt`, `rounds.jsonl` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.txt"), self.config.to_text())?;
        fs::write(dir.join("rounds.jsonl"), self.rounds_jsonl()?)?;
        let summary = serde_json::to_string_pretty(&self.summary).map_err(|e| CflError::Parse(e.to_string()))?;
        fs::write(dir.join("summary.json"), summary + "\n")?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let config = RunConfig::from_text(&fs::read_to_string(dir.join("config.txt"))?)?;
        let records = fs::read_to_string(dir.join("rounds.jsonl"))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| CflError::Parse(format!("rounds.jsonl: {}", e))))
            .collect::<Result<Vec<RoundRecord>>>()?;
        let summary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)
            .map_err(|e| CflError::Parse(format!("summary.json: {}", e)))?;
        Ok(RunOutput { config, records, summary })
    }
}

/// Summary statistics over a finished run.
pub fn summarize(cfg: &RunConfig, records: &[RoundRecord], aggregate_calls: usize, frozen: Option<usize>) -> Result<Summary> {
    let last = records.last().ok_or_else(|| CflError::Argument("no rounds to summarize".into()))?;
    let final_acc: Vec<f64> = last.workers.iter().filter_map(|w| w.test_accuracy).collect();
    let accuracy_fairness = fairness_metrics(&final_acc)?;

    let mut per_worker_time = vec![(0.0, 0usize); cfg.workers];
    let mut comp = (0.0, 0usize);
    let mut excluded = 0;
    for r in records {
        for w in &r.workers {
            if w.excluded {
                excluded += 1;
                continue;
            }
            per_worker_time[w.worker].0 += w.time_ms;
            per_worker_time[w.worker].1 += 1;
            if let Some(c) = w.computation {
                comp.0 += c;
                comp.1 += 1;
            }
        }
    }
    let times: Vec<f64> = per_worker_time.iter().filter(|t| t.1 > 0).map(|t| t.0 / t.1 as f64).collect();
    let time_fairness = fairness_metrics(&times)?;
    let total_time_ms: f64 = records.iter().map(|r| r.round_time_ms).sum();
    Ok(Summary {
        mode: cfg.mode,
        seed: cfg.seed,
        rounds: records.len(),
        workers: cfg.workers,
        final_mean_accuracy: accuracy_fairness.mean,
        final_accuracy_by_quality: last.global_accuracy.clone(),
        accuracy_fairness,
        time_fairness,
        mean_round_time_ms: total_time_ms / records.len() as f64,
        total_time_ms,
        mean_computation: if comp.1 == 0 { 1.0 } else { comp.0 / comp.1 as f64 },
        aggregate_calls,
        predictor_frozen_round: frozen,
        excluded_worker_rounds: excluded,
    })
}

/// Runs `cfg.rounds` rounds from scratch.
pub fn run_experiment(cfg: &RunConfig, data: &FederatedData) -> Result<RunOutput> {
    finish(cfg, Simulation::new(cfg, data)?)
}

/// Runs `cfg.rounds` rounds on a given fleet and latency table.
pub fn run_experiment_with(
    cfg: &RunConfig,
    data: &FederatedData,
    fleet: Vec<DeviceProfile>,
    table: LatencyTable,
) -> Result<RunOutput> {
    finish(cfg, Simulation::with_fleet(cfg, data, fleet, table)?)
}

fn finish(cfg: &RunConfig, mut sim: Simulation) -> Result<RunOutput> {
    let records = (0..cfg.rounds).map(|_| sim.run_round()).collect::<Result<Vec<_>>>()?;
    let summary = summarize(cfg, &records, sim.aggregate_calls(), sim.predictor_frozen_round())?;
    Ok(RunOutput { config: cfg.clone(), records, summary })
}
