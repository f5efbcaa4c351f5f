use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use crate::bench::{synthetic_digits, SynthOptions};
use crate::error::CflError;
use crate::nn::ParamSet;
use crate::supernet::{train_local, ArchDescriptor, LocalTraining};

fn small_config(mode: Mode) -> RunConfig {
    RunConfig {
        rounds: 2,
        workers: 5,
        mode,
        train_samples: 6000,
        test_samples: 200,
        public_fraction: 0.05,
        search_iterations: 4,
        pretrain_epochs: 2,
        warmup_epochs: 1,
        ..RunConfig::default()
    }
}

fn small_data(cfg: &RunConfig) -> FederatedData {
    let train = synthetic_digits(cfg.train_samples, cfg.seed, &SynthOptions::default()).unwrap();
    let test = synthetic_digits(cfg.test_samples, cfg.seed ^ 0xFFFF, &SynthOptions::default()).unwrap();
    build_federated_data(&train, &test, &DataOptions::from_config(cfg), cfg.seed).unwrap()
}

#[test]
fn config_text_round_trips() {
    let mut cfg = RunConfig { mode: Mode::UniformFl, lr: 0.125, gated: false, ..RunConfig::default() };
    cfg.set("aggregation", "coverage").unwrap();
    let back = RunConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    let parsed = RunConfig::from_text("# comment\nrounds = 7\n\nworkers=3 # trailing\n").unwrap();
    assert_eq!((parsed.rounds, parsed.workers), (7, 3));
}

#[test]
fn config_rejects_bad_values() {
    for text in ["rounds=0", "workers=0", "local_epochs=0", "lr=0", "lr=-1", "mode=fedprox", "nope=1", "rounds"] {
        assert!(matches!(RunConfig::from_text(text), Err(CflError::Config(_))), "{}", text);
    }
}

#[test]
fn invalid_config_fails_before_compute() {
    let cfg = small_config(Mode::Cfl);
    let data = small_data(&cfg);
    let bad = RunConfig { lr: 0.0, ..cfg };
    assert!(matches!(run_experiment(&bad, &data), Err(CflError::Config(_))));
    let wrong_k = RunConfig { workers: 3, ..small_config(Mode::Cfl) };
    assert!(matches!(Simulation::new(&wrong_k, &data), Err(CflError::Config(_))));
}

#[test]
fn fairness_examples() {
    let f = fairness_metrics(&[0.5, 0.9]).unwrap();
    assert!((f.mean - 0.7).abs() < 1e-12);
    assert!((f.gap - 0.4).abs() < 1e-12);
    assert!((f.variance - 0.04).abs() < 1e-12);
    assert_eq!(fairness_metrics(&[3.0]).unwrap(), Fairness { variance: 0.0, gap: 0.0, mean: 3.0 });
    assert!(fairness_metrics(&[]).is_err());
    assert!(fairness_metrics(&[1.0, f64::NAN]).is_err());
}

proptest! {
    #[test]
    fn fairness_matches_two_pass_statistics(values in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let f = fairness_metrics(&values).unwrap();
        // E[x^2] - E[x]^2 as an independent route to the population variance
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| v * v).sum::<f64>() / n - mean * mean;
        prop_assert!((f.mean - mean).abs() < 1e-9);
        prop_assert!((f.variance - var).abs() < 1e-6 * (1.0 + var.abs()));
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        prop_assert_eq!(f.gap, sorted[sorted.len() - 1] - sorted[0]);
    }
}

#[test]
fn data_shards_are_disjoint_and_tagged() {
    let cfg = small_config(Mode::Cfl);
    let data = small_data(&cfg);
    assert_eq!(data.workers.len(), 5);
    for (k, w) in data.workers.iter().enumerate() {
        assert_eq!(w.quality, k % 5);
        assert_eq!(w.dominant, k % 10);
        assert!(w.train.quality().iter().chain(w.holdout.quality()).all(|&q| q == w.quality));
        let total = (w.train.len() + w.holdout.len()) as f64;
        assert!((w.holdout.len() as f64 / total - 0.1).abs() < 0.02);
    }
    assert!(data.public.quality().iter().all(|&q| q == 4));
    assert!(data.public.class_counts().windows(2).all(|c| c[0] == c[1]));
    assert_eq!(data.test.len(), 5);
    for (q, t) in data.test.iter().enumerate() {
        assert_eq!(t.len(), 200);
        assert!(t.quality().iter().all(|&x| x == q));
    }
    let placed: usize = data.workers.iter().map(|w| w.train.len() + w.holdout.len()).sum();
    assert_eq!(placed + data.public.len() + data.unassigned, 6000);

    // raw pixels of the quality-1 worker are untouched originals, so they can be traced back
    let raw = synthetic_digits(6000, cfg.seed, &SynthOptions::default()).unwrap();
    let mut seen = HashSet::new();
    let w = &data.workers[1];
    for i in 0..w.train.len() {
        let pos = (0..raw.len()).find(|&j| raw.pixels_of(j) == w.train.pixels_of(i)).expect("sample from the raw set");
        assert!(seen.insert(pos));
    }
}

#[test]
fn data_cache_round_trips() {
    let cfg = small_config(Mode::Cfl);
    let data = small_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    data.save(dir.path()).unwrap();
    let back = FederatedData::load(dir.path()).unwrap();
    assert_eq!(back, data);
}

/// Plain FedAvg: each worker trains a copy of the global model, the server
/// replaces it with the data-size weighted mean of the returned models.
fn fedavg_round(sim: &Simulation, data: &FederatedData, cfg: &RunConfig, local: &LocalTraining) -> ParamSet {
    let arch = ArchDescriptor::full(sim.net().config());
    let n: f64 = data.workers.iter().map(|w| w.train.len() as f64).sum();
    let mut avg = sim.parent().zeros_like();
    for (k, w) in data.workers.iter().enumerate() {
        let seed = derive_seed(cfg.seed, 10, 0, k as u64);
        let out =
            train_local(sim.net(), sim.parent(), &arch, sim.gates(), &w.train.to_batch().unwrap(), local, seed).unwrap();
        avg = avg.axpy(w.train.len() as f64 / n, &out.model).unwrap();
    }
    avg
}

fn max_abs_diff(a: &ParamSet, b: &ParamSet) -> f64 {
    a.iter()
        .flat_map(|(id, t)| t.data().iter().zip(b.get(id).unwrap().data()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn full_arch_round_equals_fedavg() {
    for (mode, gated) in [(Mode::UniformFl, false), (Mode::Cfl, false), (Mode::Cfl, true)] {
        let cfg = RunConfig { speed_spread: 1.0, gated, ..small_config(mode) };
        let data = small_data(&cfg);
        let mut sim = Simulation::new(&cfg, &data).unwrap();
        let local = LocalTraining { epochs: cfg.local_epochs, lr: cfg.lr, batch_size: cfg.batch_size, gated };
        let expected = fedavg_round(&sim, &data, &cfg, &local);
        let full = ArchDescriptor::full(sim.net().config());
        sim.run_round_with(&vec![Some(full); 5], &[None; 5], Vec::new()).unwrap();
        let diff = max_abs_diff(sim.parent(), &expected);
        assert!(diff < 1e-12, "{:?} gated={} diff {}", mode, gated, diff);
    }
}

#[test]
fn uniform_mode_runs_fedavg() {
    let cfg = RunConfig { speed_spread: 1.0, ..small_config(Mode::UniformFl) };
    let data = small_data(&cfg);
    let mut sim = Simulation::new(&cfg, &data).unwrap();
    let local = LocalTraining { epochs: cfg.local_epochs, lr: cfg.lr, batch_size: cfg.batch_size, gated: false };
    let expected = fedavg_round(&sim, &data, &cfg, &local);
    let rec = sim.run_round().unwrap();
    assert!(max_abs_diff(sim.parent(), &expected) < 1e-12);
    assert!(rec.aggregated);
    assert_eq!(sim.aggregate_calls(), 1);
}

#[test]
fn round_waits_for_slowest_worker() {
    let cfg = small_config(Mode::Cfl);
    let data = small_data(&cfg);
    let mut sim = Simulation::new(&cfg, &data).unwrap();
    let rec = sim.run_round().unwrap();
    let mut slowest: f64 = 0.0;
    for w in &rec.workers {
        assert!(!w.excluded);
        let batches = cfg.local_epochs * w.n_k.div_ceil(cfg.batch_size);
        assert_eq!(w.batches, batches);
        let expected = batches as f64 * w.latency_ms.unwrap() * 3.0;
        assert!((w.time_ms - expected).abs() < 1e-9);
        assert!(w.latency_ms.unwrap() <= sim.fleet()[w.worker].latency_bound_ms + 1e-12);
        slowest = slowest.max(w.time_ms);
    }
    assert_eq!(rec.round_time_ms, slowest);
}

#[test]
fn impossible_bounds_exclude_workers() {
    let cfg = RunConfig { bound_factor: 0.01, ..small_config(Mode::Cfl) };
    let data = small_data(&cfg);
    let mut sim = Simulation::new(&cfg, &data).unwrap();
    let before = sim.parent().clone();
    let rec = sim.run_round().unwrap();
    assert!(rec.workers.iter().all(|w| w.excluded && w.arch.is_none()));
    assert_eq!(rec.events.iter().filter(|e| e.starts_with("straggler")).count(), 5);
    assert!(!rec.aggregated);
    assert_eq!(sim.aggregate_calls(), 0);
    assert_eq!(sim.parent(), &before);
    assert_eq!(rec.round_time_ms, 0.0);
}

#[test]
fn independent_mode_never_aggregates() {
    let cfg = small_config(Mode::Independent);
    let data = small_data(&cfg);
    let out = run_experiment(&cfg, &data).unwrap();
    assert_eq!(out.summary.aggregate_calls, 0);
    assert!(out.records.iter().all(|r| !r.aggregated));
    let mut sim = Simulation::new(&cfg, &data).unwrap();
    let before = sim.parent().clone();
    sim.run_round().unwrap();
    assert_eq!(sim.parent(), &before);
}

#[test]
fn runs_are_reproducible() {
    let cfg = small_config(Mode::Cfl);
    let data = small_data(&cfg);
    let a = run_experiment(&cfg, &data).unwrap();
    let b = run_experiment(&cfg, &data).unwrap();
    assert_eq!(a.rounds_jsonl().unwrap(), b.rounds_jsonl().unwrap());
    let other = run_experiment(&RunConfig { seed: 1, ..cfg.clone() }, &data).unwrap();
    assert_ne!(a.rounds_jsonl().unwrap(), other.rounds_jsonl().unwrap());

    let dir = tempfile::tempdir().unwrap();
    a.write(dir.path()).unwrap();
    assert_eq!(RunOutput::read(dir.path()).unwrap(), a);
    let line = std::fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
    assert!(line.starts_with("{\"round\":0,\"mode\":\"cfl\""));
}

#[test]
fn predictor_freezes_once_converged() {
    let cfg = RunConfig { predictor_threshold: 10.0, rounds: 9, ..small_config(Mode::Cfl) };
    let data = small_data(&cfg);
    let out = run_experiment(&cfg, &data).unwrap();
    // five profiles per round hold out one each, so the eighth round brings the eighth validation profile
    assert_eq!(out.summary.predictor_frozen_round, Some(7));
    assert!(out.records[7].events.iter().any(|e| e.contains("frozen")));
    assert!(out.records[..7].iter().all(|r| r.predictor_train_mse.is_some() && !r.predictor_frozen));
    assert!(out.records[8].predictor_train_mse.is_none() && out.records[8].predictor_frozen);
}

#[test]
fn summary_uses_last_round_and_mean_times() {
    let cfg = small_config(Mode::UniformFl);
    let data = small_data(&cfg);
    let out = run_experiment(&cfg, &data).unwrap();
    let last: Vec<f64> = out.records[1].workers.iter().map(|w| w.test_accuracy.unwrap()).collect();
    assert_eq!(out.summary.accuracy_fairness, fairness_metrics(&last).unwrap());
    let times: Vec<f64> = (0..5)
        .map(|k| out.records.iter().map(|r| r.workers[k].time_ms).sum::<f64>() / 2.0)
        .collect();
    assert_eq!(out.summary.time_fairness, fairness_metrics(&times).unwrap());
    assert_eq!(out.summary.aggregate_calls, 2);
    assert_eq!(out.summary.rounds, 2);
}

#[test]
fn derived_seeds_differ_per_slot() {
    let mut seen = HashSet::new();
    for tag in 0..4 {
        for a in 0..20 {
            for b in 0..20 {
                assert!(seen.insert(derive_seed(7, tag, a, b)));
            }
        }
    }
    assert_eq!(derive_seed(7, 1, 2, 3), derive_seed(7, 1, 2, 3));
}
