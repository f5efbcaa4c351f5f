use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::CflError;
use crate::supernet::{ArchDescriptor, ChannelPolicy, SupernetConfig, WIDTH_RATIOS};

fn toy() -> SupernetConfig {
    SupernetConfig {
        num_groups: 2,
        max_depth: 2,
        max_widths: vec![4, 8],
        kernel_size: 3,
        input_shape: [1, 8, 8],
        num_classes: 10,
        stem_width: 4,
    }
}

fn device(id: &str, speed: f64, overhead: f64, bound: f64) -> DeviceProfile {
    DeviceProfile {
        device_model: id.into(),
        flops_per_ms: speed,
        per_layer_overhead_ms: overhead,
        latency_bound_ms: bound,
    }
}

/// Every arch of `cfg` with prefix channels at the ratio buckets.
fn enumerate(cfg: &SupernetConfig, ratios: &[usize]) -> Vec<ArchDescriptor> {
    let mut per_group: Vec<Vec<Vec<usize>>> = Vec::new();
    for g in 0..cfg.num_groups {
        let mut options = Vec::new();
        for d in 1..=cfg.max_depth {
            let mut combos: Vec<Vec<usize>> = vec![vec![]];
            for _ in 0..d {
                combos = combos
                    .into_iter()
                    .flat_map(|c| ratios.iter().map(move |&r| [c.clone(), vec![r]].concat()))
                    .collect();
            }
            options.extend(combos.into_iter().map(|c| c.iter().map(|&r| cfg.width_for(g, r)).collect()));
        }
        per_group.push(options);
    }
    let mut archs: Vec<Vec<Vec<usize>>> = vec![vec![]];
    for options in &per_group {
        archs = archs
            .into_iter()
            .flat_map(|a| options.iter().map(move |o| [a.clone(), vec![o.clone()]].concat()))
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    archs
        .into_iter()
        .map(|widths| {
            let depth: Vec<usize> = widths.iter().map(Vec::len).collect();
            ArchDescriptor::from_widths(cfg, &depth, &widths, ChannelPolicy::Prefix, &mut rng).unwrap()
        })
        .collect()
}

fn total_width(arch: &ArchDescriptor) -> usize {
    arch.channels.iter().flatten().map(Vec::len).sum()
}

#[test]
fn encoding_of_full_arch_saturates() {
    let cfg = SupernetConfig::default();
    let enc = encode_arch(&cfg, &ArchDescriptor::full(&cfg), 1).unwrap();
    assert_eq!(enc.len(), 4 * 3 * 2 + 5);
    for g in 0..4 {
        assert_eq!(&enc[g * 3..g * 3 + 3], &[0.0, 0.0, 1.0]);
    }
    assert!(enc[12..24].iter().all(|&v| v == 1.0));
    assert_eq!(&enc[24..], &[0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn encoding_of_shallow_half_group() {
    let cfg = SupernetConfig::default();
    let mut arch = ArchDescriptor::full(&cfg);
    arch.depth[0] = 1;
    arch.channels[0] = vec![(0..8).collect()];
    let enc = encode_arch(&cfg, &arch, 4).unwrap();
    assert_eq!(&enc[0..3], &[1.0, 0.0, 0.0]);
    assert_eq!(&enc[12..15], &[0.5, 0.0, 0.0]);
    assert_eq!(enc[28], 1.0);
    assert!(matches!(encode_arch(&cfg, &arch, 5), Err(CflError::Argument(_))));
}

#[test]
fn encoding_is_injective_on_toy_space() {
    let cfg = SupernetConfig { max_widths: vec![4, 4], ..toy() };
    let archs = enumerate(&cfg, &[1, 3]);
    // per group: 2 shallow + 4 deep choices
    assert_eq!(archs.len(), 36);
    let distinct: HashSet<Vec<u64>> = archs
        .iter()
        .map(|a| encode_arch(&cfg, a, 0).unwrap().iter().map(|v| v.to_bits()).collect())
        .collect();
    assert_eq!(distinct.len(), archs.len());
}

#[test]
fn profile_lines_round_trip() {
    let p = TrainingProfile::new(7, 2, vec![1.0, 0.25, 0.0, 0.1], 0.8125).unwrap();
    let line = p.to_string();
    assert_eq!(line, "t=7 q=2 enc=1,0.25,0,0.1 acc=0.8125");
    assert_eq!(line.parse::<TrainingProfile>().unwrap(), p);
    assert!("t=1 q=9 enc=1 acc=0.5".parse::<TrainingProfile>().is_err());
    assert!("t=1 q=0 enc=1 acc=1.5".parse::<TrainingProfile>().is_err());
    assert!("t=1 q=0 acc=0.5".parse::<TrainingProfile>().is_err());
}

#[test]
fn single_layer_latency_adds_overhead() {
    let cfg = SupernetConfig { num_groups: 1, max_depth: 1, max_widths: vec![4], ..toy() };
    let mut table = LatencyTable::default();
    table.insert("dev", 0, 0, 3, 2.0).unwrap();
    let arch = ArchDescriptor::full(&cfg);
    let ms = lookup_latency(&table, &cfg, &arch, &device("dev", 1.0, 0.5, 10.0)).unwrap();
    assert_eq!(ms, 2.5);
}

#[test]
fn doubling_layers_doubles_pre_overhead_sum() {
    let cfg = SupernetConfig { num_groups: 1, max_depth: 4, max_widths: vec![4], ..toy() };
    let mut table = LatencyTable::default();
    for d in 0..4 {
        table.insert("dev", 0, d, 3, 1.5).unwrap();
    }
    let p = device("dev", 1.0, 0.0, 10.0);
    let arch = |depth: usize| ArchDescriptor { depth: vec![depth], channels: vec![vec![(0..4).collect(); depth]] };
    let two = lookup_latency(&table, &cfg, &arch(2), &p).unwrap();
    let four = lookup_latency(&table, &cfg, &arch(4), &p).unwrap();
    assert_eq!(four, 2.0 * two);
}

#[test]
fn missing_entry_is_coverage_error() {
    let cfg = toy();
    let table = build_latency_table(&cfg, &[device("a", 1e6, 0.0, 1.0)]).unwrap();
    let err = lookup_latency(&table, &cfg, &ArchDescriptor::full(&cfg), &device("b", 1e6, 0.0, 1.0)).unwrap_err();
    match err {
        CflError::Coverage(msg) => assert!(msg.contains("device=b"), "{}", msg),
        e => panic!("unexpected {:?}", e),
    }
    let mut arch = ArchDescriptor::full(&cfg);
    arch.channels[1][0] = (0..5).collect();
    assert!(matches!(
        lookup_latency(&table, &cfg, &arch, &device("a", 1e6, 0.0, 1.0)),
        Err(CflError::Coverage(_))
    ));
}

#[test]
fn table_entry_matches_hand_flops() {
    let cfg = SupernetConfig::default();
    // group 0, residual slot, full width: 3x3 conv 16 -> 16 on 8x8
    let hand = 2.0 * 9.0 * 16.0 * 16.0 * 8.0 * 8.0;
    let table = build_latency_table(&cfg, &[device("d", 1234.5, 0.0, 1.0)]).unwrap();
    assert!((table.entry("d", 0, 1, 3).unwrap() - hand / 1234.5).abs() < 1e-12);
    let unit = build_latency_table(&cfg, &[device("u", hand, 0.0, 1.0)]).unwrap();
    assert_eq!(unit.entry("u", 0, 1, 3).unwrap(), 1.0);
    assert_eq!(table.len(), 4 * 3 * 4);
}

#[test]
fn entries_scale_with_speed() {
    let cfg = SupernetConfig::default();
    let table = build_latency_table(&cfg, &[device("slow", 1e5, 0.0, 1.0), device("fast", 2e5, 0.0, 1.0)]).unwrap();
    for ((dev, g, d, r), ms) in table.iter() {
        if dev == "slow" {
            let fast = table.entry("fast", *g, *d, *r).unwrap();
            assert!((ms / fast - 2.0).abs() < 1e-12);
        }
    }
    assert!(matches!(build_latency_table(&cfg, &[device("z", 0.0, 0.0, 1.0)]), Err(CflError::Config(_))));
    assert!(matches!(build_latency_table(&cfg, &[device("z", -3.0, 0.0, 1.0)]), Err(CflError::Config(_))));
}

#[test]
fn arch_latency_matches_cost_model_recomputation() {
    let cfg = SupernetConfig::default();
    let p = device("d", 3e5, 0.02, 1.0);
    let table = build_latency_table(&cfg, &[p.clone()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let g = Genome::random(&cfg, &mut rng);
        let arch = g.to_arch(&cfg, ChannelPolicy::Random, &mut rng).unwrap();
        let mut flops = 0.0;
        let mut layers = 0.0;
        let mut spatial = 8usize;
        for (grp, chans) in arch.channels.iter().enumerate() {
            if grp > 0 {
                spatial = spatial.div_ceil(2);
            }
            for (d, idx) in chans.iter().enumerate() {
                let cin = match (grp, d) {
                    (0, 0) => 16,
                    (_, 0) => cfg.max_widths[grp - 1],
                    _ => cfg.max_widths[grp],
                };
                flops += (2 * 9 * cin * idx.len() * spatial * spatial) as f64;
                layers += 1.0;
            }
        }
        let oracle = flops / 3e5 + 0.02 * layers;
        assert!((lookup_latency(&table, &cfg, &arch, &p).unwrap() - oracle).abs() < 1e-9);
    }
}

#[test]
fn latency_text_round_trips() {
    let cfg = toy();
    let table = build_latency_table(&cfg, &[device("a", 1e5 / 3.0, 0.0, 1.0), device("b", 7e4, 0.0, 1.0)]).unwrap();
    let text = table.to_text();
    assert!(text.lines().next().unwrap().starts_with("device=a g=0 slot=0 ratio=0.25 ms="));
    assert_eq!(LatencyTable::from_text(&text).unwrap(), table);
    assert!(LatencyTable::from_text("device=a g=0 slot=0 ratio=0.3 ms=1").is_err());
    assert!(LatencyTable::from_text("device=a g=0 slot=0 ratio=0.5 ms=-1").is_err());
}

fn predictor(len: usize, seed: u64) -> AccuracyPredictor {
    AccuracyPredictor::new(len, seed, PredictorOptions::default()).unwrap()
}

proptest! {
    #[test]
    fn predictor_output_in_unit_interval(
        seed in 0u64..20,
        input in prop::collection::vec(-1e150f64..1e150, 13),
    ) {
        let p = predictor(13, seed);
        let y = p.predict(&input).unwrap();
        prop_assert!((0.0..=1.0).contains(&y));
    }
}

#[test]
fn predictor_fits_constant_label() {
    let cfg = toy();
    let enc = encode_arch(&cfg, &ArchDescriptor::full(&cfg), 2).unwrap();
    let mut p = predictor(enc.len(), 1);
    let profile = TrainingProfile::new(0, 2, enc.clone(), 0.73).unwrap();
    let mut epochs = 0;
    p.train_round(&[profile]).unwrap();
    while (p.predict(&enc).unwrap() - 0.73).abs() >= 0.01 {
        // the store already holds the profile; an empty round is one more epoch over it
        p.train_round(&[]).unwrap();
        epochs += 1;
        assert!(epochs < 200, "no fit after 200 epochs");
    }
}

#[test]
fn converged_flag_tracks_validation_mse() {
    let cfg = toy();
    let mut p = AccuracyPredictor::new(cfg.encoding_len(), 2, PredictorOptions { threshold: 2e-3, ..Default::default() })
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut seen_converged = false;
    for t in 0..40 {
        let batch: Vec<TrainingProfile> = (0..16)
            .map(|_| {
                let arch = Genome::random(&cfg, &mut rng).to_prefix_arch(&cfg).unwrap();
                let q = rng.random_range(0..5);
                let acc = 0.3 + 0.5 * arch.mean_width_ratio(&cfg);
                TrainingProfile::new(t, q, encode_arch(&cfg, &arch, q).unwrap(), acc).unwrap()
            })
            .collect();
        let fit = p.train_round(&batch).unwrap();
        if !seen_converged {
            let held_out = 16 * (t + 1) / 5;
            assert_eq!(fit.converged, fit.val_mse.is_some_and(|v| v < 2e-3) && held_out >= 8);
        }
        seen_converged |= fit.converged;
    }
    assert_eq!(p.profiles().len(), 640);
}

#[test]
fn predictor_training_is_deterministic() {
    let cfg = toy();
    let run = || {
        let mut p = predictor(cfg.encoding_len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in 0..3 {
            let batch: Vec<TrainingProfile> = (0..10)
                .map(|_| {
                    let arch = Genome::random(&cfg, &mut rng).to_prefix_arch(&cfg).unwrap();
                    TrainingProfile::new(t, 1, encode_arch(&cfg, &arch, 1).unwrap(), rng.random()).unwrap()
                })
                .collect();
            p.train_round(&batch).unwrap();
        }
        p.params().to_bytes()
    };
    assert_eq!(run(), run());
}

#[test]
fn loose_bound_and_width_monotone_scorer_give_full_arch() {
    let cfg = toy();
    let p = device("d", 1e5, 0.01, 1.0);
    let table = build_latency_table(&cfg, &[p.clone()]).unwrap();
    let full = ArchDescriptor::full(&cfg);
    let full_ms = lookup_latency(&table, &cfg, &full, &p).unwrap();
    let p = DeviceProfile { latency_bound_ms: full_ms * 1.01, ..p };
    // total width is recoverable from the ratio block of the encoding
    let scorer = FnScorer(|e: &[f64]| e[4] * 4.0 + e[5] * 4.0 + e[6] * 8.0 + e[7] * 8.0);
    let oracle = enumerate(&cfg, &[0, 1, 2, 3]).into_iter().max_by_key(total_width).unwrap();
    assert_eq!(oracle, full);
    let opts = SearchOptions { channel_policy: ChannelPolicy::Prefix, ..Default::default() };
    for seed in 0..5 {
        let out = select_submodels(&scorer, &table, &cfg, &[(p.clone(), 1)], &opts, seed).unwrap();
        assert_eq!(out[0].as_ref().unwrap().arch, full);
    }
}

#[test]
fn bound_below_minimal_arch_is_infeasible() {
    let cfg = toy();
    let p = device("d", 1e5, 0.01, 1.0);
    let table = build_latency_table(&cfg, &[p.clone()]).unwrap();
    let min_ms = lookup_latency(&table, &cfg, &Genome::minimal(&cfg).to_prefix_arch(&cfg).unwrap(), &p).unwrap();
    let tight = DeviceProfile { latency_bound_ms: min_ms * 0.99, ..p.clone() };
    let at_min = DeviceProfile { latency_bound_ms: min_ms, ..p.clone() };
    let scorer = FnScorer(|_: &[f64]| 0.5);
    let out =
        select_submodels(&scorer, &table, &cfg, &[(tight, 0), (at_min, 0)], &SearchOptions::default(), 1).unwrap();
    for r in out {
        match r {
            Err(CflError::Infeasible { tightest_ms, .. }) => assert_eq!(tightest_ms, min_ms),
            other => panic!("expected infeasible, got {:?}", other),
        }
    }
    // just above the minimum only the minimal arch fits
    let barely = DeviceProfile { latency_bound_ms: min_ms * 1.0001, ..p };
    let out = select_submodels(&scorer, &table, &cfg, &[(barely, 0)], &SearchOptions::default(), 1).unwrap();
    assert_eq!(out[0].as_ref().unwrap().arch.active_layers(), 2);
}

#[test]
fn constant_scorer_selection_is_feasible_and_repeatable() {
    let cfg = SupernetConfig::default();
    let profiles = [device("a", 2e5, 0.01, 0.0), device("b", 8e5, 0.01, 0.0)];
    let table = build_latency_table(&cfg, &profiles).unwrap();
    let full = ArchDescriptor::full(&cfg);
    let workers: Vec<(DeviceProfile, usize)> = profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let ms = lookup_latency(&table, &cfg, &full, p).unwrap();
            (DeviceProfile { latency_bound_ms: 0.5 * ms, ..p.clone() }, i)
        })
        .collect();
    let scorer = FnScorer(|_: &[f64]| 0.4);
    let a = select_submodels(&scorer, &table, &cfg, &workers, &SearchOptions::default(), 9).unwrap();
    let b = select_submodels(&scorer, &table, &cfg, &workers, &SearchOptions::default(), 9).unwrap();
    for ((x, y), (p, _)) in a.iter().zip(&b).zip(&workers) {
        let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
        assert_eq!(x, y);
        assert!(x.latency_ms < p.latency_bound_ms);
        assert_eq!(lookup_latency(&table, &cfg, &x.arch, p).unwrap(), x.latency_ms);
    }
}

#[test]
fn zero_iterations_is_config_error() {
    let cfg = toy();
    let p = device("d", 1e5, 0.0, 1.0);
    let table = build_latency_table(&cfg, &[p.clone()]).unwrap();
    let opts = SearchOptions { iterations: 0, ..Default::default() };
    let scorer = FnScorer(|_: &[f64]| 0.0);
    assert!(matches!(select_submodels(&scorer, &table, &cfg, &[(p, 0)], &opts, 0), Err(CflError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn selections_respect_strict_bound(
        speed in 1e4f64..1e7,
        overhead in 0.0f64..0.5,
        bound_frac in 0.0f64..1.5,
        seed in any::<u64>(),
        random in any::<bool>(),
    ) {
        let cfg = toy();
        let p = device("d", speed, overhead, 1.0);
        let table = build_latency_table(&cfg, &[p.clone()]).unwrap();
        let full_ms = lookup_latency(&table, &cfg, &ArchDescriptor::full(&cfg), &p).unwrap();
        let min_ms = lookup_latency(&table, &cfg, &Genome::minimal(&cfg).to_prefix_arch(&cfg).unwrap(), &p).unwrap();
        let p = DeviceProfile { latency_bound_ms: (bound_frac * full_ms).max(1e-9), ..p };
        let strategy = if random { SearchStrategy::Random } else { SearchStrategy::Genetic };
        let opts = SearchOptions { strategy, iterations: 5, ..Default::default() };
        let scorer = FnScorer(|e: &[f64]| e.iter().sum::<f64>().sin().abs());
        let out = select_submodels(&scorer, &table, &cfg, &[(p.clone(), 3)], &opts, seed).unwrap();
        match &out[0] {
            Ok(sel) => {
                prop_assert!(sel.latency_ms < p.latency_bound_ms);
                prop_assert_eq!(lookup_latency(&table, &cfg, &sel.arch, &p).unwrap(), sel.latency_ms);
            }
            Err(CflError::Infeasible { .. }) => prop_assert!(p.latency_bound_ms <= min_ms),
            Err(e) => prop_assert!(false, "unexpected error {:?}", e),
        }
    }
}

#[test]
fn genetic_search_nearly_matches_exhaustive_optimum() {
    let cfg = toy();
    let archs = enumerate(&cfg, &[0, 1, 2, 3]);
    assert_eq!(archs.len(), 400);
    let mut hits = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..cfg.encoding_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scorer = FnScorer(move |e: &[f64]| {
            let lin: f64 = e.iter().zip(&weights).map(|(a, b)| a * b).sum();
            crate::nn::sigmoid(lin + (3.0 * e[5] * e[7]).sin())
        });
        let p = device("d", rng.random_range(1e4..1e6), 0.01, 1.0);
        let table = build_latency_table(&cfg, &[p.clone()]).unwrap();
        let full_ms = lookup_latency(&table, &cfg, &ArchDescriptor::full(&cfg), &p).unwrap();
        let p = DeviceProfile { latency_bound_ms: rng.random_range(0.4..1.0) * full_ms, ..p };
        let quality = rng.random_range(0..5);
        let best = archs
            .iter()
            .filter(|a| lookup_latency(&table, &cfg, a, &p).unwrap() < p.latency_bound_ms)
            .map(|a| scorer.score(&[encode_arch(&cfg, a, quality).unwrap()]).unwrap()[0])
            .fold(f64::NEG_INFINITY, f64::max);
        let out = select_submodels(&scorer, &table, &cfg, &[(p, quality)], &SearchOptions::default(), seed).unwrap();
        let found = out[0].as_ref().unwrap().predicted;
        assert!(found <= best + 1e-12);
        if found >= 0.99 * best {
            hits += 1;
        }
    }
    assert!(hits >= 9, "only {} of 10 seeds within 1%", hits);
}

#[test]
fn width_ratio_table_keys_cover_all_buckets() {
    let cfg = toy();
    let table = build_latency_table(&cfg, &[device("x", 1e5, 0.0, 1.0)]).unwrap();
    for g in 0..2 {
        for d in 0..2 {
            for r in 0..WIDTH_RATIOS.len() {
                assert!(table.entry("x", g, d, r).unwrap() > 0.0);
            }
        }
    }
}

#[test]
fn predictor_learns_linear_width_target() {
    let cfg = SupernetConfig::default();
    let target = |a: &ArchDescriptor| 0.3 + 0.5 * a.mean_width_ratio(&cfg);
    let mut p = predictor(cfg.encoding_len(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sample = |rng: &mut ChaCha8Rng, t: usize| {
        let arch = Genome::random(&cfg, rng).to_arch(&cfg, ChannelPolicy::Random, rng).unwrap();
        let q = rng.random_range(0..5);
        TrainingProfile::new(t, q, encode_arch(&cfg, &arch, q).unwrap(), target(&arch)).unwrap()
    };
    for t in 0..50 {
        let round: Vec<TrainingProfile> = (0..32).map(|_| sample(&mut rng, t)).collect();
        p.train_round(&round).unwrap();
    }
    let test: Vec<TrainingProfile> = (0..500).map(|_| sample(&mut rng, 99)).collect();
    let pred = p.predict_batch(&test.iter().map(|s| s.encoding.clone()).collect::<Vec<_>>()).unwrap();
    let mse = pred.iter().zip(&test).map(|(a, s)| (a - s.accuracy).powi(2)).sum::<f64>() / 500.0;
    assert!(mse < 0.005, "mse {}", mse);
}
