use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::CflError;
use crate::nn::Tensor;
use crate::search::{build_latency_table, lookup_latency};
use crate::supernet::{ArchDescriptor, SupernetConfig};

fn random_image(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::new(vec![1, 8, 8], (0..64).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn blur_keeps_constant_images() {
    let img = Tensor::full(&[2, 6, 7], 0.37);
    for sigma in [0.5, 1.0, 1.5] {
        let out = gaussian_blur(&img, sigma).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
    }
    assert!(matches!(gaussian_blur(&img, 0.0), Err(CflError::Argument(_))));
    assert!(matches!(gaussian_blur(&img, -1.0), Err(CflError::Argument(_))));
}

#[test]
fn blur_impulse_response_is_kernel() {
    let sigma = 1.0;
    let mut img = Tensor::zeros(&[1, 9, 9]);
    img.data_mut()[4 * 9 + 4] = 1.0;
    let out = gaussian_blur(&img, sigma).unwrap();
    let z: f64 = (-2i32..=2)
        .flat_map(|y| (-2i32..=2).map(move |x| (-((x * x + y * y) as f64) / (2.0 * sigma * sigma)).exp()))
        .sum();
    for dy in -2i32..=2 {
        for dx in -2i32..=2 {
            let expected = (-((dx * dx + dy * dy) as f64) / 2.0).exp() / z;
            let got = out.data()[((4 + dy) * 9 + 4 + dx) as usize];
            assert!((got - expected).abs() < 1e-15);
        }
    }
    assert_eq!(out.data()[0], 0.0);
}

#[test]
fn heavy_blur_lowers_total_variation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let img = random_image(&mut rng, 0.0, 1.0);
        assert!(total_variation(&gaussian_blur(&img, 1.5).unwrap()) < total_variation(&img));
    }
}

#[test]
fn sharpen_contract() {
    let flat = Tensor::full(&[1, 5, 5], 0.6);
    let out = sharpen(&flat).unwrap();
    assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let img = random_image(&mut rng, 0.3, 0.7);
        let s = sharpen(&img).unwrap();
        assert_eq!(s.shape(), img.shape());
        assert!(s.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(total_variation(&s) > total_variation(&img));
    }
}

#[test]
fn quality_levels_map_to_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random_image(&mut rng, 0.0, 1.0);
    assert_eq!(QualityLevel::Raw.apply(&img).unwrap(), img);
    assert_eq!(QualityLevel::from_index(3).unwrap().apply(&img).unwrap(), gaussian_blur(&img, 1.0).unwrap());
    assert_eq!(QualityLevel::Sharpened.apply(&img).unwrap(), sharpen(&img).unwrap());
    assert!(QualityLevel::from_index(5).is_err());
    assert_eq!(QualityLevel::ALL.len(), 5);
}

#[test]
fn quality_batches_are_even_and_representative() {
    let data = synthetic_digits(60000, 4, &SynthOptions::default()).unwrap();
    let batches = partition_quality_iid(data.len(), 4).unwrap();
    assert!(batches.iter().all(|b| b.len() == 12000));
    let global: Vec<f64> = data.class_counts().iter().map(|&c| c as f64 / 60000.0).collect();
    for b in &batches {
        let mut counts = [0usize; 10];
        for &i in b {
            counts[data.labels()[i]] += 1;
        }
        for (c, g) in counts.iter().zip(&global) {
            assert!((*c as f64 / 12000.0 - g).abs() < 0.03);
        }
    }
    assert_eq!(partition_quality_iid(data.len(), 4).unwrap(), batches);
    let odd = partition_quality_iid(13, 0).unwrap();
    assert_eq!(odd.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 2, 2]);
    assert!(partition_quality_iid(4, 0).is_err());
}

#[test]
fn full_imbalance_gives_single_class_workers() {
    let labels: Vec<usize> = (0..500).map(|i| i % 10).collect();
    let p = partition_noniid(&labels, 10, &round_robin_dominant(10, 10), 1.0, 5).unwrap();
    for (k, idx) in p.workers.iter().enumerate() {
        assert_eq!(idx.len(), 50);
        assert!(idx.iter().all(|&i| labels[i] == k));
    }
    assert!(p.unassigned.is_empty());
}

#[test]
fn skewed_workers_hit_imbalance() {
    let data = synthetic_digits(20000, 6, &SynthOptions::default()).unwrap();
    let p = partition_noniid(data.labels(), 10, &round_robin_dominant(32, 10), 0.8, 6).unwrap();
    for k in 0..32 {
        let f = p.dominant_fraction(k, data.labels());
        assert!((0.78..=0.82).contains(&f), "worker {} fraction {}", k, f);
        // non-dominant share spread evenly: per-class counts differ by at most one
        let mut counts = [0usize; 10];
        for &i in &p.workers[k] {
            counts[data.labels()[i]] += 1;
        }
        let others: Vec<usize> = (0..10).filter(|&c| c != p.dominant[k]).map(|c| counts[c]).collect();
        assert!(others.iter().max().unwrap() - others.iter().min().unwrap() <= 1);
    }
}

#[test]
fn too_few_samples_is_partition_error() {
    let labels = vec![0, 0, 0, 1];
    let err = partition_noniid(&labels, 3, &[2], 0.8, 0).unwrap_err();
    match err {
        CflError::Partition(msg) => assert!(msg.contains("class 2"), "{}", msg),
        e => panic!("unexpected {:?}", e),
    }
    assert!(matches!(partition_noniid(&labels, 3, &[0], 0.0, 0), Err(CflError::Config(_))));
    assert!(matches!(partition_noniid(&labels, 3, &[0], 1.5, 0), Err(CflError::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn noniid_split_is_exact_partition(
        n in 50usize..600,
        k in 1usize..24,
        imbalance in 0.3f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let p = match partition_noniid(&labels, 10, &round_robin_dominant(k, 10), imbalance, seed) {
            Ok(p) => p,
            Err(CflError::Partition(_)) => return Ok(()),
            Err(e) => return Err(TestCaseError::fail(format!("{:?}", e))),
        };
        let mut seen = HashSet::new();
        for idx in p.workers.iter().chain(std::iter::once(&p.unassigned)) {
            for &i in idx {
                prop_assert!(seen.insert(i), "index {} placed twice", i);
            }
        }
        prop_assert_eq!(seen.len(), n);
        let sizes: HashSet<usize> = p.workers.iter().map(Vec::len).collect();
        prop_assert_eq!(sizes.len(), 1);
    }
}

#[test]
fn fleet_spread_and_bounds() {
    let cfg = SupernetConfig::toy();
    let flat = make_device_fleet(&cfg, 6, &FleetOptions { speed_spread: 1.0, ..Default::default() }, 7).unwrap();
    assert!(flat.iter().all(|p| p.flops_per_ms == flat[0].flops_per_ms));

    let opts = FleetOptions::default();
    let mut in_band = 0;
    for seed in 0..100 {
        let fleet = make_device_fleet(&cfg, 32, &opts, seed).unwrap();
        let speeds: Vec<f64> = fleet.iter().map(|p| p.flops_per_ms).collect();
        let ratio = speeds.iter().cloned().fold(0.0, f64::max) / speeds.iter().cloned().fold(f64::MAX, f64::min);
        assert!(ratio <= 4.0);
        if ratio >= 2.0 {
            in_band += 1;
        }
    }
    assert!(in_band >= 90);

    let fleet = make_device_fleet(&cfg, 5, &opts, 8).unwrap();
    assert_eq!(fleet, make_device_fleet(&cfg, 5, &opts, 8).unwrap());
    let table = build_latency_table(&cfg, &fleet).unwrap();
    for p in &fleet {
        let full = lookup_latency(&table, &cfg, &ArchDescriptor::full(&cfg), p).unwrap();
        assert!((p.latency_bound_ms - 0.6 * full).abs() < 1e-12);
    }
    assert!(make_device_fleet(&cfg, 3, &FleetOptions { speed_spread: 0.5, ..opts }, 0).is_err());
}

#[test]
fn synthetic_digits_are_balanced_and_deterministic() {
    let a = synthetic_digits(1000, 9, &SynthOptions::default()).unwrap();
    assert_eq!(a.class_counts(), vec![100; 10]);
    assert_eq!(a.shape(), [1, 8, 8]);
    assert!(a.to_batch().unwrap().x.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a, synthetic_digits(1000, 9, &SynthOptions::default()).unwrap());
    assert_ne!(a, synthetic_digits(1000, 10, &SynthOptions::default()).unwrap());
}

#[test]
fn cache_round_trips_bytes() {
    let a = synthetic_digits(37, 11, &SynthOptions::default()).unwrap();
    let b = a.map_images(4, |img| gaussian_blur(img, 1.5)).unwrap();
    let mut bytes = Vec::new();
    b.write_to(&mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"CFLD");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 37);
    assert_eq!(bytes.len(), 4 + 20 + 37 * (2 + 64 * 8));
    let back = Dataset::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, b);
    let mut again = Vec::new();
    back.write_to(&mut again).unwrap();
    assert_eq!(again, bytes);
    assert!(Dataset::read_from(&mut &b"XXXX"[..]).is_err());
}

#[test]
fn idx_files_parse() {
    let mut images = Vec::new();
    for v in [2051u32, 3, 2, 2] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&[0, 255, 51, 102, 1, 2, 3, 4, 255, 255, 255, 255]);
    let mut labels = Vec::new();
    for v in [2049u32, 3] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend_from_slice(&[7, 0, 9]);
    let d = read_idx(&mut images.as_slice(), &mut labels.as_slice(), 10).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.labels(), &[7, 0, 9]);
    assert_eq!(d.pixels_of(0), &[0.0, 1.0, 0.2, 0.4]);
    let mut bad = labels.clone();
    bad[3] = 0;
    assert!(matches!(read_idx(&mut images.as_slice(), &mut bad.as_slice(), 10), Err(CflError::Parse(_))));
}
