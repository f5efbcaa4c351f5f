use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{partition_noniid, partition_quality_iid, Dataset, QualityLevel};
use crate::error::{CflError, Result};
use crate::QUALITY_LEVELS;

use super::config::{QualityAssignment, RunConfig};
use super::derive_seed;

/// One worker's local data, already processed at its quality level.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerData {
    pub quality: usize,
    pub dominant: usize,
    pub train: Dataset,
    /// Local held-out share used to measure the accuracy reported in profiles.
    pub holdout: Dataset,
}

/// Everything the simulation reads: per-worker shards, the public
/// pre-training split and the test set at every quality level.
#[derive(Debug, Clone, PartialEq)]
pub struct FederatedData {
    pub workers: Vec<WorkerData>,
    pub public: Dataset,
    /// Index `q` holds the test set processed at quality level `q`.
    pub test: Vec<Dataset>,
    /// Training samples that no worker received.
    pub unassigned: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataOptions {
    pub workers: usize,
    pub imbalance: f64,
    pub public_fraction: f64,
    pub holdout_fraction: f64,
    pub assignment: QualityAssignment,
}

impl DataOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        DataOptions {
            workers: cfg.workers,
            imbalance: cfg.imbalance,
            public_fraction: cfg.public_fraction,
            holdout_fraction: cfg.holdout_fraction,
            assignment: cfg.quality_assignment,
        }
    }
}

/// Quality level per worker.
pub fn assign_quality(k: usize, assignment: QualityAssignment, seed: u64) -> Vec<usize> {
    match assignment {
        QualityAssignment::RoundRobin => (0..k).map(|i| i % QUALITY_LEVELS).collect(),
        QualityAssignment::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..k).map(|_| rng.random_range(0..QUALITY_LEVELS)).collect()
        }
    }
}

fn process(data: &Dataset, quality: usize) -> Result<Dataset> {
    let level = QualityLevel::from_index(quality)?;
    data.map_images(quality, |img| level.apply(img))
}

/// Class-balanced public split of roughly `fraction * n` samples; returns
/// `(public indices, remaining indices)`.
fn public_split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let c = data.num_classes();
    let per_class = ((fraction * data.len() as f64).round() as usize / c).max(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut taken = vec![0usize; c];
    let (mut public, mut rest) = (Vec::new(), Vec::new());
    for i in order {
        let y = data.labels()[i];
        if taken[y] < per_class {
            taken[y] += 1;
            public.push(i);
        } else {
            rest.push(i);
        }
    }
    if let Some(y) = taken.iter().position(|&t| t < per_class) {
        return Err(CflError::Partition(format!("class {} has too few samples for the public split", y)));
    }
    public.sort_unstable();
    rest.sort_unstable();
    Ok((public, rest))
}

/// Splits raw training data into the public split and per-worker shards
/// (quality-IID batches, then a label-skewed split inside each batch), and
/// processes the raw test set at every level.
pub fn build_federated_data(train: &Dataset, test: &Dataset, opts: &DataOptions, seed: u64) -> Result<FederatedData> {
    if opts.workers == 0 {
        return Err(CflError::Config("need at least one worker".into()));
    }
    if !(opts.holdout_fraction > 0.0 && opts.holdout_fraction < 1.0) {
        return Err(CflError::Config(format!("holdout_fraction must be in (0, 1), got {}", opts.holdout_fraction)));
    }
    if train.shape() != test.shape() || train.num_classes() != test.num_classes() {
        return Err(CflError::Structural("train and test sets disagree on sample shape or classes".into()));
    }
    let c = train.num_classes();
    let (public_idx, rest) = public_split(train, opts.public_fraction, derive_seed(seed, 1, 0, 0))?;
    let public = process(&train.subset(&public_idx)?, QUALITY_LEVELS - 1)?;

    let batches = partition_quality_iid(rest.len(), derive_seed(seed, 2, 0, 0))?;
    let quality = assign_quality(opts.workers, opts.assignment, derive_seed(seed, 3, 0, 0));
    let mut workers: Vec<Option<WorkerData>> = vec![None; opts.workers];
    let mut unassigned = 0;
    for (q, batch) in batches.iter().enumerate() {
        let ids: Vec<usize> = (0..opts.workers).filter(|&k| quality[k] == q).collect();
        if ids.is_empty() {
            unassigned += batch.len();
            continue;
        }
        let global: Vec<usize> = batch.iter().map(|&i| rest[i]).collect();
        let labels: Vec<usize> = global.iter().map(|&i| train.labels()[i]).collect();
        let dominant: Vec<usize> = ids.iter().map(|&k| k % c).collect();
        let part = partition_noniid(&labels, c, &dominant, opts.imbalance, derive_seed(seed, 4, q as u64, 0))?;
        unassigned += part.unassigned.len();
        for (slot, &k) in ids.iter().enumerate() {
            let mut idx: Vec<usize> = part.workers[slot].iter().map(|&i| global[i]).collect();
            if idx.len() < 2 {
                return Err(CflError::Partition(format!("worker {} would get {} samples", k, idx.len())));
            }
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 5, k as u64, 0)));
            let hold = ((opts.holdout_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
            let (h, t) = idx.split_at(hold);
            let (mut h, mut t) = (h.to_vec(), t.to_vec());
            h.sort_unstable();
            t.sort_unstable();
            workers[k] = Some(WorkerData {
                quality: q,
                dominant: dominant[slot],
                train: process(&train.subset(&t)?, q)?,
                holdout: process(&train.subset(&h)?, q)?,
            });
        }
    }
    let test = (0..QUALITY_LEVELS).map(|q| process(test, q)).collect::<Result<Vec<_>>>()?;
    Ok(FederatedData {
        workers: workers.into_iter().map(|w| w.expect("every worker has a level")).collect(),
        public,
        test,
        unassigned,
    })
}

const MANIFEST: &str = "manifest.txt";

impl FederatedData {
    /// Per-worker and per-quality sample counts, one line each.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (k, w) in self.workers.iter().enumerate() {
            out += &format!(
                "worker={} quality={} dominant={} train={} holdout={}\n",
                k,
                w.quality,
                w.dominant,
                w.train.len(),
                w.holdout.len()
            );
        }
        for q in 0..QUALITY_LEVELS {
            let n: usize = self.workers.iter().filter(|w| w.quality == q).map(|w| w.train.len() + w.holdout.len()).sum();
            out += &format!("quality={} samples={} test={}\n", q, n, self.test[q].len());
        }
        out += &format!("public={} unassigned={}\n", self.public.len(), self.unassigned);
        out
    }

    /// Writes one cache file per shard plus a manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.public.save(&dir.join("public.cfld"))?;
        for (q, t) in self.test.iter().enumerate() {
            t.save(&dir.join(format!("test_q{}.cfld", q)))?;
        }
        for (k, w) in self.workers.iter().enumerate() {
            w.train.save(&dir.join(format!("worker{:03}_train.cfld", k)))?;
            w.holdout.save(&dir.join(format!("worker{:03}_holdout.cfld", k)))?;
        }
        fs::write(dir.join(MANIFEST), self.summary())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = fs::read_to_string(dir.join(MANIFEST))?;
        let mut workers = Vec::new();
        let mut unassigned = 0;
        for line in manifest.lines() {
            let fields: Vec<(&str, &str)> = line.split(' ').filter_map(|f| f.split_once('=')).collect();
            let get = |key: &str| -> Result<usize> {
                fields
                    .iter()
                    .find(|(k, _)| *k == key)
                    .and_then(|(_, v)| v.parse().ok())
                    .ok_or_else(|| CflError::Parse(format!("manifest line '{}' lacks {}", line, key)))
            };
            match fields.first().map(|f| f.0) {
                Some("worker") => {
                    let k = get("worker")?;
                    if k != workers.len() {
                        return Err(CflError::Parse(format!("manifest lists worker {} out of order", k)));
                    }
                    workers.push(WorkerData {
                        quality: get("quality")?,
                        dominant: get("dominant")?,
                        train: Dataset::load(&dir.join(format!("worker{:03}_train.cfld", k)))?,
                        holdout: Dataset::load(&dir.join(format!("worker{:03}_holdout.cfld", k)))?,
                    });
                }
                Some("public") => unassigned = get("unassigned")?,
                _ => {}
            }
        }
        if workers.is_empty() {
            return Err(CflError::Parse("manifest lists no workers".into()));
        }
        let test = (0..QUALITY_LEVELS)
            .map(|q| Dataset::load(&dir.join(format!("test_q{}.cfld", q))))
            .collect::<Result<Vec<_>>>()?;
        Ok(FederatedData { workers, public: Dataset::load(&dir.join("public.cfld"))?, test, unassigned })
    }
}
