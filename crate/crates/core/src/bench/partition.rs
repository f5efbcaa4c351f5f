use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::QUALITY_LEVELS;

/// Seeded shuffle of `0..n` cut into one near-equal batch per quality level;
/// the first `n % 5` batches get one extra sample.
pub fn partition_quality_iid(n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < QUALITY_LEVELS {
        return Err(CflError::Argument(format!("need at least {} samples, got {}", QUALITY_LEVELS, n)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / QUALITY_LEVELS, n % QUALITY_LEVELS);
    let mut out = Vec::with_capacity(QUALITY_LEVELS);
    let mut start = 0;
    for i in 0..QUALITY_LEVELS {
        let len = base + usize::from(i < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}

/// Label-skewed split of a sample set over workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Sorted sample indices per worker.
    pub workers: Vec<Vec<usize>>,
    pub dominant: Vec<usize>,
    pub imbalance: f64,
    /// Samples that could not be placed without breaking the imbalance.
    pub unassigned: Vec<usize>,
}

impl Partition {
    /// Fraction of worker `k`'s samples that carry its dominant label.
    pub fn dominant_fraction(&self, k: usize, labels: &[usize]) -> f64 {
        let idx = &self.workers[k];
        if idx.is_empty() {
            return 0.0;
        }
        idx.iter().filter(|&&i| labels[i] == self.dominant[k]).count() as f64 / idx.len() as f64
    }
}

/// Dominant classes `0, 1, ..., C-1, 0, ...` for `k` workers.
pub fn round_robin_dominant(k: usize, num_classes: usize) -> Vec<usize> {
    (0..k).map(|i| i % num_classes).collect()
}

/// Per-class sample counts for one worker of size `m`.
fn worker_counts(m: usize, dominant: usize, num_classes: usize, imbalance: f64) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    if num_classes == 1 {
        counts[0] = m;
        return counts;
    }
    let dom = ((imbalance * m as f64).round() as usize).min(m);
    counts[dominant] = dom;
    let rest = m - dom;
    let others = num_classes - 1;
    for j in 0..others {
        let c = (dominant + 1 + j) % num_classes;
        counts[c] = rest / others + usize::from(j < rest % others);
    }
    counts
}

fn demand(m: usize, dominant: &[usize], num_classes: usize, imbalance: f64) -> Vec<usize> {
    let mut total = vec![0; num_classes];
    for &d in dominant {
        for (t, c) in total.iter_mut().zip(worker_counts(m, d, num_classes, imbalance)) {
            *t += c;
        }
    }
    total
}

/// Equal-size workers whose data is an `imbalance` share of their dominant
/// class with the rest spread evenly over the other classes. The size is the
/// largest one the class supplies allow; samples left over are returned in
/// `unassigned`, so workers plus leftovers partition `0..labels.len()`.
pub fn partition_noniid(
    labels: &[usize],
    num_classes: usize,
    dominant: &[usize],
    imbalance: f64,
    seed: u64,
) -> Result<Partition> {
    if !(imbalance > 0.0 && imbalance <= 1.0) {
        return Err(CflError::Config(format!("imbalance must be in (0, 1], got {}", imbalance)));
    }
    if dominant.is_empty() {
        return Err(CflError::Config("partition needs at least one worker".into()));
    }
    if let Some(&bad) = labels.iter().chain(dominant).find(|&&y| y >= num_classes) {
        return Err(CflError::Partition(format!("class {} out of range for {} classes", bad, num_classes)));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        pools[y].push(i);
    }
    let supply: Vec<usize> = pools.iter().map(Vec::len).collect();
    let fits = |m: usize| demand(m, dominant, num_classes, imbalance).iter().zip(&supply).all(|(d, s)| d <= s);
    let (mut lo, mut hi) = (0, labels.len() / dominant.len());
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let m = lo;
    if m == 0 {
        let short = demand(1, dominant, num_classes, imbalance)
            .iter()
            .zip(&supply)
            .position(|(d, s)| d > s)
            .unwrap_or(dominant[0]);
        return Err(CflError::Partition(format!("class {} has too few samples ({}) for the requested split", short, supply[short])));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pool in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }
    let mut workers = Vec::with_capacity(dominant.len());
    for &d in dominant {
        let mut idx = Vec::with_capacity(m);
        for (c, n) in worker_counts(m, d, num_classes, imbalance).into_iter().enumerate() {
            let at = pools[c].len() - n;
            idx.extend(pools[c].drain(at..));
        }
        idx.sort_unstable();
        workers.push(idx);
    }
    let mut unassigned: Vec<usize> = pools.into_iter().flatten().collect();
    unassigned.sort_unstable();
    Ok(Partition { workers, dominant: dominant.to_vec(), imbalance, unassigned })
}
