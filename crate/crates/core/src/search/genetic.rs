use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::supernet::{ArchDescriptor, ChannelPolicy, SupernetConfig, WIDTH_RATIOS};

use super::encode::encode_arch;
use super::latency::{lookup_latency, DeviceProfile, LatencyTable};
use super::predictor::AccuracyPredictor;

/// Anything that scores an arch encoding; higher is better.
pub trait Scorer: Sync {
    fn score(&self, encodings: &[Vec<f64>]) -> Result<Vec<f64>>;
}

impl Scorer for AccuracyPredictor {
    fn score(&self, encodings: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.predict_batch(encodings)
    }
}

/// Adapter for plain functions of one encoding.
pub struct FnScorer<F>(pub F);

impl<F: Fn(&[f64]) -> f64 + Sync> Scorer for FnScorer<F> {
    fn score(&self, encodings: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(encodings.iter().map(|e| (self.0)(e)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SearchStrategy {
    #[default]
    Genetic,
    /// Independent random draws, keeping the best feasible one.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    pub strategy: SearchStrategy,
    /// Generations (genetic) or draws (random).
    pub iterations: usize,
    pub population: usize,
    pub tournament: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub max_rejections: usize,
    pub channel_policy: ChannelPolicy,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            strategy: SearchStrategy::Genetic,
            iterations: 20,
            population: 16,
            tournament: 4,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            max_rejections: 1000,
            channel_policy: ChannelPolicy::Random,
        }
    }
}

impl SearchOptions {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(CflError::Config("search needs at least one iteration".into()));
        }
        if self.population == 0 || self.tournament == 0 {
            return Err(CflError::Config("population and tournament size must be positive".into()));
        }
        for (name, v) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CflError::Config(format!("{} must be in [0, 1], got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Chosen submodel for one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub arch: ArchDescriptor,
    pub latency_ms: f64,
    pub predicted: f64,
}

/// `(depth, width ratio buckets)` of every group; inactive slots still carry genes.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Genome {
    pub depth: Vec<usize>,
    pub ratios: Vec<Vec<usize>>,
}

impl Genome {
    pub fn random(cfg: &SupernetConfig, rng: &mut impl Rng) -> Self {
        Genome {
            depth: (0..cfg.num_groups).map(|_| rng.random_range(1..=cfg.max_depth)).collect(),
            ratios: (0..cfg.num_groups)
                .map(|_| (0..cfg.max_depth).map(|_| rng.random_range(0..WIDTH_RATIOS.len())).collect())
                .collect(),
        }
    }

    pub fn minimal(cfg: &SupernetConfig) -> Self {
        Genome { depth: vec![1; cfg.num_groups], ratios: vec![vec![0; cfg.max_depth]; cfg.num_groups] }
    }

    /// Genes that determine the arch, so equal keys mean equal archs.
    fn key(&self) -> Vec<usize> {
        let mut k = Vec::new();
        for (d, r) in self.depth.iter().zip(&self.ratios) {
            k.push(*d);
            k.extend_from_slice(&r[..*d]);
        }
        k
    }

    fn widths(&self, cfg: &SupernetConfig) -> Vec<Vec<usize>> {
        (0..cfg.num_groups)
            .map(|g| self.ratios[g][..self.depth[g]].iter().map(|&r| cfg.width_for(g, r)).collect())
            .collect()
    }

    /// Arch with prefix channels; latency and encoding depend only on counts.
    pub fn to_prefix_arch(&self, cfg: &SupernetConfig) -> Result<ArchDescriptor> {
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        ArchDescriptor::from_widths(cfg, &self.depth, &self.widths(cfg), ChannelPolicy::Prefix, &mut unused)
    }

    pub fn to_arch(&self, cfg: &SupernetConfig, policy: ChannelPolicy, rng: &mut impl Rng) -> Result<ArchDescriptor> {
        ArchDescriptor::from_widths(cfg, &self.depth, &self.widths(cfg), policy, rng)
    }

    fn flatten(&self) -> Vec<usize> {
        let mut v = Vec::new();
        for (d, r) in self.depth.iter().zip(&self.ratios) {
            v.push(*d);
            v.extend_from_slice(r);
        }
        v
    }

    fn unflatten(cfg: &SupernetConfig, v: &[usize]) -> Self {
        let stride = cfg.max_depth + 1;
        Genome {
            depth: v.chunks(stride).map(|c| c[0]).collect(),
            ratios: v.chunks(stride).map(|c| c[1..].to_vec()).collect(),
        }
    }

    /// Child of a one-point cut on the flattened genomes.
    fn crossover(&self, other: &Genome, cfg: &SupernetConfig, rng: &mut impl Rng) -> Genome {
        let (a, b) = (self.flatten(), other.flatten());
        let cut = rng.random_range(1..a.len().max(2));
        let child: Vec<usize> = a[..cut].iter().chain(&b[cut..]).copied().collect();
        Genome::unflatten(cfg, &child)
    }

    fn mutate(&mut self, cfg: &SupernetConfig, rate: f64, rng: &mut impl Rng) {
        for g in 0..cfg.num_groups {
            if rng.random_bool(rate) {
                self.depth[g] = rng.random_range(1..=cfg.max_depth);
            }
            for r in self.ratios[g].iter_mut() {
                if rng.random_bool(rate) {
                    *r = rng.random_range(0..WIDTH_RATIOS.len());
                }
            }
        }
    }

    /// Shrinks randomly chosen active genes (one depth or ratio step at a
    /// time) until the arch is feasible. Fails only if the minimal arch is not.
    fn repair(&mut self, ctx: &Ctx<'_>, rng: &mut impl Rng) -> Result<f64> {
        loop {
            let ms = ctx.latency(self)?;
            if ms < ctx.profile.latency_bound_ms {
                return Ok(ms);
            }
            let mut moves = Vec::new();
            for g in 0..self.depth.len() {
                if self.depth[g] > 1 {
                    moves.push((g, None));
                }
                for d in 0..self.depth[g] {
                    if self.ratios[g][d] > 0 {
                        moves.push((g, Some(d)));
                    }
                }
            }
            if moves.is_empty() {
                return Err(CflError::Infeasible { bound_ms: ctx.profile.latency_bound_ms, tightest_ms: ms });
            }
            match moves[rng.random_range(0..moves.len())] {
                (g, None) => self.depth[g] -= 1,
                (g, Some(d)) => self.ratios[g][d] -= 1,
            }
        }
    }
}

struct Ctx<'a> {
    cfg: &'a SupernetConfig,
    table: &'a LatencyTable,
    profile: &'a DeviceProfile,
    quality: usize,
    scorer: &'a dyn Scorer,
}

impl Ctx<'_> {
    fn latency(&self, g: &Genome) -> Result<f64> {
        lookup_latency(self.table, self.cfg, &g.to_prefix_arch(self.cfg)?, self.profile)
    }
}

/// Memoised predictor scores keyed by arch genes.
struct Scores<'a> {
    ctx: &'a Ctx<'a>,
    cache: HashMap<Vec<usize>, f64>,
}

impl Scores<'_> {
    fn get(&mut self, g: &Genome) -> Result<f64> {
        let key = g.key();
        if let Some(&s) = self.cache.get(&key) {
            return Ok(s);
        }
        let enc = encode_arch(self.ctx.cfg, &g.to_prefix_arch(self.ctx.cfg)?, self.ctx.quality)?;
        let s = self.ctx.scorer.score(&[enc])?[0];
        self.cache.insert(key, s);
        Ok(s)
    }
}

fn tournament<'g>(pop: &'g [(Genome, f64)], size: usize, rng: &mut impl Rng) -> &'g Genome {
    let mut best = &pop[rng.random_range(0..pop.len())];
    for _ in 1..size {
        let c = &pop[rng.random_range(0..pop.len())];
        if c.1 > best.1 {
            best = c;
        }
    }
    &best.0
}

/// Strictly better score, ties broken by the smaller gene key for determinism.
fn better(a: &(Genome, f64), b: &(Genome, f64)) -> bool {
    a.1 > b.1 || (a.1 == b.1 && a.0.key() < b.0.key())
}

fn search_one(ctx: &Ctx<'_>, opts: &SearchOptions, rng: &mut ChaCha8Rng) -> Result<Selection> {
    let cfg = ctx.cfg;
    let minimal = Genome::minimal(cfg);
    let min_ms = ctx.latency(&minimal)?;
    if min_ms >= ctx.profile.latency_bound_ms {
        return Err(CflError::Infeasible { bound_ms: ctx.profile.latency_bound_ms, tightest_ms: min_ms });
    }
    let mut scores = Scores { ctx, cache: HashMap::new() };

    let mut best: Option<(Genome, f64)> = None;
    let consider = |g: &Genome, s: f64, best: &mut Option<(Genome, f64)>| {
        let cand = (g.clone(), s);
        if best.as_ref().is_none_or(|b| better(&cand, b)) {
            *best = Some(cand);
        }
    };

    match opts.strategy {
        SearchStrategy::Random => {
            for _ in 0..opts.iterations {
                let mut g = Genome::random(cfg, rng);
                g.repair(ctx, rng)?;
                let s = scores.get(&g)?;
                consider(&g, s, &mut best);
            }
        }
        SearchStrategy::Genetic => {
            let mut pop: Vec<(Genome, f64)> = Vec::with_capacity(opts.population);
            let mut rejected = Vec::new();
            for _ in 0..opts.max_rejections {
                if pop.len() == opts.population {
                    break;
                }
                let g = Genome::random(cfg, rng);
                if ctx.latency(&g)? < ctx.profile.latency_bound_ms {
                    let s = scores.get(&g)?;
                    pop.push((g, s));
                } else {
                    rejected.push(g);
                }
            }
            // tight bounds: fill the rest from repaired rejects
            let mut r = 0;
            while pop.len() < opts.population {
                let mut g = if r < rejected.len() { rejected[r].clone() } else { Genome::random(cfg, rng) };
                r += 1;
                g.repair(ctx, rng)?;
                let s = scores.get(&g)?;
                pop.push((g, s));
            }
            for (g, s) in &pop {
                consider(g, *s, &mut best);
            }
            for _ in 0..opts.iterations {
                let elite = pop.iter().fold(&pop[0], |a, b| if better(b, a) { b } else { a }).clone();
                let mut next = vec![elite];
                while next.len() < opts.population {
                    let a = tournament(&pop, opts.tournament, rng);
                    let b = tournament(&pop, opts.tournament, rng);
                    let mut child =
                        if rng.random_bool(opts.crossover_rate) { a.crossover(b, cfg, rng) } else { a.clone() };
                    child.mutate(cfg, opts.mutation_rate, rng);
                    child.repair(ctx, rng)?;
                    let s = scores.get(&child)?;
                    consider(&child, s, &mut best);
                    next.push((child, s));
                }
                pop = next;
            }
        }
    }

    let (genome, predicted) = best.expect("at least one candidate evaluated");
    let arch = genome.to_arch(cfg, opts.channel_policy, rng)?;
    let latency_ms = lookup_latency(ctx.table, cfg, &arch, ctx.profile)?;
    Ok(Selection { arch, latency_ms, predicted })
}

/// Per worker `(profile, quality)`, the feasible arch with the highest score.
///
/// Workers search independently with their own seeded stream, so the result
/// does not depend on thread scheduling. A worker whose bound even the
/// minimal arch violates gets an infeasibility error in its slot.
pub fn select_submodels(
    scorer: &dyn Scorer,
    table: &LatencyTable,
    cfg: &SupernetConfig,
    workers: &[(DeviceProfile, usize)],
    opts: &SearchOptions,
    seed: u64,
) -> Result<Vec<Result<Selection>>> {
    opts.validate()?;
    cfg.validate()?;
    for (p, _) in workers {
        p.validate()?;
    }
    Ok(workers
        .par_iter()
        .enumerate()
        .map(|(k, (profile, quality))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let ctx = Ctx { cfg, table, profile, quality: *quality, scorer };
            search_one(&ctx, opts, &mut rng)
        })
        .collect())
}
