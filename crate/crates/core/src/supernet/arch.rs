use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{structural, CflError, Result};

use super::config::SupernetConfig;

/// Concrete submodel structure: active depth per group and, for each active
/// layer slot, the sorted parent channel indices it keeps.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub depth: Vec<usize>,
    /// `channels[g][d]` for `d < depth[g]`.
    pub channels: Vec<Vec<Vec<usize>>>,
}

/// How parent channels are picked for a given width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ChannelPolicy {
    /// Leading `width` channels.
    Prefix,
    /// A uniformly random sorted subset.
    #[default]
    Random,
}

impl ArchDescriptor {
    /// The whole parent.
    pub fn full(cfg: &SupernetConfig) -> Self {
        let depth = vec![cfg.max_depth; cfg.num_groups];
        let channels = cfg
            .max_widths
            .iter()
            .map(|&w| vec![(0..w).collect(); cfg.max_depth])
            .collect();
        ArchDescriptor { depth, channels }
    }

    /// Builds a descriptor from per-slot channel counts (`widths[g][d]` for active slots).
    pub fn from_widths<R: Rng + ?Sized>(
        cfg: &SupernetConfig,
        depth: &[usize],
        widths: &[Vec<usize>],
        policy: ChannelPolicy,
        rng: &mut R,
    ) -> Result<Self> {
        let mut channels = Vec::with_capacity(cfg.num_groups);
        for (g, ws) in widths.iter().enumerate() {
            let max = *cfg
                .max_widths
                .get(g)
                .ok_or_else(|| structural!("width list for group {} beyond {} groups", g, cfg.num_groups))?;
            let mut group = Vec::with_capacity(ws.len());
            for &w in ws {
                if w == 0 || w > max {
                    return Err(structural!("width {} invalid for group {} (max {})", w, g, max));
                }
                let idx = match policy {
                    ChannelPolicy::Prefix => (0..w).collect(),
                    ChannelPolicy::Random => {
                        let mut v = sample(rng, max, w).into_vec();
                        v.sort_unstable();
                        v
                    }
                };
                group.push(idx);
            }
            channels.push(group);
        }
        let arch = ArchDescriptor { depth: depth.to_vec(), channels };
        arch.validate(cfg)?;
        Ok(arch)
    }

    pub fn validate(&self, cfg: &SupernetConfig) -> Result<()> {
        if self.depth.len() != cfg.num_groups || self.channels.len() != cfg.num_groups {
            return Err(structural!(
                "arch has {} depths and {} channel groups for {} groups",
                self.depth.len(),
                self.channels.len(),
                cfg.num_groups
            ));
        }
        for g in 0..cfg.num_groups {
            let d = self.depth[g];
            if d == 0 || d > cfg.max_depth {
                return Err(structural!("group {} depth {} outside 1..={}", g, d, cfg.max_depth));
            }
            if self.channels[g].len() != d {
                return Err(structural!(
                    "group {} has depth {} but {} channel lists",
                    g,
                    d,
                    self.channels[g].len()
                ));
            }
            for (slot, idx) in self.channels[g].iter().enumerate() {
                if idx.is_empty() {
                    return Err(structural!("group {} slot {} selects no channels", g, slot));
                }
                if let Some(&bad) = idx.iter().find(|&&i| i >= cfg.max_widths[g]) {
                    return Err(structural!(
                        "group {} slot {} index {} out of range for width {}",
                        g,
                        slot,
                        bad,
                        cfg.max_widths[g]
                    ));
                }
                if idx.windows(2).any(|p| p[0] >= p[1]) {
                    return Err(structural!("group {} slot {} indices not strictly increasing", g, slot));
                }
            }
        }
        Ok(())
    }

    pub fn active_layers(&self) -> usize {
        self.depth.iter().sum()
    }

    /// Parent channel indices read by layer `(g, d)`: the previous active
    /// layer's selection, or the whole stem output for the first layer.
    pub fn input_channels(&self, cfg: &SupernetConfig, g: usize, d: usize) -> Vec<usize> {
        if d > 0 {
            self.channels[g][d - 1].clone()
        } else if g == 0 {
            (0..cfg.stem_width).collect()
        } else {
            self.channels[g - 1][self.depth[g - 1] - 1].clone()
        }
    }

    pub fn is_full(&self, cfg: &SupernetConfig) -> bool {
        *self == ArchDescriptor::full(cfg)
    }

    /// Mean of `|channels[g][d]| / W_max[g]` over active slots.
    pub fn mean_width_ratio(&self, cfg: &SupernetConfig) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for (g, group) in self.channels.iter().enumerate() {
            for idx in group {
                total += idx.len() as f64 / cfg.max_widths[g] as f64;
                n += 1;
            }
        }
        total / n as f64
    }

    /// Single-line form with group lines joined by `;`.
    pub fn to_line(&self) -> String {
        self.to_string().replace('\n', ";")
    }

    pub fn from_line(s: &str) -> Result<Self> {
        s.replace(';', "\n").parse()
    }
}

/// One line per group: `g=<idx> d=<depth> ch=<list>|<list>...`.
impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (g, (d, group)) in self.depth.iter().zip(&self.channels).enumerate() {
            if g > 0 {
                writeln!(f)?;
            }
            let lists: Vec<String> = group
                .iter()
                .map(|idx| idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","))
                .collect();
            write!(f, "g={} d={} ch={}", g, d, lists.join("|"))?;
        }
        Ok(())
    }
}

impl FromStr for ArchDescriptor {
    type Err = CflError;

    fn from_str(s: &str) -> Result<Self> {
        let mut depth = Vec::new();
        let mut channels = Vec::new();
        for (expected, line) in s.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let bad = || CflError::Parse(format!("malformed arch line '{}'", line));
            let mut parts = line.split_whitespace();
            let g: usize = field(parts.next(), "g=").ok_or_else(bad)?;
            if g != expected {
                return Err(CflError::Parse(format!("arch line for group {} where {} expected", g, expected)));
            }
            let d: usize = field(parts.next(), "d=").ok_or_else(bad)?;
            let ch = parts.next().and_then(|p| p.strip_prefix("ch=")).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            let lists = ch
                .split('|')
                .map(|list| {
                    list.split(',').map(|i| i.parse::<usize>()).collect::<std::result::Result<Vec<_>, _>>()
                })
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            if lists.len() != d {
                return Err(CflError::Parse(format!("group {} declares depth {} but lists {}", g, d, lists.len())));
            }
            depth.push(d);
            channels.push(lists);
        }
        if depth.is_empty() {
            return Err(CflError::Parse("empty arch description".into()));
        }
        Ok(ArchDescriptor { depth, channels })
    }
}

fn field<T: FromStr>(part: Option<&str>, prefix: &str) -> Option<T> {
    part?.strip_prefix(prefix)?.parse().ok()
}
