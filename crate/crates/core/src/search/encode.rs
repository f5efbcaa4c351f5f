use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::supernet::{ArchDescriptor, SupernetConfig};
use crate::QUALITY_LEVELS;

/// Fixed-length feature vector of `(arch, quality)`:
/// depth one-hots (`G x D`), per-slot width ratios with 0 for inactive
/// slots (`G x D`), then a one-hot over quality levels.
pub fn encode_arch(cfg: &SupernetConfig, arch: &ArchDescriptor, quality: usize) -> Result<Vec<f64>> {
    arch.validate(cfg)?;
    if quality >= QUALITY_LEVELS {
        return Err(CflError::Argument(format!("quality level {} outside 0..{}", quality, QUALITY_LEVELS)));
    }
    let (g_count, d_max) = (cfg.num_groups, cfg.max_depth);
    let mut enc = vec![0.0; cfg.encoding_len()];
    for g in 0..g_count {
        enc[g * d_max + arch.depth[g] - 1] = 1.0;
        for (d, idx) in arch.channels[g].iter().enumerate() {
            enc[g_count * d_max + g * d_max + d] = idx.len() as f64 / cfg.max_widths[g] as f64;
        }
    }
    enc[2 * g_count * d_max + quality] = 1.0;
    Ok(enc)
}

/// One predictor sample: observed accuracy of an encoded arch at a quality level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingProfile {
    pub round: usize,
    pub quality: usize,
    pub encoding: Vec<f64>,
    pub accuracy: f64,
}

impl TrainingProfile {
    pub fn new(round: usize, quality: usize, encoding: Vec<f64>, accuracy: f64) -> Result<Self> {
        if quality >= QUALITY_LEVELS {
            return Err(CflError::Argument(format!("quality level {} outside 0..{}", quality, QUALITY_LEVELS)));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(CflError::Argument(format!("accuracy {} outside [0, 1]", accuracy)));
        }
        Ok(TrainingProfile { round, quality, encoding, accuracy })
    }
}

/// `t=<round> q=<level> enc=<csv> acc=<f64>`
impl fmt::Display for TrainingProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let enc: Vec<String> = self.encoding.iter().map(|v| v.to_string()).collect();
        write!(f, "t={} q={} enc={} acc={}", self.round, self.quality, enc.join(","), self.accuracy)
    }
}

impl FromStr for TrainingProfile {
    type Err = CflError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || CflError::Parse(format!("malformed profile line '{}'", s));
        let mut parts = s.split_whitespace();
        let mut next = |key: &str| parts.next().and_then(|p| p.strip_prefix(key)).ok_or_else(bad);
        let round = next("t=")?.parse().map_err(|_| bad())?;
        let quality = next("q=")?.parse().map_err(|_| bad())?;
        let encoding = next("enc=")?
            .split(',')
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        let accuracy = next("acc=")?.parse().map_err(|_| bad())?;
        if parts.next().is_some() {
            return Err(bad());
        }
        TrainingProfile::new(round, quality, encoding, accuracy)
    }
}
