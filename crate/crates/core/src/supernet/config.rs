use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};

/// Elastic width choices, as fractions of a group's maximum width.
pub const WIDTH_RATIOS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Shape of the elastic parent model.
///
/// A fixed stem convolution feeds `num_groups` residual groups. The first
/// layer of each group changes width (and downsamples by 2 for every group
/// after the first); the remaining layers are width-preserving residual
/// layers that gates may skip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub num_groups: usize,
    pub max_depth: usize,
    pub max_widths: Vec<usize>,
    pub kernel_size: usize,
    /// `(C, H, W)` of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub stem_width: usize,
}

impl Default for SupernetConfig {
    fn default() -> Self {
        SupernetConfig {
            num_groups: 4,
            max_depth: 3,
            max_widths: vec![16, 32, 32, 64],
            kernel_size: 3,
            input_shape: [1, 8, 8],
            num_classes: 10,
            stem_width: 16,
        }
    }
}

impl SupernetConfig {
    /// Small three-group model used by the bundled experiments.
    pub fn toy() -> Self {
        SupernetConfig {
            num_groups: 3,
            max_depth: 2,
            max_widths: vec![8, 16, 16],
            kernel_size: 3,
            input_shape: [1, 8, 8],
            num_classes: 10,
            stem_width: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_groups == 0 {
            return Err(CflError::Config("num_groups must be at least 1".into()));
        }
        if self.max_depth == 0 {
            return Err(CflError::Config("max_depth must be at least 1".into()));
        }
        if self.max_widths.len() != self.num_groups {
            return Err(CflError::Config(format!(
                "{} widths given for {} groups",
                self.max_widths.len(),
                self.num_groups
            )));
        }
        if self.max_widths.iter().any(|&w| w == 0) || self.stem_width == 0 {
            return Err(CflError::Config("widths must be strictly positive".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(CflError::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.input_shape.contains(&0) {
            return Err(CflError::Config(format!("input shape {:?} has a zero dim", self.input_shape)));
        }
        if self.num_classes < 2 {
            return Err(CflError::Config("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn stride(&self, group: usize) -> usize {
        if group == 0 {
            1
        } else {
            2
        }
    }

    /// Spatial `(H, W)` of the feature map entering group `group`.
    pub fn spatial_in(&self, group: usize) -> (usize, usize) {
        let (mut h, mut w) = (self.input_shape[1], self.input_shape[2]);
        for g in 0..group {
            h = h.div_ceil(self.stride(g));
            w = w.div_ceil(self.stride(g));
        }
        (h, w)
    }

    /// Spatial `(H, W)` produced by every layer of group `group`.
    pub fn spatial_out(&self, group: usize) -> (usize, usize) {
        self.spatial_in(group + 1)
    }

    /// Channel count feeding the first layer of `group`.
    pub fn group_input_width(&self, group: usize) -> usize {
        if group == 0 {
            self.stem_width
        } else {
            self.max_widths[group - 1]
        }
    }

    /// Channel count of layer `(group, ratio_idx)` at an elastic width choice.
    pub fn width_for(&self, group: usize, ratio_idx: usize) -> usize {
        let w = (WIDTH_RATIOS[ratio_idx] * self.max_widths[group] as f64).round() as usize;
        w.clamp(1, self.max_widths[group])
    }

    /// Ratio bucket whose channel count equals `count`, if any.
    pub fn ratio_bucket(&self, group: usize, count: usize) -> Option<usize> {
        (0..WIDTH_RATIOS.len()).rev().find(|&r| self.width_for(group, r) == count)
    }

    /// Layers in the group stacks, excluding the stem.
    pub fn max_layers(&self) -> usize {
        self.num_groups * self.max_depth
    }

    pub fn encoding_len(&self) -> usize {
        self.num_groups * self.max_depth * 2 + 5
    }
}
