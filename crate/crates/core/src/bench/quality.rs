use serde::{Deserialize, Serialize};

use crate::error::{CflError, Result};
use crate::nn::Tensor;
use crate::QUALITY_LEVELS;

const RADIUS: isize = 2;

/// Data quality levels, best to worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QualityLevel {
    Sharpened = 0,
    Raw = 1,
    BlurLight = 2,
    BlurMedium = 3,
    BlurHeavy = 4,
}

impl QualityLevel {
    pub const ALL: [QualityLevel; QUALITY_LEVELS] = [
        QualityLevel::Sharpened,
        QualityLevel::Raw,
        QualityLevel::BlurLight,
        QualityLevel::BlurMedium,
        QualityLevel::BlurHeavy,
    ];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| CflError::Argument(format!("quality level {} outside 0..{}", i, QUALITY_LEVELS)))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn blur_sigma(self) -> Option<f64> {
        match self {
            QualityLevel::BlurLight => Some(0.5),
            QualityLevel::BlurMedium => Some(1.0),
            QualityLevel::BlurHeavy => Some(1.5),
            _ => None,
        }
    }

    pub fn apply(self, image: &Tensor) -> Result<Tensor> {
        match self {
            QualityLevel::Sharpened => sharpen(image),
            QualityLevel::Raw => Ok(image.clone()),
            _ => gaussian_blur(image, self.blur_sigma().expect("blur level")),
        }
    }
}

/// Normalised 5x5 Gaussian weights, row major.
pub fn gaussian_kernel(sigma: f64) -> Result<[f64; 25]> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(CflError::Argument(format!("blur sigma must be positive, got {}", sigma)));
    }
    let mut k = [0.0; 25];
    for dy in -RADIUS..=RADIUS {
        for dx in -RADIUS..=RADIUS {
            k[((dy + RADIUS) * 5 + dx + RADIUS) as usize] = (-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp();
        }
    }
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    Ok(k)
}

/// Mirror index into `0..n` without repeating the edge pixel.
fn reflect(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    if image.rank() != 3 {
        return Err(CflError::Structural(format!("expected a [C, H, W] image, got {:?}", image.shape())));
    }
    Ok((image.shape()[0], image.shape()[1], image.shape()[2]))
}

/// Per-channel 5x5 Gaussian blur with reflective borders.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let k = gaussian_kernel(sigma)?;
    let (c, h, w) = check_image(image)?;
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -RADIUS..=RADIUS {
                    let sy = reflect(y as isize + dy, h);
                    for dx in -RADIUS..=RADIUS {
                        let sx = reflect(x as isize + dx, w);
                        acc += k[((dy + RADIUS) * 5 + dx + RADIUS) as usize] * plane[sy * w + sx];
                    }
                }
                out[ch * h * w + y * w + x] = acc;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Unsharp mask with amount 1 and a sigma-1 blur, clamped to `[0, 1]`.
pub fn sharpen(image: &Tensor) -> Result<Tensor> {
    let blurred = gaussian_blur(image, 1.0)?;
    let data = image
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(&v, &b)| (v + (v - b)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Sum of absolute differences between horizontally and vertically adjacent pixels.
pub fn total_variation(image: &Tensor) -> f64 {
    let (c, h, w) = match check_image(image) {
        Ok(d) => d,
        Err(_) => return 0.0,
    };
    let d = image.data();
    let mut tv = 0.0;
    for ch in 0..c {
        let at = |y: usize, x: usize| d[ch * h * w + y * w + x];
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    tv += (at(y, x + 1) - at(y, x)).abs();
                }
                if y + 1 < h {
                    tv += (at(y + 1, x) - at(y, x)).abs();
                }
            }
        }
    }
    tv
}
