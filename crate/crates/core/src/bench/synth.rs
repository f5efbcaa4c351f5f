use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

use super::dataset::Dataset;

const SIDE: usize = 8;

/// 5x7 glyphs, one string row per line.
const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthOptions {
    pub noise_std: f64,
    /// Probability that a stroke pixel is dropped.
    pub dropout: f64,
    pub min_intensity: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { noise_std: 0.15, dropout: 0.1, min_intensity: 0.6 }
    }
}

/// `n` class-balanced 8x8 digit images: a glyph at a random offset with
/// random stroke intensity, stroke dropout and additive Gaussian noise.
pub fn synthetic_digits(n: usize, seed: u64, opts: &SynthOptions) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, opts.noise_std.max(0.0)).expect("non-negative std");
    let mut labels: Vec<usize> = (0..n).map(|i| i % GLYPHS.len()).collect();
    labels.shuffle(&mut rng);
    let mut pixels = Vec::with_capacity(n * SIDE * SIDE);
    for &y in &labels {
        let mut img = [0.0f64; SIDE * SIDE];
        let dx = rng.random_range(0..=SIDE - 5);
        let dy = rng.random_range(0..=SIDE - 7);
        let intensity = rng.random_range(opts.min_intensity..=1.0);
        for (r, row) in GLYPHS[y].iter().enumerate() {
            for (c, ch) in row.bytes().enumerate() {
                if ch == b'#' && !rng.random_bool(opts.dropout) {
                    img[(r + dy) * SIDE + c + dx] = intensity;
                }
            }
        }
        pixels.extend(img.iter().map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)));
    }
    Dataset::new([1, SIDE, SIDE], GLYPHS.len(), pixels, labels, vec![1; n])
}
