//! Procedural datasets for desk-scale experiments.

use ndarray::{Array1, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::{ImageBatch, LabeledDataset, SplitTag, ValueRange};
use crate::error::{invalid, Result};

const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    [".###.", "#...#", "....#", "..##.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

pub const TOY_DIGIT_SIZE: usize = 8;

/// Rendering noise of the toy digits.
#[derive(Clone, Copy, Debug)]
pub struct DigitStyle {
    pub stroke_dropout: f64,
    pub speckle: f64,
    pub pixel_noise: f64,
    pub blur: f64,
}

impl Default for DigitStyle {
    fn default() -> Self {
        Self { stroke_dropout: 0.1, speckle: 0.03, pixel_noise: 0.06, blur: 0.35 }
    }
}

fn render_digit(digit: usize, style: &DigitStyle, rng: &mut ChaCha8Rng) -> [[f64; 8]; 8] {
    let mut canvas = [[0.0; 8]; 8];
    let dx = rng.random_range(0..=3usize);
    let dy = rng.random_range(0..=1usize);
    let ink = rng.random_range(0.65..1.0);
    for (r, row) in GLYPHS[digit].iter().enumerate() {
        for (c, ch) in row.bytes().enumerate() {
            if ch == b'#' && !rng.random_bool(style.stroke_dropout) {
                canvas[r + dy][c + dx] = ink;
            }
        }
    }
    for row in canvas.iter_mut() {
        for v in row.iter_mut() {
            if *v == 0.0 && rng.random_bool(style.speckle) {
                *v = ink * rng.random_range(0.3..0.8);
            }
        }
    }
    // separable 3-tap blur with centre weight 1 and side weight `blur`
    let w = style.blur;
    let norm = 1.0 + 2.0 * w;
    let mut tmp = [[0.0; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            let l = if x > 0 { canvas[y][x - 1] } else { 0.0 };
            let r = if x < 7 { canvas[y][x + 1] } else { 0.0 };
            tmp[y][x] = (canvas[y][x] + w * (l + r)) / norm;
        }
    }
    let noise = Normal::new(0.0, style.pixel_noise.max(0.0)).expect("finite std");
    let mut out = [[0.0; 8]; 8];
    for y in 0..8 {
        for x in 0..8 {
            let u = if y > 0 { tmp[y - 1][x] } else { 0.0 };
            let d = if y < 7 { tmp[y + 1][x] } else { 0.0 };
            let v = (tmp[y][x] + w * (u + d)) / norm * norm.sqrt();
            out[y][x] = (v + noise.sample(rng)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Renders `per_class` jittered 8x8 grayscale images for each listed digit.
///
/// Labels index into `digits`, so `toy_digits(&[3, 8], ..)` yields a two-class
/// dataset named `["3", "8"]`. Samples are ordered by class.
pub fn toy_digits(
    digits: &[usize],
    per_class: usize,
    seed: u64,
    split_tag: SplitTag,
    style: &DigitStyle,
) -> Result<LabeledDataset> {
    if digits.is_empty() || per_class == 0 {
        return Err(invalid!("need at least one digit and one sample per class"));
    }
    if let Some(d) = digits.iter().find(|&&d| d > 9) {
        return Err(invalid!("digit {d} out of range"));
    }
    let n = digits.len() * per_class;
    let mut data = Array4::<f64>::zeros((n, 1, TOY_DIGIT_SIZE, TOY_DIGIT_SIZE));
    let mut labels = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let tag = match split_tag {
        SplitTag::Train => "train",
        SplitTag::Test => "test",
    };
    for (label, &digit) in digits.iter().enumerate() {
        // one stream per (seed, split, digit) so class subsets render identically
        let stream = seed.wrapping_mul(1_000_003).wrapping_add(digit as u64 * 2 + (split_tag == SplitTag::Test) as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(stream);
        for j in 0..per_class {
            let i = label * per_class + j;
            let img = render_digit(digit, style, &mut rng);
            for y in 0..8 {
                for x in 0..8 {
                    data[[i, 0, y, x]] = img[y][x];
                }
            }
            labels.push(label);
            ids.push(format!("toy-digits/{tag}/{digit}/{j}"));
        }
    }
    let names = digits.iter().map(|d| d.to_string()).collect();
    LabeledDataset::new(ImageBatch::new(data, ValueRange::Unit)?, labels, names, split_tag, ids)
}

/// Isotropic Gaussian mixture in `R^d`.
#[derive(Clone, Debug)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Array1<f64>>,
    pub std: f64,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Array1<f64>>, std: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != means.len() {
            return Err(invalid!("weights and means must be nonempty and equal in length"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|&w| w < 0.0) {
            return Err(invalid!("weights must be a probability vector"));
        }
        let d = means[0].len();
        if means.iter().any(|m| m.len() != d) || std <= 0.0 {
            return Err(invalid!("means must share one dimension and std must be positive"));
        }
        Ok(Self { weights, means, std })
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Draws `n` points, returning them with their component indices.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Array2<f64>, Vec<usize>) {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        let mut comps = Vec::with_capacity(n);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            for j in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                out[[i, j]] = self.means[k][j] + self.std * z;
            }
            comps.push(k);
        }
        (out, comps)
    }
}
