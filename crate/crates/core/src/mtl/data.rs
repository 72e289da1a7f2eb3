//! Procedural scenes with segmentation, disparity and reconstruction targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
/// Background, rectangle, disk, triangle.
pub const NUM_CLASSES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[3, 64, 64]`, values in `[0, 1]`.
    pub image: Tensor,
    /// Row-major class ids.
    pub labels: Vec<usize>,
    /// `[1, 64, 64]`, strictly positive.
    pub disparity: Tensor,
}

/// Mixes a seed with a stream index into an independent RNG seed.
pub(crate) fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ stream.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders `count` samples. Sample `i` depends only on `(seed, i)`.
pub fn make_dataset(seed: u64, count: usize) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    (0..count).map(|i| render(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64)))).collect()
}

struct Shape {
    class: usize,
    cx: f64,
    cy: f64,
    size: f64,
    color: [f64; 3],
    disparity: f64,
}

impl Shape {
    fn covers(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.class {
            1 => dx.abs() <= self.size && dy.abs() <= 0.7 * self.size,
            2 => dx * dx + dy * dy <= self.size * self.size,
            // Upward triangle with its base at cy + size.
            _ => dy <= self.size && dy >= -self.size && dx.abs() <= 0.5 * (dy + self.size),
        }
    }
}

fn render(rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    let n = IMAGE_SIZE;
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.6));
    let tilt: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.2..0.2));
    let freq = rng.random_range(0.15..0.45);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let count = rng.random_range(1..=3);
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let class = rng.random_range(1..NUM_CLASSES);
        // Each class has a dominant colour channel, jittered per shape.
        let color = std::array::from_fn(|c| rng.random_range(0.1..0.45) + if c == class - 1 { 0.45 } else { 0.0 });
        shapes.push(Shape {
            class,
            cx: rng.random_range(10.0..54.0),
            cy: rng.random_range(10.0..54.0),
            size: rng.random_range(6.0..16.0),
            color,
            disparity: rng.random_range(0.5..1.0),
        });
    }
    // Nearer shapes (larger disparity) are drawn last and occlude.
    shapes.sort_by(|a, b| a.disparity.total_cmp(&b.disparity));

    let mut image = vec![0.0; 3 * n * n];
    let mut labels = vec![0usize; n * n];
    let mut disparity = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64, y as f64);
            let p = y * n + x;
            let texture = 0.08 * (freq * fx + phase).sin() * (freq * 0.7 * fy).cos();
            let mut color: [f64; 3] =
                std::array::from_fn(|c| base[c] + tilt[c] * (fy / n as f64 - 0.5) + texture);
            // Ground plane: nearer towards the bottom of the frame.
            disparity[p] = 0.1 + 0.3 * fy / (n - 1) as f64;
            for s in &shapes {
                if s.covers(fx + 0.5, fy + 0.5) {
                    labels[p] = s.class;
                    disparity[p] = s.disparity;
                    color = s.color;
                }
            }
            for c in 0..3 {
                image[c * n * n + p] = color[c].clamp(0.0, 1.0);
            }
        }
    }
    Ok(SyntheticSample {
        image: Tensor::new(vec![3, n, n], image)?,
        labels,
        disparity: Tensor::new(vec![1, n, n], disparity)?,
    })
}
