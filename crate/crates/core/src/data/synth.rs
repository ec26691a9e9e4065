use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Uniform intensity `c / (k - 1)` for class `c` of `k`.
    Constant,
    /// Noisy sinusoidal stripes whose orientation is `pi * c / k`.
    Stripes,
    /// A Gaussian bump placed on a ring at angle `2 pi c / k`, with jitter.
    Blobs,
}

const STRIPE_PERIOD: f64 = 4.0;
const STRIPE_NOISE: f64 = 0.1;

/// Deterministic labelled `size x size x channels` images with balanced
/// classes in a seeded order.
pub fn synthesize(
    kind: SynthKind,
    n: usize,
    size: usize,
    channels: usize,
    classes: usize,
    seed: u64,
) -> Dataset {
    let k = classes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<u8> = (0..n).map(|i| (i % k) as u8).collect();
    labels.shuffle(&mut rng);

    let px = size * size;
    let mut data = Vec::with_capacity(n * px * channels);
    let centre = (size as f64 - 1.0) / 2.0;
    for &label in &labels {
        let c = label as f64;
        match kind {
            SynthKind::Constant => {
                let v = if k > 1 { c / (k as f64 - 1.0) } else { 0.0 };
                data.extend(std::iter::repeat_n(v as f32, px * channels));
            }
            SynthKind::Stripes => {
                let theta = PI * c / k as f64;
                let (dx, dy) = (theta.cos(), theta.sin());
                for y in 0..size {
                    for x in 0..size {
                        let phase = 2.0 * PI * (x as f64 * dx + y as f64 * dy) / STRIPE_PERIOD;
                        let base = 0.5 + 0.4 * phase.cos();
                        for _ in 0..channels {
                            let noise = rng.gen_range(-STRIPE_NOISE..STRIPE_NOISE);
                            data.push((base + noise).clamp(0.0, 1.0) as f32);
                        }
                    }
                }
            }
            SynthKind::Blobs => {
                let angle = 2.0 * PI * c / k as f64;
                let radius = size as f64 / 4.0;
                let sigma = size as f64 / 6.0;
                let cx = centre + radius * angle.cos() + rng.gen_range(-1.0..1.0);
                let cy = centre + radius * angle.sin() + rng.gen_range(-1.0..1.0);
                let amp = rng.gen_range(0.8..1.0);
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let v = amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        for _ in 0..channels {
                            data.push(v.clamp(0.0, 1.0) as f32);
                        }
                    }
                }
            }
        }
    }
    let images = Tensor::from_vec(&[n, size, size, channels], data).expect("generated size");
    Dataset::new(images, Some(labels)).expect("generated values are in range")
}
