//! Binary portable pixmaps: P5 for one channel, P6 for three, maxval 255.

use std::io::{self, Write};

use anyhow::{bail, Result};
use moncae_core::Tensor;

/// Maps [0, 1] to 0..=255 with rounding; out-of-range values saturate.
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A two-row grid: `originals` along the top, `reconstructions` below, one
/// sample per column. Both tensors are `[n, H, W, C]` with equal shapes.
pub fn comparison_grid(originals: &Tensor<f32>, reconstructions: &Tensor<f32>) -> Result<Pixmap> {
    if originals.shape() != reconstructions.shape() || originals.shape().len() != 4 {
        bail!(
            "grid needs two equal [n, H, W, C] tensors, got {:?} and {:?}",
            originals.shape(),
            reconstructions.shape()
        );
    }
    let &[n, h, w, c] = originals.shape() else {
        unreachable!()
    };
    if !matches!(c, 1 | 3) {
        bail!("pixmaps hold 1 or 3 channels, got {c}");
    }
    let width = n * w;
    let mut pixels = vec![0u8; 2 * h * width * c];
    for (row, t) in [originals, reconstructions].into_iter().enumerate() {
        let src = t.data();
        for s in 0..n {
            for y in 0..h {
                let dst = ((row * h + y) * width + s * w) * c;
                let from = ((s * h + y) * w) * c;
                for (d, &v) in pixels[dst..dst + w * c]
                    .iter_mut()
                    .zip(&src[from..from + w * c])
                {
                    *d = quantize(v);
                }
            }
        }
    }
    Ok(Pixmap {
        width,
        height: 2 * h,
        channels: c,
        pixels,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pixmap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, interleaved channels.
    pub pixels: Vec<u8>,
}

impl Pixmap {
    pub fn extension(&self) -> &'static str {
        if self.channels == 1 {
            "pgm"
        } else {
            "ppm"
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        write!(w, "{magic}\n{} {}\n255\n", self.width, self.height)?;
        w.write_all(&self.pixels)?;
        w.flush()
    }
}
