//! Image datasets: IDX and CIFAR-10 ingestion, synthetic generators,
//! preprocessing and seeded train/validation/test splitting.

mod cifar;
mod idx;
mod synth;

pub use cifar::{load_cifar10, load_cifar10_batch, write_cifar10_batch, CIFAR_RECORD_LEN};
pub use idx::{load_idx, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synth::{synthesize, SynthKind};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Shape3, Tensor};
use crate::seed::mix_seed;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("invalid dataset operation: {0}")]
    Invalid(String),
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn all_train(n: usize) -> Self {
        Self {
            train: (0..n).collect(),
            ..Self::default()
        }
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

/// `N x H x W x C` images in `[0, 1]` with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Option<Vec<u8>>,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Option<Vec<u8>>) -> Result<Self, DataError> {
        let n = match *images.shape() {
            [n, h, w, c] if h > 0 && w > 0 && c > 0 => n,
            _ => {
                return Err(DataError::Invalid(format!(
                    "images must be N x H x W x C, got {:?}",
                    images.shape()
                )))
            }
        };
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(DataError::Invalid(format!(
                    "{} labels for {n} images",
                    l.len()
                )));
            }
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(DataError::Invalid("pixel values outside [0, 1]".into()));
        }
        Ok(Self {
            images,
            labels,
            splits: Splits::all_train(n),
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_shape(&self) -> Shape3 {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn split_images(&self, split: Split) -> Tensor<f32> {
        self.images.gather(self.splits.get(split))
    }

    pub fn split_labels(&self, split: Split) -> Option<Vec<u8>> {
        self.labels
            .as_ref()
            .map(|l| self.splits.get(split).iter().map(|&i| l[i]).collect())
    }

    /// Number of classes implied by the labels (max label + 1).
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().max().map(|&m| m as usize + 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    /// Average-pool factor; 1 leaves images untouched.
    pub downsample: usize,
    pub subset: Option<usize>,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    pub grayscale: bool,
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            downsample: 1,
            subset: None,
            split: [0.8, 0.1, 0.1],
            grayscale: false,
            seed: 0,
        }
    }
}

/// Optional grayscale conversion and downsampling, a seeded subset, and a
/// fresh seeded split.
pub fn preprocess(dataset: &Dataset, opts: &PreprocessOptions) -> Result<Dataset, DataError> {
    let sum: f64 = opts.split.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || opts.split.iter().any(|&f| !(0.0..=1.0).contains(&f)) {
        return Err(DataError::Invalid(format!(
            "split fractions {:?} must be in [0, 1] and sum to 1",
            opts.split
        )));
    }
    let mut images = dataset.images.clone();
    if opts.grayscale && dataset.sample_shape()[2] == 3 {
        images = to_grayscale(&images);
    }
    if opts.downsample == 0 {
        return Err(DataError::Invalid("downsample factor must be >= 1".into()));
    }
    if opts.downsample > 1 {
        images = downsample(&images, opts.downsample)?;
    }
    let mut labels = dataset.labels.clone();

    let n = dataset.len();
    if let Some(k) = opts.subset {
        if k == 0 || k > n {
            return Err(DataError::Invalid(format!(
                "subset of {k} from {n} samples"
            )));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, 1])));
        idx.truncate(k);
        images = images.gather(&idx);
        labels = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
    }

    let n = images.shape()[0];
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[opts.seed, 2])));
    let n_train = ((opts.split[0] * n as f64).round() as usize).min(n);
    let n_val = ((opts.split[1] * n as f64).round() as usize).min(n - n_train);
    let mut splits = Splits {
        train: order[..n_train].to_vec(),
        validation: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };
    splits.train.sort_unstable();
    splits.validation.sort_unstable();
    splits.test.sort_unstable();
    Ok(Dataset {
        images,
        labels,
        splits,
    })
}

/// Luminance 0.299 R + 0.587 G + 0.114 B.
pub fn to_grayscale(images: &Tensor<f32>) -> Tensor<f32> {
    let s = images.shape();
    let data = images
        .data()
        .chunks_exact(3)
        .map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(&[s[0], s[1], s[2], 1], data).expect("one value per pixel")
}

/// Average pooling by an integer factor that must divide H and W.
pub fn downsample(images: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>, DataError> {
    let [n, h, w, c] = match *images.shape() {
        [n, h, w, c] => [n, h, w, c],
        _ => return Err(DataError::Invalid("expected N x H x W x C images".into())),
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(DataError::Invalid(format!(
            "downsample factor {factor} does not divide {h}x{w}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let x = images.data();
    let scale = 1.0 / (factor * factor) as f32;
    let mut out = vec![0f32; n * oh * ow * c];
    for b in 0..n {
        for y in 0..h {
            for xo in 0..w {
                let i = ((b * h + y) * w + xo) * c;
                let o = ((b * oh + y / factor) * ow + xo / factor) * c;
                for ch in 0..c {
                    out[o + ch] += x[i + ch];
                }
            }
        }
    }
    out.iter_mut()
        .for_each(|v| *v = (*v * scale).clamp(0.0, 1.0));
    Ok(Tensor::from_vec(&[n, oh, ow, c], out).expect("matching size"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(n: usize, size: usize, v: f32) -> Dataset {
        Dataset::new(Tensor::full(&[n, size, size, 1], v), Some(vec![0; n])).unwrap()
    }

    #[test]
    fn downsample_constant() {
        let d = constant(3, 8, 0.25);
        let opts = PreprocessOptions {
            downsample: 2,
            ..Default::default()
        };
        let p = preprocess(&d, &opts).unwrap();
        assert_eq!(p.sample_shape(), [4, 4, 1]);
        assert!(p.images.data().iter().all(|&v| v == 0.25));

        let bad = PreprocessOptions {
            downsample: 3,
            ..Default::default()
        };
        assert!(preprocess(&d, &bad).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = constant(100, 2, 0.5);
        let opts = PreprocessOptions {
            seed: 7,
            ..Default::default()
        };
        let a = preprocess(&d, &opts).unwrap();
        assert_eq!(
            (
                a.splits.train.len(),
                a.splits.validation.len(),
                a.splits.test.len()
            ),
            (80, 10, 10)
        );
        assert_eq!(a, preprocess(&d, &opts).unwrap());
        let b = preprocess(&d, &PreprocessOptions { seed: 8, ..opts }).unwrap();
        assert_ne!(a.splits, b.splits);
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        let d = constant(10, 2, 0.5);
        let opts = PreprocessOptions {
            split: [0.5, 0.3, 0.3],
            ..Default::default()
        };
        assert!(preprocess(&d, &opts).is_err());
    }

    #[test]
    fn subset_is_seeded() {
        let d = synthesize(SynthKind::Blobs, 50, 6, 1, 3, 1);
        let opts = PreprocessOptions {
            subset: Some(20),
            seed: 3,
            ..Default::default()
        };
        let a = preprocess(&d, &opts).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a, preprocess(&d, &opts).unwrap());
    }

    #[test]
    fn grayscale_weights() {
        let img = Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap();
        let g = to_grayscale(&img);
        assert_eq!(g.shape(), &[1, 1, 1, 1]);
        assert!((g.data()[0] - 0.299).abs() < 1e-6);
    }

    #[test]
    fn new_rejects_out_of_range_pixels() {
        assert!(Dataset::new(Tensor::full(&[1, 2, 2, 1], 1.5), None).is_err());
        assert!(Dataset::new(Tensor::full(&[2, 2, 2, 1], 0.5), Some(vec![0])).is_err());
    }
}
