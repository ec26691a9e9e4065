use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::{DataError, Dataset, Splits};
use crate::nn::Tensor;

/// One label byte followed by 32x32 R, G and B planes.
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Parses one binary batch into HWC-ordered pixels in `[0, 1]` and labels.
pub fn load_cifar10_batch(path: &Path) -> Result<(Vec<f32>, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DataError::Format(format!(
            "{}: length {} is not a multiple of {CIFAR_RECORD_LEN}",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_LEN;
    let mut pixels = Vec::with_capacity(n * 3 * PLANE);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        if rec[0] > 9 {
            return Err(DataError::Format(format!(
                "{}: label {} out of range",
                path.display(),
                rec[0]
            )));
        }
        labels.push(rec[0]);
        let planes = &rec[1..];
        for p in 0..PLANE {
            for ch in 0..3 {
                pixels.push(planes[ch * PLANE + p] as f32 / 255.0);
            }
        }
    }
    Ok((pixels, labels))
}

/// Loads the five training batches and the test batch from `dir`. The test
/// batch becomes the test split, everything else the training split.
pub fn load_cifar10(dir: &Path) -> Result<Dataset, DataError> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in TRAIN_FILES {
        let (p, l) = load_cifar10_batch(&dir.join(name))?;
        pixels.extend(p);
        labels.extend(l);
    }
    let n_train = labels.len();
    let (p, l) = load_cifar10_batch(&dir.join(TEST_FILE))?;
    pixels.extend(p);
    labels.extend(l);
    let n = labels.len();
    let images = Tensor::from_vec(&[n, SIDE, SIDE, 3], pixels)
        .map_err(|e| DataError::Format(e.to_string()))?;
    let mut d = Dataset::new(images, Some(labels))?;
    d.splits = Splits {
        train: (0..n_train).collect(),
        validation: Vec::new(),
        test: (n_train..n).collect(),
    };
    Ok(d)
}

/// Writes records given labels and channel-major pixel planes
/// (`labels.len() * 3072` bytes).
pub fn write_cifar10_batch(path: &Path, labels: &[u8], planes: &[u8]) -> io::Result<()> {
    assert_eq!(
        planes.len(),
        labels.len() * 3 * PLANE,
        "3072 bytes per record"
    );
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for (i, &l) in labels.iter().enumerate() {
        f.write_all(&[l])?;
        f.write_all(&planes[i * 3 * PLANE..(i + 1) * 3 * PLANE])?;
    }
    f.flush()
}
