use std::fs;
use std::io::{self, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use super::{DataError, Dataset};
use crate::nn::Tensor;

/// Unsigned-byte, 3 dimensions.
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
/// Unsigned-byte, 1 dimension.
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_header(bytes: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, usize), DataError> {
    let mut cur = io::Cursor::new(bytes);
    let short = |_| DataError::Format("truncated IDX header".into());
    let found = cur.read_u32::<BigEndian>().map_err(short)?;
    if found != magic {
        return Err(DataError::Format(format!(
            "IDX magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let mut out = Vec::with_capacity(dims);
    for _ in 0..dims {
        out.push(cur.read_u32::<BigEndian>().map_err(short)? as usize);
    }
    Ok((out, 4 + 4 * dims))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|e| DataError::io(path, e))
}

/// Loads IDX images (and optionally labels), scaling bytes to `[0, 1]`.
pub fn load_idx(image_path: &Path, label_path: Option<&Path>) -> Result<Dataset, DataError> {
    let bytes = read_file(image_path)?;
    let (dims, offset) = read_header(&bytes, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let expected = n * rows * cols;
    let payload = &bytes[offset..];
    if payload.len() != expected {
        return Err(DataError::Format(format!(
            "{}: IDX payload has {} bytes, header implies {expected}",
            image_path.display(),
            payload.len()
        )));
    }
    let images = Tensor::from_vec(
        &[n, rows, cols, 1],
        payload.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .map_err(|e| DataError::Format(e.to_string()))?;

    let labels = match label_path {
        Some(p) => {
            let bytes = read_file(p)?;
            let (dims, offset) = read_header(&bytes, IDX_LABELS_MAGIC, 1)?;
            let payload = &bytes[offset..];
            if dims[0] != n || payload.len() != n {
                return Err(DataError::Format(format!(
                    "{}: {} labels ({} bytes) for {n} images",
                    p.display(),
                    dims[0],
                    payload.len()
                )));
            }
            Some(payload.to_vec())
        }
        None => None,
    };
    Dataset::new(images, labels)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> io::Result<()> {
    let n = pixels.len() / (rows * cols).max(1);
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    for d in [n, rows, cols] {
        f.write_u32::<BigEndian>(d as u32)?;
    }
    f.write_all(pixels)?;
    f.flush()
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    f.write_u32::<BigEndian>(labels.len() as u32)?;
    f.write_all(labels)?;
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        let pixels: Vec<u8> = (0..2 * 3 * 4).map(|i| (i * 11 % 256) as u8).collect();
        write_idx_images(&img, 3, 4, &pixels).unwrap();
        write_idx_labels(&lab, &[3, 7]).unwrap();

        let d = load_idx(&img, Some(&lab)).unwrap();
        assert_eq!(d.images.shape(), &[2, 3, 4, 1]);
        assert_eq!(d.labels, Some(vec![3, 7]));
        let expected: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
        assert_eq!(d.images.data(), &expected[..]);

        // label file where images are expected
        assert!(matches!(load_idx(&lab, None), Err(DataError::Format(_))));

        let mut bytes = fs::read(&img).unwrap();
        bytes.pop();
        fs::write(&img, &bytes).unwrap();
        assert!(matches!(load_idx(&img, None), Err(DataError::Format(_))));
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img.idx");
        write_idx_images(&img, 28, 28, &vec![0u8; 784]).unwrap();
        let bytes = fs::read(&img).unwrap();
        assert_eq!(&bytes[..8], &[0, 0, 8, 3, 0, 0, 0, 1]);
        assert_eq!(&bytes[8..16], &[0, 0, 0, 28, 0, 0, 0, 28]);
    }
}
