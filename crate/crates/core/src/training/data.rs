//! Image classification datasets: IDX files and a seeded synthetic task.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SyqError};
use crate::tensor::Tensor4;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const SYNTHETIC_SIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Images in `[0, 1]` with one class index per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor4, labels: Vec<usize>, split: Split) -> Result<Self> {
        if images.dims()[0] != labels.len() {
            return Err(SyqError::shape("dataset labels", images.dims()[0], labels.len()));
        }
        if images.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(SyqError::InvalidArgument("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of one image.
    pub fn item_dims(&self) -> [usize; 3] {
        let [_, c, h, w] = self.images.dims();
        [c, h, w]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    /// Gathers the given sample indices into a batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor4, Vec<usize>)> {
        let [_, c, h, w] = self.images.dims();
        let item = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * item);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(SyqError::InvalidArgument(format!(
                    "sample {i} out of range for {} samples",
                    self.len()
                )));
            }
            data.extend_from_slice(self.images.item(i));
            labels.push(self.labels[i]);
        }
        Ok((Tensor4::new([indices.len(), c, h, w], data)?, labels))
    }

    /// Contiguous range `start..start + count` (clamped to the dataset size).
    pub fn slice(&self, start: usize, count: usize) -> Result<Dataset> {
        let end = (start + count).min(self.len());
        let idx: Vec<usize> = (start.min(end)..end).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            images,
            labels,
            split: self.split,
        })
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| SyqError::io(path, e))
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| SyqError::format(offset as u64, "truncated IDX header"))
}

/// Parses an IDX image file (`u8` pixels, magic `0x00000803`) into `(n, 1, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor4> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(SyqError::format(
            0,
            format!("expected image magic {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| SyqError::format(4, "image dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(SyqError::format(
            bytes.len() as u64,
            format!(
                "truncated image data: need {need} bytes after the header, found {}",
                body.len()
            ),
        ));
    }
    let data = body[..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor4::new([n, 1, rows, cols], data)
}

/// Parses an IDX label file (magic `0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(SyqError::format(
            0,
            format!("expected label magic {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(SyqError::format(
            bytes.len() as u64,
            format!(
                "truncated label data: need {n} bytes after the header, found {}",
                body.len()
            ),
        ));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

pub fn load_idx_dataset(images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path)?)?;
    let labels = parse_idx_labels(&read_file(labels_path)?)?;
    if images.dims()[0] != labels.len() {
        return Err(SyqError::format(
            4,
            format!(
                "{} holds {} images but {} holds {} labels",
                images_path.display(),
                images.dims()[0],
                labels_path.display(),
                labels.len()
            ),
        ));
    }
    Dataset::new(images, labels, split)
}

/// Standard MNIST file names inside `dir`.
pub fn mnist_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = match split {
        Split::Train => "train",
        Split::Validation => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Loads the MNIST training and test files from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let (ti, tl) = mnist_paths(dir, Split::Train);
    let (vi, vl) = mnist_paths(dir, Split::Validation);
    Ok((
        load_idx_dataset(&ti, &tl, Split::Train)?,
        load_idx_dataset(&vi, &vl, Split::Validation)?,
    ))
}

/// Gaussian blobs on a 16×16 canvas, one fixed blob centre per class.
/// Centres sit on a circle so the classes are linearly separable; each sample
/// jitters its centre slightly and adds pixel noise.
pub fn generate_synthetic(seed: u64, classes: usize, count: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(SyqError::InvalidArgument(
            "synthetic task needs at least two classes".into(),
        ));
    }
    let side = SYNTHETIC_SIDE;
    let mid = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 * 0.3;
    let centres: Vec<(f64, f64)> = (0..classes)
        .map(|c| {
            let t = std::f64::consts::TAU * c as f64 / classes as f64;
            (mid + radius * t.sin(), mid + radius * t.cos())
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.5).expect("finite");
    let noise = Normal::new(0.0, 0.05).expect("finite");
    let sigma2 = 2.0 * 1.8f64.powi(2);
    let mut data = Vec::with_capacity(count * side * side);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let label = rng.random_range(0..classes);
        let (cy, cx) = centres[label];
        let (cy, cx) = (cy + jitter.sample(&mut rng), cx + jitter.sample(&mut rng));
        for y in 0..side {
            for x in 0..side {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let v = (-d2 / sigma2).exp() + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor4::new([count, 1, side, side], data)?, labels, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, r: u32, c: u32, body: &[u8]) -> Vec<u8> {
        let mut v = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for x in [n, r, c] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(body);
        v
    }

    #[test]
    fn parses_small_idx() {
        let t = parse_idx_images(&idx_images(2, 1, 2, &[0, 255, 51, 102])).unwrap();
        assert_eq!(t.dims(), [2, 1, 1, 2]);
        assert_eq!(t.as_slice(), &[0.0, 1.0, 0.2, 0.4]);
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[3, 9]);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![3, 9]);
    }

    #[test]
    fn image_file_as_labels_is_rejected() {
        let err = parse_idx_labels(&idx_images(1, 1, 1, &[0])).unwrap_err();
        assert!(matches!(err, SyqError::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_file_reports_offset() {
        let err = parse_idx_images(&idx_images(2, 2, 2, &[0; 5])).unwrap_err();
        assert!(matches!(err, SyqError::Format { offset: 21, .. }), "{err}");
        assert!(matches!(
            parse_idx_images(&[0, 0, 8]),
            Err(SyqError::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn synthetic_is_reproducible() {
        let a = generate_synthetic(7, 4, 4000).unwrap();
        let b = generate_synthetic(7, 4, 4000).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.images.dims(), [4000, 1, 16, 16]);
        assert_eq!(a.num_classes(), 4);
        assert_ne!(a, generate_synthetic(8, 4, 4000).unwrap());
    }

    #[test]
    fn batch_gathers_rows() {
        let d = generate_synthetic(1, 3, 10).unwrap();
        let (x, y) = d.batch(&[4, 2]).unwrap();
        assert_eq!(x.item(0), d.images.item(4));
        assert_eq!(y, vec![d.labels[4], d.labels[2]]);
        assert!(d.batch(&[10]).is_err());
    }
}
