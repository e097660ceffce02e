//! Dataset ingestion: IDX files, CIFAR-10 binary batches and a seeded
//! synthetic generator. Every source decodes pixels into `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InputDims;
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Labelled images of a single shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: InputDims,
    pub classes: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dims: InputDims, classes: usize, images: Vec<Tensor>, labels: Vec<usize>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::data(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {l} outside {classes} classes")));
        }
        for img in &images {
            if img.shape() != dims.shape() {
                return Err(Error::data(format!("image shape {:?} != {:?}", img.shape(), dims.shape())));
            }
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::data("pixel outside [0, 1]"));
            }
        }
        Ok(Self {
            dims,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            dims: self.dims,
            classes: self.classes,
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    /// Samples `range` of this dataset.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let end = range.end.min(self.len());
        let start = range.start.min(end);
        Dataset {
            dims: self.dims,
            classes: self.classes,
            images: self.images[start..end].to_vec(),
            labels: self.labels[start..end].to_vec(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, usize)> {
        self.images.iter().zip(self.labels.iter().copied())
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::data("truncated IDX header"))
}

/// Decodes an IDX image file (`0x00000803`, big-endian, `u8` pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(InputDims, Vec<Tensor>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::data(format!("bad IDX image magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let plane = rows * cols;
    let body = &bytes[16..];
    if plane == 0 || body.len() != count * plane {
        return Err(Error::data(format!(
            "IDX image body has {} bytes, expected {count}x{rows}x{cols}",
            body.len()
        )));
    }
    let images = body
        .chunks(plane)
        .map(|px| Tensor::from_parts(vec![1, rows, cols], px.iter().map(|&b| f32::from(b) / 255.0).collect()))
        .collect();
    Ok((InputDims::new(1, rows, cols), images))
}

/// Decodes an IDX label file (`0x00000801`).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::data(format!("bad IDX label magic {magic:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::data(format!("IDX label body has {} bytes, expected {count}", body.len())));
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn load_idx(images: &Path, labels: &Path, classes: usize) -> Result<Dataset> {
    let (dims, imgs) = parse_idx_images(&read_file(images)?)?;
    let labels = parse_idx_labels(&read_file(labels)?)?;
    Dataset::new(dims, classes, imgs, labels)
}

/// Decodes CIFAR-10 binary records: one label byte then 3×32×32 channel-major pixels.
pub fn parse_cifar(bytes: &[u8]) -> Result<(Vec<Tensor>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::data(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(usize::from(rec[0]));
        images.push(Tensor::from_parts(
            vec![3, 32, 32],
            rec[1..].iter().map(|&b| f32::from(b) / 255.0).collect(),
        ));
    }
    Ok((images, labels))
}

pub fn load_cifar(batches: &[&Path]) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in batches {
        let (i, l) = parse_cifar(&read_file(path)?)?;
        images.extend(i);
        labels.extend(l);
    }
    Dataset::new(InputDims::new(3, 32, 32), 10, images, labels)
}

/// Seeded generator of small RGB scenes.
///
/// Each image is dark neutral noise sprinkled with several small dots whose
/// hue encodes the class. The class evidence is spread over the dots, so
/// hiding any one region rarely changes the label, while the brightest dots
/// dominate the first-layer activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub count: usize,
    pub size: usize,
}

const PALETTE: [[f32; 3]; 10] = [
    [1.0, 0.15, 0.15],
    [0.15, 1.0, 0.15],
    [0.2, 0.3, 1.0],
    [1.0, 1.0, 0.1],
    [1.0, 0.2, 1.0],
    [0.1, 1.0, 1.0],
    [1.0, 0.6, 0.1],
    [0.6, 0.2, 1.0],
    [0.6, 1.0, 0.5],
    [1.0, 0.55, 0.7],
];

impl SyntheticSpec {
    pub fn generate(&self) -> Result<Dataset> {
        if self.classes < 2 || self.classes > PALETTE.len() {
            return Err(Error::config(format!("synthetic classes must be in 2..=10, got {}", self.classes)));
        }
        if self.size < 8 {
            return Err(Error::config("synthetic images must be at least 8x8"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let dims = InputDims::new(3, self.size, self.size);
        let mut images = Vec::with_capacity(self.count);
        let mut labels = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let label = rng.gen_range(0..self.classes);
            images.push(self.scene(&mut rng, label));
            labels.push(label);
        }
        Dataset::new(dims, self.classes, images, labels)
    }

    fn scene(&self, rng: &mut ChaCha8Rng, label: usize) -> Tensor {
        let n = self.size;
        let mut img = Tensor::zeros(&[3, n, n]);
        let base: f32 = rng.gen_range(0.05..0.2);
        for v in img.data_mut() {
            *v = base + rng.gen_range(0.0..0.12);
        }
        let dots = (n * n / 48).max(3);
        let mut cells: Vec<(usize, usize)> = (0..n / 3)
            .flat_map(|r| (0..n / 3).map(move |c| (r * 3, c * 3)))
            .collect();
        cells.shuffle(rng);
        let hue = PALETTE[label];
        for &(y, x) in cells.iter().take(dots) {
            let y = (y + rng.gen_range(0..2)).min(n - 2);
            let x = (x + rng.gen_range(0..2)).min(n - 2);
            let gain: f32 = rng.gen_range(0.35..0.6);
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                for (ch, &h) in hue.iter().enumerate() {
                    let v = (h * gain + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                    img.set3(ch, y + dy, x + dx, v);
                }
            }
        }
        img
    }
}
