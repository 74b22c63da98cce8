//! Datasets for desk-scale experiments: Gaussian blobs, IDX files, batching.

use crate::nn::Tensor2D;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{self, Write};
use std::path::Path;
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Radius of the sphere blob centers are drawn on.
pub const BLOB_RADIUS: f64 = 4.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated {what}: need {needed} bytes, have {available}")]
    Truncated { what: &'static str, needed: usize, available: usize },
    #[error("{extra} trailing bytes after {what}")]
    TrailingBytes { what: &'static str, extra: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, label: usize, classes: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

/// `N × d` features with one class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Tensor2D,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor2D, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(DataError::Invalid("dataset has no samples".into()));
        }
        if features.rows() != labels.len() {
            return Err(DataError::CountMismatch { images: features.rows(), labels: labels.len() });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(DataError::LabelOutOfRange { index, label, classes });
        }
        if !features.is_finite() {
            return Err(DataError::Invalid("features contain NaN or infinity".into()));
        }
        Ok(Self { features, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor2D {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.features.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    /// Shuffled split into `(train, val)`; `train_frac` of the rows go to train.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Self, Self)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(DataError::Invalid(format!("train fraction must lie in (0, 1), got {train_frac}")));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_train = (self.len() as f64 * train_frac).round() as usize;
        if n_train == 0 || n_train == self.len() {
            return Err(DataError::Invalid("split leaves one side empty".into()));
        }
        Ok((self.subset(&order[..n_train])?, self.subset(&order[n_train..])?))
    }

    /// Dump as CSV: `f0,…,f{d−1},label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (r, &label) in self.labels.iter().enumerate() {
            let mut rec: Vec<String> = self.features.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `m` isotropic Gaussian clusters in `d` dimensions.
///
/// Centers are standard-normal directions scaled onto the sphere of radius
/// [`BLOB_RADIUS`]; each sample adds `spread · N(0, I)`. Rows cycle through
/// the classes.
pub fn synth_blobs(n_per_class: usize, m: usize, d: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if n_per_class == 0 || m == 0 || d == 0 {
        return Err(DataError::Invalid("blob counts must all be >= 1".into()));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(DataError::Invalid(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.iter_mut().for_each(|x| *x *= BLOB_RADIUS / norm);
            v
        })
        .collect();
    let n = n_per_class * m;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % m;
        for &mu in &centers[c] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push(mu + spread * noise);
        }
        labels.push(c);
    }
    LabeledDataset::new(Tensor2D::from_vec(n, d, data).expect("sized by construction"), labels, m)
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or(DataError::Truncated { what, needed: at + 4, available: bytes.len() })
}

/// Parse an IDX image file (unsigned bytes, 3 dimensions). Returns `(count, rows·cols, pixels in [0,1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, "image header")? as usize;
    let rows = be_u32(bytes, 8, "image header")? as usize;
    let cols = be_u32(bytes, 12, "image header")? as usize;
    let pixels = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| DataError::Invalid("image dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() < pixels {
        return Err(DataError::Truncated { what: "image data", needed: 16 + pixels, available: bytes.len() });
    }
    if body.len() > pixels {
        return Err(DataError::TrailingBytes { what: "image data", extra: body.len() - pixels });
    }
    Ok((n, rows * cols, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// Parse an IDX label file (unsigned bytes, 1 dimension).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n = be_u32(bytes, 4, "label header")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(DataError::Truncated { what: "label data", needed: 8 + n, available: bytes.len() });
    }
    if body.len() > n {
        return Err(DataError::TrailingBytes { what: "label data", extra: body.len() - n });
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// Build a dataset from in-memory IDX image and label files.
pub fn idx_from_bytes(images: &[u8], labels: &[u8], classes: usize) -> Result<LabeledDataset> {
    let (n, dim, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch { images: n, labels: labels.len() });
    }
    if dim == 0 {
        return Err(DataError::Invalid("images have zero pixels".into()));
    }
    LabeledDataset::new(Tensor2D::from_vec(n, dim, pixels).expect("sized by parser"), labels, classes)
}

/// Load an IDX image/label pair with 10 classes (the MNIST convention).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    load_idx_with_classes(images_path, labels_path, 10)
}

pub fn load_idx_with_classes(images_path: &Path, labels_path: &Path, classes: usize) -> Result<LabeledDataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|source| DataError::Io { path: p.display().to_string(), source });
    idx_from_bytes(&read(images_path)?, &read(labels_path)?, classes)
}

/// Encode a dataset as IDX bytes. Features are clamped to [0,1] and quantized to `u8`.
pub fn to_idx_bytes(features: &Tensor2D, rows: usize, cols: usize, labels: &[usize]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + features.data().len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [features.rows(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend(features.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend(labels.iter().map(|&l| l as u8));
    (img, lab)
}

/// One mini-batch, materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub features: Tensor2D,
    pub labels: Vec<usize>,
}

/// Iterator over shuffled mini-batches of one epoch. The final batch may be short.
pub struct Batches<'a> {
    dataset: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(Batch {
            features: self.dataset.features.gather_rows(&indices),
            labels: indices.iter().map(|&i| self.dataset.labels[i]).collect(),
            indices,
        })
    }
}

/// Shuffle deterministically from `(seed, epoch)` and cut into batches.
pub fn batches(dataset: &LabeledDataset, batch_size: usize, seed: u64, epoch: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(DataError::Invalid("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(Batches { dataset, order, batch_size, pos: 0 })
}
