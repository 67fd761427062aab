//! Dataset construction: the two-spirals benchmark generator, IDX image
//! loading, CSV export and the stacked-ensemble view of a dataset.
//!
//! Labels are class indices in `1..=C`. Features are `f64`, one row per
//! sample; the loss only ever looks at the first `C` components of a state,
//! so the feature dimension must be at least the class count.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("dataset must contain at least one sample")]
    Empty,
    #[error("label {label} at sample {sample} out of range 1..={num_classes}")]
    LabelOutOfRange { sample: usize, label: usize, num_classes: usize },
    #[error("non-finite feature at sample {sample}")]
    NonFiniteFeature { sample: usize },
    #[error("feature dimension {dim} smaller than class count {num_classes}")]
    FeatureDimTooSmall { dim: usize, num_classes: usize },
    #[error("{sample_count} features but {label_count} labels")]
    LengthMismatch { sample_count: usize, label_count: usize },
    #[error("bad magic number {got:#010x}, expected {expected:#010x}")]
    BadMagic { expected: u32, got: u32 },
    #[error("truncated file: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label byte {value} at sample {sample} outside 0..=9")]
    BadLabelByte { sample: usize, value: u8 },
    #[error("feature {value} at sample {sample} outside [0, 1], cannot encode as pixel")]
    PixelOutOfRange { sample: usize, value: f64 },
    #[error("image shape {rows}x{cols} does not match feature dimension {dim}")]
    ShapeMismatch { rows: usize, cols: usize, dim: usize },
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::Io(e.to_string())
    }
}

/// Immutable classification dataset: `D x n` features plus labels in `1..=C`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, DataError> {
        let d = features.nrows();
        if d == 0 {
            return Err(DataError::Empty);
        }
        if labels.len() != d {
            return Err(DataError::LengthMismatch { sample_count: d, label_count: labels.len() });
        }
        if features.ncols() < num_classes {
            return Err(DataError::FeatureDimTooSmall {
                dim: features.ncols(),
                num_classes,
            });
        }
        for (sample, row) in features.rows().into_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteFeature { sample });
            }
        }
        for (sample, &label) in labels.iter().enumerate() {
            if label < 1 || label > num_classes {
                return Err(DataError::LabelOutOfRange { sample, label, num_classes });
            }
        }
        Ok(Dataset { features, labels, num_classes })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Number of state components entering the loss; equals the class count.
    pub fn class_slice_dim(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows `indices` gathered into a new feature matrix plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let n = self.feature_dim();
        let mut features = Array2::zeros((indices.len(), n));
        let mut labels = Vec::with_capacity(indices.len());
        for (r, &i) in indices.iter().enumerate() {
            features.row_mut(r).assign(&self.features.row(i));
            labels.push(self.labels[i]);
        }
        (features, labels)
    }

    /// Deterministic prefix/suffix split at `count` samples.
    pub fn split_at(&self, count: usize) -> Result<(Dataset, Dataset), DataError> {
        if count == 0 || count >= self.len() {
            return Err(DataError::Empty);
        }
        let head = Dataset::new(
            self.features.slice(ndarray::s![..count, ..]).to_owned(),
            self.labels[..count].to_vec(),
            self.num_classes,
        )?;
        let tail = Dataset::new(
            self.features.slice(ndarray::s![count.., ..]).to_owned(),
            self.labels[count..].to_vec(),
            self.num_classes,
        )?;
        Ok((head, tail))
    }
}

const SPIRAL_RADIUS_MAX: f64 = 1.0;

/// Two intertwined planar spirals, one per class.
///
/// Class 1 follows `(r cos th, r sin th)` with `th = t * turns * 2 pi` and
/// `r = t` for `t` equally spaced in `(0, 1]`; class 2 is its point-wise
/// negation (rotation by pi). Gaussian noise of the given standard deviation
/// is then added from the seeded generator, class 1 first, in sample order.
pub fn two_spirals(n_per_class: usize, noise_std: f64, turns: f64, seed: u64) -> Dataset {
    assert!(n_per_class >= 1, "need at least one sample per class");
    assert!(noise_std >= 0.0 && noise_std.is_finite());
    let d = 2 * n_per_class;
    let mut features = Array2::zeros((d, 2));
    for j in 1..=n_per_class {
        let t = j as f64 / n_per_class as f64;
        let theta = t * turns * 2.0 * std::f64::consts::PI;
        let r = SPIRAL_RADIUS_MAX * t;
        let (x, y) = (r * theta.cos(), r * theta.sin());
        features[[j - 1, 0]] = x;
        features[[j - 1, 1]] = y;
        features[[n_per_class + j - 1, 0]] = -x;
        features[[n_per_class + j - 1, 1]] = -y;
    }
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_std).unwrap();
        for v in features.as_slice_mut().unwrap() {
            *v += normal.sample(&mut rng);
        }
    }
    let mut labels = vec![1usize; n_per_class];
    labels.extend(std::iter::repeat(2usize).take(n_per_class));
    Dataset::new(features, labels, 2).expect("generator output is always valid")
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated { needed: end, got: bytes.len() });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Loads an MNIST-format IDX image/label file pair.
///
/// Pixels are rescaled to `[0, 1]` by division with 255 and flattened row by
/// row; label bytes `0..=9` map to classes `1..=10`. `limit` keeps the first
/// samples in file order.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<Dataset, DataError> {
    let image_bytes = fs::read(images_path)?;
    let label_bytes = fs::read(labels_path)?;

    let magic = read_be_u32(&image_bytes, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_IMAGES_MAGIC, got: magic });
    }
    let image_count = read_be_u32(&image_bytes, 4)? as usize;
    let rows = read_be_u32(&image_bytes, 8)? as usize;
    let cols = read_be_u32(&image_bytes, 12)? as usize;

    let magic = read_be_u32(&label_bytes, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic { expected: IDX_LABELS_MAGIC, got: magic });
    }
    let label_count = read_be_u32(&label_bytes, 4)? as usize;
    if image_count != label_count {
        return Err(DataError::CountMismatch { images: image_count, labels: label_count });
    }

    let take = limit.map_or(image_count, |l| l.min(image_count));
    let pixels_per_image = rows * cols;
    let needed = 16 + take * pixels_per_image;
    if image_bytes.len() < needed {
        return Err(DataError::Truncated { needed, got: image_bytes.len() });
    }
    let needed_labels = 8 + take;
    if label_bytes.len() < needed_labels {
        return Err(DataError::Truncated { needed: needed_labels, got: label_bytes.len() });
    }

    let mut features = Array2::zeros((take, pixels_per_image));
    {
        let out = features.as_slice_mut().unwrap();
        for (o, &b) in out.iter_mut().zip(&image_bytes[16..16 + take * pixels_per_image]) {
            *o = b as f64 / 255.0;
        }
    }
    let mut labels = Vec::with_capacity(take);
    for (sample, &b) in label_bytes[8..8 + take].iter().enumerate() {
        if b > 9 {
            return Err(DataError::BadLabelByte { sample, value: b });
        }
        labels.push(b as usize + 1);
    }
    Dataset::new(features, labels, 10)
}

/// Writes a dataset back to an IDX image/label file pair with the given
/// image shape. Features must be exact pixel values in `[0, 1]`, i.e. what
/// [`load_mnist_idx`] produced; loading then writing reproduces the source
/// bytes for the loaded prefix.
pub fn write_mnist_idx(
    dataset: &Dataset,
    rows: usize,
    cols: usize,
    images_path: &Path,
    labels_path: &Path,
) -> Result<(), DataError> {
    if rows * cols != dataset.feature_dim() {
        return Err(DataError::ShapeMismatch { rows, cols, dim: dataset.feature_dim() });
    }
    let d = dataset.len();
    let mut image_bytes = Vec::with_capacity(16 + d * rows * cols);
    image_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    image_bytes.extend_from_slice(&(d as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    for (sample, row) in dataset.features().rows().into_iter().enumerate() {
        for &v in row {
            if !(0.0..=1.0).contains(&v) {
                return Err(DataError::PixelOutOfRange { sample, value: v });
            }
            image_bytes.push((v * 255.0).round() as u8);
        }
    }
    let mut label_bytes = Vec::with_capacity(8 + d);
    label_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    label_bytes.extend_from_slice(&(d as u32).to_be_bytes());
    for &label in dataset.labels() {
        label_bytes.push((label - 1) as u8);
    }
    fs::File::create(images_path)?.write_all(&image_bytes)?;
    fs::File::create(labels_path)?.write_all(&label_bytes)?;
    Ok(())
}

/// Stacks all feature rows into one long vector in sample order.
pub fn stack(dataset: &Dataset) -> (Vec<f64>, Vec<usize>) {
    let stacked = dataset.features().as_slice().unwrap().to_vec();
    (stacked, dataset.labels().to_vec())
}

/// Inverse of [`stack`].
pub fn unstack(
    stacked: &[f64],
    labels: &[usize],
    feature_dim: usize,
    num_classes: usize,
) -> Result<Dataset, DataError> {
    let d = labels.len();
    if stacked.len() != d * feature_dim {
        return Err(DataError::LengthMismatch { sample_count: stacked.len(), label_count: d });
    }
    let features = Array2::from_shape_vec((d, feature_dim), stacked.to_vec())
        .expect("length checked above");
    Dataset::new(features, labels.to_vec(), num_classes)
}

/// CSV export: header row, then one row per sample with the feature values
/// followed by the label.
pub fn write_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut out = String::new();
    for j in 0..dataset.feature_dim() {
        out.push_str(&format!("feature_{j},"));
    }
    out.push_str("label\n");
    for (row, &label) in dataset.features().rows().into_iter().zip(dataset.labels()) {
        for v in row {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{label}\n"));
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
