//! Dataset construction: long-tailed class profiles, seeded subsampling,
//! synthetic Gaussian benchmarks, and the big-endian IDX file format.
//!
//! All stochastic construction is driven by derived ChaCha streams, so a
//! given (config, seed) pair always yields the same dataset bit for bit.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};

/// Which side of the train/test split a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SplitTag {
    Train,
    Test,
}

/// A labelled feature matrix with per-class bookkeeping.
///
/// `class_counts` always has one entry per class in the global label space,
/// including zeros for classes absent from this particular view (phase views
/// and replay unions are also `LongTailDataset`s).
#[derive(Debug, Clone)]
pub struct LongTailDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    split: SplitTag,
}

impl LongTailDataset {
    /// Build a dataset, validating that every label is in `0..num_classes`
    /// and deriving the per-class counts from the labels.
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        split: SplitTag,
    ) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::parameter(format!(
                "feature rows ({}) do not match label count ({})",
                features.nrows(),
                labels.len()
            )));
        }
        let mut class_counts = vec![0usize; num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::parameter(format!(
                    "label {y} at row {i} is out of range for {num_classes} classes"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(Self {
            features,
            labels,
            class_counts,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Feature dimensionality (columns of the feature matrix).
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Number of rows carrying each label; length equals `num_classes`.
    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    /// Row indices carrying label `class`, in row order.
    pub fn rows_of_class(&self, class: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// A new dataset holding the given rows (in the given order), same
    /// global label space and split tag.
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        let d = self.dim();
        let mut features = Array2::zeros((rows.len(), d));
        let mut labels = Vec::with_capacity(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            if r >= self.len() {
                return Err(Error::parameter(format!(
                    "subset row index {r} out of range for dataset of {} rows",
                    self.len()
                )));
            }
            features.row_mut(out).assign(&self.features.row(r));
            labels.push(self.labels[r]);
        }
        Self::new(features, labels, self.num_classes(), self.split)
    }
}

/// Parameters of an exponential long-tail class profile.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImbalanceProfile {
    /// Ratio between the largest and smallest class count; 1 means balanced.
    pub rho: f64,
    /// Count of the largest class (class 0).
    pub n_max: usize,
    pub num_classes: usize,
}

/// Per-class sample counts following an exponential decay from `n_max` down
/// to `n_max / rho`: `counts[j] = round(n_max * rho^(-j / (c - 1)))`,
/// floored at 1. Rounding is half-away-from-zero.
pub fn make_profile_counts(profile: &ImbalanceProfile) -> Result<Vec<usize>> {
    if !(profile.rho >= 1.0) || !profile.rho.is_finite() {
        return Err(Error::parameter(format!(
            "imbalance ratio rho must be finite and >= 1, got {}",
            profile.rho
        )));
    }
    if profile.n_max < 1 {
        return Err(Error::parameter("n_max must be at least 1"));
    }
    if profile.num_classes < 1 {
        return Err(Error::parameter("num_classes must be at least 1"));
    }
    let c = profile.num_classes;
    if c == 1 {
        return Ok(vec![profile.n_max]);
    }
    let n_max = profile.n_max as f64;
    let counts = (0..c)
        .map(|j| {
            let exponent = -(j as f64) / (c as f64 - 1.0);
            let raw = n_max * profile.rho.powf(exponent);
            (raw.round() as usize).max(1)
        })
        .collect();
    Ok(counts)
}

/// Draw `counts[j]` rows of each class from `source` without replacement,
/// deterministically for a fixed seed. Within each class the chosen rows
/// keep their original relative order.
pub fn subsample_longtail(
    source: &LongTailDataset,
    counts: &[usize],
    seed: u64,
) -> Result<LongTailDataset> {
    if counts.len() != source.num_classes() {
        return Err(Error::parameter(format!(
            "counts has {} entries but dataset has {} classes",
            counts.len(),
            source.num_classes()
        )));
    }
    let mut rng = seeded_rng(derive_seed(seed, "subsample", 0));
    let mut rows = Vec::new();
    for (class, &want) in counts.iter().enumerate() {
        let available = source.rows_of_class(class);
        if want > available.len() {
            return Err(Error::parameter(format!(
                "class {class}: requested {want} samples but only {} available",
                available.len()
            )));
        }
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, available.len(), want)
            .into_iter()
            .collect();
        picked.sort_unstable();
        rows.extend(picked.into_iter().map(|i| available[i]));
    }
    source.subset(&rows)
}

/// Balanced test-split size used when the caller does not specify one.
pub const DEFAULT_TEST_PER_CLASS: usize = 100;

/// Synthetic benchmark: isotropic unit-variance Gaussian clusters whose
/// means are seeded draws rescaled so the closest pair of classes is
/// exactly `separation` apart (every other pair is at least that far).
/// Train rows follow `counts`; the test split is balanced.
pub fn make_synthetic_gaussian(
    num_classes: usize,
    d_in: usize,
    counts: &[usize],
    separation: f64,
    seed: u64,
) -> Result<(LongTailDataset, LongTailDataset)> {
    make_synthetic_gaussian_with_test(
        num_classes,
        d_in,
        counts,
        separation,
        DEFAULT_TEST_PER_CLASS,
        seed,
    )
}

/// As [`make_synthetic_gaussian`] but with an explicit balanced test size.
pub fn make_synthetic_gaussian_with_test(
    num_classes: usize,
    d_in: usize,
    counts: &[usize],
    separation: f64,
    test_per_class: usize,
    seed: u64,
) -> Result<(LongTailDataset, LongTailDataset)> {
    if num_classes < 2 {
        return Err(Error::parameter("synthetic data needs at least 2 classes"));
    }
    if d_in < 1 {
        return Err(Error::parameter("d_in must be at least 1"));
    }
    if counts.len() != num_classes {
        return Err(Error::parameter(format!(
            "counts has {} entries but num_classes is {num_classes}",
            counts.len()
        )));
    }
    if counts.iter().any(|&n| n == 0) {
        return Err(Error::parameter("every class count must be at least 1"));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::parameter(format!(
            "separation must be finite and > 0, got {separation}"
        )));
    }
    if test_per_class < 1 {
        return Err(Error::parameter("test_per_class must be at least 1"));
    }

    let means = place_class_means(num_classes, d_in, separation, seed)?;

    let mut train_rng = seeded_rng(derive_seed(seed, "synthetic-train", 0));
    let n_train: usize = counts.iter().sum();
    let mut train_x = Array2::zeros((n_train, d_in));
    let mut train_y = Vec::with_capacity(n_train);
    let mut row = 0;
    for (class, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            for k in 0..d_in {
                let noise: f64 = train_rng.sample(StandardNormal);
                train_x[[row, k]] = means[[class, k]] + noise;
            }
            train_y.push(class);
            row += 1;
        }
    }

    let mut test_rng = seeded_rng(derive_seed(seed, "synthetic-test", 0));
    let mut test_x = Array2::zeros((num_classes * test_per_class, d_in));
    let mut test_y = Vec::with_capacity(num_classes * test_per_class);
    let mut row = 0;
    for class in 0..num_classes {
        for _ in 0..test_per_class {
            for k in 0..d_in {
                let noise: f64 = test_rng.sample(StandardNormal);
                test_x[[row, k]] = means[[class, k]] + noise;
            }
            test_y.push(class);
            row += 1;
        }
    }

    Ok((
        LongTailDataset::new(train_x, train_y, num_classes, SplitTag::Train)?,
        LongTailDataset::new(test_x, test_y, num_classes, SplitTag::Test)?,
    ))
}

/// Seeded class means, rescaled so that the closest pair of classes sits
/// exactly `separation` apart. This makes `separation` a real difficulty
/// dial: small values force cluster overlap, large values guarantee
/// near-perfect linear separability.
fn place_class_means(
    num_classes: usize,
    d_in: usize,
    separation: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let mut rng = seeded_rng(derive_seed(seed, "synthetic-means", 0));
    let mut means = Array2::zeros((num_classes, d_in));
    for i in 0..num_classes {
        for k in 0..d_in {
            means[[i, k]] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    let mut min_dist = f64::INFINITY;
    for i in 0..num_classes {
        for j in (i + 1)..num_classes {
            let d2: f64 = (0..d_in)
                .map(|k| (means[[i, k]] - means[[j, k]]).powi(2))
                .sum();
            min_dist = min_dist.min(d2.sqrt());
        }
    }
    if min_dist == 0.0 {
        // Two identical draws; astronomically unlikely but would make the
        // rescale below divide by zero.
        return Err(Error::parameter(
            "degenerate seeded means: two classes coincide",
        ));
    }
    let scale = separation / min_dist;
    means.mapv_inplace(|v| v * scale);
    Ok(means)
}

// --- IDX binary format -----------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Load an images/labels pair of IDX files (the MNIST container format:
/// big-endian magic, dimension sizes, then unsigned bytes). Pixels are
/// scaled to `[0, 1]`; the label space is `0..=max_label`.
pub fn load_idx(
    images_path: &std::path::Path,
    labels_path: &std::path::Path,
    split: SplitTag,
) -> Result<LongTailDataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();

    let magic = idx_u32(&images, 0, &ipath)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(idx_err(
            &ipath,
            0,
            format!("bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        ));
    }
    let n = idx_u32(&images, 4, &ipath)? as usize;
    let rows = idx_u32(&images, 8, &ipath)? as usize;
    let cols = idx_u32(&images, 12, &ipath)? as usize;
    let pixel_count = n * rows * cols;
    if images.len() != 16 + pixel_count {
        let offset = images.len().min(16 + pixel_count) as u64;
        return Err(idx_err(
            &ipath,
            offset,
            format!(
                "pixel payload is {} bytes, header promises {}",
                images.len().saturating_sub(16),
                pixel_count
            ),
        ));
    }

    let lmagic = idx_u32(&labels, 0, &lpath)?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(idx_err(
            &lpath,
            0,
            format!("bad labels magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        ));
    }
    let n_labels = idx_u32(&labels, 4, &lpath)? as usize;
    if n_labels != n {
        return Err(idx_err(
            &lpath,
            4,
            format!("labels file has {n_labels} entries, images file has {n}"),
        ));
    }
    if labels.len() != 8 + n {
        let offset = labels.len().min(8 + n) as u64;
        return Err(idx_err(
            &lpath,
            offset,
            format!(
                "label payload is {} bytes, header promises {n}",
                labels.len().saturating_sub(8)
            ),
        ));
    }

    let d = rows * cols;
    let mut features = Array2::zeros((n, d));
    for i in 0..n {
        for k in 0..d {
            features[[i, k]] = f64::from(images[16 + i * d + k]) / 255.0;
        }
    }
    let label_vec: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let num_classes = label_vec.iter().copied().max().map_or(0, |m| m + 1);
    if num_classes == 0 {
        return Err(idx_err(&lpath, 8, "label file contains no entries".into()));
    }
    LongTailDataset::new(features, label_vec, num_classes, split)
}

/// Serialize a dataset back into an IDX images/labels pair. Features are
/// clamped to `[0, 1]` and quantized to bytes; each row becomes a 1xD
/// "image". Round-trips exactly for data that came from `load_idx`.
pub fn write_idx(
    dataset: &LongTailDataset,
    images_path: &std::path::Path,
    labels_path: &std::path::Path,
) -> Result<()> {
    if dataset.class_counts().len() > 256 {
        return Err(Error::parameter(
            "IDX labels are single bytes; at most 256 classes can be written",
        ));
    }
    let n = dataset.len();
    let d = dataset.dim();
    let mut images = Vec::with_capacity(16 + n * d);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend_from_slice(&(n as u32).to_be_bytes());
    images.extend_from_slice(&1u32.to_be_bytes());
    images.extend_from_slice(&(d as u32).to_be_bytes());
    for i in 0..n {
        for k in 0..d {
            let v = (dataset.features()[[i, k]].clamp(0.0, 1.0) * 255.0).round();
            images.push(v as u8);
        }
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    labels.extend(dataset.labels().iter().map(|&y| y as u8));
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

fn idx_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(idx_err(
            path,
            bytes.len() as u64,
            format!("file truncated inside the {}-byte header field at {offset}", 4),
        ));
    }
    Ok(u32::from_be_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ]))
}

fn idx_err(path: &str, offset: u64, message: String) -> Error {
    Error::Format {
        path: path.to_string(),
        offset,
        message,
    }
}
