//! Dataset container, IDX/CSV readers and the Gaussian blob generator.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated IDX file {0}")]
    Truncated(PathBuf),
    #[error("non-integer label {value:?} on row {row}")]
    BadLabel { row: usize, value: String },
    #[error("bad feature {value:?} on row {row}")]
    BadFeature { row: usize, value: String },
    #[error("row {row} has {found} features, expected {expected}")]
    RaggedRow { row: usize, expected: usize, found: usize },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("degenerate covariance for class {class}: variances must be positive and finite")]
    DegenerateCovariance { class: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Row-major `N x d` features with class targets in `[0, C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    targets: Vec<u16>,
    n_features: usize,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Vec<f32>, targets: Vec<u16>, n_features: usize, n_classes: usize) -> Result<Self, DatasetError> {
        if n_features == 0 {
            return Err(DatasetError::Invalid("feature dimension must be positive".into()));
        }
        if n_classes < 2 {
            return Err(DatasetError::Invalid(format!("need at least 2 classes, got {n_classes}")));
        }
        if features.len() != targets.len() * n_features {
            return Err(DatasetError::Invalid(format!(
                "{} feature values for {} examples of dimension {n_features}",
                features.len(),
                targets.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(DatasetError::Invalid("features contain NaN or infinite values".into()));
        }
        if let Some(bad) = targets.iter().find(|&&y| y as usize >= n_classes) {
            return Err(DatasetError::Invalid(format!("target {bad} out of range for {n_classes} classes")));
        }
        Ok(Self {
            features,
            targets,
            n_features,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn features(&self, i: usize) -> &[f32] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn target(&self, i: usize) -> u16 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[u16] {
        &self.targets
    }

    /// New dataset made of the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let features = indices.iter().flat_map(|&i| self.features(i).iter().copied()).collect();
        let targets = indices.iter().map(|&i| self.targets[i]).collect();
        Dataset {
            features,
            targets,
            n_features: self.n_features,
            n_classes: self.n_classes,
        }
    }

    /// Concatenates two datasets with the same dimensions.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DatasetError> {
        if self.n_features != other.n_features || self.n_classes != other.n_classes {
            return Err(DatasetError::Invalid("cannot concatenate datasets of different shapes".into()));
        }
        let mut features = self.features.clone();
        features.extend_from_slice(&other.features);
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&other.targets);
        Ok(Dataset {
            features,
            targets,
            n_features: self.n_features,
            n_classes: self.n_classes,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum DatasetFormat {
    /// Image file (magic 0x803) plus label file (magic 0x801).
    Idx { images: PathBuf, labels: PathBuf },
    /// One row per example, last column the integer label, no header.
    Csv { path: PathBuf },
}

pub fn load_dataset(format: &DatasetFormat) -> Result<Dataset, DatasetError> {
    match format {
        DatasetFormat::Idx { images, labels } => load_idx(images, labels),
        DatasetFormat::Csv { path } => {
            let file = fs::File::open(path).map_err(|source| DatasetError::Io {
                path: path.clone(),
                source,
            })?;
            parse_csv(file)
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32, DatasetError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DatasetError::Truncated(path.to_path_buf()))
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DatasetError> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_idx(&images, images_path, &labels, labels_path)
}

/// Parses an IDX image/label pair; pixels are flattened and scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], images_path: &Path, labels: &[u8], labels_path: &Path) -> Result<Dataset, DatasetError> {
    let magic = be_u32(images, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DatasetError::BadMagic {
            path: images_path.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DatasetError::BadMagic {
            path: labels_path.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_images = be_u32(images, 4, images_path)? as usize;
    let rows = be_u32(images, 8, images_path)? as usize;
    let cols = be_u32(images, 12, images_path)? as usize;
    let n_labels = be_u32(labels, 4, labels_path)? as usize;
    if n_images != n_labels {
        return Err(DatasetError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let d = rows * cols;
    let pixels = images
        .get(16..16 + n_images * d)
        .ok_or_else(|| DatasetError::Truncated(images_path.to_path_buf()))?;
    let raw_labels = labels
        .get(8..8 + n_labels)
        .ok_or_else(|| DatasetError::Truncated(labels_path.to_path_buf()))?;
    let features = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let targets: Vec<u16> = raw_labels.iter().map(|&l| l as u16).collect();
    let n_classes = infer_classes(&targets);
    Dataset::new(features, targets, d, n_classes)
}

fn infer_classes(targets: &[u16]) -> usize {
    targets.iter().map(|&y| y as usize + 1).max().unwrap_or(0).max(2)
}

pub fn parse_csv<R: Read>(reader: R) -> Result<Dataset, DatasetError> {
    let mut input = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut width = None;
    for (row, record) in input.records().enumerate() {
        let record = record?;
        let n = record.len();
        if n < 2 {
            return Err(DatasetError::RaggedRow {
                row,
                expected: width.unwrap_or(1),
                found: n.saturating_sub(1),
            });
        }
        let d = *width.get_or_insert(n - 1);
        if n - 1 != d {
            return Err(DatasetError::RaggedRow {
                row,
                expected: d,
                found: n - 1,
            });
        }
        for value in record.iter().take(d) {
            features.push(value.parse::<f32>().map_err(|_| DatasetError::BadFeature {
                row,
                value: value.to_string(),
            })?);
        }
        let label = &record[d];
        targets.push(label.parse::<u16>().map_err(|_| DatasetError::BadLabel {
            row,
            value: label.to_string(),
        })?);
    }
    let d = width.ok_or_else(|| DatasetError::Invalid("empty csv".into()))?;
    let n_classes = infer_classes(&targets);
    Dataset::new(features, targets, d, n_classes)
}

/// Gaussian blobs with diagonal covariance, one blob per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub centers: Vec<Vec<f64>>,
    /// Per-class, per-dimension variances.
    pub variances: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub label_noise_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub dataset: Dataset,
    /// Class whose blob generated each example.
    pub clean_targets: Vec<u16>,
    pub flipped: Vec<bool>,
}

const STREAM_SAMPLES: u64 = 0;
const STREAM_NOISE_MASK: u64 = 1;
const STREAM_NOISE_LABEL: u64 = 2;

/// Draws the blobs class by class, then flips labels.
///
/// Example `i` is flipped iff its uniform draw `u_i` from a dedicated stream
/// satisfies `u_i < label_noise_rate`; a flipped label is drawn uniformly from
/// the other `C - 1` classes.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset, DatasetError> {
    let n_classes = spec.centers.len();
    if n_classes < 2 || spec.variances.len() != n_classes || spec.counts.len() != n_classes {
        return Err(DatasetError::Invalid(
            "centers, variances and counts must describe the same number (>= 2) of classes".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.label_noise_rate) {
        return Err(DatasetError::Invalid(format!(
            "label_noise_rate must be in [0, 1), got {}",
            spec.label_noise_rate
        )));
    }
    let d = spec.centers[0].len();
    for (class, (center, var)) in spec.centers.iter().zip(&spec.variances).enumerate() {
        if center.len() != d || var.len() != d {
            return Err(DatasetError::Invalid(format!("class {class} has inconsistent dimension")));
        }
        if var.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(DatasetError::DegenerateCovariance { class });
        }
    }

    let mut sampler = ChaCha8Rng::seed_from_u64(spec.seed);
    sampler.set_stream(STREAM_SAMPLES);
    let total: usize = spec.counts.iter().sum();
    let mut features = Vec::with_capacity(total * d);
    let mut clean_targets = Vec::with_capacity(total);
    for (class, &count) in spec.counts.iter().enumerate() {
        let stds: Vec<f64> = spec.variances[class].iter().map(|v| v.sqrt()).collect();
        for _ in 0..count {
            for (mu, sd) in spec.centers[class].iter().zip(&stds) {
                let z: f64 = sampler.sample(StandardNormal);
                features.push((mu + sd * z) as f32);
            }
            clean_targets.push(class as u16);
        }
    }

    let mut mask_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    mask_rng.set_stream(STREAM_NOISE_MASK);
    let flipped: Vec<bool> = (0..total).map(|_| mask_rng.random::<f64>() < spec.label_noise_rate).collect();

    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    label_rng.set_stream(STREAM_NOISE_LABEL);
    let targets = clean_targets
        .iter()
        .zip(&flipped)
        .map(|(&y, &flip)| {
            if flip {
                let other = label_rng.random_range(0..n_classes - 1) as u16;
                if other >= y {
                    other + 1
                } else {
                    other
                }
            } else {
                y
            }
        })
        .collect();

    Ok(SynthDataset {
        dataset: Dataset::new(features, targets, d, n_classes)?,
        clean_targets,
        flipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn idx_two_images() {
        let images = idx_images(2, 2, 2, &[0, 255, 51, 102, 255, 0, 0, 0]);
        let labels = idx_labels(&[3, 1]);
        let ds = parse_idx(&images, Path::new("img"), &labels, Path::new("lbl")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.n_features(), 4);
        assert_eq!(ds.n_classes(), 4);
        assert_eq!(ds.features(0), &[0.0, 1.0, 0.2, 0.4]);
        assert_eq!(ds.targets(), &[3, 1]);
    }

    #[test]
    fn idx_errors() {
        let images = idx_images(2, 2, 2, &[0; 8]);
        let labels = idx_labels(&[0, 1, 1]);
        assert!(matches!(
            parse_idx(&images, Path::new("i"), &labels, Path::new("l")),
            Err(DatasetError::CountMismatch { images: 2, labels: 3 })
        ));
        let mut bad = images.clone();
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx(&bad, Path::new("i"), &idx_labels(&[0, 1]), Path::new("l")),
            Err(DatasetError::BadMagic { found: 0x801, .. })
        ));
        assert!(matches!(
            parse_idx(&images[..20], Path::new("i"), &idx_labels(&[0, 1]), Path::new("l")),
            Err(DatasetError::Truncated(_))
        ));
    }

    #[test]
    fn csv_parse() {
        let ds = parse_csv("0.1,0.2,1\n0.3,0.4,0".as_bytes()).unwrap();
        assert_eq!((ds.len(), ds.n_features(), ds.n_classes()), (2, 2, 2));
        assert_eq!(ds.features(1), &[0.3, 0.4]);
        assert_eq!(ds.targets(), &[1, 0]);
        assert!(matches!(parse_csv("0.1,0.2,1.5\n".as_bytes()), Err(DatasetError::BadLabel { row: 0, .. })));
        assert!(matches!(parse_csv("0.1,0.2,1\n0.3,0\n".as_bytes()), Err(DatasetError::Csv(_) | DatasetError::RaggedRow { .. })));
        assert!(parse_csv("nan,0.2,1\n".as_bytes()).is_err());
    }

    fn blobs(noise: f64, seed: u64) -> SynthSpec {
        SynthSpec {
            centers: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            variances: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            counts: vec![500, 500],
            label_noise_rate: noise,
            seed,
        }
    }

    #[test]
    fn noise_free_targets_match_generating_class() {
        let out = synth_dataset(&blobs(0.0, 7)).unwrap();
        assert_eq!(out.dataset.targets(), out.clean_targets.as_slice());
        assert!(out.flipped.iter().all(|f| !f));
    }

    #[test]
    fn flip_count_follows_mask() {
        let out = synth_dataset(&blobs(0.1, 11)).unwrap();
        let mismatches = out
            .dataset
            .targets()
            .iter()
            .zip(&out.clean_targets)
            .filter(|(a, b)| a != b)
            .count();
        let flips = out.flipped.iter().filter(|&&f| f).count();
        assert_eq!(mismatches, flips);
        // Binomial(1000, 0.1): mean 100, sd ~9.5
        assert!((flips as f64 - 100.0).abs() <= 3.0 * 90f64.sqrt(), "{flips}");
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_dataset(&blobs(0.1, 3)).unwrap();
        let b = synth_dataset(&blobs(0.1, 3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = synth_dataset(&blobs(0.1, 4)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn degenerate_covariance_rejected() {
        let mut spec = blobs(0.0, 1);
        spec.variances[1][0] = 0.0;
        assert!(matches!(synth_dataset(&spec), Err(DatasetError::DegenerateCovariance { class: 1 })));
        spec = blobs(1.0, 1);
        assert!(synth_dataset(&spec).is_err());
    }
}
