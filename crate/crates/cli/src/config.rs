//! Experiment configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use dynsel_core::scores::ScoreMethod;
use dynsel_core::trainer::{DatasetFormat, SynthSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        centers: Vec<Vec<f64>>,
        variances: Vec<Vec<f64>>,
        counts: Vec<usize>,
        #[serde(default)]
        label_noise_rate: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
    Csv {
        path: PathBuf,
    },
}

impl DatasetSpec {
    pub fn synth_spec(&self, seed: u64) -> Option<SynthSpec> {
        match self {
            DatasetSpec::Synthetic {
                centers,
                variances,
                counts,
                label_noise_rate,
            } => Some(SynthSpec {
                centers: centers.clone(),
                variances: variances.clone(),
                counts: counts.clone(),
                label_noise_rate: *label_noise_rate,
                seed,
            }),
            _ => None,
        }
    }

    pub fn file_format(&self) -> Option<DatasetFormat> {
        match self {
            DatasetSpec::Idx { images, labels } => Some(DatasetFormat::Idx {
                images: images.clone(),
                labels: labels.clone(),
            }),
            DatasetSpec::Csv { path } => Some(DatasetFormat::Csv { path: path.clone() }),
            DatasetSpec::Synthetic { .. } => None,
        }
    }
}

/// Fractions of the shuffled dataset assigned to each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 0.5,
            calibration: 0.25,
            test: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreSettings {
    /// Methods in the compact syntax accepted by `ScoreMethod::from_str`.
    pub methods: Vec<String>,
    /// Convex exponents for the weighting sweep.
    pub k_grid: Vec<f64>,
    /// Concave exponents (`k >= 1`) for the weighting sanity check.
    pub concave_k_grid: Vec<f64>,
    /// Checkpoint counts for the resolution sweep.
    pub resolutions: Vec<usize>,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        Self {
            methods: vec!["avg:k=0.05".into(), "min:k=0.05".into(), "sr".into()],
            k_grid: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
            concave_k_grid: vec![1.0, 2.0, 4.0, 8.0],
            resolutions: vec![5, 10, 25, 50],
        }
    }
}

impl ScoreSettings {
    pub fn parsed_methods(&self) -> Result<Vec<ScoreMethod>, CliError> {
        self.methods
            .iter()
            .map(|m| m.parse().map_err(|e| CliError::Validation(format!("{e}"))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Thresholds are fitted on the calibration split and reported on the test split.
    #[default]
    HeldOut,
    /// Thresholds are fitted and reported on the same (test) split.
    SameSplit,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::HeldOut => "held_out",
            Protocol::SameSplit => "same_split",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSettings {
    pub target_errors: Vec<f64>,
    pub target_coverages: Vec<f64>,
    pub protocol: Protocol,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            target_errors: vec![0.02, 0.01, 0.005],
            target_coverages: vec![1.0, 0.95, 0.9],
            protocol: Protocol::HeldOut,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    /// Training seeds; dataset and splits stay fixed at the experiment seed.
    pub seeds: Vec<u64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3, 4, 5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub splits: Splits,
    /// Hidden layer widths; input and output sizes come from the data.
    #[serde(default)]
    pub hidden: Option<Vec<usize>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub scores: ScoreSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let config: Self = toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut config = Self::from_toml(&text)?;
        // Dataset paths are relative to the config file.
        if let Some(base) = path.parent() {
            let rebase = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            match &mut config.dataset {
                DatasetSpec::Idx { images, labels } => {
                    rebase(images);
                    rebase(labels);
                }
                DatasetSpec::Csv { path } => rebase(path),
                DatasetSpec::Synthetic { .. } => {}
            }
        }
        Ok(config)
    }

    /// Checks everything that can be checked before any compute.
    pub fn validate(&self) -> Result<(), CliError> {
        let s = &self.splits;
        let fractions = [s.train, s.calibration, s.test];
        if fractions.iter().any(|&f| f.is_nan() || f <= 0.0) || fractions.iter().sum::<f64>() > 1.0 + 1e-12 {
            return Err(CliError::Validation(
                "split fractions must be positive and sum to at most 1".into(),
            ));
        }
        match &self.dataset {
            DatasetSpec::Idx { images, labels } => {
                for p in [images, labels] {
                    if !p.is_file() {
                        return Err(CliError::Validation(format!("dataset file {} does not exist", p.display())));
                    }
                }
            }
            DatasetSpec::Csv { path } => {
                if !path.is_file() {
                    return Err(CliError::Validation(format!("dataset file {} does not exist", path.display())));
                }
            }
            DatasetSpec::Synthetic { .. } => {
                self.dataset
                    .synth_spec(self.seed)
                    .map(|spec| validate_synth(&spec))
                    .transpose()?;
            }
        }
        if self.scores.methods.is_empty() {
            return Err(CliError::Validation("at least one score method is required".into()));
        }
        self.scores.parsed_methods()?;
        let grids_empty = self.scores.k_grid.is_empty()
            || self.scores.concave_k_grid.is_empty()
            || self.scores.resolutions.is_empty()
            || self.sweep.seeds.is_empty();
        if grids_empty {
            return Err(CliError::Validation("parameter grids must be non-empty".into()));
        }
        if self.scores.k_grid.iter().chain(&self.scores.concave_k_grid).any(|&k| k.is_nan() || k <= 0.0) {
            return Err(CliError::Validation("weight exponents must be positive".into()));
        }
        if self.scores.concave_k_grid.iter().any(|&k| k < 1.0) {
            return Err(CliError::Validation("concave exponents must be >= 1".into()));
        }
        if self.scores.resolutions.contains(&0) {
            return Err(CliError::Validation("resolutions must be positive".into()));
        }
        if self.evaluation.target_errors.iter().any(|e| !(0.0..1.0).contains(e)) {
            return Err(CliError::Validation("target errors must lie in [0, 1)".into()));
        }
        if self.evaluation.target_coverages.iter().any(|&c| !(c > 0.0 && c <= 1.0)) {
            return Err(CliError::Validation("target coverages must lie in (0, 1]".into()));
        }
        let mut train = self.train.clone();
        if train.layer_sizes.len() < 2 {
            train.layer_sizes = vec![1, 1];
        }
        train.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(())
    }
}

fn validate_synth(spec: &SynthSpec) -> Result<(), CliError> {
    if spec.centers.len() < 2 || spec.variances.len() != spec.centers.len() || spec.counts.len() != spec.centers.len() {
        return Err(CliError::Validation("synthetic dataset needs matching centers, variances and counts".into()));
    }
    if !(0.0..1.0).contains(&spec.label_noise_rate) {
        return Err(CliError::Validation("label_noise_rate must be in [0, 1)".into()));
    }
    Ok(())
}
