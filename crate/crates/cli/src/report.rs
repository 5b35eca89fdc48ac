//! Report payloads written by `evaluate` and `sweep`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::CliError;

/// JSON has no infinities; thresholds of `±inf` are written as the strings
/// `"-inf"` / `"inf"`.
pub mod json_threshold {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_finite() {
            Repr::Number(*value).serialize(s)
        } else if value.is_nan() {
            Repr::Text("nan".into()).serialize(s)
        } else if *value > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Text("-inf".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(x) => Ok(x),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One calibrated operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    /// `error` or `coverage`.
    pub target_kind: String,
    pub target: f64,
    #[serde(with = "json_threshold")]
    pub tau: f64,
    pub achieved: bool,
    pub calibration_coverage: f64,
    pub calibration_error: Option<f64>,
    pub coverage: f64,
    pub error: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub n_report: usize,
    /// Error of the final model on the reporting split (no abstention).
    pub full_coverage_error: f64,
    /// `None` when the reporting split has only one correctness class.
    pub auroc: Option<f64>,
    pub curve_file: String,
    pub rows: Vec<ReportRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub protocol: String,
    pub n_calibration: usize,
    pub n_report: usize,
    pub methods: Vec<MethodReport>,
}

impl Report {
    pub fn rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.methods.iter().flat_map(|m| &m.rows)
    }

    pub fn method(&self, id: &str) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == id)
    }

    pub fn write_rows_csv<W: Write>(&self, writer: W) -> Result<(), CliError> {
        let mut out = csv::Writer::from_writer(writer);
        for row in self.rows() {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_rows_csv<R: Read>(reader: R) -> Result<Vec<ReportRow>, CliError> {
        Ok(csv::Reader::from_reader(reader).deserialize().collect::<Result<_, _>>()?)
    }
}

/// One (seed, series, target) cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    /// `methods`, `k_convex`, `k_concave` or `resolution`.
    pub study: String,
    pub method: String,
    pub n_checkpoints: usize,
    pub target_kind: String,
    pub target: f64,
    pub coverage: f64,
    pub error: Option<f64>,
    pub achieved: bool,
    pub auroc: Option<f64>,
}

/// Mean and sample standard deviation across seeds of per-seed calibrated results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummaryRow {
    pub study: String,
    pub method: String,
    pub n_checkpoints: usize,
    pub target_kind: String,
    pub target: f64,
    pub n_runs: usize,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    /// Runs where the accept set was non-empty.
    pub n_error: usize,
    pub error_mean: Option<f64>,
    pub error_std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub protocol: String,
    pub aggregation: String,
    pub runs: Vec<SweepRow>,
    pub summary: Vec<SweepSummaryRow>,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

impl SweepReport {
    pub fn summarize(runs: &[SweepRow]) -> Vec<SweepSummaryRow> {
        let mut keys: Vec<(String, String, usize, String, f64)> = Vec::new();
        for r in runs {
            let key = (r.study.clone(), r.method.clone(), r.n_checkpoints, r.target_kind.clone(), r.target);
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(study, method, n_checkpoints, target_kind, target)| {
                let cell: Vec<&SweepRow> = runs
                    .iter()
                    .filter(|r| {
                        r.study == study
                            && r.method == method
                            && r.n_checkpoints == n_checkpoints
                            && r.target_kind == target_kind
                            && r.target == target
                    })
                    .collect();
                let coverages: Vec<f64> = cell.iter().map(|r| r.coverage).collect();
                let errors: Vec<f64> = cell.iter().filter_map(|r| r.error).collect();
                let (coverage_mean, coverage_std) = mean_std(&coverages);
                let (error_mean, error_std) = if errors.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_std(&errors);
                    (Some(m), Some(s))
                };
                SweepSummaryRow {
                    study,
                    method,
                    n_checkpoints,
                    target_kind,
                    target,
                    n_runs: cell.len(),
                    coverage_mean,
                    coverage_std,
                    n_error: errors.len(),
                    error_mean,
                    error_std,
                }
            })
            .collect()
    }

    pub fn write_runs_csv<W: Write>(&self, writer: W) -> Result<(), CliError> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.runs {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<(), CliError> {
        let mut out = csv::Writer::from_writer(writer);
        for row in &self.summary {
            out.serialize(row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_runs_csv<R: Read>(reader: R) -> Result<Vec<SweepRow>, CliError> {
        Ok(csv::Reader::from_reader(reader).deserialize().collect::<Result<_, _>>()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn infinite_thresholds_survive_json() {
        let row = ReportRow {
            method: "sr".into(),
            target_kind: "error".into(),
            target: 0.01,
            tau: f64::NEG_INFINITY,
            achieved: true,
            calibration_coverage: 1.0,
            calibration_error: Some(0.0),
            coverage: 1.0,
            error: Some(0.0),
        };
        let text = serde_json::to_string(&row).unwrap();
        assert!(text.contains("\"tau\":\"-inf\""));
        let back: ReportRow = serde_json::from_str(&text).unwrap();
        assert_eq!(back, row);
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        let row = |seed, coverage, error| SweepRow {
            seed,
            study: "methods".into(),
            method: "sr".into(),
            n_checkpoints: 10,
            target_kind: "error".into(),
            target: 0.01,
            coverage,
            error,
            achieved: error.is_some(),
            auroc: None,
        };
        let summary = SweepReport::summarize(&[row(1, 0.5, Some(0.01)), row(2, 0.0, None)]);
        assert_eq!(summary.len(), 1);
        assert_eq!(summary[0].n_runs, 2);
        assert_eq!(summary[0].coverage_mean, 0.25);
        assert_eq!(summary[0].n_error, 1);
        assert_eq!(summary[0].error_mean, Some(0.01));
    }
}
