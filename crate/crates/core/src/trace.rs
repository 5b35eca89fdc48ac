//! Checkpoint prediction traces.
//!
//! A trace holds the predicted label of every evaluation example at every
//! recorded checkpoint, optionally with the full probability vectors and the
//! ground-truth labels. Checkpoint `T - 1` is always the final model.
//!
//! # File format
//!
//! ```text
//! magic      8 bytes   b"NNTDTRC1"
//! hlen       u32 LE    length of the JSON header in bytes
//! header     hlen      UTF-8 JSON (see `TraceHeader`)
//! labels     T*N u16 LE, checkpoint-major
//! probs      T*N*C f32 LE, present iff header.has_probabilities
//! truth      N u16 LE, present iff header.has_true_labels
//! ```

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"NNTDTRC1";
pub const FORMAT_VERSION: u32 = 1;

/// Tolerance on the row sums of stored probability vectors.
pub const PROBABILITY_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic: expected {:?}, found {found:?}", String::from_utf8_lossy(MAGIC))]
    BadMagic { found: Vec<u8> },
    #[error("unsupported trace format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("truncated payload while reading {section}")]
    Truncated { section: &'static str },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{0} trailing bytes after the last payload section")]
    TrailingBytes(usize),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("invalid trace: {0}")]
    Invalid(String),
    #[error("example index {index} out of range (n_examples = {n_examples})")]
    IndexOutOfRange { index: usize, n_examples: usize },
    #[error("checkpoint subset must be non-empty, strictly increasing and end with the final index {last}")]
    BadSubset { last: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Predictions of `T` checkpoints on `N` evaluation examples.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionTrace {
    n_checkpoints: usize,
    n_examples: usize,
    n_classes: usize,
    checkpoint_steps: Vec<u64>,
    labels: Vec<u16>,
    probabilities: Option<Vec<f32>>,
    true_labels: Option<Vec<u16>>,
    seed: u64,
}

/// Unvalidated components of a trace.
#[derive(Clone, Debug, Default)]
pub struct TraceParts {
    pub n_classes: usize,
    pub n_examples: usize,
    pub checkpoint_steps: Vec<u64>,
    /// Checkpoint-major `T x N` labels.
    pub labels: Vec<u16>,
    /// Checkpoint-major `T x N x C` probabilities.
    pub probabilities: Option<Vec<f32>>,
    pub true_labels: Option<Vec<u16>>,
    pub seed: u64,
}

impl PredictionTrace {
    pub fn new(parts: TraceParts) -> Result<Self, TraceError> {
        let TraceParts {
            n_classes,
            n_examples,
            checkpoint_steps,
            labels,
            probabilities,
            true_labels,
            seed,
        } = parts;
        let n_checkpoints = checkpoint_steps.len();
        if n_checkpoints == 0 || n_examples == 0 {
            return Err(TraceError::Invalid("trace needs at least one checkpoint and one example".into()));
        }
        if n_classes < 2 || n_classes > u16::MAX as usize + 1 {
            return Err(TraceError::Invalid(format!("n_classes must be in [2, 65536], got {n_classes}")));
        }
        if checkpoint_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TraceError::Invalid("checkpoint_steps must be strictly increasing".into()));
        }
        if labels.len() != n_checkpoints * n_examples {
            return Err(TraceError::DimensionMismatch(format!(
                "labels has {} entries, expected {n_checkpoints} x {n_examples}",
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(TraceError::Invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        if let Some(truth) = &true_labels {
            if truth.len() != n_examples {
                return Err(TraceError::DimensionMismatch(format!(
                    "true_labels has {} entries, expected {n_examples}",
                    truth.len()
                )));
            }
            if let Some(bad) = truth.iter().find(|&&l| l as usize >= n_classes) {
                return Err(TraceError::Invalid(format!("true label {bad} out of range for {n_classes} classes")));
            }
        }
        if let Some(probs) = &probabilities {
            if probs.len() != n_checkpoints * n_examples * n_classes {
                return Err(TraceError::DimensionMismatch(format!(
                    "probabilities has {} entries, expected {n_checkpoints} x {n_examples} x {n_classes}",
                    probs.len()
                )));
            }
            for (row_idx, row) in probs.chunks_exact(n_classes).enumerate() {
                let (t, i) = (row_idx / n_examples, row_idx % n_examples);
                if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                    return Err(TraceError::Invalid(format!("probability outside [0,1] at checkpoint {t}, example {i}")));
                }
                let sum: f64 = row.iter().map(|&p| p as f64).sum();
                if (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
                    return Err(TraceError::Invalid(format!(
                        "probabilities at checkpoint {t}, example {i} sum to {sum}"
                    )));
                }
                // The stored label must be a maximiser; f32 rounding may create ties.
                let label = labels[row_idx] as usize;
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if row[label] < max {
                    return Err(TraceError::Invalid(format!(
                        "label {label} is not the argmax of the probabilities at checkpoint {t}, example {i}"
                    )));
                }
            }
        }
        Ok(Self {
            n_checkpoints,
            n_examples,
            n_classes,
            checkpoint_steps,
            labels,
            probabilities,
            true_labels,
            seed,
        })
    }

    pub fn n_checkpoints(&self) -> usize {
        self.n_checkpoints
    }

    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn checkpoint_steps(&self) -> &[u64] {
        &self.checkpoint_steps
    }

    pub fn has_probabilities(&self) -> bool {
        self.probabilities.is_some()
    }

    pub fn true_labels(&self) -> Option<&[u16]> {
        self.true_labels.as_deref()
    }

    /// Labels predicted by checkpoint `t` for every example.
    pub fn checkpoint_labels(&self, t: usize) -> &[u16] {
        &self.labels[t * self.n_examples..(t + 1) * self.n_examples]
    }

    pub fn label(&self, t: usize, i: usize) -> u16 {
        self.labels[t * self.n_examples + i]
    }

    /// Prediction of the final model (checkpoint `T - 1`) for every example.
    pub fn final_labels(&self) -> &[u16] {
        self.checkpoint_labels(self.n_checkpoints - 1)
    }

    /// Label sequence of example `i` across all checkpoints.
    pub fn label_column(&self, i: usize) -> Vec<u16> {
        (0..self.n_checkpoints).map(|t| self.label(t, i)).collect()
    }

    pub fn probabilities(&self, t: usize, i: usize) -> Option<&[f32]> {
        self.probabilities.as_ref().map(|p| {
            let start = (t * self.n_examples + i) * self.n_classes;
            &p[start..start + self.n_classes]
        })
    }

    /// Whether the final model classifies each example correctly.
    pub fn correctness(&self) -> Option<Vec<bool>> {
        self.true_labels
            .as_ref()
            .map(|truth| self.final_labels().iter().zip(truth).map(|(p, y)| p == y).collect())
    }

    pub fn into_parts(self) -> TraceParts {
        TraceParts {
            n_classes: self.n_classes,
            n_examples: self.n_examples,
            checkpoint_steps: self.checkpoint_steps,
            labels: self.labels,
            probabilities: self.probabilities,
            true_labels: self.true_labels,
            seed: self.seed,
        }
    }

    /// Restricts the trace to the given examples, in the given order.
    pub fn select_examples(&self, indices: &[usize]) -> Result<PredictionTrace, TraceError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.n_examples) {
            return Err(TraceError::IndexOutOfRange {
                index: bad,
                n_examples: self.n_examples,
            });
        }
        let labels = (0..self.n_checkpoints)
            .flat_map(|t| indices.iter().map(move |&i| self.label(t, i)))
            .collect();
        let probabilities = self.probabilities.as_ref().map(|_| {
            (0..self.n_checkpoints)
                .flat_map(|t| indices.iter().flat_map(move |&i| self.probabilities(t, i).unwrap().iter().copied()))
                .collect()
        });
        PredictionTrace::new(TraceParts {
            n_classes: self.n_classes,
            n_examples: indices.len(),
            checkpoint_steps: self.checkpoint_steps.clone(),
            labels,
            probabilities,
            true_labels: self.true_labels.as_ref().map(|y| indices.iter().map(|&i| y[i]).collect()),
            seed: self.seed,
        })
    }

    /// Writes one row per `(checkpoint, example)` pair.
    ///
    /// Columns: `checkpoint, step, example, label, true_label, p_0 .. p_{C-1}`.
    /// The probability columns are present only when the trace stores them,
    /// and `true_label` is left empty when ground truth is absent.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), TraceError> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = ["checkpoint", "step", "example", "label", "true_label"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        if self.has_probabilities() {
            header.extend((0..self.n_classes).map(|c| format!("p_{c}")));
        }
        out.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for t in 0..self.n_checkpoints {
            for i in 0..self.n_examples {
                record.clear();
                record.push(t.to_string());
                record.push(self.checkpoint_steps[t].to_string());
                record.push(i.to_string());
                record.push(self.label(t, i).to_string());
                record.push(self.true_labels.as_ref().map(|y| y[i].to_string()).unwrap_or_default());
                if let Some(p) = self.probabilities(t, i) {
                    record.extend(p.iter().map(|x| x.to_string()));
                }
                out.write_record(&record)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads the CSV produced by [`PredictionTrace::write_csv`].
    ///
    /// The class count is taken from the probability columns when present,
    /// otherwise from `n_classes` or, failing that, the largest label seen.
    /// The CSV does not carry the seed; it is set to `seed`.
    pub fn read_csv<R: Read>(reader: R, n_classes: Option<usize>, seed: u64) -> Result<Self, TraceError> {
        let mut input = csv::Reader::from_reader(reader);
        let headers = input.headers()?.clone();
        let n_prob_cols = headers.iter().filter(|h| h.starts_with("p_")).count();
        // (checkpoint, step, example, label, true label, probabilities)
        type Row = (usize, u64, usize, u16, Option<u16>, Vec<f32>);
        let mut rows: Vec<Row> = Vec::new();
        for record in input.records() {
            let record = record?;
            let field = |k: usize| record.get(k).unwrap_or("");
            let parse_err = |what: &str| TraceError::Invalid(format!("bad {what} in csv row {:?}", record));
            let t: usize = field(0).parse().map_err(|_| parse_err("checkpoint"))?;
            let step: u64 = field(1).parse().map_err(|_| parse_err("step"))?;
            let i: usize = field(2).parse().map_err(|_| parse_err("example"))?;
            let label: u16 = field(3).parse().map_err(|_| parse_err("label"))?;
            let truth = match field(4) {
                "" => None,
                s => Some(s.parse().map_err(|_| parse_err("true_label"))?),
            };
            let probs = (0..n_prob_cols)
                .map(|c| field(5 + c).parse::<f32>().map_err(|_| parse_err("probability")))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((t, step, i, label, truth, probs));
        }
        let n_checkpoints = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let n_examples = rows.iter().map(|r| r.2 + 1).max().unwrap_or(0);
        if rows.len() != n_checkpoints * n_examples {
            return Err(TraceError::DimensionMismatch(format!(
                "csv has {} rows, expected {n_checkpoints} x {n_examples}",
                rows.len()
            )));
        }
        let n_classes = if n_prob_cols > 0 {
            n_prob_cols
        } else {
            n_classes.unwrap_or_else(|| {
                let max_label = rows.iter().flat_map(|r| std::iter::once(r.3).chain(r.4)).max().unwrap_or(0);
                (max_label as usize + 1).max(2)
            })
        };
        let mut steps = vec![0u64; n_checkpoints];
        let mut labels = vec![0u16; n_checkpoints * n_examples];
        let mut probabilities = (n_prob_cols > 0).then(|| vec![0f32; n_checkpoints * n_examples * n_classes]);
        let mut truth: Vec<Option<u16>> = vec![None; n_examples];
        for (t, step, i, label, y, probs) in rows {
            steps[t] = step;
            labels[t * n_examples + i] = label;
            if let Some(p) = probabilities.as_mut() {
                let start = (t * n_examples + i) * n_classes;
                p[start..start + n_classes].copy_from_slice(&probs);
            }
            if y.is_some() {
                truth[i] = y;
            }
        }
        let true_labels = truth.iter().all(Option::is_some).then(|| truth.into_iter().flatten().collect());
        Self::new(TraceParts {
            n_classes,
            n_examples,
            checkpoint_steps: steps,
            labels,
            probabilities,
            true_labels,
            seed,
        })
    }
}

/// Per-checkpoint disagreement with the final prediction for one example.
///
/// Entry `t` is `true` iff checkpoint `t` predicted a different label than the
/// final model. The last entry is always `false`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DisagreementVector(Vec<bool>);

impl DisagreementVector {
    /// Builds a disagreement vector from raw bits, enforcing the trailing zero.
    pub fn from_bits(bits: Vec<bool>) -> Result<Self, TraceError> {
        match bits.last() {
            None => Err(TraceError::Invalid("disagreement vector must be non-empty".into())),
            Some(true) => Err(TraceError::Invalid("the final checkpoint cannot disagree with itself".into())),
            Some(false) => Ok(Self(bits)),
        }
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn into_inner(self) -> Vec<bool> {
        self.0
    }
}

impl std::ops::Deref for DisagreementVector {
    type Target = [bool];

    fn deref(&self) -> &[bool] {
        &self.0
    }
}

impl fmt::Display for DisagreementVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (t, &a) in self.0.iter().enumerate() {
            if t > 0 {
                f.write_str(",")?;
            }
            f.write_str(if a { "1" } else { "0" })?;
        }
        f.write_str("]")
    }
}

pub fn disagreement_vector(trace: &PredictionTrace, i: usize) -> Result<DisagreementVector, TraceError> {
    if i >= trace.n_examples {
        return Err(TraceError::IndexOutOfRange {
            index: i,
            n_examples: trace.n_examples,
        });
    }
    let final_label = trace.label(trace.n_checkpoints - 1, i);
    Ok(DisagreementVector(
        (0..trace.n_checkpoints).map(|t| trace.label(t, i) != final_label).collect(),
    ))
}

/// Restricts a trace to the checkpoints in `keep`.
///
/// `keep` must be strictly increasing and end with the final index, since
/// every score is defined relative to the final prediction.
pub fn subsample_checkpoints(trace: &PredictionTrace, keep: &[usize]) -> Result<PredictionTrace, TraceError> {
    let last = trace.n_checkpoints - 1;
    if keep.last() != Some(&last) || keep.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TraceError::BadSubset { last });
    }
    let n = trace.n_examples;
    let c = trace.n_classes;
    let labels = keep.iter().flat_map(|&t| trace.checkpoint_labels(t).iter().copied()).collect();
    let probabilities = trace.probabilities.as_ref().map(|p| {
        keep.iter()
            .flat_map(|&t| p[t * n * c..(t + 1) * n * c].iter().copied())
            .collect()
    });
    Ok(PredictionTrace {
        n_checkpoints: keep.len(),
        n_examples: n,
        n_classes: c,
        checkpoint_steps: keep.iter().map(|&t| trace.checkpoint_steps[t]).collect(),
        labels,
        probabilities,
        true_labels: trace.true_labels.clone(),
        seed: trace.seed,
    })
}

/// Evenly spaced checkpoint subset of size `count` that always keeps the final index.
pub fn even_subset(n_checkpoints: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(1, n_checkpoints);
    let mut keep: Vec<usize> = (1..=count)
        .map(|j| (j * n_checkpoints).div_ceil(count) - 1)
        .collect();
    keep.dedup();
    keep
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceHeader {
    version: u32,
    n_checkpoints: usize,
    n_examples: usize,
    n_classes: usize,
    has_probabilities: bool,
    has_true_labels: bool,
    seed: u64,
    checkpoint_steps: Vec<u64>,
}

pub fn write_trace<W: Write>(trace: &PredictionTrace, mut writer: W) -> Result<(), TraceError> {
    let header = TraceHeader {
        version: FORMAT_VERSION,
        n_checkpoints: trace.n_checkpoints,
        n_examples: trace.n_examples,
        n_classes: trace.n_classes,
        has_probabilities: trace.probabilities.is_some(),
        has_true_labels: trace.true_labels.is_some(),
        seed: trace.seed,
        checkpoint_steps: trace.checkpoint_steps.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header.len())
        .map_err(|_| TraceError::Invalid("header larger than 4 GiB".into()))?;
    let mut buf = Vec::with_capacity(
        12 + header.len()
            + 2 * trace.labels.len()
            + 4 * trace.probabilities.as_ref().map_or(0, Vec::len)
            + 2 * trace.n_examples,
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&header_len.to_le_bytes());
    buf.extend_from_slice(&header);
    for l in &trace.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    if let Some(p) = &trace.probabilities {
        for x in p {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(y) = &trace.true_labels {
        for l in y {
            buf.extend_from_slice(&l.to_le_bytes());
        }
    }
    writer.write_all(&buf)?;
    writer.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], TraceError> {
        if self.bytes.len() < n {
            return Err(TraceError::Truncated { section });
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }
}

pub fn read_trace<R: Read>(mut reader: R) -> Result<PredictionTrace, TraceError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes };
    let magic = cur.take(MAGIC.len(), "magic").map_err(|_| TraceError::BadMagic { found: bytes.clone() })?;
    if magic != MAGIC {
        return Err(TraceError::BadMagic { found: magic.to_vec() });
    }
    let header_len = u32::from_le_bytes(cur.take(4, "header length")?.try_into().unwrap()) as usize;
    let header: TraceHeader = serde_json::from_slice(cur.take(header_len, "header")?)?;
    if header.version != FORMAT_VERSION {
        return Err(TraceError::VersionMismatch { found: header.version });
    }
    if header.checkpoint_steps.len() != header.n_checkpoints {
        return Err(TraceError::DimensionMismatch(format!(
            "header lists {} checkpoint steps for {} checkpoints",
            header.checkpoint_steps.len(),
            header.n_checkpoints
        )));
    }
    let cells = header
        .n_checkpoints
        .checked_mul(header.n_examples)
        .ok_or_else(|| TraceError::DimensionMismatch("T x N overflows".into()))?;
    let labels = cur
        .take(cells * 2, "labels")?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let probabilities = if header.has_probabilities {
        let n = cells
            .checked_mul(header.n_classes)
            .ok_or_else(|| TraceError::DimensionMismatch("T x N x C overflows".into()))?;
        Some(
            cur.take(n * 4, "probabilities")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        )
    } else {
        None
    };
    let true_labels = if header.has_true_labels {
        Some(
            cur.take(header.n_examples * 2, "true labels")?
                .chunks_exact(2)
                .map(|b| u16::from_le_bytes([b[0], b[1]]))
                .collect(),
        )
    } else {
        None
    };
    if !cur.bytes.is_empty() {
        return Err(TraceError::TrailingBytes(cur.bytes.len()));
    }
    PredictionTrace::new(TraceParts {
        n_classes: header.n_classes,
        n_examples: header.n_examples,
        checkpoint_steps: header.checkpoint_steps,
        labels,
        probabilities,
        true_labels,
        seed: header.seed,
    })
}
