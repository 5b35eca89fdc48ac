//! Selection scores. Every score is oriented so that higher means "more
//! acceptable"; a point is accepted when its score is `>= tau`.
//!
//! Label-based scores (`min`, `avg`, `jump`) use the checkpoint weights
//! `v_t = 1 - (t/T)^k`, `t = 1..T`, which decrease to `v_T = 0`. A point that
//! never disagrees with the final model receives [`ACCEPT_SENTINEL`].

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{disagreement_vector, PredictionTrace, PROBABILITY_SUM_TOL};

/// Score of a point with no disagreement; above every achievable `v_t`.
pub const ACCEPT_SENTINEL: f64 = 1.0;

/// Default weighting exponent.
pub const DEFAULT_K: f64 = 0.05;

/// `a_t` and `e_t` are considered equal below this distance.
pub const EQUALITY_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("weight exponent must be positive and finite, got {0}")]
    BadExponent(f64),
    #[error("need at least one checkpoint")]
    NoCheckpoints,
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, found: usize },
    #[error("bound undefined: every disagreeing checkpoint has a_t = e_t")]
    BoundUndefined,
    #[error("jump score needs at least 2 checkpoints")]
    TooFewCheckpoints,
    #[error("not a probability distribution: {0}")]
    NotADistribution(String),
    #[error("invalid e_t estimate: {0}")]
    BadEt(String),
    #[error("invalid variance weights: {0}")]
    BadWeights(String),
    #[error("method {0} needs stored probabilities, but the trace is label-only")]
    MissingProbabilities(String),
    #[error("cannot parse score method {input:?}: {reason}")]
    Parse { input: String, reason: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleShape {
    Convex,
    Concave,
}

/// Checkpoint weights `v_t = 1 - (t/T)^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub v: Vec<f64>,
    pub k: f64,
}

impl WeightSchedule {
    /// `k <= 1` bends the curve convexly, `k > 1` concavely.
    pub fn shape(&self) -> ScheduleShape {
        if self.k <= 1.0 {
            ScheduleShape::Convex
        } else {
            ScheduleShape::Concave
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

pub fn weight_schedule(n_checkpoints: usize, k: f64) -> Result<WeightSchedule, ScoreError> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(ScoreError::BadExponent(k));
    }
    if n_checkpoints == 0 {
        return Err(ScoreError::NoCheckpoints);
    }
    let t_max = n_checkpoints as f64;
    let v = (1..=n_checkpoints).map(|t| 1.0 - (t as f64 / t_max).powf(k)).collect();
    Ok(WeightSchedule { v, k })
}

/// Estimate of the expected disagreement `e_t` of correctly classified points.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EtModel {
    /// `e_t = 0` everywhere: the unadjusted scores.
    #[default]
    Zero,
    /// A measured sequence, e.g. the correct-population mean disagreement.
    Empirical { e: Vec<f64> },
    /// `e_t = 1 - (t/T)^k`.
    Smooth { k: f64 },
}

impl EtModel {
    /// Materialises the estimate for `T` checkpoints; `None` for [`EtModel::Zero`].
    pub fn resolve(&self, n_checkpoints: usize) -> Result<Option<Vec<f64>>, ScoreError> {
        match self {
            EtModel::Zero => Ok(None),
            EtModel::Empirical { e } => {
                if e.len() != n_checkpoints {
                    return Err(ScoreError::LengthMismatch {
                        what: "e_t estimate",
                        expected: n_checkpoints,
                        found: e.len(),
                    });
                }
                if e.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(ScoreError::BadEt("entries must lie in [0, 1]".into()));
                }
                if e.last().is_some_and(|&x| x != 0.0) {
                    return Err(ScoreError::BadEt("the final-checkpoint entry must be 0".into()));
                }
                Ok(Some(e.clone()))
            }
            EtModel::Smooth { k } => Ok(Some(weight_schedule(n_checkpoints, *k)?.v)),
        }
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<(), ScoreError> {
    if expected == found {
        Ok(())
    } else {
        Err(ScoreError::LengthMismatch { what, expected, found })
    }
}

/// Terms `clamp(v_t / |a_t - e_t|^2, 0, 1)` over disagreeing checkpoints with
/// `a_t != e_t`. Without an estimate the term is `v_t` itself.
fn adjusted_terms<'a>(
    a: &'a [bool],
    v: &'a [f64],
    e: Option<&'a [f64]>,
) -> impl Iterator<Item = f64> + 'a {
    a.iter().zip(v).enumerate().filter(|(_, (&a, _))| a).filter_map(move |(t, (_, &v))| match e {
        None => Some(v),
        Some(e) => {
            let gap = 1.0 - e[t];
            (gap.abs() > EQUALITY_TOL).then(|| (v / (gap * gap)).clamp(0.0, 1.0))
        }
    })
}

fn resolve_inputs(a: &[bool], v: &WeightSchedule, e: &EtModel) -> Result<Option<Vec<f64>>, ScoreError> {
    check_len("disagreement vector", v.len(), a.len())?;
    e.resolve(a.len())
}

/// Smallest weight among disagreeing checkpoints.
pub fn score_min(a: &[bool], v: &WeightSchedule, e: &EtModel) -> Result<f64, ScoreError> {
    let e = resolve_inputs(a, v, e)?;
    if !a.iter().any(|&x| x) {
        return Ok(ACCEPT_SENTINEL);
    }
    adjusted_terms(a, &v.v, e.as_deref())
        .reduce(f64::min)
        .ok_or(ScoreError::BoundUndefined)
}

/// Mean weight over disagreeing checkpoints.
pub fn score_avg(a: &[bool], v: &WeightSchedule, e: &EtModel) -> Result<f64, ScoreError> {
    let e = resolve_inputs(a, v, e)?;
    if !a.iter().any(|&x| x) {
        return Ok(ACCEPT_SENTINEL);
    }
    let (sum, count) = adjusted_terms(a, &v.v, e.as_deref()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if count == 0 {
        return Err(ScoreError::BoundUndefined);
    }
    Ok(sum / count as f64)
}

/// `1 - sum_{t>=2} v_t j_t`, where `j_t` flags a label change between
/// checkpoints `t-1` and `t`; clamped below at 0. With `normalized`, the sum
/// is divided by `sum_{t>=2} v_t` first.
pub fn score_jump(labels: &[u16], v: &WeightSchedule, normalized: bool) -> Result<f64, ScoreError> {
    check_len("label sequence", v.len(), labels.len())?;
    if labels.len() < 2 {
        return Err(ScoreError::TooFewCheckpoints);
    }
    let penalty: f64 = labels
        .windows(2)
        .zip(&v.v[1..])
        .filter(|(w, _)| w[0] != w[1])
        .map(|(_, &vt)| vt)
        .sum();
    let penalty = if normalized {
        let total: f64 = v.v[1..].iter().sum();
        if total > 0.0 {
            penalty / total
        } else {
            0.0
        }
    } else {
        penalty
    };
    Ok((1.0 - penalty).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Largest class probability.
    Confidence,
    /// Largest minus second largest probability.
    Gap,
    /// `sum_c p_c ln p_c`, i.e. minus the entropy.
    NegativeEntropy,
}

impl MetricKind {
    fn name(self) -> &'static str {
        match self {
            MetricKind::Confidence => "confidence",
            MetricKind::Gap => "gap",
            MetricKind::NegativeEntropy => "negative_entropy",
        }
    }
}

fn check_distribution(p: &[f64]) -> Result<(), ScoreError> {
    if p.len() < 2 {
        return Err(ScoreError::NotADistribution(format!("{} classes", p.len())));
    }
    if p.iter().any(|x| !(0.0..=1.0).contains(x)) {
        return Err(ScoreError::NotADistribution("entry outside [0, 1]".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PROBABILITY_SUM_TOL {
        return Err(ScoreError::NotADistribution(format!("sums to {sum}")));
    }
    Ok(())
}

pub fn continuous_metric(p: &[f64], kind: MetricKind) -> Result<f64, ScoreError> {
    check_distribution(p)?;
    Ok(match kind {
        MetricKind::Confidence => p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        MetricKind::Gap => {
            let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for &x in p {
                if x > first {
                    second = first;
                    first = x;
                } else if x > second {
                    second = x;
                }
            }
            first - second
        }
        MetricKind::NegativeEntropy => p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum(),
    })
}

/// Negated weighted variance `-sum_t w_t (z_t - mu)^2` with the unweighted mean `mu`.
pub fn score_var(z: &[f64], w: &[f64]) -> Result<f64, ScoreError> {
    check_len("variance weights", z.len(), w.len())?;
    if z.is_empty() {
        return Err(ScoreError::NoCheckpoints);
    }
    if w.iter().any(|&x| x.is_nan() || x < 0.0) || w.windows(2).any(|p| p[1] < p[0]) {
        return Err(ScoreError::BadWeights("weights must be non-negative and non-decreasing".into()));
    }
    let mu = z.iter().sum::<f64>() / z.len() as f64;
    Ok(-z.iter().zip(w).map(|(&zt, &wt)| wt * (zt - mu) * (zt - mu)).sum::<f64>())
}

/// Increasing variance weights `w_t = (t/T)^k_w`.
pub fn variance_weights(n_checkpoints: usize, k_w: f64) -> Result<Vec<f64>, ScoreError> {
    if !(k_w > 0.0 && k_w.is_finite()) {
        return Err(ScoreError::BadExponent(k_w));
    }
    let t_max = n_checkpoints as f64;
    Ok((1..=n_checkpoints).map(|t| (t as f64 / t_max).powf(k_w)).collect())
}

/// Maximum softmax probability of the final model.
pub fn softmax_response(p_final: &[f64]) -> Result<f64, ScoreError> {
    continuous_metric(p_final, MetricKind::Confidence)
}

/// A scoring rule with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum ScoreMethod {
    Min {
        k: f64,
        #[serde(default)]
        et: EtModel,
    },
    Avg {
        k: f64,
        #[serde(default)]
        et: EtModel,
    },
    Jump {
        k: f64,
        #[serde(default)]
        normalized: bool,
    },
    Var {
        metric: MetricKind,
        #[serde(default = "default_kw")]
        k_w: f64,
    },
    SoftmaxResponse,
}

fn default_kw() -> f64 {
    1.0
}

impl ScoreMethod {
    pub fn needs_probabilities(&self) -> bool {
        matches!(self, ScoreMethod::Var { .. } | ScoreMethod::SoftmaxResponse)
    }

    /// Stable, filesystem-safe identifier, e.g. `avg_k0.05` or `var_gap_kw1`.
    pub fn id(&self) -> String {
        fn et_suffix(et: &EtModel) -> String {
            match et {
                EtModel::Zero => String::new(),
                EtModel::Empirical { .. } => "_et-empirical".into(),
                EtModel::Smooth { k } => format!("_et-smooth{k}"),
            }
        }
        match self {
            ScoreMethod::Min { k, et } => format!("min_k{k}{}", et_suffix(et)),
            ScoreMethod::Avg { k, et } => format!("avg_k{k}{}", et_suffix(et)),
            ScoreMethod::Jump { k, normalized } => {
                format!("jump_k{k}{}", if *normalized { "_norm" } else { "" })
            }
            ScoreMethod::Var { metric, k_w } => format!("var_{}_kw{k_w}", metric.name()),
            ScoreMethod::SoftmaxResponse => "sr".into(),
        }
    }
}

impl fmt::Display for ScoreMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

/// Parses compact method descriptions used on the command line:
///
/// `avg`, `avg:k=0.05`, `min:k=0.5:et=empirical`, `min:et=smooth:ke=0.3`,
/// `jump:k=0.05:normalized`, `var:metric=gap:kw=1`, `sr`.
///
/// `et=empirical` parses to an empty estimate which the caller fills in.
impl FromStr for ScoreMethod {
    type Err = ScoreError;

    fn from_str(input: &str) -> Result<Self, ScoreError> {
        let err = |reason: &str| ScoreError::Parse {
            input: input.to_string(),
            reason: reason.to_string(),
        };
        let mut parts = input.trim().split(':');
        let name = parts.next().unwrap_or("");
        let mut k = DEFAULT_K;
        let mut k_e = None;
        let mut k_w = 1.0;
        let mut et_kind = None;
        let mut metric = None;
        let mut normalized = false;
        for part in parts {
            let (key, value) = part.split_once('=').unwrap_or((part, ""));
            let num = || value.parse::<f64>().map_err(|_| err(&format!("bad number for {key}")));
            match key {
                "k" => k = num()?,
                "ke" => k_e = Some(num()?),
                "kw" => k_w = num()?,
                "et" => et_kind = Some(value.to_string()),
                "normalized" | "norm" => normalized = true,
                "metric" => {
                    metric = Some(match value {
                        "confidence" | "conf" => MetricKind::Confidence,
                        "gap" => MetricKind::Gap,
                        "negative_entropy" | "entropy" | "ent" => MetricKind::NegativeEntropy,
                        _ => return Err(err("unknown metric")),
                    })
                }
                _ => return Err(err(&format!("unknown parameter {key:?}"))),
            }
        }
        let et = match et_kind.as_deref() {
            None | Some("zero") => EtModel::Zero,
            Some("empirical") => EtModel::Empirical { e: Vec::new() },
            Some("smooth") => EtModel::Smooth {
                k: k_e.ok_or_else(|| err("et=smooth needs ke=<exponent>"))?,
            },
            Some(_) => return Err(err("et must be zero, empirical or smooth")),
        };
        Ok(match name {
            "min" => ScoreMethod::Min { k, et },
            "avg" => ScoreMethod::Avg { k, et },
            "jump" => ScoreMethod::Jump { k, normalized },
            "var" => ScoreMethod::Var {
                metric: metric.ok_or_else(|| err("var needs metric=<confidence|gap|negative_entropy>"))?,
                k_w,
            },
            "sr" | "softmax_response" => ScoreMethod::SoftmaxResponse,
            _ => return Err(err("unknown method")),
        })
    }
}

/// Where a scored set came from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub trace: String,
    pub n_checkpoints: usize,
    /// Original checkpoint indices kept, when the trace was subsampled.
    pub subsample: Option<Vec<usize>>,
}

/// One score per trace example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub method: ScoreMethod,
    pub provenance: Provenance,
    pub scores: Vec<f64>,
    pub final_labels: Vec<u16>,
    pub true_labels: Option<Vec<u16>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    example: usize,
    score: f64,
    final_label: u16,
    true_label: Option<u16>,
}

impl ScoredSet {
    pub fn id(&self) -> String {
        self.method.id()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn correctness(&self) -> Option<Vec<bool>> {
        self.true_labels
            .as_ref()
            .map(|y| self.final_labels.iter().zip(y).map(|(a, b)| a == b).collect())
    }

    /// Columns `example, score, final_label, true_label`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), ScoreError> {
        let mut out = csv::Writer::from_writer(writer);
        for (i, (&score, &final_label)) in self.scores.iter().zip(&self.final_labels).enumerate() {
            out.serialize(ScoreRow {
                example: i,
                score,
                final_label,
                true_label: self.true_labels.as_ref().map(|y| y[i]),
            })?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a scored-set CSV; the method is not stored in the CSV and must be supplied.
    pub fn read_csv<R: Read>(reader: R, method: ScoreMethod) -> Result<Self, ScoreError> {
        let mut input = csv::Reader::from_reader(reader);
        let mut rows: Vec<ScoreRow> = input.deserialize().collect::<Result<_, _>>()?;
        rows.sort_by_key(|r| r.example);
        if rows.iter().enumerate().any(|(i, r)| r.example != i) {
            return Err(ScoreError::Parse {
                input: "scored csv".into(),
                reason: "example indices must be 0..N without gaps".into(),
            });
        }
        let true_labels = rows.iter().map(|r| r.true_label).collect::<Option<Vec<_>>>();
        Ok(Self {
            method,
            provenance: Provenance::default(),
            scores: rows.iter().map(|r| r.score).collect(),
            final_labels: rows.iter().map(|r| r.final_label).collect(),
            true_labels,
        })
    }
}

fn probs_f64(trace: &PredictionTrace, t: usize, i: usize) -> Vec<f64> {
    trace
        .probabilities(t, i)
        .map(|p| p.iter().map(|&x| x as f64).collect())
        .unwrap_or_default()
}

/// Applies `method` to every example of `trace`.
pub fn score_trace(trace: &PredictionTrace, method: &ScoreMethod) -> Result<ScoredSet, ScoreError> {
    if method.needs_probabilities() && !trace.has_probabilities() {
        return Err(ScoreError::MissingProbabilities(method.id()));
    }
    let n_checkpoints = trace.n_checkpoints();
    let n = trace.n_examples();
    let scores = match method {
        ScoreMethod::Min { k, et } | ScoreMethod::Avg { k, et } => {
            let v = weight_schedule(n_checkpoints, *k)?;
            // Validate once so that per-example calls cannot fail on the estimate.
            et.resolve(n_checkpoints)?;
            let is_min = matches!(method, ScoreMethod::Min { .. });
            (0..n)
                .map(|i| {
                    let a = disagreement_vector(trace, i)?;
                    if is_min {
                        score_min(&a, &v, et)
                    } else {
                        score_avg(&a, &v, et)
                    }
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        ScoreMethod::Jump { k, normalized } => {
            let v = weight_schedule(n_checkpoints, *k)?;
            if n_checkpoints < 2 {
                return Err(ScoreError::TooFewCheckpoints);
            }
            (0..n)
                .map(|i| score_jump(&trace.label_column(i), &v, *normalized))
                .collect::<Result<Vec<_>, _>>()?
        }
        ScoreMethod::Var { metric, k_w } => {
            let w = variance_weights(n_checkpoints, *k_w)?;
            (0..n)
                .map(|i| {
                    let z = (0..n_checkpoints)
                        .map(|t| continuous_metric(&probs_f64(trace, t, i), *metric))
                        .collect::<Result<Vec<_>, _>>()?;
                    score_var(&z, &w)
                })
                .collect::<Result<Vec<_>, _>>()?
        }
        ScoreMethod::SoftmaxResponse => (0..n)
            .map(|i| softmax_response(&probs_f64(trace, n_checkpoints - 1, i)))
            .collect::<Result<Vec<_>, _>>()?,
    };
    Ok(ScoredSet {
        method: method.clone(),
        provenance: Provenance {
            trace: "in-memory".into(),
            n_checkpoints,
            subsample: None,
        },
        scores,
        final_labels: trace.final_labels().to_vec(),
        true_labels: trace.true_labels().map(<[u16]>::to_vec),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceParts;

    fn bits(s: &[u8]) -> Vec<bool> {
        s.iter().map(|&x| x == 1).collect()
    }

    fn v4() -> WeightSchedule {
        weight_schedule(4, 1.0).unwrap()
    }

    #[test]
    fn schedule_values() {
        assert_eq!(v4().v, vec![0.75, 0.5, 0.25, 0.0]);
        let s = weight_schedule(4, 0.05).unwrap();
        assert!((s.v[0] - (1.0 - 0.25f64.powf(0.05))).abs() < 1e-15);
        assert!((s.v[0] - 0.0670).abs() < 5e-5);
        for t in 1..20 {
            for k in [0.01, 0.05, 0.5, 1.0, 2.0, 8.0] {
                let s = weight_schedule(t, k).unwrap();
                assert_eq!(*s.v.last().unwrap(), 0.0);
                assert!(s.v.windows(2).all(|w| w[0] > w[1]));
            }
        }
        assert_eq!(weight_schedule(3, 3.0).unwrap().shape(), ScheduleShape::Concave);
        assert!(matches!(weight_schedule(4, 0.0), Err(ScoreError::BadExponent(_))));
        assert!(matches!(weight_schedule(4, -1.0), Err(ScoreError::BadExponent(_))));
        assert!(matches!(weight_schedule(0, 1.0), Err(ScoreError::NoCheckpoints)));
    }

    #[test]
    fn min_and_avg_examples() {
        let v = v4();
        let z = EtModel::Zero;
        assert_eq!(score_min(&bits(&[1, 0, 1, 0]), &v, &z).unwrap(), 0.25);
        assert_eq!(score_min(&bits(&[0, 0, 0, 0]), &v, &z).unwrap(), 1.0);
        assert_eq!(score_avg(&bits(&[1, 0, 1, 0]), &v, &z).unwrap(), 0.5);
        assert_eq!(score_avg(&bits(&[1, 1, 1, 0]), &v, &z).unwrap(), 0.5);
        assert_eq!(score_avg(&bits(&[0, 0, 0, 0]), &v, &z).unwrap(), 1.0);
        assert!(matches!(
            score_min(&bits(&[1, 0, 0]), &v, &z),
            Err(ScoreError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn adjusted_min_is_clamped() {
        let et = EtModel::Empirical { e: vec![0.5, 0.0, 0.0, 0.0] };
        assert_eq!(score_min(&bits(&[1, 0, 0, 0]), &v4(), &et).unwrap(), 1.0);
        let et = EtModel::Empirical { e: vec![0.0, 0.5, 0.0, 0.0] };
        // t=1: 0.75 / 1, t=2: 0.5 / 0.25 = 2 -> 1
        assert_eq!(score_min(&bits(&[1, 1, 0, 0]), &v4(), &et).unwrap(), 0.75);
        assert_eq!(score_avg(&bits(&[1, 1, 0, 0]), &v4(), &et).unwrap(), 0.875);
    }

    #[test]
    fn adjusted_bound_undefined() {
        let et = EtModel::Empirical { e: vec![1.0, 0.0, 0.0, 0.0] };
        assert!(matches!(score_min(&bits(&[1, 0, 0, 0]), &v4(), &et), Err(ScoreError::BoundUndefined)));
        assert!(matches!(score_avg(&bits(&[1, 0, 0, 0]), &v4(), &et), Err(ScoreError::BoundUndefined)));
        // No disagreement at all is still accepted.
        assert_eq!(score_min(&bits(&[0, 0, 0, 0]), &v4(), &et).unwrap(), 1.0);
    }

    #[test]
    fn et_validation() {
        let bad_last = EtModel::Empirical { e: vec![0.1, 0.2] };
        assert!(matches!(bad_last.resolve(2), Err(ScoreError::BadEt(_))));
        let out_of_range = EtModel::Empirical { e: vec![1.5, 0.0] };
        assert!(out_of_range.resolve(2).is_err());
        let smooth = EtModel::Smooth { k: 1.0 }.resolve(4).unwrap().unwrap();
        assert_eq!(smooth, vec![0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn jump_examples() {
        let v = v4();
        assert_eq!(score_jump(&[2, 2, 2, 2], &v, false).unwrap(), 1.0);
        assert_eq!(score_jump(&[0, 0, 1, 1], &v, false).unwrap(), 0.75);
        assert_eq!(score_jump(&[0, 1, 0, 1], &v, false).unwrap(), 0.25);
        // normalized: 0.75 / (0.5 + 0.25 + 0)
        assert_eq!(score_jump(&[0, 1, 0, 1], &v, true).unwrap(), 0.0);
        assert_eq!(score_jump(&[0, 0, 1, 1], &v, true).unwrap(), 1.0 - 0.25 / 0.75);
        let long = weight_schedule(8, 1.0).unwrap();
        assert_eq!(score_jump(&[0, 1, 0, 1, 0, 1, 0, 1], &long, false).unwrap(), 0.0);
        assert!(matches!(
            score_jump(&[0], &weight_schedule(1, 1.0).unwrap(), false),
            Err(ScoreError::TooFewCheckpoints)
        ));
    }

    #[test]
    fn metric_examples() {
        let half = [0.5, 0.5];
        assert_eq!(continuous_metric(&half, MetricKind::Confidence).unwrap(), 0.5);
        assert_eq!(continuous_metric(&half, MetricKind::Gap).unwrap(), 0.0);
        assert!((continuous_metric(&half, MetricKind::NegativeEntropy).unwrap() + std::f64::consts::LN_2).abs() < 1e-15);
        let hot = [1.0, 0.0];
        assert_eq!(continuous_metric(&hot, MetricKind::Confidence).unwrap(), 1.0);
        assert_eq!(continuous_metric(&hot, MetricKind::Gap).unwrap(), 1.0);
        assert_eq!(continuous_metric(&hot, MetricKind::NegativeEntropy).unwrap(), 0.0);
        let p = [0.7, 0.2, 0.1];
        assert_eq!(continuous_metric(&p, MetricKind::Confidence).unwrap(), 0.7);
        assert!((continuous_metric(&p, MetricKind::Gap).unwrap() - 0.5).abs() < 1e-15);
        let ent: f64 = 0.7 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln();
        assert!((ent + 0.8018).abs() < 5e-5);
        assert!((continuous_metric(&p, MetricKind::NegativeEntropy).unwrap() - ent).abs() < 1e-15);
        assert!(continuous_metric(&[0.7, 0.7], MetricKind::Gap).is_err());
        assert!(continuous_metric(&[1.2, -0.2], MetricKind::Gap).is_err());
    }

    #[test]
    fn var_examples() {
        assert_eq!(score_var(&[0.3; 5], &[0.2, 0.4, 0.6, 0.8, 1.0]).unwrap(), 0.0);
        assert_eq!(score_var(&[0.0, 1.0], &[0.5, 1.0]).unwrap(), -0.375);
        let w = [0.25, 0.5, 0.75, 1.0];
        let z = [0.25, 1.0, 0.5, 0.75];
        let shifted: Vec<f64> = z.iter().map(|x| x + 4.0).collect();
        assert_eq!(score_var(&z, &w).unwrap(), score_var(&shifted, &w).unwrap());
        assert!(matches!(score_var(&[0.0, 1.0], &[1.0]), Err(ScoreError::LengthMismatch { .. })));
        assert!(score_var(&[0.0, 1.0], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn softmax_response_examples() {
        assert_eq!(softmax_response(&[0.9, 0.1]).unwrap(), 0.9);
        assert_eq!(softmax_response(&[0.25; 4]).unwrap(), 0.25);
        assert_eq!(softmax_response(&[0.05, 0.35, 0.60]).unwrap(), 0.60);
        assert!(softmax_response(&[0.5, 0.6]).is_err());
    }

    fn two_example_trace() -> PredictionTrace {
        // example 0 constant 1; example 1 disagrees at checkpoint 2 only.
        PredictionTrace::new(TraceParts {
            n_classes: 2,
            n_examples: 2,
            checkpoint_steps: vec![1, 2, 3, 4],
            labels: vec![1, 0, 1, 0, 1, 1, 1, 0],
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn score_trace_per_example() {
        let trace = two_example_trace();
        let out = score_trace(&trace, &ScoreMethod::Min { k: 1.0, et: EtModel::Zero }).unwrap();
        assert_eq!(out.scores, vec![1.0, 0.25]);
        assert_eq!(out.final_labels, vec![1, 0]);
        assert!(matches!(
            score_trace(&trace, &ScoreMethod::SoftmaxResponse),
            Err(ScoreError::MissingProbabilities(_))
        ));
    }

    #[test]
    fn method_parsing_and_ids() {
        let m: ScoreMethod = "avg:k=0.05".parse().unwrap();
        assert_eq!(m, ScoreMethod::Avg { k: 0.05, et: EtModel::Zero });
        assert_eq!(m.id(), "avg_k0.05");
        assert_eq!("sr".parse::<ScoreMethod>().unwrap(), ScoreMethod::SoftmaxResponse);
        assert_eq!(
            "var:metric=gap:kw=2".parse::<ScoreMethod>().unwrap(),
            ScoreMethod::Var { metric: MetricKind::Gap, k_w: 2.0 }
        );
        assert_eq!(
            "min:et=smooth:ke=0.3".parse::<ScoreMethod>().unwrap().id(),
            "min_k0.05_et-smooth0.3"
        );
        assert!("jump:k=0.1:normalized".parse::<ScoreMethod>().unwrap().id().ends_with("_norm"));
        assert!("bogus".parse::<ScoreMethod>().is_err());
        assert!("var".parse::<ScoreMethod>().is_err());
        assert!("avg:k=abc".parse::<ScoreMethod>().is_err());
    }

    #[test]
    fn scored_set_csv_round_trip() {
        let trace = two_example_trace();
        let method = ScoreMethod::Avg { k: 0.05, et: EtModel::Zero };
        let set = score_trace(&trace, &method).unwrap();
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("example,score,final_label,true_label\n"));
        let back = ScoredSet::read_csv(buf.as_slice(), method).unwrap();
        assert_eq!(back.scores, set.scores);
        assert_eq!(back.final_labels, set.final_labels);
        assert_eq!(back.true_labels, None);
    }
}
