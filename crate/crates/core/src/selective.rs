//! Selective classifiers built from scores: gating, coverage and selective
//! accuracy, risk-coverage curves and threshold calibration.
//!
//! A point is accepted iff `score >= tau`. Between two consecutive observed
//! score values the accept set does not change, so every search below runs
//! over the distinct observed scores only.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SelectiveError {
    #[error("length mismatch: {0} scores vs {1} correctness flags")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("scores must be finite")]
    NonFinite,
    #[error("target {0} out of range")]
    BadTarget(f64),
    #[error("AUROC needs both correct and incorrect points")]
    OneClass,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Accept mask with its coverage and selective accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectiveResult {
    pub threshold: f64,
    pub mask: Vec<bool>,
    pub n_accepted: usize,
    pub coverage: f64,
    /// `None` when nothing is accepted.
    pub accuracy: Option<f64>,
    /// Fraction of accepted points that are misclassified; `None` when nothing is accepted.
    pub error: Option<f64>,
}

pub fn gate(scores: &[f64], tau: f64) -> Vec<bool> {
    scores.iter().map(|&s| s >= tau).collect()
}

pub fn coverage_accuracy(mask: &[bool], correct: &[bool]) -> Result<SelectiveResult, SelectiveError> {
    if mask.len() != correct.len() {
        return Err(SelectiveError::LengthMismatch(mask.len(), correct.len()));
    }
    if mask.is_empty() {
        return Err(SelectiveError::Empty);
    }
    let accepted = mask.iter().filter(|&&m| m).count();
    let right = mask.iter().zip(correct).filter(|(&m, &c)| m && c).count();
    Ok(rates(f64::NAN, mask.to_vec(), accepted, right))
}

fn rates(threshold: f64, mask: Vec<bool>, accepted: usize, right: usize) -> SelectiveResult {
    let n = mask.len();
    let (accuracy, error) = if accepted == 0 {
        (None, None)
    } else {
        (
            Some(right as f64 / accepted as f64),
            Some((accepted - right) as f64 / accepted as f64),
        )
    };
    SelectiveResult {
        threshold,
        mask,
        n_accepted: accepted,
        coverage: accepted as f64 / n as f64,
        accuracy,
        error,
    }
}

/// Evaluates the selective classifier `score >= tau`.
pub fn evaluate_threshold(scores: &[f64], correct: &[bool], tau: f64) -> Result<SelectiveResult, SelectiveError> {
    let mut result = coverage_accuracy(&gate(scores, tau), correct)?;
    result.threshold = tau;
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub tau: f64,
    pub coverage: f64,
    pub selective_error: Option<f64>,
}

/// One point per distinct accept set, ordered by increasing threshold.
///
/// The first point (`tau = -inf`) accepts everything and the last
/// (`tau = +inf`) accepts nothing; in between `tau` runs over the distinct
/// scores above the minimum. With `N` distinct scores the curve has `N + 1`
/// points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskCoverageCurve {
    pub points: Vec<CurvePoint>,
}

fn validate(scores: &[f64], correct: &[bool]) -> Result<(), SelectiveError> {
    if scores.len() != correct.len() {
        return Err(SelectiveError::LengthMismatch(scores.len(), correct.len()));
    }
    if scores.is_empty() {
        return Err(SelectiveError::Empty);
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SelectiveError::NonFinite);
    }
    Ok(())
}

/// Groups of tied scores in descending order, each with its size and number of correct points.
fn descending_blocks(scores: &[f64], correct: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut blocks: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let hit = usize::from(correct[i]);
        match blocks.last_mut() {
            Some(last) if last.0 == scores[i] => {
                last.1 += 1;
                last.2 += hit;
            }
            _ => blocks.push((scores[i], 1, hit)),
        }
    }
    blocks
}

pub fn risk_coverage_curve(scores: &[f64], correct: &[bool]) -> Result<RiskCoverageCurve, SelectiveError> {
    validate(scores, correct)?;
    let n = scores.len() as f64;
    let blocks = descending_blocks(scores, correct);
    // Cumulative (accepted, right) when accepting the top j blocks.
    let mut cumulative = Vec::with_capacity(blocks.len());
    let (mut acc, mut right) = (0usize, 0usize);
    for &(_, size, hits) in &blocks {
        acc += size;
        right += hits;
        cumulative.push((acc, right));
    }
    let point = |tau: f64, (acc, right): (usize, usize)| CurvePoint {
        tau,
        coverage: acc as f64 / n,
        selective_error: (acc > 0).then(|| (acc - right) as f64 / acc as f64),
    };
    let mut points = Vec::with_capacity(blocks.len() + 1);
    points.push(point(f64::NEG_INFINITY, *cumulative.last().unwrap()));
    // Ascending thresholds over all but the smallest distinct score.
    for j in (0..blocks.len() - 1).rev() {
        points.push(point(blocks[j].0, cumulative[j]));
    }
    points.push(point(f64::INFINITY, (0, 0)));
    Ok(RiskCoverageCurve { points })
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    tau: f64,
    coverage: f64,
    selective_error: Option<f64>,
}

impl RiskCoverageCurve {
    /// Columns `tau, coverage, selective_error` (empty when nothing is accepted).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SelectiveError> {
        let mut out = csv::Writer::from_writer(writer);
        for p in &self.points {
            out.serialize(CurveRow {
                tau: p.tau,
                coverage: p.coverage,
                selective_error: p.selective_error,
            })?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, SelectiveError> {
        let rows: Vec<CurveRow> = csv::Reader::from_reader(reader).deserialize().collect::<Result<_, _>>()?;
        Ok(Self {
            points: rows
                .into_iter()
                .map(|r| CurvePoint {
                    tau: r.tau,
                    coverage: r.coverage,
                    selective_error: r.selective_error,
                })
                .collect(),
        })
    }

    /// Smallest selective error among points with coverage at least `coverage`.
    pub fn error_at_coverage(&self, coverage: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.coverage >= coverage)
            .filter_map(|p| p.selective_error)
            .reduce(f64::min)
    }
}

/// Output of a calibration search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub threshold: f64,
    pub result: SelectiveResult,
    /// `false` when no non-empty accept set meets the target; the result
    /// then accepts nothing (`threshold = +inf`).
    pub achieved: bool,
}

/// Largest coverage whose selective error is at most `target_error`.
///
/// Returns `tau = -inf` when full coverage already meets the target.
pub fn calibrate_for_error(scores: &[f64], correct: &[bool], target_error: f64) -> Result<Calibration, SelectiveError> {
    if !(0.0..1.0).contains(&target_error) {
        return Err(SelectiveError::BadTarget(target_error));
    }
    let curve = risk_coverage_curve(scores, correct)?;
    // Points are ordered by decreasing coverage; take the first that qualifies.
    let hit = curve
        .points
        .iter()
        .find(|p| p.selective_error.is_some_and(|e| e <= target_error));
    let (threshold, achieved) = match hit {
        Some(p) => (p.tau, true),
        None => (f64::INFINITY, false),
    };
    Ok(Calibration {
        threshold,
        result: evaluate_threshold(scores, correct, threshold)?,
        achieved,
    })
}

/// Smallest accept set (highest threshold) with coverage at least `target_coverage`.
///
/// Tied scores enter together, so the achieved coverage may exceed the target.
pub fn calibrate_for_coverage(scores: &[f64], correct: &[bool], target_coverage: f64) -> Result<Calibration, SelectiveError> {
    if !(target_coverage > 0.0 && target_coverage <= 1.0) {
        return Err(SelectiveError::BadTarget(target_coverage));
    }
    validate(scores, correct)?;
    let n = scores.len();
    let blocks = descending_blocks(scores, correct);
    let mut accepted = 0usize;
    let mut threshold = blocks.last().unwrap().0;
    for &(score, size, _) in &blocks {
        accepted += size;
        if accepted as f64 / n as f64 >= target_coverage {
            threshold = score;
            break;
        }
    }
    Ok(Calibration {
        threshold,
        result: evaluate_threshold(scores, correct, threshold)?,
        achieved: true,
    })
}

/// Probability that a random correct point outscores a random incorrect one,
/// ties counting one half (Mann-Whitney form).
pub fn auroc(scores: &[f64], correct: &[bool]) -> Result<f64, SelectiveError> {
    validate(scores, correct)?;
    let n_pos = correct.iter().filter(|&&c| c).count();
    let n_neg = correct.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SelectiveError::OneClass);
    }
    // Rank-sum with mid-ranks for ties.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end + 1 < order.len() && scores[order[end + 1]] == scores[order[start]] {
            end += 1;
        }
        let mid_rank = (start + end) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid_rank * order[start..=end].iter().filter(|&&i| correct[i]).count() as f64;
        start = end + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flags(bits: &[u8]) -> Vec<bool> {
        bits.iter().map(|&b| b == 1).collect()
    }

    #[test]
    fn gate_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(gate(&s, f64::NEG_INFINITY), vec![true; 4]);
        assert_eq!(gate(&s, 0.9 + 1e-9), vec![false; 4]);
        assert_eq!(gate(&s, 0.5), flags(&[1, 1, 0, 0]));
        assert_eq!(gate(&s, 0.8), flags(&[1, 1, 0, 0]));
    }

    #[test]
    fn coverage_accuracy_examples() {
        let r = coverage_accuracy(&flags(&[1, 1, 0, 0]), &flags(&[1, 0, 1, 1])).unwrap();
        assert_eq!((r.coverage, r.accuracy, r.error), (0.5, Some(0.5), Some(0.5)));
        let r = coverage_accuracy(&flags(&[1, 1, 1, 1]), &flags(&[1, 0, 1, 1])).unwrap();
        assert_eq!(r.accuracy, Some(0.75));
        let r = coverage_accuracy(&flags(&[0, 0, 0, 0]), &flags(&[1, 0, 1, 1])).unwrap();
        assert_eq!((r.coverage, r.accuracy, r.error), (0.0, None, None));
        assert!(matches!(coverage_accuracy(&flags(&[1]), &flags(&[1, 0])), Err(SelectiveError::LengthMismatch(1, 2))));
    }

    #[test]
    fn curve_counts_and_order() {
        let scores = [0.3, 0.9, 0.1, 0.5];
        let correct = flags(&[1, 1, 0, 0]);
        let curve = risk_coverage_curve(&scores, &correct).unwrap();
        assert_eq!(curve.points.len(), 5);
        let cov: Vec<f64> = curve.points.iter().map(|p| p.coverage).collect();
        assert_eq!(cov, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        let err: Vec<Option<f64>> = curve.points.iter().map(|p| p.selective_error).collect();
        assert_eq!(err, vec![Some(0.5), Some(1.0 / 3.0), Some(0.5), Some(0.0), None]);
        assert_eq!(curve.points[1].tau, 0.3);

        let tied = risk_coverage_curve(&[0.5, 0.5, 0.5], &flags(&[1, 0, 1])).unwrap();
        assert_eq!(tied.points.len(), 2);
    }

    #[test]
    fn perfect_ordering_reaches_zero_error() {
        let scores = [0.9, 0.8, 0.7, 0.4, 0.3];
        let correct = flags(&[1, 1, 1, 0, 0]);
        let curve = risk_coverage_curve(&scores, &correct).unwrap();
        let p = curve.points.iter().find(|p| p.selective_error == Some(0.0)).unwrap();
        assert_eq!(p.coverage, 0.6);
    }

    #[test]
    fn calibrate_error_examples() {
        let cal = calibrate_for_error(&[1.0, 1.0, 0.5, 0.2], &flags(&[1, 1, 1, 0]), 0.0).unwrap();
        assert_eq!(cal.threshold, 0.5);
        assert_eq!(cal.result.coverage, 0.75);
        assert_eq!(cal.result.error, Some(0.0));
        assert!(cal.achieved);

        let cal = calibrate_for_error(&[1.0, 1.0, 0.5, 0.2], &flags(&[1, 1, 1, 0]), 0.25).unwrap();
        assert_eq!(cal.threshold, f64::NEG_INFINITY);
        assert_eq!(cal.result.coverage, 1.0);

        let cal = calibrate_for_error(&[0.9, 0.5, 0.4], &flags(&[0, 1, 1]), 0.0).unwrap();
        assert!(!cal.achieved);
        assert_eq!(cal.result.n_accepted, 0);
        assert_eq!(cal.result.accuracy, None);

        assert!(calibrate_for_error(&[], &[], 0.1).is_err());
        assert!(calibrate_for_error(&[0.1], &[true], 1.0).is_err());
    }

    #[test]
    fn calibrate_coverage_examples() {
        let correct = flags(&[1, 1, 0, 1]);
        let cal = calibrate_for_coverage(&[0.4, 0.9, 0.1, 0.7], &correct, 0.5).unwrap();
        assert_eq!(cal.result.mask, flags(&[0, 1, 0, 1]));
        assert_eq!(cal.threshold, 0.7);
        let cal = calibrate_for_coverage(&[0.4, 0.9, 0.1, 0.7], &correct, 1.0).unwrap();
        assert_eq!(cal.threshold, 0.1);
        assert_eq!(cal.result.coverage, 1.0);
        let cal = calibrate_for_coverage(&[0.3; 4], &correct, 0.25).unwrap();
        assert_eq!(cal.result.coverage, 1.0);
        assert!(calibrate_for_coverage(&[0.3], &[true], 0.0).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &flags(&[1, 1, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &flags(&[1, 0, 1, 0])).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.4, 0.6], &flags(&[1, 0, 1])).unwrap(), 1.0);
        assert_eq!(auroc(&[0.1, 0.9], &flags(&[1, 0])).unwrap(), 0.0);
        assert!(matches!(auroc(&[0.1, 0.2], &flags(&[1, 1])), Err(SelectiveError::OneClass)));
    }

    #[test]
    fn curve_csv_round_trip() {
        let curve = risk_coverage_curve(&[0.3, 0.9, 0.1], &flags(&[1, 0, 1])).unwrap();
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("tau,coverage,selective_error\n-inf,1"), "{text}");
        assert_eq!(RiskCoverageCurve::read_csv(buf.as_slice()).unwrap(), curve);
    }
}
