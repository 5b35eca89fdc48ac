//! Empirical disagreement statistics over training and the Markov-style bound
//! on the probability that a point is finally correct.
//!
//! Examples are split by whether the *final* model classifies them correctly.
//! For each population and checkpoint `t`, `e_t` is the mean of the
//! disagreement indicator `a_t` and `v_t` its population variance. Because
//! `a_t` is Bernoulli, `v_t = e_t (1 - e_t)`.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scores::EQUALITY_TOL;
use crate::trace::{disagreement_vector, PredictionTrace, TraceError};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("the trace carries no true labels")]
    MissingTrueLabels,
    #[error("length mismatch: a has {a}, e has {e}, v has {v}")]
    LengthMismatch { a: usize, e: usize, v: usize },
    #[error("bound undefined: a_t = e_t for every t")]
    BoundUndefined,
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("e_t must lie in [0, 1]; found {value} at t = {t}")]
    OutOfRange { t: usize, value: f64 },
    #[error("the final disagreement probability must be 0, found {0}")]
    NonzeroFinal(f64),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationStats {
    pub size: usize,
    pub e: Vec<f64>,
    pub v: Vec<f64>,
}

/// Disagreement statistics for the finally-correct and finally-incorrect
/// populations. An empty population is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsProfile {
    pub n_checkpoints: usize,
    pub correct: Option<PopulationStats>,
    pub incorrect: Option<PopulationStats>,
}

fn population_stats(columns: &[Vec<bool>], n_checkpoints: usize) -> Option<PopulationStats> {
    if columns.is_empty() {
        return None;
    }
    let n = columns.len() as f64;
    let mut e = Vec::with_capacity(n_checkpoints);
    let mut v = Vec::with_capacity(n_checkpoints);
    for t in 0..n_checkpoints {
        let mean = columns.iter().filter(|a| a[t]).count() as f64 / n;
        let var = columns
            .iter()
            .map(|a| {
                let d = if a[t] { 1.0 } else { 0.0 } - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        e.push(mean);
        v.push(var);
    }
    Some(PopulationStats {
        size: columns.len(),
        e,
        v,
    })
}

pub fn estimate_dynamics(trace: &PredictionTrace) -> Result<DynamicsProfile, DynamicsError> {
    let correctness = trace.correctness().ok_or(DynamicsError::MissingTrueLabels)?;
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (i, &ok) in correctness.iter().enumerate() {
        let a = disagreement_vector(trace, i)?.into_inner();
        if ok {
            correct.push(a);
        } else {
            incorrect.push(a);
        }
    }
    let t = trace.n_checkpoints();
    Ok(DynamicsProfile {
        n_checkpoints: t,
        correct: population_stats(&correct, t),
        incorrect: population_stats(&incorrect, t),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    t: usize,
    e_correct: Option<f64>,
    v_correct: Option<f64>,
    e_incorrect: Option<f64>,
    v_incorrect: Option<f64>,
}

impl DynamicsProfile {
    pub fn e_correct(&self) -> Option<&[f64]> {
        self.correct.as_ref().map(|p| p.e.as_slice())
    }

    pub fn e_incorrect(&self) -> Option<&[f64]> {
        self.incorrect.as_ref().map(|p| p.e.as_slice())
    }

    /// Columns `t, e_correct, v_correct, e_incorrect, v_incorrect`; `t` is
    /// 1-based and absent populations leave their cells empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DynamicsError> {
        let mut out = csv::Writer::from_writer(writer);
        let at = |p: &Option<PopulationStats>, t: usize| p.as_ref().map(|p| (p.e[t], p.v[t]));
        for t in 0..self.n_checkpoints {
            let c = at(&self.correct, t);
            let w = at(&self.incorrect, t);
            out.serialize(ProfileRow {
                t: t + 1,
                e_correct: c.map(|x| x.0),
                v_correct: c.map(|x| x.1),
                e_incorrect: w.map(|x| x.0),
                v_incorrect: w.map(|x| x.1),
            })?;
        }
        out.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads [`DynamicsProfile::write_csv`] output. Population sizes are not
    /// part of the CSV and are restored from `sizes` (`correct`, `incorrect`).
    pub fn read_csv<R: Read>(reader: R, sizes: (usize, usize)) -> Result<Self, DynamicsError> {
        let rows: Vec<ProfileRow> = csv::Reader::from_reader(reader).deserialize().collect::<Result<_, _>>()?;
        let collect = |f: fn(&ProfileRow) -> (Option<f64>, Option<f64>), size: usize| {
            let pairs: Option<Vec<(f64, f64)>> = rows.iter().map(|r| {
                let (e, v) = f(r);
                e.zip(v)
            }).collect();
            pairs.map(|p| PopulationStats {
                size,
                e: p.iter().map(|x| x.0).collect(),
                v: p.iter().map(|x| x.1).collect(),
            })
        };
        Ok(Self {
            n_checkpoints: rows.len(),
            correct: collect(|r| (r.e_correct, r.v_correct), sizes.0),
            incorrect: collect(|r| (r.e_incorrect, r.v_incorrect), sizes.1),
        })
    }
}

/// `min over {t : a_t != e_t}` of `v_t / |a_t - e_t|^2`, clamped at 1.
pub fn markov_bound(a: &[bool], e: &[f64], v: &[f64]) -> Result<f64, DynamicsError> {
    if a.len() != e.len() || a.len() != v.len() {
        return Err(DynamicsError::LengthMismatch {
            a: a.len(),
            e: e.len(),
            v: v.len(),
        });
    }
    if let Some((t, &value)) = e.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
        return Err(DynamicsError::OutOfRange { t, value });
    }
    if v.iter().any(|&x| x.is_nan() || x < 0.0) {
        return Err(DynamicsError::Invalid("variances must be non-negative".into()));
    }
    a.iter()
        .zip(e)
        .zip(v)
        .filter_map(|((&a, &e), &v)| {
            let gap = if a { 1.0 } else { 0.0 } - e;
            (gap.abs() > EQUALITY_TOL).then(|| v / (gap * gap))
        })
        .reduce(f64::min)
        .map(|b| b.min(1.0))
        .ok_or(DynamicsError::BoundUndefined)
}

/// Independent Bernoulli(`e_t`) disagreement sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSequences {
    n_checkpoints: usize,
    bits: Vec<bool>,
}

impl SampledSequences {
    pub fn len(&self) -> usize {
        self.bits.len().checked_div(self.n_checkpoints).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn sample(&self, s: usize) -> &[bool] {
        &self.bits[s * self.n_checkpoints..(s + 1) * self.n_checkpoints]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[bool]> {
        self.bits.chunks_exact(self.n_checkpoints.max(1))
    }

    /// Fraction of samples whose step `t` equals `value`.
    pub fn frequency(&self, t: usize, value: bool) -> f64 {
        self.iter().filter(|s| s[t] == value).count() as f64 / self.len() as f64
    }
}

pub fn simulate_disagreement_process(e: &[f64], n_samples: usize, seed: u64) -> Result<SampledSequences, DynamicsError> {
    if e.is_empty() {
        return Err(DynamicsError::Invalid("need at least one step".into()));
    }
    if let Some((t, &value)) = e.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
        return Err(DynamicsError::OutOfRange { t, value });
    }
    let last = *e.last().unwrap();
    if last != 0.0 {
        return Err(DynamicsError::NonzeroFinal(last));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = Vec::with_capacity(n_samples * e.len());
    for _ in 0..n_samples {
        bits.extend(e.iter().map(|&p| rng.random::<f64>() < p));
    }
    Ok(SampledSequences {
        n_checkpoints: e.len(),
        bits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceParts;

    #[test]
    fn two_correct_examples() {
        // final label 0 for both; columns [1,1,0] and [1,0,0]
        let trace = PredictionTrace::new(TraceParts {
            n_classes: 2,
            n_examples: 2,
            checkpoint_steps: vec![1, 2, 3],
            labels: vec![1, 1, 1, 0, 0, 0],
            true_labels: Some(vec![0, 0]),
            ..Default::default()
        })
        .unwrap();
        let profile = estimate_dynamics(&trace).unwrap();
        let c = profile.correct.as_ref().unwrap();
        assert_eq!(c.e, vec![1.0, 0.5, 0.0]);
        assert_eq!(c.v, vec![0.0, 0.25, 0.0]);
        assert_eq!(c.size, 2);
        assert!(profile.incorrect.is_none());
    }

    #[test]
    fn missing_labels() {
        let trace = PredictionTrace::new(TraceParts {
            n_classes: 2,
            n_examples: 1,
            checkpoint_steps: vec![1],
            labels: vec![0],
            ..Default::default()
        })
        .unwrap();
        assert!(matches!(estimate_dynamics(&trace), Err(DynamicsError::MissingTrueLabels)));
    }

    #[test]
    fn bound_examples() {
        assert_eq!(markov_bound(&[true], &[0.0], &[0.5]).unwrap(), 0.5);
        assert_eq!(markov_bound(&[true, true], &[0.5, 0.0], &[0.25, 0.09]).unwrap(), 0.09);
        assert!(matches!(markov_bound(&[false], &[0.0], &[0.3]), Err(DynamicsError::BoundUndefined)));
        assert_eq!(markov_bound(&[false], &[0.1], &[0.5]).unwrap(), 1.0);
        assert!(matches!(markov_bound(&[true], &[0.0, 0.0], &[0.5]), Err(DynamicsError::LengthMismatch { .. })));
        assert!(markov_bound(&[true], &[1.5], &[0.5]).is_err());
    }

    #[test]
    fn simulation_edge_cases() {
        let zeros = simulate_disagreement_process(&[0.0; 4], 50, 1).unwrap();
        assert!(zeros.iter().all(|s| s.iter().all(|&b| !b)));
        let fixed = simulate_disagreement_process(&[1.0, 0.0], 50, 2).unwrap();
        assert!(fixed.iter().all(|s| s == [true, false]));
        assert!(matches!(
            simulate_disagreement_process(&[0.5, 0.2], 10, 3),
            Err(DynamicsError::NonzeroFinal(_))
        ));
        assert!(matches!(
            simulate_disagreement_process(&[1.2, 0.0], 10, 3),
            Err(DynamicsError::OutOfRange { t: 0, .. })
        ));
        let a = simulate_disagreement_process(&[0.3, 0.6, 0.0], 100, 9).unwrap();
        let b = simulate_disagreement_process(&[0.3, 0.6, 0.0], 100, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn simulation_means_concentrate() {
        let e = [0.9, 0.6, 0.3, 0.1, 0.0];
        let n = 20_000;
        let sims = simulate_disagreement_process(&e, n, 4).unwrap();
        assert_eq!(sims.len(), n);
        for (t, &p) in e.iter().enumerate() {
            let freq = sims.frequency(t, true);
            assert!((freq - p).abs() <= 3.0 / (n as f64).sqrt(), "t={t}: {freq} vs {p}");
        }
    }

    #[test]
    fn profile_csv_round_trip() {
        let profile = DynamicsProfile {
            n_checkpoints: 2,
            correct: Some(PopulationStats {
                size: 3,
                e: vec![1.0 / 3.0, 0.0],
                v: vec![2.0 / 9.0, 0.0],
            }),
            incorrect: None,
        };
        let mut buf = Vec::new();
        profile.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,e_correct,v_correct,e_incorrect,v_incorrect\n1,"));
        assert_eq!(DynamicsProfile::read_csv(buf.as_slice(), (3, 0)).unwrap(), profile);
    }
}
