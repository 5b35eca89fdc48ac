//! The `cmd_*` building blocks behind each subcommand.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use dynsel_core::scores::{score_trace, EtModel, ScoreMethod, ScoredSet, DEFAULT_K};
use dynsel_core::selective::{auroc, calibrate_for_coverage, calibrate_for_error, risk_coverage_curve, Calibration};
use dynsel_core::trace::{even_subset, read_trace, subsample_checkpoints, write_trace, PredictionTrace};
use dynsel_core::trainer::{self, load_dataset, synth_dataset, train, Dataset, TrainConfig};
use dynsel_core::{estimate_dynamics, DynamicsProfile, SelectiveError};
use serde::{Deserialize, Serialize};

use crate::config::{EvaluationSettings, ExperimentConfig, Protocol};
use crate::report::{MethodReport, Report, ReportRow, SweepReport, SweepRow};
use crate::CliError;

pub const TRACE_FILE: &str = "trace.nntd";
pub const RUN_META_FILE: &str = "run.json";

/// Provenance written next to every trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub train_seed: u64,
    pub n_train: usize,
    /// The trace's first `n_calibration` examples are the calibration split,
    /// the remaining `n_test` the test split.
    pub n_calibration: usize,
    pub n_test: usize,
    pub n_checkpoints: usize,
    pub total_steps: u64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub checkpoint_note: String,
    pub train: TrainConfig,
}

impl RunMetadata {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read run metadata {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("bad run metadata: {e}")))
    }
}

pub struct PreparedData {
    pub train: Dataset,
    pub calibration: Dataset,
    pub test: Dataset,
}

impl PreparedData {
    /// Calibration examples followed by test examples: the trace's evaluation set.
    pub fn eval_set(&self) -> Result<Dataset, CliError> {
        Ok(self.calibration.concat(&self.test)?)
    }
}

/// Loads or generates the dataset and splits it with a seeded shuffle.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData, CliError> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let data = match config.dataset.synth_spec(config.seed) {
        Some(spec) => synth_dataset(&spec).map_err(|e| CliError::Validation(e.to_string()))?.dataset,
        None => load_dataset(&config.dataset.file_format().unwrap())?,
    };
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0x5EED);
    order.shuffle(&mut rng);
    let n_train = (config.splits.train * n as f64).floor() as usize;
    let n_cal = (config.splits.calibration * n as f64).floor() as usize;
    let n_test = (config.splits.test * n as f64).floor() as usize;
    if n_train == 0 || n_cal == 0 || n_test == 0 {
        return Err(CliError::Validation(format!("dataset of {n} examples leaves an empty split")));
    }
    Ok(PreparedData {
        train: data.select(&order[..n_train]),
        calibration: data.select(&order[n_train..n_train + n_cal]),
        test: data.select(&order[n_train + n_cal..n_train + n_cal + n_test]),
    })
}

fn resolved_train_config(config: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<TrainConfig, CliError> {
    let mut train = config.train.clone();
    train.seed = seed;
    if let Some(hidden) = &config.hidden {
        train.layer_sizes = std::iter::once(data.n_features())
            .chain(hidden.iter().copied())
            .chain(std::iter::once(data.n_classes()))
            .collect();
    }
    if train.layer_sizes.first() != Some(&data.n_features()) || train.layer_sizes.last() != Some(&data.n_classes()) {
        return Err(CliError::Validation(format!(
            "layer_sizes {:?} must start with d = {} and end with C = {}",
            train.layer_sizes,
            data.n_features(),
            data.n_classes()
        )));
    }
    train.validate().map_err(|e| CliError::Validation(e.to_string()))?;
    Ok(train)
}

pub struct TrainOutcome {
    pub trace: PredictionTrace,
    pub meta: RunMetadata,
    pub trace_path: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn train_with_seed(config: &ExperimentConfig, data: &PreparedData, train_seed: u64) -> Result<(PredictionTrace, RunMetadata), CliError> {
    let train_config = resolved_train_config(config, &data.train, train_seed)?;
    let eval = data.eval_set()?;
    let run = train(&train_config, &data.train, &eval)?;
    let meta = RunMetadata {
        seed: config.seed,
        train_seed,
        n_train: data.train.len(),
        n_calibration: data.calibration.len(),
        n_test: data.test.len(),
        n_checkpoints: run.trace.n_checkpoints(),
        total_steps: run.total_steps,
        train_accuracy: trainer::accuracy(&run.model, &data.train)?,
        test_accuracy: trainer::accuracy(&run.model, &data.test)?,
        checkpoint_note: "checkpoints are recorded after at least one optimizer step; the untrained model is not part of the trace".into(),
        train: train_config,
    };
    Ok((run.trace, meta))
}

/// Trains the configured model and writes `trace.nntd` and `run.json` to `out_dir`.
pub fn cmd_train(config: &ExperimentConfig, out_dir: &Path) -> Result<TrainOutcome, CliError> {
    config.validate()?;
    let data = prepare_data(config)?;
    let (trace, meta) = train_with_seed(config, &data, config.seed)?;
    fs::create_dir_all(out_dir)?;
    let trace_path = out_dir.join(TRACE_FILE);
    write_trace(&trace, BufWriter::new(fs::File::create(&trace_path)?))?;
    write_json(&out_dir.join(RUN_META_FILE), &meta)?;
    Ok(TrainOutcome { trace, meta, trace_path })
}

fn load_trace(path: &Path) -> Result<PredictionTrace, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Validation(format!("cannot open trace {}: {e}", path.display())))?;
    Ok(read_trace(BufReader::new(file))?)
}

/// Empirical `e_t` from the finally-correct calibration examples.
fn empirical_et(trace: &PredictionTrace, meta: Option<&RunMetadata>) -> Result<Vec<f64>, CliError> {
    let source = match meta {
        Some(m) if m.n_calibration > 0 => trace.select_examples(&(0..m.n_calibration).collect::<Vec<_>>())?,
        _ => trace.clone(),
    };
    let profile = estimate_dynamics(&source)?;
    profile
        .e_correct()
        .map(<[f64]>::to_vec)
        .ok_or_else(|| CliError::Validation("empirical e_t needs at least one correctly classified example".into()))
}

/// Scores a trace with every method, filling in empirical `e_t` estimates.
pub fn score_methods(
    trace: &PredictionTrace,
    methods: &[ScoreMethod],
    meta: Option<&RunMetadata>,
) -> Result<Vec<ScoredSet>, CliError> {
    methods
        .iter()
        .map(|method| {
            let method = match method {
                ScoreMethod::Min { k, et: EtModel::Empirical { e } } if e.is_empty() => ScoreMethod::Min {
                    k: *k,
                    et: EtModel::Empirical { e: empirical_et(trace, meta)? },
                },
                ScoreMethod::Avg { k, et: EtModel::Empirical { e } } if e.is_empty() => ScoreMethod::Avg {
                    k: *k,
                    et: EtModel::Empirical { e: empirical_et(trace, meta)? },
                },
                other => other.clone(),
            };
            Ok(score_trace(trace, &method)?)
        })
        .collect()
}

/// Writes `<id>.csv` and `<id>.json` per method under `out_dir`.
pub fn cmd_score(
    trace_path: &Path,
    methods: &[ScoreMethod],
    meta: Option<&RunMetadata>,
    out_dir: &Path,
) -> Result<Vec<(ScoredSet, PathBuf)>, CliError> {
    if methods.is_empty() {
        return Err(CliError::Validation("no score methods given".into()));
    }
    let trace = load_trace(trace_path)?;
    let sets = score_methods(&trace, methods, meta)?;
    fs::create_dir_all(out_dir)?;
    sets.into_iter()
        .map(|mut set| {
            // File name only, so payloads do not depend on the output location.
            set.provenance.trace = trace_path
                .file_name()
                .map_or_else(|| trace_path.display().to_string(), |n| n.to_string_lossy().into_owned());
            let id = set.id();
            let csv_path = out_dir.join(format!("{id}.csv"));
            set.write_csv(BufWriter::new(fs::File::create(&csv_path)?))?;
            write_json(&out_dir.join(format!("{id}.json")), &set)?;
            Ok((set, csv_path))
        })
        .collect()
}

/// Reads a scored set from JSON, or from CSV with the method parsed from the file stem.
pub fn load_scored_set(path: &Path) -> Result<ScoredSet, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Validation(format!("cannot open scores {}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CliError::Validation(format!("bad scored set {}: {e}", path.display()))),
        _ => {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let method = method_from_id(stem)
                .ok_or_else(|| CliError::Validation(format!("cannot infer the score method from {stem:?}")))?;
            Ok(ScoredSet::read_csv(BufReader::new(file), method)?)
        }
    }
}

/// Inverse of `ScoreMethod::id` for methods without an empirical estimate.
fn method_from_id(id: &str) -> Option<ScoreMethod> {
    if id == "sr" {
        return Some(ScoreMethod::SoftmaxResponse);
    }
    let (name, rest) = id.split_once('_')?;
    let compact = match name {
        "min" | "avg" => {
            let (k, et) = match rest.split_once("_et-") {
                Some((k, et)) => (k, Some(et)),
                None => (rest, None),
            };
            let k = k.strip_prefix('k')?;
            match et {
                None => format!("{name}:k={k}"),
                Some("empirical") => format!("{name}:k={k}:et=empirical"),
                Some(s) => format!("{name}:k={k}:et=smooth:ke={}", s.strip_prefix("smooth")?),
            }
        }
        "jump" => {
            let (k, norm) = match rest.strip_suffix("_norm") {
                Some(k) => (k, ":normalized"),
                None => (rest, ""),
            };
            format!("jump:k={}{norm}", k.strip_prefix('k')?)
        }
        "var" => {
            let (metric, kw) = rest.rsplit_once("_kw")?;
            format!("var:metric={metric}:kw={kw}")
        }
        _ => return None,
    };
    compact.parse().ok()
}

/// Writes the correct/incorrect disagreement profile as CSV.
pub fn cmd_dynamics(trace_path: &Path, out_file: &Path) -> Result<DynamicsProfile, CliError> {
    let trace = load_trace(trace_path)?;
    if trace.true_labels().is_none() {
        return Err(CliError::Validation("the trace carries no true labels".into()));
    }
    let profile = estimate_dynamics(&trace)?;
    if let Some(dir) = out_file.parent() {
        fs::create_dir_all(dir)?;
    }
    profile.write_csv(BufWriter::new(fs::File::create(out_file)?))?;
    Ok(profile)
}

pub fn cmd_trace_export(trace_path: &Path, out_file: &Path) -> Result<(), CliError> {
    let trace = load_trace(trace_path)?;
    if let Some(dir) = out_file.parent() {
        fs::create_dir_all(dir)?;
    }
    trace.write_csv(BufWriter::new(fs::File::create(out_file)?))?;
    Ok(())
}

struct SplitView {
    cal_scores: Vec<f64>,
    cal_correct: Vec<bool>,
    scores: Vec<f64>,
    correct: Vec<bool>,
}

fn split_view(set: &ScoredSet, n_calibration: usize, protocol: Protocol) -> Result<SplitView, CliError> {
    let correct = set
        .correctness()
        .ok_or_else(|| CliError::Validation(format!("scored set {} has no true labels", set.id())))?;
    if n_calibration >= set.len() && n_calibration > 0 {
        return Err(CliError::Validation(format!(
            "calibration split ({n_calibration}) leaves nothing to report in {} examples",
            set.len()
        )));
    }
    let (cal, rep) = (0..n_calibration, n_calibration..set.len());
    let report_scores = set.scores[rep.clone()].to_vec();
    let report_correct = correct[rep].to_vec();
    Ok(match protocol {
        Protocol::HeldOut => {
            if n_calibration == 0 {
                return Err(CliError::Validation(
                    "held-out protocol needs a calibration split; use the same-split protocol".into(),
                ));
            }
            SplitView {
                cal_scores: set.scores[cal.clone()].to_vec(),
                cal_correct: correct[cal].to_vec(),
                scores: report_scores,
                correct: report_correct,
            }
        }
        Protocol::SameSplit => SplitView {
            cal_scores: report_scores.clone(),
            cal_correct: report_correct.clone(),
            scores: report_scores,
            correct: report_correct,
        },
    })
}

fn report_row(method: &str, kind: &str, target: f64, cal: &Calibration, view: &SplitView) -> Result<ReportRow, CliError> {
    let applied = dynsel_core::selective::evaluate_threshold(&view.scores, &view.correct, cal.threshold)?;
    Ok(ReportRow {
        method: method.to_string(),
        target_kind: kind.to_string(),
        target,
        tau: cal.threshold,
        achieved: cal.achieved,
        calibration_coverage: cal.result.coverage,
        calibration_error: cal.result.error,
        coverage: applied.coverage,
        error: applied.error,
    })
}

fn calibrated_rows(method: &str, view: &SplitView, settings: &EvaluationSettings) -> Result<Vec<ReportRow>, CliError> {
    let mut rows = Vec::new();
    for &target in &settings.target_errors {
        let cal = calibrate_for_error(&view.cal_scores, &view.cal_correct, target)?;
        rows.push(report_row(method, "error", target, &cal, view)?);
    }
    for &target in &settings.target_coverages {
        let cal = calibrate_for_coverage(&view.cal_scores, &view.cal_correct, target)?;
        rows.push(report_row(method, "coverage", target, &cal, view)?);
    }
    Ok(rows)
}

fn optional_auroc(scores: &[f64], correct: &[bool]) -> Result<Option<f64>, CliError> {
    match auroc(scores, correct) {
        Ok(a) => Ok(Some(a)),
        Err(SelectiveError::OneClass) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Builds the report and writes one risk-coverage curve per method to `curve_dir`.
pub fn evaluate_sets(
    sets: &[ScoredSet],
    settings: &EvaluationSettings,
    n_calibration: usize,
    curve_dir: Option<&Path>,
) -> Result<Report, CliError> {
    let mut sorted: Vec<&ScoredSet> = sets.iter().collect();
    sorted.sort_by_key(|s| s.id());
    let mut methods = Vec::with_capacity(sorted.len());
    let mut n_report = 0;
    for set in sorted {
        let view = split_view(set, n_calibration, settings.protocol)?;
        n_report = view.scores.len();
        let id = set.id();
        let curve = risk_coverage_curve(&view.scores, &view.correct)?;
        let curve_file = format!("curves/{id}.csv");
        if let Some(dir) = curve_dir {
            fs::create_dir_all(dir)?;
            curve.write_csv(BufWriter::new(fs::File::create(dir.join(format!("{id}.csv")))?))?;
        }
        let wrong = view.correct.iter().filter(|&&c| !c).count();
        methods.push(MethodReport {
            method: id.clone(),
            n_report: view.scores.len(),
            full_coverage_error: wrong as f64 / view.correct.len() as f64,
            auroc: optional_auroc(&view.scores, &view.correct)?,
            curve_file,
            rows: calibrated_rows(&id, &view, settings)?,
        });
    }
    Ok(Report {
        protocol: settings.protocol.label().to_string(),
        n_calibration: if settings.protocol == Protocol::HeldOut { n_calibration } else { 0 },
        n_report,
        methods,
    })
}

/// Evaluates scored-set files and writes `report.json`, `report.csv` and `curves/`.
pub fn cmd_evaluate(
    score_files: &[PathBuf],
    settings: &EvaluationSettings,
    meta: Option<&RunMetadata>,
    out_dir: &Path,
) -> Result<Report, CliError> {
    if score_files.is_empty() {
        return Err(CliError::Validation("no scored sets given".into()));
    }
    let sets = score_files.iter().map(|p| load_scored_set(p)).collect::<Result<Vec<_>, _>>()?;
    let n_calibration = meta.map_or(0, |m| m.n_calibration);
    fs::create_dir_all(out_dir)?;
    let report = evaluate_sets(&sets, settings, n_calibration, Some(&out_dir.join("curves")))?;
    write_json(&out_dir.join("report.json"), &report)?;
    report.write_rows_csv(BufWriter::new(fs::File::create(out_dir.join("report.csv"))?))?;
    Ok(report)
}

/// train -> score -> dynamics -> evaluate, all under `out_dir`.
pub fn cmd_run(config: &ExperimentConfig, out_dir: &Path) -> Result<Report, CliError> {
    let outcome = cmd_train(config, out_dir)?;
    let methods = config.scores.parsed_methods()?;
    let scored = cmd_score(&outcome.trace_path, &methods, Some(&outcome.meta), &out_dir.join("scores"))?;
    cmd_dynamics(&outcome.trace_path, &out_dir.join("dynamics.csv"))?;
    let files: Vec<PathBuf> = scored.iter().map(|(s, _)| out_dir.join("scores").join(format!("{}.json", s.id()))).collect();
    cmd_evaluate(&files, &config.evaluation, Some(&outcome.meta), out_dir)
}

fn sweep_rows(
    seed: u64,
    study: &str,
    set: &ScoredSet,
    settings: &EvaluationSettings,
    n_calibration: usize,
) -> Result<Vec<SweepRow>, CliError> {
    let view = split_view(set, n_calibration, settings.protocol)?;
    let auroc = optional_auroc(&view.scores, &view.correct)?;
    let id = set.id();
    Ok(calibrated_rows(&id, &view, settings)?
        .into_iter()
        .map(|r| SweepRow {
            seed,
            study: study.to_string(),
            method: id.clone(),
            n_checkpoints: set.provenance.n_checkpoints,
            target_kind: r.target_kind,
            target: r.target,
            coverage: r.coverage,
            error: r.error,
            achieved: r.achieved,
            auroc,
        })
        .collect())
}

/// Weighting, concave-weighting and resolution studies over several training seeds.
///
/// Each seed is calibrated separately; the summary reports mean and sample
/// standard deviation of the per-seed results.
pub fn cmd_sweep(config: &ExperimentConfig, out_dir: &Path) -> Result<SweepReport, CliError> {
    config.validate()?;
    let data = prepare_data(config)?;
    let settings = &config.evaluation;
    let methods = config.scores.parsed_methods()?;
    let mut runs = Vec::new();
    for &seed in &config.sweep.seeds {
        let (trace, meta) = train_with_seed(config, &data, seed)?;
        let n_cal = meta.n_calibration;
        for set in score_methods(&trace, &methods, Some(&meta))? {
            runs.extend(sweep_rows(seed, "methods", &set, settings, n_cal)?);
        }
        for (study, grid) in [("k_convex", &config.scores.k_grid), ("k_concave", &config.scores.concave_k_grid)] {
            for &k in grid {
                let set = score_trace(&trace, &ScoreMethod::Avg { k, et: EtModel::Zero })?;
                runs.extend(sweep_rows(seed, study, &set, settings, n_cal)?);
            }
        }
        for &resolution in &config.scores.resolutions {
            if resolution > trace.n_checkpoints() {
                continue;
            }
            let keep = even_subset(trace.n_checkpoints(), resolution);
            let sub = subsample_checkpoints(&trace, &keep)?;
            let mut set = score_trace(&sub, &ScoreMethod::Avg { k: DEFAULT_K, et: EtModel::Zero })?;
            set.provenance.subsample = Some(keep);
            runs.extend(sweep_rows(seed, "resolution", &set, settings, n_cal)?);
        }
    }
    let report = SweepReport {
        protocol: settings.protocol.label().to_string(),
        aggregation: "per-seed calibration; mean and sample standard deviation across seeds".into(),
        summary: SweepReport::summarize(&runs),
        runs,
    };
    fs::create_dir_all(out_dir)?;
    write_json(&out_dir.join("sweep.json"), &report)?;
    report.write_runs_csv(BufWriter::new(fs::File::create(out_dir.join("sweep_runs.csv"))?))?;
    report.write_summary_csv(BufWriter::new(fs::File::create(out_dir.join("sweep_summary.csv"))?))?;
    Ok(report)
}
