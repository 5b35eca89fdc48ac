use std::fs;
use std::path::Path;
use std::process::Command;

use dynsel_cli::{
    cmd_dynamics, cmd_evaluate, cmd_score, cmd_sweep, cmd_trace_export, cmd_train, load_scored_set, CliError,
    EvaluationSettings, ExperimentConfig, Protocol,
};
use dynsel_core::scores::{score_avg, weight_schedule, EtModel, ScoreMethod};
use dynsel_core::selective::{calibrate_for_error, evaluate_threshold};
use dynsel_core::trace::{disagreement_vector, read_trace, PredictionTrace};

const SMALL: &str = r#"
seed = 11
hidden = [8]

[dataset]
kind = "synthetic"
centers = [[-1.0, 0.0], [1.0, 0.0]]
variances = [[1.0, 1.0], [1.0, 1.0]]
counts = [150, 150]
label_noise_rate = 0.1

[train]
batch_size = 16
epochs = 6
checkpoint_every = 4

[train.optimizer]
kind = "adam"
learning_rate = 0.03

[scores]
methods = ["avg:k=0.05", "min:k=0.05"]
resolutions = [3, 5]

[sweep]
seeds = [1, 2]
"#;

fn small_config() -> ExperimentConfig {
    ExperimentConfig::from_toml(SMALL).unwrap()
}

fn read_trace_file(path: &Path) -> PredictionTrace {
    read_trace(fs::File::open(path).unwrap()).unwrap()
}

#[test]
fn train_writes_configured_checkpoint_count() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_config(), dir.path()).unwrap();
    let expected = outcome.meta.train.expected_checkpoints(outcome.meta.n_train);
    // 150 training points in batches of 16 is 10 batches per epoch, 60 in total.
    assert_eq!(expected, 15);
    let trace = read_trace_file(&outcome.trace_path);
    assert_eq!(trace.n_checkpoints(), expected);
    assert_eq!(trace.n_examples(), outcome.meta.n_calibration + outcome.meta.n_test);
    assert_eq!(*trace.checkpoint_steps().last().unwrap(), outcome.meta.total_steps);
}

#[test]
fn training_rerun_is_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    cmd_train(&small_config(), a.path()).unwrap();
    cmd_train(&small_config(), b.path()).unwrap();
    for file in ["trace.nntd", "run.json"] {
        assert_eq!(fs::read(a.path().join(file)).unwrap(), fs::read(b.path().join(file)).unwrap(), "{file}");
    }
}

#[test]
fn missing_dataset_is_a_validation_error() {
    let config = ExperimentConfig::from_toml("seed = 1\n[dataset]\nkind = \"csv\"\npath = \"/nope/data.csv\"\n").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_train(&config, dir.path()).err().unwrap();
    assert!(matches!(err, CliError::Validation(_)));
    assert_eq!(err.exit_code(), 1);
    assert!(!dir.path().join("trace.nntd").exists());
}

#[test]
fn score_writes_one_file_per_method_and_matches_scalar_ops() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_config(), dir.path()).unwrap();
    let methods: Vec<ScoreMethod> = ["avg:k=0.05", "min:k=0.05"].iter().map(|m| m.parse().unwrap()).collect();
    let written = cmd_score(&outcome.trace_path, &methods, Some(&outcome.meta), &dir.path().join("scores")).unwrap();
    assert_eq!(written.len(), 2);
    let trace = read_trace_file(&outcome.trace_path);
    let n = trace.n_examples();
    for (_, path) in &written {
        let rows = fs::read_to_string(path).unwrap().lines().count();
        assert_eq!(rows, n + 1, "{}", path.display());
    }
    let avg = load_scored_set(&dir.path().join("scores/avg_k0.05.csv")).unwrap();
    let v = weight_schedule(trace.n_checkpoints(), 0.05).unwrap();
    for i in (0..n).step_by(n / 10) {
        let a = disagreement_vector(&trace, i).unwrap();
        assert_eq!(avg.scores[i], score_avg(&a, &v, &EtModel::Zero).unwrap(), "example {i}");
    }
}

#[test]
fn empirical_et_uses_calibration_split() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_config(), dir.path()).unwrap();
    let methods = vec!["avg:k=0.05:et=empirical".parse().unwrap()];
    let written = cmd_score(&outcome.trace_path, &methods, Some(&outcome.meta), dir.path()).unwrap();
    match &written[0].0.method {
        ScoreMethod::Avg { et: EtModel::Empirical { e }, .. } => {
            assert_eq!(e.len(), outcome.meta.n_checkpoints);
            assert_eq!(*e.last().unwrap(), 0.0);
        }
        other => panic!("unexpected method {other:?}"),
    }
}

#[test]
fn variance_score_needs_probabilities() {
    let mut config = small_config();
    config.train.record_probabilities = false;
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&config, dir.path()).unwrap();
    let methods = vec!["var:metric=gap:kw=1".parse().unwrap()];
    let err = cmd_score(&outcome.trace_path, &methods, None, dir.path()).err().unwrap();
    assert!(matches!(err, CliError::Validation(_)), "{err}");
}

#[test]
fn dynamics_rows_are_bernoulli() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_config(), dir.path()).unwrap();
    let out = dir.path().join("dynamics.csv");
    cmd_dynamics(&outcome.trace_path, &out).unwrap();
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let rows: Vec<Vec<f64>> = reader
        .records()
        .map(|r| r.unwrap().iter().map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), outcome.meta.n_checkpoints);
    for row in &rows {
        let (ec, vc, ei, vi) = (row[1], row[2], row[3], row[4]);
        assert!((vc - ec * (1.0 - ec)).abs() < 1e-12);
        assert!((vi - ei * (1.0 - ei)).abs() < 1e-12);
    }
    assert_eq!(rows.last().unwrap()[1], 0.0);
}

#[test]
fn evaluate_matches_direct_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_config(), dir.path()).unwrap();
    let methods: Vec<ScoreMethod> = ["avg:k=0.05", "min:k=0.05"].iter().map(|m| m.parse().unwrap()).collect();
    let written = cmd_score(&outcome.trace_path, &methods, Some(&outcome.meta), &dir.path().join("scores")).unwrap();
    let files: Vec<_> = written.iter().map(|(_, p)| p.clone()).collect();
    let settings = EvaluationSettings {
        target_errors: vec![0.2, 0.1, 0.05],
        target_coverages: vec![],
        protocol: Protocol::HeldOut,
    };
    let report = cmd_evaluate(&files, &settings, Some(&outcome.meta), dir.path()).unwrap();
    assert_eq!(report.rows().count(), 6);
    let csv_rows = fs::read_to_string(dir.path().join("report.csv")).unwrap().lines().count();
    assert_eq!(csv_rows, 7);

    let n_cal = outcome.meta.n_calibration;
    for (set, _) in &written {
        let m = report.method(&set.id()).unwrap();
        assert!((m.full_coverage_error - (1.0 - outcome.meta.test_accuracy)).abs() < 1e-12);
        assert!(dir.path().join(&m.curve_file).is_file());
        let correct = set.correctness().unwrap();
        for row in &m.rows {
            let cal = calibrate_for_error(&set.scores[..n_cal], &correct[..n_cal], row.target).unwrap();
            let applied = evaluate_threshold(&set.scores[n_cal..], &correct[n_cal..], cal.threshold).unwrap();
            assert_eq!(row.tau, cal.threshold);
            assert_eq!(row.achieved, cal.achieved);
            assert_eq!(row.coverage, applied.coverage);
            assert_eq!(row.error, applied.error);
        }
    }
}

#[test]
fn scored_csv_reingests() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_config(), dir.path()).unwrap();
    let methods = vec!["min:k=0.05:et=smooth:ke=0.3".parse().unwrap(), "jump:k=0.1:normalized".parse().unwrap()];
    for (set, csv_path) in cmd_score(&outcome.trace_path, &methods, None, dir.path()).unwrap() {
        let back = load_scored_set(&csv_path).unwrap();
        assert_eq!(back.method, set.method);
        assert_eq!(back.scores, set.scores);
        assert_eq!(back.final_labels, set.final_labels);
        assert_eq!(back.true_labels, set.true_labels);
        let json = load_scored_set(&csv_path.with_file_name(format!("{}.json", set.id()))).unwrap();
        assert_eq!(json, set);
    }
}

#[test]
fn trace_export_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let outcome = cmd_train(&small_config(), dir.path()).unwrap();
    let out = dir.path().join("trace.csv");
    cmd_trace_export(&outcome.trace_path, &out).unwrap();
    let back = PredictionTrace::read_csv(fs::File::open(&out).unwrap(), Some(2), outcome.trace.seed()).unwrap();
    assert_eq!(back.final_labels(), outcome.trace.final_labels());
    assert_eq!(back.checkpoint_steps(), outcome.trace.checkpoint_steps());
    assert_eq!(back.true_labels(), outcome.trace.true_labels());
}

#[test]
fn sweep_covers_every_study_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config();
    let report = cmd_sweep(&config, dir.path()).unwrap();
    for study in ["methods", "k_convex", "k_concave", "resolution"] {
        assert!(report.runs.iter().any(|r| r.study == study), "{study}");
    }
    for seed in &config.sweep.seeds {
        assert!(report.runs.iter().any(|r| r.seed == *seed));
    }
    let resolutions: Vec<usize> =
        report.runs.iter().filter(|r| r.study == "resolution").map(|r| r.n_checkpoints).collect();
    assert!(resolutions.contains(&3) && resolutions.contains(&5));
    assert!(report.summary.iter().all(|s| s.n_runs == config.sweep.seeds.len()));
    for file in ["sweep.json", "sweep_runs.csv", "sweep_summary.csv"] {
        assert!(dir.path().join(file).is_file(), "{file}");
    }
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_dynsel");
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.toml");
    fs::write(&config, SMALL).unwrap();
    let out = dir.path().join("run");
    let status = Command::new(bin)
        .args(["run", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .args(["--protocol", "same_split"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "same_split");

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\n[dataset]\nkind = \"csv\"\npath = \"missing.csv\"\n").unwrap();
    let status = Command::new(bin).args(["train", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(status.status.code(), Some(1));

    let status = Command::new(bin)
        .args(["score", "--trace"])
        .arg(dir.path().join("no_such_trace.nntd"))
        .args(["--method", "sr", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
}
