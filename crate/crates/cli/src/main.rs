use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynsel_cli::{
    cmd_dynamics, cmd_evaluate, cmd_run, cmd_score, cmd_sweep, cmd_trace_export, cmd_train, CliError,
    EvaluationSettings, ExperimentConfig, Protocol, RunMetadata,
};
use dynsel_core::ScoreMethod;

#[derive(Parser)]
#[command(name = "dynsel", version, about = "Selective classification from training dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and record its prediction trace.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score every example of a trace.
    Score {
        #[arg(long)]
        trace: PathBuf,
        /// Score method, e.g. `avg:k=0.05`, `min:et=empirical`, `var:metric=gap:kw=1`, `sr`.
        #[arg(long = "method", required = true)]
        methods: Vec<String>,
        /// run.json written by `train`; needed for empirical e_t estimates.
        #[arg(long)]
        run_meta: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate disagreement dynamics for correct and incorrect examples.
    Dynamics {
        #[arg(long)]
        trace: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Calibrate thresholds and report coverage and selective error.
    Evaluate {
        #[arg(long = "scores", required = true)]
        scores: Vec<PathBuf>,
        /// run.json written by `train`; defines the calibration split.
        #[arg(long)]
        run_meta: Option<PathBuf>,
        /// Config supplying the target grids (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-seed weighting and resolution studies.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Dump a binary trace as CSV.
    TraceExport {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// train, score, dynamics and evaluate in one go.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_parser = parse_protocol)]
        protocol: Option<Protocol>,
    },
}

fn parse_protocol(s: &str) -> Result<Protocol, String> {
    match s {
        "held_out" | "held-out" => Ok(Protocol::HeldOut),
        "same_split" | "same-split" => Ok(Protocol::SameSplit),
        _ => Err(format!("unknown protocol {s:?} (expected held_out or same_split)")),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| config.output_dir.clone());
            let outcome = cmd_train(&config, &out)?;
            println!(
                "trained: {} checkpoints, test accuracy {:.4}, trace {}",
                outcome.meta.n_checkpoints,
                outcome.meta.test_accuracy,
                outcome.trace_path.display()
            );
        }
        Command::Score { trace, methods, run_meta, out } => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<ScoreMethod>())
                .collect::<Result<Vec<_>, _>>()?;
            let meta = run_meta.as_deref().map(RunMetadata::load).transpose()?;
            for (set, path) in cmd_score(&trace, &methods, meta.as_ref(), &out)? {
                println!("{}: {}", set.id(), path.display());
            }
        }
        Command::Dynamics { trace, out } => {
            cmd_dynamics(&trace, &out)?;
            println!("dynamics: {}", out.display());
        }
        Command::Evaluate { scores, run_meta, config, protocol, out } => {
            let mut settings = match config {
                Some(path) => ExperimentConfig::load(&path)?.evaluation,
                None => EvaluationSettings::default(),
            };
            let meta = run_meta.as_deref().map(RunMetadata::load).transpose()?;
            settings.protocol = protocol.unwrap_or(match meta {
                Some(_) => settings.protocol,
                None => Protocol::SameSplit,
            });
            let report = cmd_evaluate(&scores, &settings, meta.as_ref(), &out)?;
            print_report(&report);
        }
        Command::Sweep { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let out = out.unwrap_or_else(|| config.output_dir.clone());
            let report = cmd_sweep(&config, &out)?;
            println!("sweep: {} rows, summary in {}", report.runs.len(), out.join("sweep_summary.csv").display());
        }
        Command::TraceExport { trace, out } => {
            cmd_trace_export(&trace, &out)?;
            println!("trace csv: {}", out.display());
        }
        Command::Run { config, out, seed, protocol } => {
            let mut config = load_config(&config, seed)?;
            if let Some(p) = protocol {
                config.evaluation.protocol = p;
            }
            let out = out.unwrap_or_else(|| config.output_dir.clone());
            let report = cmd_run(&config, &out)?;
            print_report(&report);
        }
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn print_report(report: &dynsel_cli::Report) {
    println!("protocol {} (n_report = {})", report.protocol, report.n_report);
    for m in &report.methods {
        println!(
            "{}: full-coverage error {:.4}, auroc {}",
            m.method,
            m.full_coverage_error,
            fmt_opt(m.auroc)
        );
        for r in &m.rows {
            println!(
                "  {:<8} target {:<6} tau {:>10.4} coverage {:.4} error {}{}",
                r.target_kind,
                r.target,
                r.tau,
                r.coverage,
                fmt_opt(r.error),
                if r.achieved { "" } else { "  (not achieved on calibration)" }
            );
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dynsel: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
