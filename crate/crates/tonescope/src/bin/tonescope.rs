use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tonescope::commands::{
    cmd_audit, cmd_compare, cmd_ingest, cmd_plot, cmd_run, init_threads, CliError, RunSpec, Verdict,
};
use tonescope::config_file::RunConfig;
use tonescope::fixture::{generate_fixture, FixtureSpec};
use tonescope_core::fairness::{FairnessReport, DEFAULT_EPSILON};
use tonescope_core::sampler::Strategy;

#[derive(Parser)]
#[command(
    name = "tonescope",
    version,
    about = "Skin-tone fairness audits for lesion classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Imbalanced,
    Balanced,
}

#[derive(Subcommand)]
enum Command {
    /// Summarize a dataset's diagnosis x tone composition into summary.json.
    Ingest {
        #[arg(long)]
        dataset_root: PathBuf,
        /// Directory for summary.json (default: the dataset root).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample, split, train and audit; writes a run directory.
    Run(RunArgs),
    /// Audit a predictions CSV (id,prediction,truth,tone) without training.
    Audit {
        predictions: PathBuf,
        /// Report path.
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        epsilon: f64,
        /// Seed for the control-group assignment.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare the final epochs of two run directories.
    Compare {
        run_a: PathBuf,
        run_b: PathBuf,
        /// Directory for comparison.json (default: current directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate curves.svg from a run's history.csv.
    Plot { run_dir: PathBuf },
    /// Write a synthetic 400-image dataset (PNG files + metadata.csv).
    Fixture {
        #[arg(long, value_enum)]
        kind: FixtureKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureKind {
    /// Tone brightness shift; malignancy visible on light tone only.
    Biased,
    /// No tone signal; malignancy visible on both tones.
    Unbiased,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    dataset_root: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// key = value file with model settings.
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// key = value file with training settings.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    input_side: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Keep diagnosis x tone proportions equal across the split.
    #[arg(long)]
    stratify: bool,
}

fn build_spec(a: RunArgs) -> Result<RunSpec, CliError> {
    let mut config = RunConfig::default();
    for path in [&a.model_config, &a.train_config].into_iter().flatten() {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))?;
        config
            .apply(&text)
            .map_err(|e| CliError::usage("config", format!("{}: {e}", path.display())))?;
    }
    if let Some(s) = a.strategy {
        config.strategy = match s {
            StrategyArg::Imbalanced => Strategy::Imbalanced,
            StrategyArg::Balanced => Strategy::Balanced,
        };
    }
    let overrides = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("epsilon", a.epsilon.map(|v| v.to_string())),
        ("input_side", a.input_side.map(|v| v.to_string())),
        ("max_epochs", a.max_epochs.map(|v| v.to_string())),
    ];
    for (k, v) in overrides {
        if let Some(v) = v {
            config
                .set(k, &v)
                .map_err(|e| CliError::usage("config", e))?;
        }
    }
    if a.stratify {
        config.stratify = true;
    }
    Ok(RunSpec {
        dataset_root: a.dataset_root,
        out: a.out,
        config,
    })
}

fn print_verdict(report: &FairnessReport, verdict: Verdict) {
    let di = match report.disparate_impact.value() {
        Some(v) => format!("{v:.3}"),
        None => "undefined".into(),
    };
    let (lo, hi) = report.independence_band;
    let word = match verdict {
        Verdict::Pass => "pass",
        Verdict::Fail => "FAIL",
        Verdict::Undefined => "undefined",
    };
    println!(
        "accuracy {:.3} (majority {:.3}); tone DI {di} in [{lo:.3}, {hi:.3}]: {word}",
        report.accuracy, report.majority_accuracy
    );
}

fn run(cli: Cli) -> Result<i32, CliError> {
    init_threads()?;
    match cli.command {
        Command::Ingest { dataset_root, out } => {
            let s = cmd_ingest(&dataset_root, out.as_deref())?;
            println!(
                "{} records ({} without tone): benign {} / malignant {}, light {} / dark {}",
                s.records, s.untoned, s.benign, s.malignant, s.light, s.dark
            );
            Ok(0)
        }
        Command::Run(args) => {
            let spec = build_spec(args)?;
            let outcome = cmd_run(&spec)?;
            println!(
                "{} epochs{} -> {}",
                outcome.history.epochs.len(),
                if outcome.history.stopped_early {
                    " (early stop)"
                } else {
                    ""
                },
                spec.out.display()
            );
            print_verdict(&outcome.history.report, outcome.verdict);
            Ok(outcome.verdict.exit_code())
        }
        Command::Audit {
            predictions,
            out,
            epsilon,
            seed,
        } => {
            let (report, verdict) = cmd_audit(&predictions, &out, epsilon, seed)?;
            print_verdict(&report, verdict);
            Ok(verdict.exit_code())
        }
        Command::Compare { run_a, run_b, out } => {
            let cmp = cmd_compare(&run_a, &run_b, out.as_deref())?;
            print!("{}", cmp.table());
            Ok(0)
        }
        Command::Plot { run_dir } => {
            println!("{}", cmd_plot(&run_dir)?.display());
            Ok(0)
        }
        Command::Fixture { kind, out, seed } => {
            let spec = match kind {
                FixtureKind::Biased => FixtureSpec::biased(seed),
                FixtureKind::Unbiased => FixtureSpec::unbiased(seed),
            };
            let records =
                generate_fixture(&out, &spec).map_err(|e| CliError::runtime("fixture", e))?;
            println!("{} images -> {}", records.len(), out.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
