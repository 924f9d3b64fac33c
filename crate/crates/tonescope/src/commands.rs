//! The `tonescope` subcommands as library functions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tonescope_core::fairness::{blocked_control_groups, FairnessReport};
use tonescope_core::model::build_model;
use tonescope_core::records::{fst_counts, summarize, Diagnosis, ImageRecord, Tone};
use tonescope_core::sampler::SplitDataset;
use tonescope_core::trainer::{build_report, train_with, RunHistory};

use crate::config_file::RunConfig;
use crate::images::load_images;
use crate::metadata::{load_metadata, MetadataError, METADATA_FILE};
use crate::persist::{
    read_history, read_report, write_json, write_manifest, HistoryWriter, CONFIG_FILE, CURVES_FILE,
    HISTORY_FILE, REPORT_FILE, TRAIN_MANIFEST, VAL_MANIFEST,
};
use crate::svg::render_curves;

pub const SUMMARY_FILE: &str = "summary.json";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const FAILED_DIR: &str = "failed";
pub const THREADS_ENV: &str = "TONESCOPE_THREADS";
const CONTROL_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments, configuration or input schema.
    Usage,
    Runtime,
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct CliError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn usage(stage: &'static str, message: impl ToString) -> Self {
        Self {
            stage,
            kind: ErrorKind::Usage,
            message: message.to_string(),
        }
    }

    pub fn runtime(stage: &'static str, message: impl ToString) -> Self {
        Self {
            stage,
            kind: ErrorKind::Runtime,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Usage => 1,
            ErrorKind::Runtime => 2,
        }
    }
}

fn metadata_error(e: MetadataError) -> CliError {
    match e {
        MetadataError::Io { .. } => CliError::runtime("ingest", e),
        _ => CliError::usage("ingest", e),
    }
}

/// Outcome of the independence test on a finished audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Fail,
    Undefined,
}

impl Verdict {
    pub fn of(report: &FairnessReport) -> Self {
        match report.independence_pass {
            Some(true) => Verdict::Pass,
            Some(false) => Verdict::Fail,
            None => Verdict::Undefined,
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Verdict::Pass => 0,
            Verdict::Fail => 3,
            Verdict::Undefined => 4,
        }
    }
}

/// Sizes the global rayon pool from `TONESCOPE_THREADS` when set.
pub fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| {
        CliError::usage(
            "threads",
            format!("{THREADS_ENV} must be a positive integer, got `{v}`"),
        )
    })?;
    if n == 0 {
        return Err(CliError::usage(
            "threads",
            format!("{THREADS_ENV} must be positive"),
        ));
    }
    // A pool that already exists (tests, repeated calls) is kept.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn create_dir(dir: &Path, stage: &'static str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::runtime(stage, format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str, stage: &'static str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::runtime(stage, format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: u64,
    pub untoned: u64,
    pub benign_light: u64,
    pub benign_dark: u64,
    pub malignant_light: u64,
    pub malignant_dark: u64,
    pub toned: u64,
    pub benign: u64,
    pub malignant: u64,
    pub light: u64,
    pub dark: u64,
    pub benign_ratio: f64,
    pub malignant_ratio: f64,
    pub light_ratio: f64,
    pub dark_ratio: f64,
}

pub fn summary_of(records: &[ImageRecord]) -> IngestSummary {
    let toned: Vec<&ImageRecord> = records.iter().filter(|r| r.tone().is_some()).collect();
    let s = summarize(toned.iter().copied()).expect("only toned records");
    IngestSummary {
        records: records.len() as u64,
        untoned: (records.len() - toned.len()) as u64,
        benign_light: s.benign_light,
        benign_dark: s.benign_dark,
        malignant_light: s.malignant_light,
        malignant_dark: s.malignant_dark,
        toned: s.total(),
        benign: s.benign(),
        malignant: s.malignant(),
        light: s.light(),
        dark: s.dark(),
        benign_ratio: s.benign_ratio(),
        malignant_ratio: s.malignant_ratio(),
        light_ratio: s.light_ratio(),
        dark_ratio: s.dark_ratio(),
    }
}

/// Writes `summary.json` into `out` (default: the dataset root).
pub fn cmd_ingest(dataset_root: &Path, out: Option<&Path>) -> Result<IngestSummary, CliError> {
    let records = load_metadata(&dataset_root.join(METADATA_FILE)).map_err(metadata_error)?;
    let summary = summary_of(&records);
    let out = out.unwrap_or(dataset_root);
    create_dir(out, "ingest")?;
    let by_fst: Vec<_> = fst_counts(&records)
        .into_iter()
        .map(|((fst, d), n)| json!({"fst": fst.name(), "diagnosis": d.name(), "count": n}))
        .collect();
    let doc = json!({"summary": summary, "fst_counts": by_fst});
    write_json(&out.join(SUMMARY_FILE), &doc).map_err(|e| CliError::runtime("ingest", e))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// run

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub dataset_root: PathBuf,
    pub out: PathBuf,
    pub config: RunConfig,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub history: RunHistory,
    pub verdict: Verdict,
}

/// Moves everything in `out` except `failed/` into `out/failed/` and records
/// the error there.
fn quarantine(out: &Path, err: &CliError) {
    let failed = out.join(FAILED_DIR);
    if std::fs::create_dir_all(&failed).is_err() {
        return;
    }
    if let Ok(entries) = std::fs::read_dir(out) {
        for e in entries.flatten() {
            if e.file_name() != FAILED_DIR {
                let _ = std::fs::rename(e.path(), failed.join(e.file_name()));
            }
        }
    }
    let _ = std::fs::write(failed.join("error.txt"), format!("{err}\n"));
}

pub fn cmd_run(spec: &RunSpec) -> Result<RunOutcome, CliError> {
    create_dir(&spec.out, "setup")?;
    let stale = spec.out.join(FAILED_DIR);
    if stale.exists() {
        std::fs::remove_dir_all(&stale)
            .map_err(|e| CliError::runtime("setup", format!("{}: {e}", stale.display())))?;
    }
    run_stages(spec).inspect_err(|e| quarantine(&spec.out, e))
}

fn run_stages(spec: &RunSpec) -> Result<RunOutcome, CliError> {
    let cfg = &spec.config;
    let out = &spec.out;
    cfg.model
        .validate()
        .map_err(|e| CliError::usage("config", e))?;
    cfg.train
        .validate()
        .map_err(|e| CliError::usage("config", e))?;
    if cfg.model.input_size.channels != 3 {
        return Err(CliError::usage(
            "config",
            "images decode to 3 channels; set input_channels = 3",
        ));
    }
    write_text(&out.join(CONFIG_FILE), &cfg.to_text(), "setup")?;

    let records = load_metadata(&spec.dataset_root.join(METADATA_FILE)).map_err(metadata_error)?;
    let seed = cfg.train.seed;
    let split = SplitDataset::prepare(
        &records,
        cfg.strategy,
        seed,
        cfg.validation_fraction,
        cfg.stratify,
    )
    .map_err(|e| CliError::runtime("sample", e))?;
    let ids = |rs: &[ImageRecord]| rs.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
    write_manifest(&out.join(TRAIN_MANIFEST), &ids(&split.train))
        .map_err(|e| CliError::runtime("sample", e))?;
    write_manifest(&out.join(VAL_MANIFEST), &ids(&split.validation))
        .map_err(|e| CliError::runtime("sample", e))?;

    let side = cfg.model.input_size.height;
    let train_set = load_images(&spec.dataset_root, &split.train, side)
        .map_err(|e| CliError::runtime("decode", e))?;
    let validation = load_images(&spec.dataset_root, &split.validation, side)
        .map_err(|e| CliError::runtime("decode", e))?;

    let mut model = build_model(&cfg.model, seed).map_err(|e| CliError::usage("model", e))?;
    let history_path = out.join(HISTORY_FILE);
    let mut writer =
        HistoryWriter::create(&history_path).map_err(|e| CliError::runtime("train", e))?;
    let mut write_error = None;
    let history = train_with(&mut model, &train_set, &validation, &cfg.train, |m| {
        if write_error.is_none() {
            write_error = writer.push(m).err();
        }
    })
    .map_err(|e| CliError::runtime("train", e))?;
    if let Some(e) = write_error {
        return Err(CliError::runtime("train", e));
    }

    write_json(&out.join(REPORT_FILE), &history.report)
        .map_err(|e| CliError::runtime("audit", e))?;
    plot_run(out, cfg.train.epsilon)?;
    let verdict = Verdict::of(&history.report);
    Ok(RunOutcome { history, verdict })
}

// ---------------------------------------------------------------------------
// plot

fn plot_run(run_dir: &Path, epsilon: f64) -> Result<(), CliError> {
    let rows =
        read_history(&run_dir.join(HISTORY_FILE)).map_err(|e| CliError::runtime("plot", e))?;
    write_text(
        &run_dir.join(CURVES_FILE),
        &render_curves(&rows, epsilon),
        "plot",
    )
}

/// Regenerates `curves.svg` from `history.csv` (and `config.txt` for the
/// band, when present).
pub fn cmd_plot(run_dir: &Path) -> Result<PathBuf, CliError> {
    let config_path = run_dir.join(CONFIG_FILE);
    let epsilon = if config_path.exists() {
        let text = std::fs::read_to_string(&config_path)
            .map_err(|e| CliError::runtime("plot", format!("{}: {e}", config_path.display())))?;
        RunConfig::parse(&text)
            .map_err(|e| CliError::usage("plot", format!("{}: {e}", config_path.display())))?
            .train
            .epsilon
    } else {
        RunConfig::default().train.epsilon
    };
    plot_run(run_dir, epsilon)?;
    Ok(run_dir.join(CURVES_FILE))
}

// ---------------------------------------------------------------------------
// audit

/// One row of a predictions CSV (`id,prediction,truth,tone`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRow {
    pub id: String,
    pub prediction: Diagnosis,
    pub truth: Diagnosis,
    pub tone: Option<Tone>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>, CliError> {
    let file = std::fs::File::open(path)
        .map_err(|e| CliError::runtime("audit", format!("{}: {e}", path.display())))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::usage("audit", e))?
        .clone();
    let mut idx = [0usize; 4];
    for (slot, name) in idx.iter_mut().zip(["id", "prediction", "truth", "tone"]) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| CliError::usage("audit", format!("missing required column `{name}`")))?;
    }
    let mut rows = Vec::new();
    let mut problems = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("line {line}: {e}"));
                continue;
            }
        };
        let get = |k: usize| rec.get(idx[k]).unwrap_or("");
        let pred = Diagnosis::parse(get(1));
        let truth = Diagnosis::parse(get(2));
        let tone = match get(3).to_ascii_lowercase().as_str() {
            "" | "none" => Some(None),
            t => Tone::parse(t).map(Some),
        };
        match (pred, truth, tone) {
            (Some(prediction), Some(truth), Some(tone)) => rows.push(PredictionRow {
                id: get(0).to_string(),
                prediction,
                truth,
                tone,
            }),
            _ => problems.push(format!(
                "line {line}: expected benign|malignant predictions and truth and light|dark|none tone"
            )),
        }
    }
    if !problems.is_empty() {
        return Err(CliError::usage("audit", problems.join("\n")));
    }
    if rows.is_empty() {
        return Err(CliError::usage("audit", "no predictions"));
    }
    Ok(rows)
}

/// Standalone audit of third-party predictions. The control groups are
/// assigned from `seed`, balanced within each truth x tone cell.
pub fn audit_rows(
    rows: &[PredictionRow],
    epsilon: f64,
    seed: u64,
) -> Result<FairnessReport, CliError> {
    let preds: Vec<Diagnosis> = rows.iter().map(|r| r.prediction).collect();
    let truth: Vec<Diagnosis> = rows.iter().map(|r| r.truth).collect();
    let tones: Vec<Option<Tone>> = rows.iter().map(|r| r.tone).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(CONTROL_STREAM);
    let keys: Vec<(Diagnosis, Option<Tone>)> = rows.iter().map(|r| (r.truth, r.tone)).collect();
    let control = blocked_control_groups(&keys, &mut rng);
    build_report(&preds, &truth, &tones, Some(&control), &truth, epsilon)
        .map_err(|e| CliError::runtime("audit", e))
}

/// Writes `report.json` to `out` and returns the report with its verdict.
pub fn cmd_audit(
    predictions: &Path,
    out: &Path,
    epsilon: f64,
    seed: u64,
) -> Result<(FairnessReport, Verdict), CliError> {
    let rows = read_predictions(predictions)?;
    let report = audit_rows(&rows, epsilon, seed)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent, "audit")?;
    }
    write_json(out, &report).map_err(|e| CliError::runtime("audit", e))?;
    let verdict = Verdict::of(&report);
    Ok((report, verdict))
}

// ---------------------------------------------------------------------------
// compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub epochs: usize,
    pub accuracy: f64,
    pub majority_accuracy: f64,
    pub tone_di: Option<f64>,
    pub control_di: Option<f64>,
    pub independence_pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub runs: [RunSummary; 2],
    /// Second run minus first.
    pub delta: Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub accuracy: f64,
    pub majority_accuracy: f64,
    pub tone_di: Option<f64>,
    pub control_di: Option<f64>,
}

fn summarize_run(dir: &Path) -> Result<RunSummary, CliError> {
    let report_path = dir.join(REPORT_FILE);
    if !report_path.exists() {
        return Err(CliError::runtime(
            "compare",
            format!(
                "{} has no {REPORT_FILE}; is the run complete?",
                dir.display()
            ),
        ));
    }
    let report = read_report(&report_path).map_err(|e| CliError::runtime("compare", e))?;
    let rows =
        read_history(&dir.join(HISTORY_FILE)).map_err(|e| CliError::runtime("compare", e))?;
    Ok(RunSummary {
        run: dir.display().to_string(),
        epochs: rows.last().map_or(0, |r| r.epoch),
        accuracy: persist_round(report.accuracy),
        majority_accuracy: persist_round(report.majority_accuracy),
        tone_di: report.disparate_impact.value(),
        control_di: report.control_disparate_impact.and_then(|d| d.value()),
        independence_pass: report.independence_pass,
    })
}

fn persist_round(v: f64) -> f64 {
    tonescope_core::fairness::round3(v)
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(persist_round(b? - a?))
}

fn cell(v: Option<f64>) -> String {
    v.map_or("undefined".into(), |v| format!("{v:.3}"))
}

impl Comparison {
    /// Final-epoch accuracy against the majority baseline, one row per run.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<32} {:>6} {:>9} {:>9} {:>8} {:>10}",
            "run", "epochs", "accuracy", "majority", "tone_di", "control_di"
        );
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{:<32} {:>6} {:>9.3} {:>9.3} {:>8} {:>10}",
                r.run,
                r.epochs,
                r.accuracy,
                r.majority_accuracy,
                cell(r.tone_di),
                cell(r.control_di)
            );
        }
        let d = &self.delta;
        let _ = writeln!(
            s,
            "{:<32} {:>6} {:>9.3} {:>9.3} {:>8} {:>10}",
            "delta",
            "",
            d.accuracy,
            d.majority_accuracy,
            cell(d.tone_di),
            cell(d.control_di)
        );
        s
    }
}

/// Writes `comparison.json` into `out` (default: current directory).
pub fn cmd_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<Comparison, CliError> {
    let ra = summarize_run(a)?;
    let rb = summarize_run(b)?;
    let delta = Delta {
        accuracy: persist_round(rb.accuracy - ra.accuracy),
        majority_accuracy: persist_round(rb.majority_accuracy - ra.majority_accuracy),
        tone_di: diff(ra.tone_di, rb.tone_di),
        control_di: diff(ra.control_di, rb.control_di),
    };
    let cmp = Comparison {
        runs: [ra, rb],
        delta,
    };
    let out = out.unwrap_or(Path::new("."));
    create_dir(out, "compare")?;
    write_json(&out.join(COMPARISON_FILE), &cmp).map_err(|e| CliError::runtime("compare", e))?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(spec: &[(bool, bool, Option<Tone>, usize)]) -> Vec<PredictionRow> {
        let d = |m: bool| {
            if m {
                Diagnosis::Malignant
            } else {
                Diagnosis::Benign
            }
        };
        let mut out = Vec::new();
        for &(p, t, tone, n) in spec {
            for _ in 0..n {
                out.push(PredictionRow {
                    id: format!("r{}", out.len()),
                    prediction: d(p),
                    truth: d(t),
                    tone,
                });
            }
        }
        out
    }

    #[test]
    fn verdict_exit_codes() {
        assert_eq!(Verdict::Pass.exit_code(), 0);
        assert_eq!(Verdict::Fail.exit_code(), 3);
        assert_eq!(Verdict::Undefined.exit_code(), 4);
        assert_eq!(CliError::usage("x", "y").exit_code(), 1);
        assert_eq!(CliError::runtime("x", "y").exit_code(), 2);
    }

    #[test]
    fn all_benign_predictions_are_undefined() {
        let r = rows(&[
            (false, true, Some(Tone::Dark), 3),
            (false, false, Some(Tone::Light), 5),
        ]);
        let report = audit_rows(&r, 0.2, 0).unwrap();
        assert_eq!(Verdict::of(&report), Verdict::Undefined);
    }

    #[test]
    fn untoned_rows_count_for_accuracy_only() {
        let r = rows(&[
            (true, true, Some(Tone::Dark), 2),
            (true, true, Some(Tone::Light), 2),
            (false, true, None, 4),
        ]);
        let report = audit_rows(&r, 0.2, 0).unwrap();
        assert_eq!(report.accuracy, 0.5);
        assert_eq!(report.confusion.grouped_total(), 4);
        assert_eq!(Verdict::of(&report), Verdict::Pass);
    }
}
