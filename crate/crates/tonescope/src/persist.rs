//! On-disk run directory: `history.csv`, `report.json`, `manifest.train`,
//! `manifest.val`, `config.txt` and `curves.svg`.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use tonescope_core::fairness::{
    ConfusionMatrix, DisparateImpact, FairnessReport, Group, GroupedConfusion,
};
use tonescope_core::trainer::EpochMetrics;

pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_MANIFEST: &str = "manifest.train";
pub const VAL_MANIFEST: &str = "manifest.val";
pub const CONFIG_FILE: &str = "config.txt";
pub const CURVES_FILE: &str = "curves.svg";

const GROUPS: [Group; 4] = [Group::Dark, Group::Light, Group::ControlA, Group::ControlB];

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistError + '_ {
    move |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One parsed `history.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub accuracy: f64,
    pub selection_rate_dark: Option<f64>,
    pub selection_rate_light: Option<f64>,
    pub tone_di: Option<f64>,
    pub control_di: Option<f64>,
    /// tp, fp, fn, tn for dark, light, control a, control b.
    pub confusion: [[u64; 4]; 4],
}

pub fn history_header() -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "train_loss",
        "accuracy",
        "selection_rate_dark",
        "selection_rate_light",
        "tone_di",
        "control_di",
    ]
    .map(String::from)
    .to_vec();
    for g in GROUPS {
        for cell in ["tp", "fp", "fn", "tn"] {
            h.push(format!("{}_{cell}", g.name()));
        }
    }
    h
}

fn rate(v: Option<f64>) -> String {
    v.map(|r| format!("{r:.3}")).unwrap_or_default()
}

fn di(v: &DisparateImpact) -> String {
    match v.value() {
        Some(d) => format!("{d:.3}"),
        None => "undefined".into(),
    }
}

fn cells(grouped: &GroupedConfusion, g: Group) -> [u64; 4] {
    let cm = grouped.get(g).copied().unwrap_or_default();
    [cm.tp, cm.fp, cm.fn_, cm.tn]
}

pub fn history_record(m: &EpochMetrics) -> Vec<String> {
    let mut row = vec![
        m.epoch.to_string(),
        format!("{:.6}", m.train_loss),
        format!("{:.3}", m.accuracy),
        rate(m.selection_rate_dark),
        rate(m.selection_rate_light),
        di(&m.tone_di),
        di(&m.control_di),
    ];
    for g in GROUPS {
        let src = if matches!(g, Group::Dark | Group::Light) {
            &m.confusion
        } else {
            &m.control_confusion
        };
        row.extend(cells(src, g).iter().map(u64::to_string));
    }
    row
}

/// Appends one row per epoch as training progresses.
pub struct HistoryWriter {
    path: PathBuf,
    inner: csv::Writer<File>,
}

impl HistoryWriter {
    pub fn create(path: &Path) -> Result<Self, PersistError> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut inner = csv::Writer::from_writer(file);
        let mut w = Self {
            path: path.to_path_buf(),
            inner: {
                inner
                    .write_record(history_header())
                    .map_err(|source| PersistError::Csv {
                        path: path.to_path_buf(),
                        source,
                    })?;
                inner
            },
        };
        w.flush()?;
        Ok(w)
    }

    pub fn push(&mut self, m: &EpochMetrics) -> Result<(), PersistError> {
        self.inner
            .write_record(history_record(m))
            .map_err(|source| PersistError::Csv {
                path: self.path.clone(),
                source,
            })?;
        self.flush()
    }

    fn flush(&mut self) -> Result<(), PersistError> {
        self.inner.flush().map_err(io_err(&self.path))
    }
}

pub fn write_history(path: &Path, epochs: &[EpochMetrics]) -> Result<(), PersistError> {
    let mut w = HistoryWriter::create(path)?;
    for m in epochs {
        w.push(m)?;
    }
    Ok(())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>, PersistError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|source| PersistError::Csv {
            path: path.to_path_buf(),
            source,
        })?
        .iter()
        .map(String::from)
        .collect();
    if header != history_header() {
        return Err(PersistError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "unexpected header".into(),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|source| PersistError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |message: String| PersistError::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let f = |k: usize| -> Result<f64, PersistError> {
            rec[k]
                .parse()
                .map_err(|_| bad(format!("bad number `{}`", &rec[k])))
        };
        let opt = |k: usize| -> Result<Option<f64>, PersistError> {
            match &rec[k] {
                "" | "undefined" => Ok(None),
                _ => f(k).map(Some),
            }
        };
        let mut confusion = [[0u64; 4]; 4];
        for (g, row) in confusion.iter_mut().enumerate() {
            for (c, cell) in row.iter_mut().enumerate() {
                let k = 7 + g * 4 + c;
                *cell = rec[k]
                    .parse()
                    .map_err(|_| bad(format!("bad count `{}`", &rec[k])))?;
            }
        }
        rows.push(HistoryRow {
            epoch: rec[0]
                .parse()
                .map_err(|_| bad(format!("bad epoch `{}`", &rec[0])))?,
            train_loss: f(1)?,
            accuracy: f(2)?,
            selection_rate_dark: opt(3)?,
            selection_rate_light: opt(4)?,
            tone_di: opt(5)?,
            control_di: opt(6)?,
            confusion,
        });
    }
    Ok(rows)
}

impl HistoryRow {
    pub fn group(&self, g: Group) -> ConfusionMatrix {
        let i = GROUPS.iter().position(|&x| x == g).expect("known group");
        let [tp, fp, fn_, tn] = self.confusion[i];
        ConfusionMatrix::new(tp, fp, fn_, tn)
    }
}

pub fn write_manifest(path: &Path, ids: &[String]) -> Result<(), PersistError> {
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    for id in ids {
        writeln!(f, "{id}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<String>, PersistError> {
    let f = File::open(path).map_err(io_err(path))?;
    BufReader::new(f)
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| l.map(|l| l.trim().to_string()).map_err(io_err(path)))
        .collect()
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), PersistError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| PersistError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_report(path: &Path) -> Result<FairnessReport, PersistError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| PersistError::Json {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(epoch: usize, tone_di: DisparateImpact) -> EpochMetrics {
        EpochMetrics {
            epoch,
            train_loss: 0.512_345_6,
            accuracy: 0.75,
            selection_rate_dark: Some(0.25),
            selection_rate_light: None,
            tone_di,
            control_di: DisparateImpact::Defined(1.0 / 3.0),
            confusion: GroupedConfusion::default()
                .with(Group::Dark, ConfusionMatrix::new(1, 2, 3, 4)),
            control_confusion: GroupedConfusion::default()
                .with(Group::ControlA, ConfusionMatrix::new(5, 6, 7, 8))
                .with(Group::ControlB, ConfusionMatrix::new(0, 0, 0, 1)),
        }
    }

    #[test]
    fn history_round_trips_at_written_precision() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(HISTORY_FILE);
        let epochs = [
            metrics(1, DisparateImpact::Defined(0.5771)),
            metrics(
                2,
                DisparateImpact::Undefined {
                    numerator_rate: 0.1,
                    denominator_rate: 0.0,
                },
            ),
        ];
        write_history(&p, &epochs).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let second = text.lines().nth(1).unwrap();
        assert!(
            second
                .starts_with("1,0.512346,0.750,0.250,,0.577,0.333,1,2,3,4,0,0,0,0,5,6,7,8,0,0,0,1"),
            "{second}"
        );
        let rows = read_history(&p).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].tone_di, Some(0.577));
        assert_eq!(rows[1].tone_di, None);
        assert_eq!(
            rows[0].group(Group::ControlA),
            ConfusionMatrix::new(5, 6, 7, 8)
        );
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(VAL_MANIFEST);
        let ids: Vec<String> = ["a", "b c", "d"].map(String::from).to_vec();
        write_manifest(&p, &ids).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), ids);
    }

    #[test]
    fn bad_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(HISTORY_FILE);
        std::fs::write(&p, "epoch,loss\n1,0.5\n").unwrap();
        assert!(matches!(
            read_history(&p),
            Err(PersistError::Parse { line: 1, .. })
        ));
    }
}
