//! Metadata CSV: `isic_id,diagnosis,fitzpatrick_skin_type,image_path`.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use tonescope_core::records::{Diagnosis, Fst, ImageRecord};

pub const METADATA_FILE: &str = "metadata.csv";
pub const COLUMNS: [&str; 4] = [
    "isic_id",
    "diagnosis",
    "fitzpatrick_skin_type",
    "image_path",
];

/// One rejected row. `line` is the 1-based line in the file, header included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum MetadataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("duplicate id `{id}` on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("{} malformed row(s):\n{}", .0.len(), join_rows(.0))]
    Malformed(Vec<RowError>),
}

fn join_rows(rows: &[RowError]) -> String {
    rows.iter()
        .map(|r| format!("  {r}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn load_metadata(path: &Path) -> Result<Vec<ImageRecord>, MetadataError> {
    let file = std::fs::File::open(path).map_err(|source| MetadataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_metadata(file)
}

/// Parses metadata rows. Unusable FST values are kept as unknown (no tone);
/// rows with a bad id, diagnosis or path are all reported together.
pub fn read_metadata<R: Read>(reader: R) -> Result<Vec<ImageRecord>, MetadataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut index = [0usize; 4];
    for (slot, name) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or(MetadataError::MissingColumn(name))?;
    }

    let mut records = Vec::new();
    let mut errors = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let field = |k: usize| row.get(index[k]);
        let (Some(id), Some(diag), Some(fst), Some(path)) =
            (field(0), field(1), field(2), field(3))
        else {
            errors.push(RowError {
                line,
                message: format!("expected {} fields, found {}", headers.len(), row.len()),
            });
            continue;
        };
        if id.is_empty() {
            errors.push(RowError {
                line,
                message: "empty isic_id".into(),
            });
            continue;
        }
        let Some(diagnosis) = Diagnosis::parse(diag) else {
            errors.push(RowError {
                line,
                message: format!("unknown diagnosis `{diag}`"),
            });
            continue;
        };
        if path.is_empty() {
            errors.push(RowError {
                line,
                message: "empty image_path".into(),
            });
            continue;
        }
        if let Some(&first) = seen.get(id) {
            return Err(MetadataError::DuplicateId {
                id: id.to_string(),
                first,
                second: line,
            });
        }
        seen.insert(id.to_string(), line);
        let fst = Fst::parse(fst).unwrap_or(Fst::Unknown);
        records.push(ImageRecord::new(id, diagnosis, fst, path));
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(MetadataError::Malformed(errors))
    }
}

pub fn write_metadata<W: Write>(writer: W, records: &[ImageRecord]) -> Result<(), MetadataError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS)?;
    for r in records {
        w.write_record([
            r.id.as_str(),
            r.diagnosis.name(),
            r.fst.name(),
            r.image_path.as_str(),
        ])?;
    }
    w.flush().map_err(|source| MetadataError::Io {
        path: PathBuf::new(),
        source,
    })?;
    Ok(())
}

pub fn save_metadata(path: &Path, records: &[ImageRecord]) -> Result<(), MetadataError> {
    let file = std::fs::File::create(path).map_err(|source| MetadataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    write_metadata(std::io::BufWriter::new(file), records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tonescope_core::records::Tone;

    const HEADER: &str = "isic_id,diagnosis,fitzpatrick_skin_type,image_path\n";

    #[test]
    fn maps_tones_and_keeps_untoned_rows() {
        let csv = format!("{HEADER}i1,malignant,II,p1.png\ni2,benign,IV,p2.png\ni3,benign,V,p3.png\ni4,benign,,p4.png\n");
        let rs = read_metadata(csv.as_bytes()).unwrap();
        assert_eq!(rs.len(), 4);
        assert_eq!(rs[0].tone(), Some(Tone::Light));
        assert_eq!(rs[1].tone(), Some(Tone::Dark));
        assert_eq!(rs[2].tone(), None);
        assert_eq!(rs[3].fst, Fst::Unknown);
    }

    #[test]
    fn missing_column_is_named() {
        let err =
            read_metadata("isic_id,diagnosis,image_path\na,benign,p\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("fitzpatrick_skin_type"), "{err}");
    }

    #[test]
    fn malformed_rows_are_collected_with_lines() {
        let csv = format!("{HEADER}a,benign,I,p\nb,cancer,I,p\nc,benign,I\n,benign,I,p\n");
        let Err(MetadataError::Malformed(rows)) = read_metadata(csv.as_bytes()) else {
            panic!("expected malformed rows");
        };
        let lines: Vec<usize> = rows.iter().map(|r| r.line).collect();
        assert_eq!(lines, [3, 4, 5]);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let csv = format!("{HEADER}a,benign,I,p\na,malignant,II,q\n");
        assert!(matches!(
            read_metadata(csv.as_bytes()),
            Err(MetadataError::DuplicateId {
                first: 2,
                second: 3,
                ..
            })
        ));
    }

    #[test]
    fn column_order_is_free() {
        let csv = "image_path,fitzpatrick_skin_type,isic_id,diagnosis\np,III,x,malignant\n";
        let rs = read_metadata(csv.as_bytes()).unwrap();
        assert_eq!(
            rs[0],
            ImageRecord::new("x", Diagnosis::Malignant, Fst::III, "p")
        );
    }

    #[test]
    fn header_only_is_empty() {
        assert!(read_metadata(HEADER.as_bytes()).unwrap().is_empty());
    }
}
