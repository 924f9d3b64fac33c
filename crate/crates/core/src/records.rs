//! Image metadata records, Fitzpatrick-to-tone mapping and dataset composition.

use alloc::collections::BTreeMap;
use alloc::string::String;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ground-truth or predicted class. Malignant is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Diagnosis {
    Benign,
    Malignant,
}

impl Diagnosis {
    pub fn index(self) -> usize {
        match self {
            Diagnosis::Benign => 0,
            Diagnosis::Malignant => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Diagnosis::Benign),
            1 => Some(Diagnosis::Malignant),
            _ => None,
        }
    }

    pub fn is_positive(self) -> bool {
        self == Diagnosis::Malignant
    }

    pub fn name(self) -> &'static str {
        match self {
            Diagnosis::Benign => "benign",
            Diagnosis::Malignant => "malignant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Some(Diagnosis::Benign),
            "malignant" => Some(Diagnosis::Malignant),
            _ => None,
        }
    }
}

/// Fitzpatrick skin type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Fst {
    I,
    II,
    III,
    IV,
    V,
    VI,
    Unknown,
}

impl Fst {
    pub const ALL: [Fst; 7] = [
        Fst::I,
        Fst::II,
        Fst::III,
        Fst::IV,
        Fst::V,
        Fst::VI,
        Fst::Unknown,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Fst::I => "i",
            Fst::II => "ii",
            Fst::III => "iii",
            Fst::IV => "iv",
            Fst::V => "v",
            Fst::VI => "vi",
            Fst::Unknown => "unknown",
        }
    }

    /// Accepts roman numerals in either case, the digits 1-6, and an empty
    /// or `unknown` cell. Anything else is `None`.
    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim();
        let lower = s.to_ascii_lowercase();
        let lower = lower.strip_prefix("fst").map(str::trim).unwrap_or(&lower);
        Some(match lower {
            "i" | "1" => Fst::I,
            "ii" | "2" => Fst::II,
            "iii" | "3" => Fst::III,
            "iv" | "4" => Fst::IV,
            "v" | "5" => Fst::V,
            "vi" | "6" => Fst::VI,
            "" | "unknown" | "na" | "n/a" => Fst::Unknown,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tone {
    Light,
    Dark,
}

impl Tone {
    pub fn name(self) -> &'static str {
        match self {
            Tone::Light => "light",
            Tone::Dark => "dark",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "light" => Some(Tone::Light),
            "dark" => Some(Tone::Dark),
            _ => None,
        }
    }
}

/// I and II map to light, III and IV to dark; V, VI and unknown carry no tone.
pub fn map_tone(fst: Fst) -> Option<Tone> {
    match fst {
        Fst::I | Fst::II => Some(Tone::Light),
        Fst::III | Fst::IV => Some(Tone::Dark),
        Fst::V | Fst::VI | Fst::Unknown => None,
    }
}

/// One dermoscopic image's metadata. Tone is always derived from `fst`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageRecord {
    pub id: String,
    pub diagnosis: Diagnosis,
    pub fst: Fst,
    /// Relative to the dataset root.
    pub image_path: String,
}

impl ImageRecord {
    pub fn new(
        id: impl Into<String>,
        diagnosis: Diagnosis,
        fst: Fst,
        image_path: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            diagnosis,
            fst,
            image_path: image_path.into(),
        }
    }

    pub fn tone(&self) -> Option<Tone> {
        map_tone(self.fst)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecordError {
    #[error("record {id} has no tone (fitzpatrick type {fst})")]
    MissingTone { id: String, fst: &'static str },
}

/// Diagnosis x tone cell counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub benign_light: u64,
    pub benign_dark: u64,
    pub malignant_light: u64,
    pub malignant_dark: u64,
}

fn ratio(part: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        part as f64 / total as f64
    }
}

impl DatasetSummary {
    pub fn cell(&self, diagnosis: Diagnosis, tone: Tone) -> u64 {
        match (diagnosis, tone) {
            (Diagnosis::Benign, Tone::Light) => self.benign_light,
            (Diagnosis::Benign, Tone::Dark) => self.benign_dark,
            (Diagnosis::Malignant, Tone::Light) => self.malignant_light,
            (Diagnosis::Malignant, Tone::Dark) => self.malignant_dark,
        }
    }

    fn cell_mut(&mut self, diagnosis: Diagnosis, tone: Tone) -> &mut u64 {
        match (diagnosis, tone) {
            (Diagnosis::Benign, Tone::Light) => &mut self.benign_light,
            (Diagnosis::Benign, Tone::Dark) => &mut self.benign_dark,
            (Diagnosis::Malignant, Tone::Light) => &mut self.malignant_light,
            (Diagnosis::Malignant, Tone::Dark) => &mut self.malignant_dark,
        }
    }

    pub fn total(&self) -> u64 {
        self.benign_light + self.benign_dark + self.malignant_light + self.malignant_dark
    }

    pub fn benign(&self) -> u64 {
        self.benign_light + self.benign_dark
    }

    pub fn malignant(&self) -> u64 {
        self.malignant_light + self.malignant_dark
    }

    pub fn light(&self) -> u64 {
        self.benign_light + self.malignant_light
    }

    pub fn dark(&self) -> u64 {
        self.benign_dark + self.malignant_dark
    }

    pub fn benign_ratio(&self) -> f64 {
        ratio(self.benign(), self.total())
    }

    pub fn malignant_ratio(&self) -> f64 {
        ratio(self.malignant(), self.total())
    }

    pub fn light_ratio(&self) -> f64 {
        ratio(self.light(), self.total())
    }

    pub fn dark_ratio(&self) -> f64 {
        ratio(self.dark(), self.total())
    }

    pub fn cell_ratio(&self, diagnosis: Diagnosis, tone: Tone) -> f64 {
        ratio(self.cell(diagnosis, tone), self.total())
    }
}

/// Cell counts over records that all carry a tone.
pub fn summarize<'a, I>(records: I) -> Result<DatasetSummary, RecordError>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    let mut summary = DatasetSummary::default();
    for r in records {
        let tone = r.tone().ok_or_else(|| RecordError::MissingTone {
            id: r.id.clone(),
            fst: r.fst.name(),
        })?;
        *summary.cell_mut(r.diagnosis, tone) += 1;
    }
    Ok(summary)
}

/// Per skin type and diagnosis counts, including types without a tone.
pub fn fst_counts<'a, I>(records: I) -> BTreeMap<(Fst, Diagnosis), u64>
where
    I: IntoIterator<Item = &'a ImageRecord>,
{
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry((r.fst, r.diagnosis)).or_insert(0) += 1;
    }
    counts
}
