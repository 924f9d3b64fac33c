//! Two-stage under-sampling (diagnosis, then tone) and the train/validation split.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::{Diagnosis, ImageRecord, Tone};

pub const DEFAULT_VALIDATION_FRACTION: f64 = 1.0 / 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Imbalanced,
    Balanced,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Imbalanced => "imbalanced",
            Strategy::Balanced => "balanced",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "imbalanced" => Some(Strategy::Imbalanced),
            "balanced" => Some(Strategy::Balanced),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplerError {
    #[error("no malignant records to balance against")]
    NoMalignant,
    #[error("no dark-tone records to balance against")]
    NoDark,
    #[error("need at least 3 records to split, got {0}")]
    TooFewRecords(usize),
    #[error("validation fraction must lie in (0, 1)")]
    InvalidFraction,
    #[error("split of {total} records at this fraction leaves one side empty")]
    EmptySide { total: usize },
}

/// Keeps every record of the smaller group and samples the larger group
/// without replacement down to the same size. Output order is shuffled.
fn equalize<R, F>(records: &[ImageRecord], side: F, rng: &mut R) -> Vec<ImageRecord>
where
    R: Rng + ?Sized,
    F: Fn(&ImageRecord) -> Option<bool>,
{
    let (first, second): (Vec<&ImageRecord>, Vec<&ImageRecord>) = {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for r in records {
            match side(r) {
                Some(true) => a.push(r),
                Some(false) => b.push(r),
                None => {}
            }
        }
        (a, b)
    };
    let mut out: Vec<ImageRecord> = if first.is_empty() || second.is_empty() {
        first.iter().chain(&second).map(|r| (*r).clone()).collect()
    } else {
        let (small, large) = if first.len() <= second.len() {
            (&first, &second)
        } else {
            (&second, &first)
        };
        let mut picked = index::sample(rng, large.len(), small.len()).into_vec();
        picked.sort_unstable();
        small
            .iter()
            .map(|r| (*r).clone())
            .chain(picked.into_iter().map(|i| large[i].clone()))
            .collect()
    };
    out.shuffle(rng);
    out
}

/// Under-samples the majority diagnosis down to the minority count.
/// Records without a tone take part like any other.
pub fn undersample_diagnosis<R: Rng + ?Sized>(
    records: &[ImageRecord],
    rng: &mut R,
) -> Result<Vec<ImageRecord>, SamplerError> {
    if !records.iter().any(|r| r.diagnosis == Diagnosis::Malignant) {
        return Err(SamplerError::NoMalignant);
    }
    Ok(equalize(
        records,
        |r| Some(r.diagnosis == Diagnosis::Malignant),
        rng,
    ))
}

/// Under-samples the majority tone down to the minority count. Records
/// without a tone cannot be balanced and are dropped. The diagnosis ratio is
/// not re-corrected afterwards.
pub fn undersample_tone<R: Rng + ?Sized>(
    records: &[ImageRecord],
    rng: &mut R,
) -> Result<Vec<ImageRecord>, SamplerError> {
    if !records.iter().any(|r| r.tone() == Some(Tone::Dark)) {
        return Err(SamplerError::NoDark);
    }
    Ok(equalize(
        records,
        |r| r.tone().map(|t| t == Tone::Dark),
        rng,
    ))
}

/// Both stages in order: diagnosis first, then tone.
pub fn balance<R: Rng + ?Sized>(
    records: &[ImageRecord],
    rng: &mut R,
) -> Result<Vec<ImageRecord>, SamplerError> {
    let stage_one = undersample_diagnosis(records, rng)?;
    undersample_tone(&stage_one, rng)
}

fn validation_count(n: usize, fraction: f64) -> usize {
    libm::round(n as f64 * fraction) as usize
}

/// Disjoint, exhaustive train/validation partition.
///
/// With `stratify`, the fraction is applied inside every diagnosis x tone cell
/// (untoned records form their own cells) and the cell quotas are rounded by
/// largest remainder so they still add up to `round(n * fraction)`.
pub fn split<R: Rng + ?Sized>(
    records: &[ImageRecord],
    validation_fraction: f64,
    rng: &mut R,
    stratify: bool,
) -> Result<(Vec<ImageRecord>, Vec<ImageRecord>), SamplerError> {
    if records.len() < 3 {
        return Err(SamplerError::TooFewRecords(records.len()));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(SamplerError::InvalidFraction);
    }
    let n = records.len();
    let n_val = validation_count(n, validation_fraction);
    if n_val == 0 || n_val == n {
        return Err(SamplerError::EmptySide { total: n });
    }

    if !stratify {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let validation = order[..n_val].iter().map(|&i| records[i].clone()).collect();
        let train = order[n_val..].iter().map(|&i| records[i].clone()).collect();
        return Ok((train, validation));
    }

    let mut cells: BTreeMap<(Diagnosis, Option<Tone>), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        cells.entry((r.diagnosis, r.tone())).or_default().push(i);
    }
    let exact: Vec<f64> = cells
        .values()
        .map(|members| members.len() as f64 * validation_fraction)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|&q| libm::floor(q) as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut by_remainder: Vec<usize> = (0..quotas.len()).collect();
    // Stable sort keeps cell order on equal remainders.
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - quotas[a] as f64;
        let rb = exact[b] - quotas[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(core::cmp::Ordering::Equal)
    });
    for &cell in by_remainder.iter().take(n_val.saturating_sub(assigned)) {
        quotas[cell] += 1;
    }

    let mut train = Vec::with_capacity(n - n_val);
    let mut validation = Vec::with_capacity(n_val);
    for (members, quota) in cells.into_values().zip(quotas) {
        let mut members = members;
        members.shuffle(rng);
        validation.extend(members[..quota].iter().map(|&i| records[i].clone()));
        train.extend(members[quota..].iter().map(|&i| records[i].clone()));
    }
    Ok((train, validation))
}

/// A sampled and split dataset, reproducible from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<ImageRecord>,
    pub validation: Vec<ImageRecord>,
    pub seed: u64,
    pub strategy: Strategy,
}

impl SplitDataset {
    /// Runs the balancing stages when `strategy` is balanced, then splits.
    pub fn prepare(
        records: &[ImageRecord],
        strategy: Strategy,
        seed: u64,
        validation_fraction: f64,
        stratify: bool,
    ) -> Result<Self, SamplerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pool = match strategy {
            Strategy::Imbalanced => records.to_vec(),
            Strategy::Balanced => balance(records, &mut rng)?,
        };
        let (train, validation) = split(&pool, validation_fraction, &mut rng, stratify)?;
        Ok(Self {
            train,
            validation,
            seed,
            strategy,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
