//! Group fairness metrics over binary malignant/benign predictions.
//!
//! Positive means malignant. Selection rate is the fraction of a group
//! predicted positive; disparate impact is the ratio of two groups'
//! selection rates (dark over light by convention).

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::RngCore;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::records::{Diagnosis, Tone};

pub const DEFAULT_EPSILON: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuditError {
    #[error("predictions ({preds}) and truth ({truth}) differ in length")]
    LengthMismatch { preds: usize, truth: usize },
    #[error("no predictions to score")]
    Empty,
    #[error("group {0} has no scored predictions")]
    EmptyGroup(Group),
    #[error("group {group} has no {missing} so the gap is undefined")]
    Degenerate { group: Group, missing: &'static str },
    #[error("a control group stayed empty after resampling")]
    ControlGroupEmpty,
}

/// Counts with positive = malignant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn predicted_positive(&self) -> u64 {
        self.tp + self.fp
    }

    pub fn predicted_negative(&self) -> u64 {
        self.tn + self.fn_
    }

    pub fn actual_positive(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn actual_negative(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn record(&mut self, pred: Diagnosis, truth: Diagnosis) {
        match (pred.is_positive(), truth.is_positive()) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn scaled(&self, k: u64) -> Self {
        Self::new(self.tp * k, self.fp * k, self.fn_ * k, self.tn * k)
    }
}

impl core::ops::Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(
            self.tp + o.tp,
            self.fp + o.fp,
            self.fn_ + o.fn_,
            self.tn + o.tn,
        )
    }
}

pub fn confusion(preds: &[Diagnosis], truth: &[Diagnosis]) -> Result<ConfusionMatrix, AuditError> {
    if preds.len() != truth.len() {
        return Err(AuditError::LengthMismatch {
            preds: preds.len(),
            truth: truth.len(),
        });
    }
    if preds.is_empty() {
        return Err(AuditError::Empty);
    }
    let mut cm = ConfusionMatrix::default();
    for (&p, &t) in preds.iter().zip(truth) {
        cm.record(p, t);
    }
    Ok(cm)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64, AuditError> {
    match cm.total() {
        0 => Err(AuditError::Empty),
        n => Ok((cm.tp + cm.tn) as f64 / n as f64),
    }
}

pub fn selection_rate(cm: &ConfusionMatrix) -> Result<f64, AuditError> {
    match cm.total() {
        0 => Err(AuditError::Empty),
        n => Ok(cm.predicted_positive() as f64 / n as f64),
    }
}

/// Protected or control group label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Dark,
    Light,
    ControlA,
    ControlB,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Dark => "dark",
            Group::Light => "light",
            Group::ControlA => "control_a",
            Group::ControlB => "control_b",
        }
    }
}

impl core::fmt::Display for Group {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Tone> for Group {
    fn from(t: Tone) -> Self {
        match t {
            Tone::Dark => Group::Dark,
            Tone::Light => Group::Light,
        }
    }
}

/// Per-group confusion matrices for one evaluation pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupedConfusion {
    pub groups: BTreeMap<Group, ConfusionMatrix>,
    /// Predictions that carried no group (e.g. records without a tone).
    pub excluded: u64,
}

impl GroupedConfusion {
    /// Builds from parallel prediction, truth and group slices; `None` groups
    /// are counted in `excluded`.
    pub fn from_predictions(
        preds: &[Diagnosis],
        truth: &[Diagnosis],
        groups: &[Option<Group>],
    ) -> Result<Self, AuditError> {
        if preds.len() != truth.len() || preds.len() != groups.len() {
            return Err(AuditError::LengthMismatch {
                preds: preds.len(),
                truth: truth.len().min(groups.len()),
            });
        }
        let mut out = Self::default();
        for ((&p, &t), g) in preds.iter().zip(truth).zip(groups) {
            match g {
                Some(g) => out.groups.entry(*g).or_default().record(p, t),
                None => out.excluded += 1,
            }
        }
        Ok(out)
    }

    pub fn with(mut self, group: Group, cm: ConfusionMatrix) -> Self {
        self.groups.insert(group, cm);
        self
    }

    pub fn get(&self, group: Group) -> Option<&ConfusionMatrix> {
        self.groups.get(&group)
    }

    fn non_empty(&self, group: Group) -> Result<&ConfusionMatrix, AuditError> {
        self.get(group)
            .filter(|cm| cm.total() > 0)
            .ok_or(AuditError::EmptyGroup(group))
    }

    pub fn pooled(&self) -> ConfusionMatrix {
        self.groups
            .values()
            .fold(ConfusionMatrix::default(), |a, &b| a + b)
    }

    pub fn grouped_total(&self) -> u64 {
        self.groups.values().map(ConfusionMatrix::total).sum()
    }
}

/// A disparate impact ratio, or the two rates when the denominator rate is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DisparateImpact {
    Defined(f64),
    Undefined {
        numerator_rate: f64,
        denominator_rate: f64,
    },
}

impl DisparateImpact {
    pub fn value(&self) -> Option<f64> {
        match *self {
            DisparateImpact::Defined(v) => Some(v),
            DisparateImpact::Undefined { .. } => None,
        }
    }

    pub fn is_defined(&self) -> bool {
        matches!(self, DisparateImpact::Defined(_))
    }

    pub fn from_rates(numerator_rate: f64, denominator_rate: f64) -> Self {
        if denominator_rate > 0.0 {
            DisparateImpact::Defined(numerator_rate / denominator_rate)
        } else {
            DisparateImpact::Undefined {
                numerator_rate,
                denominator_rate,
            }
        }
    }
}

/// Serialized as a number rounded to three decimals, or the string `"undefined"`.
impl Serialize for DisparateImpact {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            DisparateImpact::Defined(v) => s.serialize_f64(round3(*v)),
            DisparateImpact::Undefined { .. } => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for DisparateImpact {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(DisparateImpact::Defined(v)),
            Raw::Text(t) if t == "undefined" => Ok(DisparateImpact::Undefined {
                numerator_rate: f64::NAN,
                denominator_rate: 0.0,
            }),
            Raw::Text(other) => Err(serde::de::Error::invalid_value(
                serde::de::Unexpected::Str(&other),
                &"a number or \"undefined\"",
            )),
        }
    }
}

pub fn round3(v: f64) -> f64 {
    libm::round(v * 1000.0) / 1000.0
}

/// Selection-rate ratio `numerator / denominator`.
pub fn disparate_impact(
    grouped: &GroupedConfusion,
    numerator: Group,
    denominator: Group,
) -> Result<DisparateImpact, AuditError> {
    let num = selection_rate(grouped.non_empty(numerator)?)?;
    let den = selection_rate(grouped.non_empty(denominator)?)?;
    Ok(DisparateImpact::from_rates(num, den))
}

/// Reciprocal-symmetric acceptance band `[1 - eps, 1 / (1 - eps)]`.
pub fn independence_band(epsilon: f64) -> (f64, f64) {
    (1.0 - epsilon, 1.0 / (1.0 - epsilon))
}

pub fn independence_test(di: f64, epsilon: f64) -> bool {
    let (lo, hi) = independence_band(epsilon);
    di >= lo && di <= hi
}

fn rate(num: u64, den: u64, group: Group, missing: &'static str) -> Result<f64, AuditError> {
    if den == 0 {
        Err(AuditError::Degenerate { group, missing })
    } else {
        Ok(num as f64 / den as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparationGaps {
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SufficiencyGaps {
    pub ppv: f64,
    #[serde(rename = "for")]
    pub for_: f64,
}

/// Absolute TPR and FPR differences between two groups.
pub fn separation_gaps(
    grouped: &GroupedConfusion,
    a: Group,
    b: Group,
) -> Result<SeparationGaps, AuditError> {
    let per_group = |g: Group| -> Result<(f64, f64), AuditError> {
        let cm = grouped.non_empty(g)?;
        Ok((
            rate(cm.tp, cm.actual_positive(), g, "actual positives")?,
            rate(cm.fp, cm.actual_negative(), g, "actual negatives")?,
        ))
    };
    let (tpr_a, fpr_a) = per_group(a)?;
    let (tpr_b, fpr_b) = per_group(b)?;
    Ok(SeparationGaps {
        tpr: (tpr_a - tpr_b).abs(),
        fpr: (fpr_a - fpr_b).abs(),
    })
}

/// Absolute precision and false-omission-rate differences between two groups.
pub fn sufficiency_gaps(
    grouped: &GroupedConfusion,
    a: Group,
    b: Group,
) -> Result<SufficiencyGaps, AuditError> {
    let per_group = |g: Group| -> Result<(f64, f64), AuditError> {
        let cm = grouped.non_empty(g)?;
        Ok((
            rate(cm.tp, cm.predicted_positive(), g, "predicted positives")?,
            rate(cm.fn_, cm.predicted_negative(), g, "predicted negatives")?,
        ))
    };
    let (ppv_a, for_a) = per_group(a)?;
    let (ppv_b, for_b) = per_group(b)?;
    Ok(SufficiencyGaps {
        ppv: (ppv_a - ppv_b).abs(),
        for_: (for_a - for_b).abs(),
    })
}

fn coin_groups<R: RngCore + ?Sized>(n: usize, rng: &mut R) -> Vec<Group> {
    (0..n)
        .map(|_| {
            if rng.next_u32() & 1 == 0 {
                Group::ControlA
            } else {
                Group::ControlB
            }
        })
        .collect()
}

/// Disparate impact between two random groups assigned by fair coin. An
/// empty group triggers one redraw before giving up.
pub fn control_disparate_impact<R: RngCore + ?Sized>(
    preds: &[Diagnosis],
    rng: &mut R,
) -> Result<DisparateImpact, AuditError> {
    if preds.len() < 2 {
        return Err(AuditError::Empty);
    }
    for _ in 0..2 {
        let groups = coin_groups(preds.len(), rng);
        if groups.iter().all(|&g| g == groups[0]) {
            continue;
        }
        let mut grouped = GroupedConfusion::default();
        for (&p, &g) in preds.iter().zip(&groups) {
            // Truth is irrelevant for selection rates.
            grouped
                .groups
                .entry(g)
                .or_default()
                .record(p, Diagnosis::Benign);
        }
        return disparate_impact(&grouped, Group::ControlA, Group::ControlB);
    }
    Err(AuditError::ControlGroupEmpty)
}

/// Blocked control assignment: within every cell (same key), members are
/// shuffled and split in half between the two control groups, an odd member
/// going to a coin-chosen side. The control stays uncorrelated with the cell
/// keys in the sample itself, not just in expectation.
pub fn blocked_control_groups<K: Ord + Copy, R: RngCore + ?Sized>(
    keys: &[K],
    rng: &mut R,
) -> Vec<Group> {
    let mut cells: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, &k) in keys.iter().enumerate() {
        cells.entry(k).or_default().push(i);
    }
    let mut out = vec![Group::ControlA; keys.len()];
    for members in cells.values_mut() {
        members.shuffle(rng);
        let half = members.len() / 2;
        let odd_to_a = members.len() % 2 == 1 && rng.next_u32() & 1 == 0;
        let a_count = half + usize::from(odd_to_a);
        for (pos, &i) in members.iter().enumerate() {
            out[i] = if pos < a_count {
                Group::ControlA
            } else {
                Group::ControlB
            };
        }
    }
    out
}

/// Accuracy of always predicting the most frequent class.
pub fn majority_class_accuracy(truth: &[Diagnosis]) -> Result<f64, AuditError> {
    if truth.is_empty() {
        return Err(AuditError::Empty);
    }
    let malignant = truth.iter().filter(|d| d.is_positive()).count();
    let majority = malignant.max(truth.len() - malignant);
    Ok(majority as f64 / truth.len() as f64)
}

/// Everything the audit reports for one evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    #[serde(serialize_with = "ser_rates")]
    pub selection_rates: BTreeMap<Group, f64>,
    pub disparate_impact: DisparateImpact,
    /// `None` when the disparate impact is undefined.
    pub independence_pass: Option<bool>,
    pub epsilon: f64,
    #[serde(serialize_with = "ser_pair")]
    pub independence_band: (f64, f64),
    pub separation_gaps: Option<SeparationGaps>,
    pub sufficiency_gaps: Option<SufficiencyGaps>,
    pub control_disparate_impact: Option<DisparateImpact>,
    #[serde(serialize_with = "ser_round")]
    pub majority_accuracy: f64,
    #[serde(serialize_with = "ser_round")]
    pub accuracy: f64,
    pub confusion: GroupedConfusion,
    pub scored: u64,
}

fn ser_round<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round3(*v))
}

fn ser_pair<S: Serializer>(v: &(f64, f64), s: S) -> Result<S::Ok, S::Error> {
    (round3(v.0), round3(v.1)).serialize(s)
}

fn ser_rates<S: Serializer>(v: &BTreeMap<Group, f64>, s: S) -> Result<S::Ok, S::Error> {
    let rounded: BTreeMap<Group, f64> = v.iter().map(|(g, r)| (*g, round3(*r))).collect();
    rounded.serialize(s)
}

/// Inputs to [`FairnessReport::build`].
#[derive(Debug, Clone, Copy)]
pub struct AuditInput<'a> {
    pub preds: &'a [Diagnosis],
    pub truth: &'a [Diagnosis],
    pub tones: &'a [Option<Tone>],
    /// Fixed control assignment; `None` skips the control check.
    pub control: Option<&'a [Group]>,
    /// Truth labels the majority baseline is computed on.
    pub majority_reference: &'a [Diagnosis],
}

impl FairnessReport {
    pub fn build(input: AuditInput<'_>, epsilon: f64) -> Result<Self, AuditError> {
        let AuditInput {
            preds,
            truth,
            tones,
            control,
            majority_reference,
        } = input;
        let overall = confusion(preds, truth)?;
        let groups: Vec<Option<Group>> = tones.iter().map(|t| t.map(Group::from)).collect();
        let grouped = GroupedConfusion::from_predictions(preds, truth, &groups)?;
        let mut selection_rates = BTreeMap::new();
        for (g, cm) in &grouped.groups {
            selection_rates.insert(*g, selection_rate(cm)?);
        }
        let di = disparate_impact(&grouped, Group::Dark, Group::Light)?;
        let control_disparate_impact = match control {
            Some(c) => {
                let cgroups: Vec<Option<Group>> = c.iter().copied().map(Some).collect();
                let cg = GroupedConfusion::from_predictions(preds, truth, &cgroups)?;
                Some(disparate_impact(&cg, Group::ControlA, Group::ControlB)?)
            }
            None => None,
        };
        Ok(Self {
            selection_rates,
            disparate_impact: di,
            independence_pass: di.value().map(|v| independence_test(v, epsilon)),
            epsilon,
            independence_band: independence_band(epsilon),
            separation_gaps: separation_gaps(&grouped, Group::Dark, Group::Light).ok(),
            sufficiency_gaps: sufficiency_gaps(&grouped, Group::Dark, Group::Light).ok(),
            control_disparate_impact,
            majority_accuracy: majority_class_accuracy(majority_reference)?,
            accuracy: accuracy(&overall)?,
            scored: overall.total(),
            confusion: grouped,
        })
    }
}
