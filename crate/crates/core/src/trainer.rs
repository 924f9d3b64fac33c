//! Epoch loop: shuffled minibatches through forward, cross-entropy, backward
//! and an optimizer step, then an eval-mode audit of the validation set.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fairness::{
    accuracy, blocked_control_groups, confusion, disparate_impact, selection_rate, AuditError,
    AuditInput, DisparateImpact, FairnessReport, Group, GroupedConfusion, DEFAULT_EPSILON,
};
use crate::graph::{Graph, Mode};
use crate::model::{InputSize, Model, ModelConfig, ModelError};
use crate::optim::Optimizer;
use crate::records::{Diagnosis, Tone};
use crate::tensor::{Tensor, TensorError};

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const CONTROL_STREAM: u64 = 3;

/// A decoded image with its labels. Pixels are `[C, H, W]` row-major in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Vec<f32>,
    pub diagnosis: Diagnosis,
    pub tone: Option<Tone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub window: usize,
    pub slope_tolerance: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            window: 25,
            slope_tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `None` always runs `max_epochs`.
    pub early_stop: Option<EarlyStop>,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            batch_size: 32,
            seed: 0,
            early_stop: Some(EarlyStop::default()),
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0 {
            return Err(TrainError::InvalidConfig("max_epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1"));
        }
        if matches!(self.early_stop, Some(EarlyStop { window, .. }) if window < 2) {
            return Err(TrainError::InvalidConfig("early stop window must be >= 2"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(TrainError::InvalidConfig("epsilon must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("train and validation sets must both be non-empty")]
    EmptySplit,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("image {id} has {got} pixel values, model expects {expected}")]
    PixelCount {
        id: String,
        expected: usize,
        got: usize,
    },
    #[error("early stop window {window} exceeds the {len} losses available")]
    WindowTooLarge { window: usize, len: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Audit(#[from] AuditError),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

/// Least-squares slope of the trailing `window` losses; stopping is due once
/// it is no longer below `-slope_tolerance`.
pub fn early_stop_check(
    losses: &[f64],
    window: usize,
    slope_tolerance: f64,
) -> Result<bool, TrainError> {
    if window < 2 || window > losses.len() {
        return Err(TrainError::WindowTooLarge {
            window,
            len: losses.len(),
        });
    }
    let tail = &losses[losses.len() - window..];
    let n = window as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = tail.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in tail.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    Ok(sxy / sxx > -slope_tolerance)
}

/// Anything that maps images to class decisions.
pub trait Classifier {
    fn classify(&self, images: &[&LabeledImage]) -> Result<Vec<Diagnosis>, TrainError>;
}

pub fn batch_tensor(images: &[&LabeledImage], input: InputSize) -> Result<Tensor, TrainError> {
    let per_image = input.pixels();
    let mut data = Vec::with_capacity(images.len() * per_image);
    for img in images {
        if img.pixels.len() != per_image {
            return Err(TrainError::PixelCount {
                id: img.id.clone(),
                expected: per_image,
                got: img.pixels.len(),
            });
        }
        data.extend(img.pixels.iter().map(|&v| f64::from(v)));
    }
    Ok(Tensor::new(
        &[images.len(), input.channels, input.height, input.width],
        data,
    )?)
}

/// Batch size used when a [`Model`] classifies through the trait.
const EVAL_BATCH: usize = 32;

impl Classifier for Model {
    fn classify(&self, images: &[&LabeledImage]) -> Result<Vec<Diagnosis>, TrainError> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let batch = batch_tensor(chunk, self.config().input_size)?;
            out.extend(self.predict(&batch)?);
        }
        Ok(out)
    }
}

/// Validation-set metrics for one pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub predictions: Vec<Diagnosis>,
    pub accuracy: f64,
    pub selection_rate_dark: Option<f64>,
    pub selection_rate_light: Option<f64>,
    pub tone_di: DisparateImpact,
    pub control_di: Option<DisparateImpact>,
    /// Dark/light matrices; untoned records are counted in `excluded`.
    pub confusion: GroupedConfusion,
    pub control_confusion: Option<GroupedConfusion>,
}

fn group_rate(grouped: &GroupedConfusion, g: Group) -> Option<f64> {
    grouped.get(g).and_then(|cm| selection_rate(cm).ok())
}

/// Like [`disparate_impact`] but an absent group also reads as undefined.
fn di_or_undefined(grouped: &GroupedConfusion, num: Group, den: Group) -> DisparateImpact {
    disparate_impact(grouped, num, den).unwrap_or(DisparateImpact::Undefined {
        numerator_rate: group_rate(grouped, num).unwrap_or(0.0),
        denominator_rate: group_rate(grouped, den).unwrap_or(0.0),
    })
}

/// Scores `validation` in eval mode. Untoned records count toward accuracy
/// but not toward either tone group.
pub fn evaluate<C: Classifier + ?Sized>(
    classifier: &C,
    validation: &[LabeledImage],
    control: Option<&[Group]>,
) -> Result<Evaluation, TrainError> {
    if validation.is_empty() {
        return Err(TrainError::Audit(AuditError::Empty));
    }
    let refs: Vec<&LabeledImage> = validation.iter().collect();
    let predictions = classifier.classify(&refs)?;
    let truth: Vec<Diagnosis> = validation.iter().map(|v| v.diagnosis).collect();
    let overall = confusion(&predictions, &truth)?;
    let tones: Vec<Option<Group>> = validation.iter().map(|v| v.tone.map(Group::from)).collect();
    let grouped = GroupedConfusion::from_predictions(&predictions, &truth, &tones)?;
    let control_confusion = match control {
        Some(groups) => {
            let groups: Vec<Option<Group>> = groups.iter().copied().map(Some).collect();
            Some(GroupedConfusion::from_predictions(
                &predictions,
                &truth,
                &groups,
            )?)
        }
        None => None,
    };
    Ok(Evaluation {
        accuracy: accuracy(&overall)?,
        selection_rate_dark: group_rate(&grouped, Group::Dark),
        selection_rate_light: group_rate(&grouped, Group::Light),
        tone_di: di_or_undefined(&grouped, Group::Dark, Group::Light),
        control_di: control_confusion
            .as_ref()
            .map(|cc| di_or_undefined(cc, Group::ControlA, Group::ControlB)),
        confusion: grouped,
        control_confusion,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub accuracy: f64,
    pub selection_rate_dark: Option<f64>,
    pub selection_rate_light: Option<f64>,
    pub tone_di: DisparateImpact,
    pub control_di: DisparateImpact,
    pub confusion: GroupedConfusion,
    pub control_confusion: GroupedConfusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunHistory {
    pub epochs: Vec<EpochMetrics>,
    pub final_params: Vec<Tensor>,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub train_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub control_groups: Vec<Group>,
    pub stopped_early: bool,
    /// Audit of the last epoch's validation predictions.
    pub report: FairnessReport,
}

impl RunHistory {
    pub fn last(&self) -> &EpochMetrics {
        self.epochs.last().expect("a run has at least one epoch")
    }
}

/// Fixed per-record control assignment for a validation set, balanced
/// within every diagnosis x tone cell.
pub fn control_assignment(validation: &[LabeledImage], seed: u64) -> Vec<Group> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(CONTROL_STREAM);
    let keys: Vec<(Diagnosis, Option<Tone>)> =
        validation.iter().map(|v| (v.diagnosis, v.tone)).collect();
    blocked_control_groups(&keys, &mut rng)
}

pub fn train(
    model: &mut Model,
    train_set: &[LabeledImage],
    validation: &[LabeledImage],
    config: &TrainConfig,
) -> Result<RunHistory, TrainError> {
    train_with(model, train_set, validation, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F: FnMut(&EpochMetrics)>(
    model: &mut Model,
    train_set: &[LabeledImage],
    validation: &[LabeledImage],
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<RunHistory, TrainError> {
    config.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let input = model.config().input_size;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let control = control_assignment(validation, config.seed);
    let mut optimizer = Optimizer::new(model.config().optimizer, model.config().learning_rate);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs: Vec<EpochMetrics> = Vec::new();
    let mut losses = Vec::new();
    let mut stopped_early = false;
    let mut last_eval = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<&LabeledImage> = chunk.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<usize> = images.iter().map(|img| img.diagnosis.index()).collect();
            let mut graph = Graph::new();
            let x = graph.leaf(batch_tensor(&images, input)?);
            let params = model.attach_params(&mut graph);
            let logits = model.logits(&mut graph, x, &params, Mode::Train, &mut dropout_rng)?;
            let loss = graph.softmax_cross_entropy(logits, &labels)?;
            let value = graph.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_index,
                });
            }
            graph.backward(loss)?;
            // A parameter the loss never reached gets a zero gradient.
            let zeros: Vec<Option<Vec<f64>>> = params
                .iter()
                .zip(model.params())
                .map(|(&v, p)| graph.grad(v).is_none().then(|| vec![0.0; p.len()]))
                .collect();
            let grads: Vec<&[f64]> = params
                .iter()
                .zip(&zeros)
                .map(|(&v, z)| match z {
                    Some(z) => z.as_slice(),
                    None => graph.grad(v).unwrap_or(&[]),
                })
                .collect();
            optimizer.step(model.params_mut(), &grads)?;
            loss_sum += value;
            batches += 1;
        }
        let train_loss = loss_sum / batches as f64;
        losses.push(train_loss);

        let eval = evaluate(&*model, validation, Some(&control))?;
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            accuracy: eval.accuracy,
            selection_rate_dark: eval.selection_rate_dark,
            selection_rate_light: eval.selection_rate_light,
            tone_di: eval.tone_di,
            control_di: eval.control_di.expect("control assignment supplied"),
            confusion: eval.confusion.clone(),
            control_confusion: eval.control_confusion.clone().unwrap_or_default(),
        };
        on_epoch(&metrics);
        epochs.push(metrics);
        last_eval = Some(eval);

        if let Some(es) = config.early_stop {
            if losses.len() >= es.window
                && early_stop_check(&losses, es.window, es.slope_tolerance)?
            {
                stopped_early = epoch < config.max_epochs;
                break;
            }
        }
    }

    let eval = last_eval.expect("max_epochs >= 1");
    let truth: Vec<Diagnosis> = validation.iter().map(|v| v.diagnosis).collect();
    let tones: Vec<Option<Tone>> = validation.iter().map(|v| v.tone).collect();
    let everything: Vec<Diagnosis> = train_set
        .iter()
        .chain(validation)
        .map(|v| v.diagnosis)
        .collect();
    let report = build_report(
        &eval.predictions,
        &truth,
        &tones,
        Some(&control),
        &everything,
        config.epsilon,
    )?;

    Ok(RunHistory {
        epochs,
        final_params: model.params().to_vec(),
        model_config: model.config().clone(),
        train_config: config.clone(),
        train_ids: train_set.iter().map(|v| v.id.clone()).collect(),
        validation_ids: validation.iter().map(|v| v.id.clone()).collect(),
        control_groups: control,
        stopped_early,
        report,
    })
}

/// Full audit report. A missing tone group yields an undefined disparate
/// impact instead of an error.
pub fn build_report(
    preds: &[Diagnosis],
    truth: &[Diagnosis],
    tones: &[Option<Tone>],
    control: Option<&[Group]>,
    majority_reference: &[Diagnosis],
    epsilon: f64,
) -> Result<FairnessReport, TrainError> {
    let input = AuditInput {
        preds,
        truth,
        tones,
        control,
        majority_reference,
    };
    match FairnessReport::build(input, epsilon) {
        Ok(r) => Ok(r),
        Err(AuditError::EmptyGroup(_)) => {
            // Rebuild piecewise so the remaining metrics are still reported.
            let groups: Vec<Option<Group>> = tones.iter().map(|t| t.map(Group::from)).collect();
            let grouped = GroupedConfusion::from_predictions(preds, truth, &groups)?;
            let overall = confusion(preds, truth)?;
            let control_di = match control {
                Some(c) => {
                    let cg: Vec<Option<Group>> = c.iter().copied().map(Some).collect();
                    let cc = GroupedConfusion::from_predictions(preds, truth, &cg)?;
                    Some(di_or_undefined(&cc, Group::ControlA, Group::ControlB))
                }
                None => None,
            };
            Ok(FairnessReport {
                selection_rates: grouped
                    .groups
                    .iter()
                    .filter_map(|(g, cm)| selection_rate(cm).ok().map(|r| (*g, r)))
                    .collect(),
                disparate_impact: di_or_undefined(&grouped, Group::Dark, Group::Light),
                independence_pass: None,
                epsilon,
                independence_band: crate::fairness::independence_band(epsilon),
                separation_gaps: None,
                sufficiency_gaps: None,
                control_disparate_impact: control_di,
                majority_accuracy: crate::fairness::majority_class_accuracy(majority_reference)?,
                accuracy: accuracy(&overall)?,
                confusion: grouped,
                scored: overall.total(),
            })
        }
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;

    #[test]
    fn decreasing_ramp_does_not_stop() {
        let losses: Vec<f64> = (0..30).map(|i| 1.0 - 0.01 * i as f64).collect();
        assert!(!early_stop_check(&losses, 25, 1e-4).unwrap());
    }

    #[test]
    fn constant_losses_stop() {
        assert!(early_stop_check(&[0.5; 25], 25, 1e-4).unwrap());
    }

    #[test]
    fn rising_losses_stop() {
        let losses: Vec<f64> = (0..10).map(|i| 0.1 * i as f64).collect();
        assert!(early_stop_check(&losses, 5, 1e-4).unwrap());
    }

    #[test]
    fn window_larger_than_history_is_an_error() {
        assert_eq!(
            early_stop_check(&[0.1, 0.2], 3, 1e-4),
            Err(TrainError::WindowTooLarge { window: 3, len: 2 })
        );
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            max_epochs: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            early_stop: Some(EarlyStop {
                window: 1,
                slope_tolerance: 0.0,
            }),
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    struct Constant(Diagnosis);

    impl Classifier for Constant {
        fn classify(&self, images: &[&LabeledImage]) -> Result<Vec<Diagnosis>, TrainError> {
            Ok(vec![self.0; images.len()])
        }
    }

    struct Oracle;

    impl Classifier for Oracle {
        fn classify(&self, images: &[&LabeledImage]) -> Result<Vec<Diagnosis>, TrainError> {
            Ok(images.iter().map(|i| i.diagnosis).collect())
        }
    }

    fn labeled(cells: &[(Diagnosis, Option<Tone>, usize)]) -> Vec<LabeledImage> {
        let mut out = Vec::new();
        for &(d, t, n) in cells {
            for _ in 0..n {
                out.push(LabeledImage {
                    id: format!("r{}", out.len()),
                    pixels: Vec::new(),
                    diagnosis: d,
                    tone: t,
                });
            }
        }
        out
    }

    #[test]
    fn all_benign_stub_has_undefined_tone_di() {
        use Diagnosis::*;
        let val = labeled(&[
            (Benign, Some(Tone::Light), 3),
            (Malignant, Some(Tone::Light), 1),
            (Benign, Some(Tone::Dark), 2),
            (Malignant, Some(Tone::Dark), 2),
        ]);
        let eval = evaluate(&Constant(Benign), &val, None).unwrap();
        assert_eq!(eval.selection_rate_dark, Some(0.0));
        assert_eq!(eval.selection_rate_light, Some(0.0));
        assert!(!eval.tone_di.is_defined());
        assert_eq!(eval.accuracy, 5.0 / 8.0);
    }

    #[test]
    fn perfect_stub_di_is_prevalence_ratio() {
        use Diagnosis::*;
        // Dark prevalence 1/4, light prevalence 3/4 -> DI 1/3.
        let val = labeled(&[
            (Benign, Some(Tone::Dark), 3),
            (Malignant, Some(Tone::Dark), 1),
            (Benign, Some(Tone::Light), 1),
            (Malignant, Some(Tone::Light), 3),
        ]);
        let eval = evaluate(&Oracle, &val, None).unwrap();
        assert_eq!(eval.accuracy, 1.0);
        let di = eval.tone_di.value().unwrap();
        assert!((di - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(evaluate(&Oracle, &val, None).unwrap(), eval);
    }

    #[test]
    fn untoned_records_score_accuracy_only() {
        use Diagnosis::*;
        let val = labeled(&[
            (Malignant, Some(Tone::Dark), 1),
            (Malignant, Some(Tone::Light), 1),
            (Benign, None, 2),
        ]);
        let eval = evaluate(&Constant(Malignant), &val, None).unwrap();
        assert_eq!(eval.confusion.excluded, 2);
        assert_eq!(eval.confusion.grouped_total(), 2);
        assert_eq!(eval.accuracy, 0.5);
    }

    #[test]
    fn evaluate_rejects_empty_validation() {
        assert!(evaluate(&Oracle, &[], None).is_err());
    }
}
