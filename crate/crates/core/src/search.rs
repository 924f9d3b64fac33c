//! Uniform random hyperparameter search.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    build_model, ConvBlock, InputSize, LinearBlock, ModelConfig, BLOCK_COUNT_RANGE, DROPOUT_RANGE,
    LEARNING_RATE_RANGE, POOL_WINDOW, UNIT_RANGE,
};
use crate::optim::OptimizerKind;
use crate::trainer::{train, LabeledImage, TrainConfig, TrainError};

/// Inclusive ranges to sample from. Narrow any of them to shrink the search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub conv_blocks: (usize, usize),
    pub linear_blocks: (usize, usize),
    pub units: (usize, usize),
    pub dropout: (f64, f64),
    /// Sampled log-uniformly.
    pub learning_rate: (f64, f64),
    pub optimizers: Vec<OptimizerKind>,
    pub input_size: InputSize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            conv_blocks: BLOCK_COUNT_RANGE,
            linear_blocks: BLOCK_COUNT_RANGE,
            units: UNIT_RANGE,
            dropout: DROPOUT_RANGE,
            learning_rate: LEARNING_RATE_RANGE,
            optimizers: OptimizerKind::ALL.to_vec(),
            input_size: InputSize::square(224),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SearchError {
    #[error("at least one trial is required")]
    NoTrials,
    #[error("search dataset is empty")]
    EmptyDataset,
    #[error("search space is empty: {0}")]
    EmptySpace(&'static str),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub seed: u64,
    pub config: ModelConfig,
    pub validation_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: ModelConfig,
    pub best_trial: usize,
    pub trials: Vec<Trial>,
}

impl SearchSpace {
    /// Largest conv block count the input side still divides into.
    fn max_conv_blocks(&self) -> usize {
        let InputSize { height, width, .. } = self.input_size;
        let mut k = 0;
        let mut d = POOL_WINDOW;
        while height % d == 0 && width % d == 0 && d <= height.min(width) {
            k += 1;
            d *= POOL_WINDOW;
        }
        k
    }

    pub fn check(&self) -> Result<(), SearchError> {
        let conv_hi = self.conv_blocks.1.min(self.max_conv_blocks());
        if self.conv_blocks.0 > conv_hi {
            return Err(SearchError::EmptySpace(
                "no conv block count divides the input",
            ));
        }
        if self.linear_blocks.0 > self.linear_blocks.1 || self.units.0 > self.units.1 {
            return Err(SearchError::EmptySpace("inverted integer range"));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN too
        if !(self.dropout.0 <= self.dropout.1) {
            return Err(SearchError::EmptySpace("inverted dropout range"));
        }
        if !(self.learning_rate.0 > 0.0 && self.learning_rate.0 <= self.learning_rate.1) {
            return Err(SearchError::EmptySpace(
                "learning rate range must be positive and ordered",
            ));
        }
        if self.optimizers.is_empty() {
            return Err(SearchError::EmptySpace("no optimizers"));
        }
        Ok(())
    }

    /// One uniform draw. Conv block counts that the input side cannot be
    /// halved into are excluded.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ModelConfig, SearchError> {
        self.check()?;
        let conv_hi = self.conv_blocks.1.min(self.max_conv_blocks());
        let n_conv = rng.gen_range(self.conv_blocks.0..=conv_hi);
        let conv_blocks = (0..n_conv)
            .map(|_| ConvBlock {
                out_features: rng.gen_range(self.units.0..=self.units.1),
            })
            .collect();
        let n_linear = rng.gen_range(self.linear_blocks.0..=self.linear_blocks.1);
        let linear_blocks = (0..n_linear)
            .map(|_| LinearBlock {
                units: rng.gen_range(self.units.0..=self.units.1),
                dropout_p: rng.gen_range(self.dropout.0..=self.dropout.1),
            })
            .collect();
        let (lo, hi) = (
            libm::log(self.learning_rate.0),
            libm::log(self.learning_rate.1),
        );
        let learning_rate =
            libm::exp(rng.gen_range(lo..=hi)).clamp(self.learning_rate.0, self.learning_rate.1);
        let optimizer = *self.optimizers.choose(rng).expect("checked non-empty");
        Ok(ModelConfig {
            conv_blocks,
            linear_blocks,
            input_size: self.input_size,
            learning_rate,
            optimizer,
        })
    }
}

/// Trains one candidate for `budget_epochs` with early stopping off.
pub fn run_trial(
    index: usize,
    config: ModelConfig,
    seed: u64,
    budget_epochs: usize,
    train_set: &[LabeledImage],
    validation: &[LabeledImage],
    batch_size: usize,
) -> Result<Trial, SearchError> {
    let mut model = build_model(&config, seed).map_err(TrainError::from)?;
    let train_config = TrainConfig {
        max_epochs: budget_epochs,
        batch_size,
        seed,
        early_stop: None,
        ..TrainConfig::default()
    };
    let history = train(&mut model, train_set, validation, &train_config)?;
    let last = history.last();
    Ok(Trial {
        index,
        seed,
        config,
        validation_accuracy: last.accuracy,
        final_loss: last.train_loss,
    })
}

/// Candidate configs for every trial. Trial `i` trains with seed `seed + i`.
pub fn sample_trials(
    space: &SearchSpace,
    trials: usize,
    seed: u64,
) -> Result<Vec<ModelConfig>, SearchError> {
    if trials == 0 {
        return Err(SearchError::NoTrials);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..trials).map(|_| space.sample(&mut rng)).collect()
}

/// Highest validation accuracy wins; ties go to the earlier trial.
pub fn rank(trials: Vec<Trial>) -> Result<SearchOutcome, SearchError> {
    let mut best: Option<&Trial> = None;
    for t in &trials {
        if best.is_none_or(|b| t.validation_accuracy > b.validation_accuracy) {
            best = Some(t);
        }
    }
    let best = best.ok_or(SearchError::NoTrials)?;
    Ok(SearchOutcome {
        best: best.config.clone(),
        best_trial: best.index,
        trials: trials.clone(),
    })
}

pub fn random_search(
    space: &SearchSpace,
    trials: usize,
    budget_epochs: usize,
    train_set: &[LabeledImage],
    validation: &[LabeledImage],
    batch_size: usize,
    seed: u64,
) -> Result<SearchOutcome, SearchError> {
    if train_set.is_empty() || validation.is_empty() {
        return Err(SearchError::EmptyDataset);
    }
    let configs = sample_trials(space, trials, seed)?;
    let mut log = Vec::with_capacity(trials);
    for (i, config) in configs.into_iter().enumerate() {
        log.push(run_trial(
            i,
            config,
            seed.wrapping_add(i as u64),
            budget_epochs,
            train_set,
            validation,
            batch_size,
        )?);
    }
    rank(log)
}
