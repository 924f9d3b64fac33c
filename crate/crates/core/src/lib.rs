//! Tensor engine, CNN classifier, sampling and group-fairness metrics for
//! auditing skin-lesion classifiers by skin tone.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod fairness;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod optim;
pub mod records;
pub mod sampler;
pub mod search;
pub mod tensor;
pub mod trainer;

pub use fairness::{DisparateImpact, FairnessReport, Group};
pub use graph::{Graph, Mode, Var};
pub use model::{build_model, Model, ModelConfig};
pub use records::{Diagnosis, Fst, ImageRecord, Tone};
pub use sampler::{SplitDataset, Strategy};
pub use tensor::Tensor;
pub use trainer::{train, LabeledImage, TrainConfig};
