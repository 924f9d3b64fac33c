//! Parameter update rules: Adam, plain SGD and RMSProp.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
    RmsProp,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [
        OptimizerKind::Adam,
        OptimizerKind::Sgd,
        OptimizerKind::RmsProp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::RmsProp => "rmsprop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Some(OptimizerKind::Adam),
            "sgd" => Some(OptimizerKind::Sgd),
            "rmsprop" => Some(OptimizerKind::RmsProp),
            _ => None,
        }
    }
}

/// First/second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

fn check_lengths(params: &[&mut [f64]], grads: &[&[f64]]) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
        return Err(TensorError::ShapeMismatch {
            op: "optimizer step",
            lhs: params.iter().map(|p| p.len()).collect(),
            rhs: grads.iter().map(|g| g.len()).collect(),
        });
    }
    Ok(())
}

fn ensure_slots(slots: &mut Vec<Vec<f64>>, params: &[&mut [f64]]) -> Result<(), TensorError> {
    if slots.is_empty() {
        *slots = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if slots.len() != params.len() || slots.iter().zip(params).any(|(s, p)| s.len() != p.len()) {
        return Err(TensorError::ShapeMismatch {
            op: "optimizer state",
            lhs: slots.iter().map(Vec::len).collect(),
            rhs: params.iter().map(|p| p.len()).collect(),
        });
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TensorError> {
    check_lengths(params, grads)?;
    ensure_slots(&mut state.m, params)?;
    ensure_slots(&mut state.v, params)?;
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let correction1 = 1.0 - libm::pow(b1, t);
    let correction2 = 1.0 - libm::pow(b2, t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            p[i] -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}

/// RMSProp running average of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsPropState {
    pub sq: Vec<Vec<f64>>,
    pub decay: f64,
    pub epsilon: f64,
}

impl Default for RmsPropState {
    fn default() -> Self {
        Self {
            sq: Vec::new(),
            decay: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// An optimizer bound to a learning rate.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam { lr: f64, state: AdamState },
    Sgd { lr: f64 },
    RmsProp { lr: f64, state: RmsPropState },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                state: AdamState::default(),
            },
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::RmsProp => Optimizer::RmsProp {
                lr,
                state: RmsPropState::default(),
            },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Optimizer::Adam { .. } => OptimizerKind::Adam,
            Optimizer::Sgd { .. } => OptimizerKind::Sgd,
            Optimizer::RmsProp { .. } => OptimizerKind::RmsProp,
        }
    }

    pub fn step_slices(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[&[f64]],
    ) -> Result<(), TensorError> {
        match self {
            Optimizer::Adam { lr, state } => adam_step(params, grads, state, *lr),
            Optimizer::Sgd { lr } => {
                check_lengths(params, grads)?;
                for (p, g) in params.iter_mut().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g.iter()) {
                        *pi -= *lr * gi;
                    }
                }
                Ok(())
            }
            Optimizer::RmsProp { lr, state } => {
                check_lengths(params, grads)?;
                ensure_slots(&mut state.sq, params)?;
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let sq = &mut state.sq[k];
                    for i in 0..p.len() {
                        sq[i] = state.decay * sq[i] + (1.0 - state.decay) * g[i] * g[i];
                        p[i] -= *lr * g[i] / (libm::sqrt(sq[i]) + state.epsilon);
                    }
                }
                Ok(())
            }
        }
    }

    /// Updates `params` in place from the matching gradient slices.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[&[f64]]) -> Result<(), TensorError> {
        let mut slices: Vec<&mut [f64]> = params.iter_mut().map(Tensor::data_mut).collect();
        self.step_slices(&mut slices, grads)
    }
}
