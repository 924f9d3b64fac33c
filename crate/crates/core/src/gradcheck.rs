//! Central-difference gradient oracle.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Mode, Var};
use crate::model::{Model, ModelError};
use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of comparing `backward` against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    /// Numeric estimates for the checked coordinates, in `coords` order.
    pub numeric: Vec<f64>,
    pub coords: Vec<usize>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// Checks every coordinate of `point`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, eps: f64) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let coords: Vec<usize> = (0..point.len()).collect();
    finite_difference_check_at(f, point, eps, &coords)
}

/// Checks only the listed flat coordinates of `point`.
pub fn finite_difference_check_at<F>(
    f: F,
    point: &Tensor,
    eps: f64,
    coords: &[usize],
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut graph = Graph::new();
    let x = graph.param(point.clone());
    let y = f(&mut graph, x)?;
    graph.backward(y)?;
    let analytic = graph
        .grad(x)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; point.len()]);

    let eval = |p: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.param(p);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };

    let mut numeric = Vec::with_capacity(coords.len());
    let mut max_relative_error = 0.0;
    let mut worst_index = coords.first().copied().unwrap_or(0);
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let estimate = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = relative_error(analytic[i], estimate);
        if err > max_relative_error {
            max_relative_error = err;
            worst_index = i;
        }
        numeric.push(estimate);
    }
    Ok(GradCheck {
        max_relative_error,
        worst_index,
        analytic,
        numeric,
        coords: coords.to_vec(),
    })
}

/// Directional-derivative comparison: for each direction `d`, `grad . d`
/// against `(f(x + eps d) - f(x - eps d)) / 2 eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalCheck {
    pub max_relative_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Every coordinate takes part in every comparison, so gradients too small
/// to resolve one at a time are still covered. Directions should be unit
/// length so `eps` bounds the step.
pub fn directional_check<F>(
    f: F,
    point: &Tensor,
    eps: f64,
    directions: &[Vec<f64>],
) -> Result<DirectionalCheck, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let mut graph = Graph::new();
    let x = graph.param(point.clone());
    let y = f(&mut graph, x)?;
    graph.backward(y)?;
    let zeros = vec![0.0; point.len()];
    let grad = graph.grad(x).unwrap_or(&zeros);

    let eval = |p: Tensor| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let v = g.param(p);
        let out = f(&mut g, v)?;
        Ok(g.value(out).data()[0])
    };
    let shifted = |d: &[f64], sign: f64| -> Result<Tensor, TensorError> {
        let mut t = point.clone();
        for (v, di) in t.data_mut().iter_mut().zip(d) {
            *v += sign * eps * di;
        }
        Ok(t)
    };

    let mut out = DirectionalCheck {
        max_relative_error: 0.0,
        analytic: Vec::with_capacity(directions.len()),
        numeric: Vec::with_capacity(directions.len()),
    };
    for d in directions {
        if d.len() != point.len() {
            return Err(TensorError::LengthMismatch {
                shape: point.shape().to_vec(),
                expected: point.len(),
                got: d.len(),
            });
        }
        let a: f64 = grad.iter().zip(d).map(|(g, di)| g * di).sum();
        let n = (eval(shifted(d, 1.0)?)? - eval(shifted(d, -1.0)?)?) / (2.0 * eps);
        let err = relative_error(a, n);
        if err > out.max_relative_error {
            out.max_relative_error = err;
        }
        out.analytic.push(a);
        out.numeric.push(n);
    }
    Ok(out)
}

/// Unit-length directions with independent uniform components.
pub fn unit_directions<R: Rng + ?Sized>(len: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let d: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = libm::sqrt(d.iter().map(|v| v * v).sum::<f64>());
            d.into_iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Directional checks of the cross-entropy loss against every parameter
/// tensor of `model`, one tensor at a time. Dropout is active with masks
/// drawn from `dropout_seed`, identical across evaluations.
pub fn model_gradient_check<R: Rng + ?Sized>(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    dropout_seed: u64,
    eps: f64,
    directions_per_tensor: usize,
    rng: &mut R,
) -> Result<Vec<(String, DirectionalCheck)>, ModelError> {
    let params = model.params();
    let mut out = Vec::with_capacity(params.len());
    for (j, name) in model.param_names().iter().enumerate() {
        let loss = |g: &mut Graph, p: Var| -> Result<Var, TensorError> {
            let x = g.leaf(batch.clone());
            let vars: Vec<Var> = params
                .iter()
                .enumerate()
                .map(|(i, t)| if i == j { p } else { g.leaf(t.clone()) })
                .collect();
            let mut mask_rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            let z = model
                .logits(g, x, &vars, Mode::Train, &mut mask_rng)
                .map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => TensorError::InvalidArgument {
                        op: "model_gradient_check",
                        reason: match other {
                            ModelError::InputShape { .. } => "batch shape does not match the model",
                            _ => "invalid model",
                        },
                    },
                })?;
            g.softmax_cross_entropy(z, labels)
        };
        let directions = unit_directions(params[j].len(), directions_per_tensor, rng);
        out.push((
            name.clone(),
            directional_check(loss, &params[j], eps, &directions)?,
        ));
    }
    Ok(out)
}
