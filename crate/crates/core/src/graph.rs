//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every op appends one node whose inputs already exist, so node ids are a
//! valid topological order and `backward` simply walks them in reverse.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};

use crate::tensor::{
    col2im, conv_output_size, gemm_nn, gemm_nt, gemm_tn, im2col, matrix_dims, softmax_row,
    ConvGeometry, Tensor, TensorError,
};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Conv2d {
        input: Var,
        kernels: Var,
        bias: Var,
        geom: ConvGeometry,
        batch: usize,
        filters: usize,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    Relu {
        input: Var,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
        rows: usize,
        inner: usize,
        units: usize,
    },
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Flatten {
        input: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Sum {
        input: Var,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::Relu { .. } => "relu",
            Op::Linear { .. } => "linear",
            Op::Dropout { .. } => "dropout",
            Op::Flatten { .. } => "flatten",
            Op::Mul { .. } => "mul",
            Op::Sum { .. } => "sum",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => Vec::new(),
            Op::Conv2d {
                input,
                kernels,
                bias,
                ..
            } => vec![*input, *kernels, *bias],
            Op::Linear {
                input,
                weight,
                bias,
                ..
            } => vec![*input, *weight, *bias],
            Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
            Op::MaxPool2d { input, .. }
            | Op::Relu { input }
            | Op::Dropout { input, .. }
            | Op::Flatten { input }
            | Op::Sum { input } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// A single-writer tape of tensor operations.
#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Param, value, true)
    }

    /// Every node handle in append order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn grad(&self, var: Var) -> Option<&[f64]> {
        self.nodes.get(var.0).and_then(|n| n.value.grad())
    }

    /// Operation tag and input ids of a node, for inspection.
    pub fn node(&self, var: Var) -> (&'static str, Vec<Var>) {
        let op = &self.nodes[var.0].op;
        (op.tag(), op.inputs())
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        debug_assert!(op.inputs().iter().all(|v| v.0 < self.nodes.len()));
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, var: Var) -> Result<&Node, TensorError> {
        self.nodes.get(var.0).ok_or(TensorError::UnknownVar(var.0))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Cross-correlation of `input[N,C,H,W]` with `kernels[F,C,kH,kW]` plus `bias[F]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernels: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        let x = &self.check(input)?.value;
        let k = &self.check(kernels)?.value;
        let b = &self.check(bias)?.value;
        let [n, c, h, w] = rank4("conv2d", x)?;
        let [f, kc, kh, kw] = rank4("conv2d", k)?;
        if kc != c {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        if b.shape() != [f] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: k.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be >= 1",
            });
        }
        let (Some(out_h), Some(out_w)) = (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(w, kw, stride, padding),
        ) else {
            return Err(TensorError::OutputTooSmall { op: "conv2d" });
        };
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: w,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h,
            out_w,
        };
        let rows = geom.col_rows();
        let spatial = geom.col_cols();
        // One image's column buffer at a time; backward rebuilds it.
        let mut col = vec![0.0; rows * spatial];
        let mut out = vec![0.0; n * f * spatial];
        let image_len = c * h * w;
        for i in 0..n {
            im2col(
                &x.data()[i * image_len..(i + 1) * image_len],
                &geom,
                &mut col,
            );
            let dst = &mut out[i * f * spatial..(i + 1) * f * spatial];
            for (fi, chunk) in dst.chunks_mut(spatial).enumerate() {
                chunk.fill(b.data()[fi]);
            }
            gemm_nn(k.data(), &col, dst, f, rows, spatial);
        }
        let value = Tensor::new(&[n, f, out_h, out_w], out)?;
        let requires_grad = self.needs(&[input, kernels, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                geom,
                batch: n,
                filters: f,
            },
            value,
            requires_grad,
        ))
    }

    /// Non-overlapping max pooling; ties resolve to the first element in
    /// row-major window order.
    pub fn maxpool2d(&mut self, input: Var, window: usize) -> Result<Var, TensorError> {
        let x = &self.check(input)?.value;
        let [n, c, h, w] = rank4("maxpool2d", x)?;
        if window == 0 {
            return Err(TensorError::InvalidArgument {
                op: "maxpool2d",
                reason: "window must be >= 1",
            });
        }
        if h % window != 0 || w % window != 0 {
            return Err(TensorError::NotDivisible {
                height: h,
                width: w,
                window,
            });
        }
        let (oh, ow) = (h / window, w / window);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let data = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * window * w + ox * window;
                    for dy in 0..window {
                        for dx in 0..window {
                            let idx = base + (oy * window + dy) * w + ox * window + dx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let requires_grad = self.needs(&[input]);
        Ok(self.push(Op::MaxPool2d { input, argmax }, value, requires_grad))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = &self.check(input)?.value;
        let data = x
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect();
        let value = Tensor::new(x.shape(), data)?;
        let requires_grad = self.needs(&[input]);
        Ok(self.push(Op::Relu { input }, value, requires_grad))
    }

    /// `input[N,D] · weight[D,U] + bias[U]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let x = &self.check(input)?.value;
        let wt = &self.check(weight)?.value;
        let b = &self.check(bias)?.value;
        let (rows, inner) = matrix_dims("linear", x)?;
        let (w_inner, units) = matrix_dims("linear", wt)?;
        if w_inner != inner {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: x.shape().to_vec(),
                rhs: wt.shape().to_vec(),
            });
        }
        if b.shape() != [units] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: wt.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(rows * units);
        for _ in 0..rows {
            out.extend_from_slice(b.data());
        }
        gemm_nn(x.data(), wt.data(), &mut out, rows, inner, units);
        let value = Tensor::new(&[rows, units], out)?;
        let requires_grad = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
                rows,
                inner,
                units,
            },
            value,
            requires_grad,
        ))
    }

    /// Inverted dropout. Eval mode returns `input` unchanged.
    pub fn dropout<R: RngCore + ?Sized>(
        &mut self,
        input: Var,
        p: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidProbability(p));
        }
        let x = &self.check(input)?.value;
        if mode == Mode::Eval {
            return Ok(input);
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        let requires_grad = self.needs(&[input]);
        Ok(self.push(Op::Dropout { input, mask }, value, requires_grad))
    }

    /// `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = &self.check(input)?.value;
        let n = x.shape()[0];
        let value = x.reshape(&[n, x.len() / n])?;
        let requires_grad = self.needs(&[input]);
        Ok(self.push(Op::Flatten { input }, value, requires_grad))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        let a = &self.check(lhs)?.value;
        let b = &self.check(rhs)?.value;
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(a.shape(), data)?;
        let requires_grad = self.needs(&[lhs, rhs]);
        Ok(self.push(Op::Mul { lhs, rhs }, value, requires_grad))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = &self.check(input)?.value;
        let total = x.data().iter().sum();
        let requires_grad = self.needs(&[input]);
        Ok(self.push(Op::Sum { input }, Tensor::scalar(total), requires_grad))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, TensorError> {
        let z = &self.check(logits)?.value;
        let (rows, classes) = matrix_dims("softmax_cross_entropy", z)?;
        if labels.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: z.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
            return Err(TensorError::LabelOutOfRange { row, label });
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &z.data()[r * classes..(r + 1) * classes];
            softmax_row(row, &mut probs[r * classes..(r + 1) * classes]);
            // log-sum-exp written as max + log1p(sum of the other terms) keeps
            // tiny losses accurate.
            let (arg, max) =
                row.iter()
                    .copied()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, v)| if v > acc.1 { (i, v) } else { acc },
                    );
            let rest: f64 = row
                .iter()
                .enumerate()
                .filter(|&(i, _)| i != arg)
                .map(|(_, &v)| libm::exp(v - max))
                .sum();
            total += libm::log1p(rest) + (max - row[label]);
        }
        let value = Tensor::scalar(total / rows as f64);
        let requires_grad = self.needs(&[logits]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            value,
            requires_grad,
        ))
    }

    /// Row probabilities computed by a `softmax_cross_entropy` node.
    pub fn probabilities(&self, loss: Var) -> Option<&[f64]> {
        match &self.nodes.get(loss.0)?.op {
            Op::SoftmaxCrossEntropy { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`. Parameter leaves get their
    /// accumulated gradient stored on their tensor.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let nodes = &self.nodes;
            let wants = |v: &Var| nodes[v.0].requires_grad;
            match &nodes[id].op {
                Op::Leaf => {}
                Op::Param => {
                    self.nodes[id].value.set_grad(upstream);
                }
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    geom,
                    batch,
                    filters,
                } => {
                    let rows = geom.col_rows();
                    let spatial = geom.col_cols();
                    let k = nodes[kernels.0].value.data();
                    let x = nodes[input.0].value.data();
                    let image_len = geom.channels * geom.height * geom.width;
                    let mut d_bias = vec![0.0; *filters];
                    let mut d_kernels = vec![0.0; filters * rows];
                    let mut d_input = wants(input).then(|| vec![0.0; batch * image_len]);
                    let mut d_col = vec![0.0; rows * spatial];
                    let mut col = vec![0.0; rows * spatial];
                    for i in 0..*batch {
                        let g_out = &upstream[i * filters * spatial..(i + 1) * filters * spatial];
                        for (fi, chunk) in g_out.chunks(spatial).enumerate() {
                            d_bias[fi] += chunk.iter().sum::<f64>();
                        }
                        im2col(&x[i * image_len..(i + 1) * image_len], geom, &mut col);
                        gemm_nt(g_out, &col, &mut d_kernels, *filters, spatial, rows);
                        if let Some(d_in) = d_input.as_mut() {
                            d_col.fill(0.0);
                            gemm_tn(k, g_out, &mut d_col, rows, *filters, spatial);
                            col2im(&d_col, geom, &mut d_in[i * image_len..(i + 1) * image_len]);
                        }
                    }
                    let (input, kernels, bias) = (*input, *kernels, *bias);
                    if let Some(d_in) = d_input {
                        accumulate(&mut grads, input, d_in);
                    }
                    accumulate(&mut grads, kernels, d_kernels);
                    accumulate(&mut grads, bias, d_bias);
                }
                Op::MaxPool2d { input, argmax } => {
                    let mut d_in = vec![0.0; nodes[input.0].value.len()];
                    for (g, &src) in upstream.iter().zip(argmax) {
                        d_in[src] += g;
                    }
                    let input = *input;
                    accumulate(&mut grads, input, d_in);
                }
                Op::Relu { input } => {
                    let x = nodes[input.0].value.data();
                    let d_in = upstream
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    let input = *input;
                    accumulate(&mut grads, input, d_in);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                    rows,
                    inner,
                    units,
                } => {
                    let x = nodes[input.0].value.data();
                    let w = nodes[weight.0].value.data();
                    let mut d_weight = vec![0.0; inner * units];
                    gemm_tn(x, &upstream, &mut d_weight, *inner, *rows, *units);
                    let mut d_bias = vec![0.0; *units];
                    for row in upstream.chunks(*units) {
                        for (d, g) in d_bias.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    let d_input = wants(input).then(|| {
                        let mut d = vec![0.0; rows * inner];
                        gemm_nt(&upstream, w, &mut d, *rows, *units, *inner);
                        d
                    });
                    let (input, weight, bias) = (*input, *weight, *bias);
                    if let Some(d) = d_input {
                        accumulate(&mut grads, input, d);
                    }
                    accumulate(&mut grads, weight, d_weight);
                    accumulate(&mut grads, bias, d_bias);
                }
                Op::Dropout { input, mask } => {
                    let d_in = upstream.iter().zip(mask).map(|(g, m)| g * m).collect();
                    let input = *input;
                    accumulate(&mut grads, input, d_in);
                }
                Op::Flatten { input } => {
                    let input = *input;
                    accumulate(&mut grads, input, upstream);
                }
                Op::Mul { lhs, rhs } => {
                    let a = nodes[lhs.0].value.data();
                    let b = nodes[rhs.0].value.data();
                    let d_lhs: Vec<f64> = upstream.iter().zip(b).map(|(g, v)| g * v).collect();
                    let d_rhs: Vec<f64> = upstream.iter().zip(a).map(|(g, v)| g * v).collect();
                    let (lhs, rhs) = (*lhs, *rhs);
                    accumulate(&mut grads, lhs, d_lhs);
                    accumulate(&mut grads, rhs, d_rhs);
                }
                Op::Sum { input } => {
                    let d_in = vec![upstream[0]; nodes[input.0].value.len()];
                    let input = *input;
                    accumulate(&mut grads, input, d_in);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let rows = labels.len();
                    let classes = probs.len() / rows;
                    let scale = upstream[0] / rows as f64;
                    let mut d_in: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &label) in labels.iter().enumerate() {
                        d_in[r * classes + label] -= scale;
                    }
                    let logits = *logits;
                    accumulate(&mut grads, logits, d_in);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, delta: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn rank4(op: &'static str, t: &Tensor) -> Result<[usize; 4], TensorError> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::Rank {
            op,
            expected: 4,
            shape: t.shape().to_vec(),
        }),
    }
}
