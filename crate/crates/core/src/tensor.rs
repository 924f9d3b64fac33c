//! Dense row-major tensors and the raw kernels the graph ops are built from.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("invalid shape {shape:?}: every dimension must be >= 1")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} holds {expected} elements but {got} were supplied")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: output would have a dimension below 1")]
    OutputTooSmall { op: &'static str },
    #[error("maxpool2d: spatial size {height}x{width} is not divisible by window {window}")]
    NotDivisible {
        height: usize,
        width: usize,
        window: usize,
    },
    #[error("{op}: invalid parameter: {reason}")]
    InvalidArgument {
        op: &'static str,
        reason: &'static str,
    },
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("label {label} at row {row} is outside {{0, 1}}")]
    LabelOutOfRange { row: usize, label: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),
}

/// An n-dimensional float array. `grad` is filled by [`crate::graph::Graph::backward`]
/// for parameter leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = checked_numel(shape)?;
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self, TensorError> {
        let n = checked_numel(shape)?;
        Self::new(shape, vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self, TensorError> {
        let n = checked_numel(shape)?;
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Same data viewed under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape, self.data.clone())
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index out of bounds");
            acc * d + i
        })
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::InvalidShape {
            shape: shape.to_vec(),
        });
    }
    Ok(shape.iter().product())
}

/// Output side length of a strided, padded window sweep.
pub fn conv_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

// ---------------------------------------------------------------------------
// Matrix kernels. All reductions run in a fixed order so results are
// bitwise reproducible.

/// Column tile width for the row-blocked kernels.
const TILE: usize = 256;

/// `out[i0..i0+4, j0..j0+w] += sum_p a(i, p) * b[p, j]`, summing over `p` in
/// order so every element matches the unblocked loop bitwise.
#[inline(always)]
fn rows4<A: Fn(usize, usize) -> f64>(
    a: A,
    b: &[f64],
    out: &mut [f64],
    i0: usize,
    k: usize,
    n: usize,
) {
    let mut j0 = 0;
    while j0 < n {
        let w = TILE.min(n - j0);
        let (r0, rest) = out[i0 * n..(i0 + 4) * n].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, r3) = rest.split_at_mut(n);
        let (r0, r1, r2, r3) = (
            &mut r0[j0..j0 + w],
            &mut r1[j0..j0 + w],
            &mut r2[j0..j0 + w],
            &mut r3[j0..j0 + w],
        );
        for p in 0..k {
            let (a0, a1, a2, a3) = (a(i0, p), a(i0 + 1, p), a(i0 + 2, p), a(i0 + 3, p));
            let brow = &b[p * n + j0..p * n + j0 + w];
            for j in 0..w {
                let bv = brow[j];
                r0[j] += a0 * bv;
                r1[j] += a1 * bv;
                r2[j] += a2 * bv;
                r3[j] += a3 * bv;
            }
        }
        j0 += w;
    }
}

#[inline(always)]
fn row1<A: Fn(usize, usize) -> f64>(
    a: A,
    b: &[f64],
    out: &mut [f64],
    i: usize,
    k: usize,
    n: usize,
) {
    let row = &mut out[i * n..(i + 1) * n];
    for p in 0..k {
        let av = a(i, p);
        if av == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let a = &a[..m * k];
    let at = |i: usize, p: usize| a[i * k + p];
    let blocked = m / 4 * 4;
    for i0 in (0..blocked).step_by(4) {
        rows4(at, b, out, i0, k, n);
    }
    for i in blocked..m {
        row1(at, b, out, i, k, n);
    }
}

/// `out[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let a = &a[..k * m];
    let at = |i: usize, p: usize| a[p * m + i];
    let blocked = m / 4 * 4;
    for i0 in (0..blocked).step_by(4) {
        rows4(at, b, out, i0, k, n);
    }
    for i in blocked..m {
        row1(at, b, out, i, k, n);
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let blocked = n / 4 * 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in (0..blocked).step_by(4) {
            let d = dot4(arow, &b[j * k..(j + 4) * k]);
            for (t, v) in d.iter().enumerate() {
                out[i * n + j + t] += v;
            }
        }
        for j in blocked..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Four [`dot`]s of `a` against consecutive rows of `b`, each bitwise equal
/// to the single version.
fn dot4(a: &[f64], b: &[f64]) -> [f64; 4] {
    let k = a.len();
    let rows = [&b[..k], &b[k..2 * k], &b[2 * k..3 * k], &b[3 * k..4 * k]];
    let mut acc = [[0.0f64; 4]; 4];
    let chunks = k / 4;
    for c in 0..chunks {
        let base = c * 4;
        let av = [a[base], a[base + 1], a[base + 2], a[base + 3]];
        for (r, row) in rows.iter().enumerate() {
            let bv = &row[base..base + 4];
            for lane in 0..4 {
                acc[r][lane] += av[lane] * bv[lane];
            }
        }
    }
    let mut out = [0.0; 4];
    for (r, row) in rows.iter().enumerate() {
        let mut tail = 0.0;
        for i in chunks * 4..k {
            tail += a[i] * row[i];
        }
        out[r] = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]) + tail;
    }
    out
}

/// Dot product with four independent accumulators so the loop vectorizes
/// while the summation order stays fixed.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let base = c * 4;
        for lane in 0..4 {
            acc[lane] += a[base + lane] * b[base + lane];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of one 2-d convolution, shared by forward and backward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - padding` lies
/// inside `[0, width)`.
fn valid_span(kx: usize, g: &ConvGeometry) -> (usize, usize) {
    let lo = if g.padding > kx {
        (g.padding - kx).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.width + g.padding > kx {
        (g.width + g.padding - kx).div_ceil(g.stride).min(g.out_w)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds one image `[C,H,W]` into a `[C*kH*kW, H'*W']` patch matrix.
pub(crate) fn im2col(image: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_span(kx, g);
                for oy in 0..g.out_h {
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if g.stride == 1 {
                        out_row[lo..hi]
                            .copy_from_slice(&src[lo + kx - g.padding..hi + kx - g.padding]);
                    } else {
                        for ox in lo..hi {
                            out_row[ox] = src[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im(col: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_span(kx, g);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    let patch = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for ox in lo..hi {
                        dst[ox * g.stride + kx - g.padding] += patch[ox];
                    }
                }
            }
        }
    }
}

/// Row-wise softmax of an `[N, K]` matrix with max subtraction.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor, TensorError> {
    let (rows, cols) = matrix_dims("softmax", logits)?;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        softmax_row(
            &logits.data[r * cols..(r + 1) * cols],
            &mut out[r * cols..(r + 1) * cols],
        );
    }
    Tensor::new(&[rows, cols], out)
}

pub(crate) fn softmax_row(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = libm::exp(z - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub(crate) fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        shape => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dimension_and_length_mismatch() {
        assert!(matches!(
            Tensor::zeros(&[2, 0]),
            Err(TensorError::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::new(&[2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch {
                expected: 4,
                got: 3,
                ..
            })
        ));
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        for (m, k, n) in [(3, 5, 4), (9, 13, 300), (4, 8, 7)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let mut naive = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        naive[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            let mut nn = vec![0.0; m * n];
            gemm_nn(&a, &b, &mut nn, m, k, n);

            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut tn = vec![0.0; m * n];
            gemm_tn(&at, &b, &mut tn, m, k, n);

            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut nt = vec![0.0; m * n];
            gemm_nt(&a, &bt, &mut nt, m, k, n);

            for i in 0..m * n {
                assert!((nn[i] - naive[i]).abs() < 1e-12);
                assert!((tn[i] - naive[i]).abs() < 1e-12);
                assert!((nt[i] - naive[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_output_size_formula() {
        assert_eq!(conv_output_size(8, 3, 1, 1), Some(8));
        assert_eq!(conv_output_size(5, 3, 2, 0), Some(2));
        assert_eq!(conv_output_size(2, 3, 1, 0), None);
        assert_eq!(conv_output_size(4, 3, 0, 0), None);
    }

    #[test]
    fn softmax_of_symmetric_logits_is_uniform() {
        let t = Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let p = softmax_rows(&t).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }
}
