//! Dense row-major f64 tensors and the deterministic numeric kernels the
//! rest of the crate builds on.
//!
//! Kernels are pure: equal inputs give bitwise-equal outputs, and parallel
//! sections only ever split work across disjoint output regions so thread
//! scheduling cannot change results. Kernels that could divide by zero carry
//! an explicit guard, noted on each function.

use rayon::prelude::*;
use std::fmt;

use crate::rng::Rng;

// Below this many output elements, thread spawn/sync costs more than the
// arithmetic; run sequentially. Either path writes the same bytes.
pub(crate) const PAR_THRESHOLD: usize = 1 << 15;

/// Errors from tensor construction and kernels.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorError {
    /// Buffer length does not match the product of the shape extents.
    DataLength { expected: usize, got: usize },
    /// Two operands have incompatible shapes for the named operation.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A kernel expected a tensor of a specific rank.
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    /// Pooling or grid extents do not divide evenly.
    NotDivisible {
        op: &'static str,
        extent: usize,
        divisor: usize,
    },
    /// A positive integer parameter was zero or negative.
    BadParameter { op: &'static str, value: i64 },
    /// An operation received an empty input it cannot define a result for.
    EmptyInput(&'static str),
    /// A NaN was found where the kernel requires finite, ordered values.
    NanInput(&'static str),
    /// Quantile fraction outside [0, 1].
    QuantileRange { q: f64 },
    /// A mask operand contained a value other than exactly 0.0 or 1.0.
    NonBinaryMask { op: &'static str, value: f64 },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length mismatch: shape implies {expected}, got {got}")
            }
            TensorError::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            TensorError::RankMismatch { op, expected, got } => {
                write!(f, "{op}: expected rank {expected}, got rank {got}")
            }
            TensorError::NotDivisible { op, extent, divisor } => {
                write!(f, "{op}: extent {extent} not divisible by {divisor}")
            }
            TensorError::BadParameter { op, value } => {
                write!(f, "{op}: parameter must be positive, got {value}")
            }
            TensorError::EmptyInput(op) => write!(f, "{op}: empty input"),
            TensorError::NanInput(op) => write!(f, "{op}: NaN in input"),
            TensorError::QuantileRange { q } => write!(f, "quantile fraction {q} outside [0, 1]"),
            TensorError::NonBinaryMask { op, value } => {
                write!(f, "{op}: mask entry {value} is not exactly 0 or 1")
            }
        }
    }
}

impl std::error::Error for TensorError {}

pub type TensorResult<T> = Result<T, TensorError>;

/// Dense N-dimensional array, row-major, double precision.
///
/// Immutable from a caller's perspective: kernels return new tensors, and
/// in-place mutation requires exclusive access through `data_mut`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform fill in [lo, hi), one rng draw per element in row-major order.
    pub fn rand_uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| lo + (hi - lo) * rng.uniform()).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterpret the buffer under a new shape of equal volume.
    pub fn reshape(&self, shape: Vec<usize>) -> TensorResult<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> TensorResult<()> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn sub(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn mul(&self, other: &Tensor) -> TensorResult<Tensor> {
        self.same_shape(other, "mul")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|a| a * c).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> TensorResult<f64> {
        if self.data.is_empty() {
            return Err(TensorError::EmptyInput("mean"));
        }
        Ok(self.sum() / self.data.len() as f64)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// L2 norm of each channel plane of a C×H×W tensor.
    pub fn channel_l2_norms(&self) -> TensorResult<Vec<f64>> {
        if self.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "channel_l2_norms",
                expected: 3,
                got: self.rank(),
            });
        }
        let plane = self.shape[1] * self.shape[2];
        Ok(self
            .data
            .chunks_exact(plane)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Matrix multiply and convolution
// ---------------------------------------------------------------------------

/// [M×K] · [K×N] -> [M×N].
pub fn matmul(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "matmul",
            expected: 2,
            got: if a.rank() != 2 { a.rank() } else { b.rank() },
        });
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    // ikj ordering: the inner loop runs over contiguous rows of b and out.
    let row_job = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a.data[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(row_job);
    } else {
        out.chunks_mut(n).enumerate().for_each(row_job);
    }
    Tensor::new(vec![m, n], out)
}

/// 2-D cross-correlation over a B×C×H×W batch with zero padding, stride 1.
///
/// `weight` is OC×C×K×K, `bias` (when given) has length OC.
pub fn conv2d_nchw(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    padding: usize,
) -> TensorResult<Tensor> {
    if input.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: "conv2d",
            expected: 4,
            got: input.rank(),
        });
    }
    if weight.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: "conv2d weight",
            expected: 4,
            got: weight.rank(),
        });
    }
    let (b, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    let (oc, wc, k, k2) = (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
    if wc != c || k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape.clone(),
            right: weight.shape.clone(),
        });
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(TensorError::BadParameter {
            op: "conv2d kernel larger than padded input",
            value: k as i64,
        });
    }
    let oh = h + 2 * padding - k + 1;
    let ow = w + 2 * padding - k + 1;
    let mut out = vec![0.0; b * oc * oh * ow];

    let image_job = |(bi, out_img): (usize, &mut [f64])| {
        let in_img = &input.data[bi * c * h * w..(bi + 1) * c * h * w];
        for o in 0..oc {
            let out_plane = &mut out_img[o * oh * ow..(o + 1) * oh * ow];
            if let Some(bias) = bias {
                out_plane.fill(bias[o]);
            }
            for ci in 0..c {
                let in_plane = &in_img[ci * h * w..(ci + 1) * h * w];
                let w_base = ((o * c) + ci) * k * k;
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight.data[w_base + ky * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        accumulate_shifted(out_plane, in_plane, wv, oh, ow, h, w, ky, kx, padding);
                    }
                }
            }
        }
    };
    if b > 1 && b * oc * c * oh * ow * k * k >= PAR_THRESHOLD {
        out.par_chunks_mut(oc * oh * ow).enumerate().for_each(image_job);
    } else {
        out.chunks_mut(oc * oh * ow).enumerate().for_each(image_job);
    }
    Tensor::new(vec![b, oc, oh, ow], out)
}

/// out[i][j] += wv * in[i + ky - pad][j + kx - pad], skipping out-of-bounds taps.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_shifted(
    out_plane: &mut [f64],
    in_plane: &[f64],
    wv: f64,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    padding: usize,
) {
    for i in 0..oh {
        let src_i = i + ky;
        if src_i < padding || src_i - padding >= h {
            continue;
        }
        let src_row = (src_i - padding) * w;
        // Valid output columns j satisfy 0 <= j + kx - padding < w.
        let j_lo = padding.saturating_sub(kx);
        let j_hi = (w + padding - kx).min(ow);
        if j_lo >= j_hi {
            continue;
        }
        let src_off = src_row + j_lo + kx - padding;
        let dst = &mut out_plane[i * ow + j_lo..i * ow + j_hi];
        let src = &in_plane[src_off..src_off + (j_hi - j_lo)];
        for (d, s) in dst.iter_mut().zip(src) {
            *d += wv * s;
        }
    }
}

// ---------------------------------------------------------------------------
// Pooling and up-sampling
// ---------------------------------------------------------------------------

/// Average pooling over a 2-D map with kernel == stride.
///
/// Each output cell is the arithmetic mean of its kernel×kernel block, so the
/// overall mean is preserved.
pub fn avg_pool2d(t: &Tensor, kernel: usize) -> TensorResult<Tensor> {
    if t.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "avg_pool2d",
            expected: 2,
            got: t.rank(),
        });
    }
    if kernel == 0 {
        return Err(TensorError::BadParameter {
            op: "avg_pool2d",
            value: 0,
        });
    }
    let (h, w) = (t.shape[0], t.shape[1]);
    if h % kernel != 0 {
        return Err(TensorError::NotDivisible {
            op: "avg_pool2d",
            extent: h,
            divisor: kernel,
        });
    }
    if w % kernel != 0 {
        return Err(TensorError::NotDivisible {
            op: "avg_pool2d",
            extent: w,
            divisor: kernel,
        });
    }
    let (oh, ow) = (h / kernel, w / kernel);
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            let mut acc = 0.0;
            for di in 0..kernel {
                let row = (i * kernel + di) * w + j * kernel;
                acc += t.data[row..row + kernel].iter().sum::<f64>();
            }
            out[i * ow + j] = acc * inv;
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Average pooling with kernel == stride over every plane of a B×C×H×W batch.
pub fn avg_pool2d_nchw(t: &Tensor, kernel: usize) -> TensorResult<Tensor> {
    if t.rank() != 4 {
        return Err(TensorError::RankMismatch {
            op: "avg_pool2d_nchw",
            expected: 4,
            got: t.rank(),
        });
    }
    let (b, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
    if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
        return Err(TensorError::NotDivisible {
            op: "avg_pool2d_nchw",
            extent: h.max(w),
            divisor: kernel.max(1),
        });
    }
    let (oh, ow) = (h / kernel, w / kernel);
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut out = vec![0.0; b * c * oh * ow];
    let plane_job = |(plane_idx, out_plane): (usize, &mut [f64])| {
        let in_plane = &t.data[plane_idx * h * w..(plane_idx + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..kernel {
                    let row = (i * kernel + di) * w + j * kernel;
                    acc += in_plane[row..row + kernel].iter().sum::<f64>();
                }
                out_plane[i * ow + j] = acc * inv;
            }
        }
    };
    if b * c * h * w >= PAR_THRESHOLD {
        out.par_chunks_mut(oh * ow).enumerate().for_each(plane_job);
    } else {
        out.chunks_mut(oh * ow).enumerate().for_each(plane_job);
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

/// Nearest-neighbour up-sampling: each cell of a p×p map becomes a
/// factor×factor block.
pub fn upsample_replicate(t: &Tensor, factor: usize) -> TensorResult<Tensor> {
    if t.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "upsample_replicate",
            expected: 2,
            got: t.rank(),
        });
    }
    if factor == 0 {
        return Err(TensorError::BadParameter {
            op: "upsample_replicate",
            value: 0,
        });
    }
    let (h, w) = (t.shape[0], t.shape[1]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        let src_row = (i / factor) * w;
        for j in 0..ow {
            out[i * ow + j] = t.data[src_row + j / factor];
        }
    }
    Tensor::new(vec![oh, ow], out)
}

// ---------------------------------------------------------------------------
// Quantiles
// ---------------------------------------------------------------------------

/// Quantile convention used when splitting a saliency grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantileMethod {
    /// Linear interpolation between the bracketing order statistics
    /// (position q·(n−1)).
    Linear,
    /// Nearest-rank: the smallest value with at least ⌈q·n⌉ values at or
    /// below it.
    NearestRank,
}

fn sorted_values(values: &Tensor, op: &'static str) -> TensorResult<Vec<f64>> {
    if values.is_empty() {
        return Err(TensorError::EmptyInput(op));
    }
    if values.data.iter().any(|v| v.is_nan()) {
        return Err(TensorError::NanInput(op));
    }
    let mut sorted = values.data.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN filtered above"));
    Ok(sorted)
}

/// Linear-interpolated quantile: sort ascending, position q·(n−1),
/// interpolate between the bracketing order statistics.
pub fn quantile(values: &Tensor, q: f64) -> TensorResult<f64> {
    quantile_with(values, q, QuantileMethod::Linear)
}

pub fn quantile_with(values: &Tensor, q: f64, method: QuantileMethod) -> TensorResult<f64> {
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(TensorError::QuantileRange { q });
    }
    let sorted = sorted_values(values, "quantile")?;
    let n = sorted.len();
    Ok(match method {
        QuantileMethod::Linear => {
            let pos = q * (n - 1) as f64;
            let k = pos.floor() as usize;
            let f = pos - k as f64;
            if f == 0.0 || k + 1 >= n {
                sorted[k]
            } else {
                sorted[k] + f * (sorted[k + 1] - sorted[k])
            }
        }
        QuantileMethod::NearestRank => {
            if q == 0.0 {
                sorted[0]
            } else {
                let rank = (q * n as f64).ceil() as usize;
                sorted[rank.clamp(1, n) - 1]
            }
        }
    })
}

/// The smallest element of `values` that is ≥ the q-th quantile.
///
/// Comparing entries against this cut reproduces `v ≥ quantile(values, q)`
/// exactly while staying invariant under any order-preserving rescaling of
/// the values: membership is decided through order statistics, never through
/// interpolated arithmetic.
pub fn quantile_cut(values: &Tensor, q: f64, method: QuantileMethod) -> TensorResult<f64> {
    if !(0.0..=1.0).contains(&q) || q.is_nan() {
        return Err(TensorError::QuantileRange { q });
    }
    let sorted = sorted_values(values, "quantile_cut")?;
    let n = sorted.len();
    Ok(match method {
        QuantileMethod::Linear => {
            let pos = q * (n - 1) as f64;
            let k = pos.floor() as usize;
            let f = pos - k as f64;
            let lo = sorted[k];
            let hi = sorted[(k + 1).min(n - 1)];
            // The interpolated quantile lies strictly above lo only when the
            // bracket is non-degenerate and f > 0; no element lives between
            // adjacent order statistics, so the next one up is the cut.
            if f > 0.0 && hi > lo {
                hi
            } else {
                lo
            }
        }
        QuantileMethod::NearestRank => {
            if q == 0.0 {
                sorted[0]
            } else {
                let rank = (q * n as f64).ceil() as usize;
                sorted[rank.clamp(1, n) - 1]
            }
        }
    })
}

// ---------------------------------------------------------------------------
// Similarity, softmax, convex blend
// ---------------------------------------------------------------------------

/// Cosine similarity of two equal-length flat tensors.
///
/// Guard: if either norm is below 1e-12 the result is defined as 0, so the
/// similarity stays meaningful for degenerate (near-zero) gradients.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> TensorResult<f64> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let dot: f64 = a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum();
    let na = a.l2_norm();
    let nb = b.l2_norm();
    if na < 1e-12 || nb < 1e-12 {
        return Ok(0.0);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-wise softmax of a B×N matrix, stabilized by subtracting the row max.
pub fn softmax_rows(logits: &Tensor) -> TensorResult<Tensor> {
    if logits.rank() != 2 {
        return Err(TensorError::RankMismatch {
            op: "softmax_rows",
            expected: 2,
            got: logits.rank(),
        });
    }
    let n = logits.shape[1];
    if n == 0 {
        return Err(TensorError::EmptyInput("softmax_rows"));
    }
    let mut out = logits.data.clone();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        // sum >= 1 because the max element maps to exp(0) = 1
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(logits.shape.clone(), out)
}

/// Convex blend `t·a + (1−t)·b`, computed as `b + t·(a−b)`.
///
/// This form is exact at the endpoints (t=0 gives b, t=1 gives a bitwise)
/// and returns `a` bitwise whenever `a == b`, which the self-mix identity
/// relies on.
pub fn convex_blend(a: &Tensor, b: &Tensor, t: f64) -> TensorResult<Tensor> {
    a.same_shape(b, "convex_blend")?;
    if t == 1.0 {
        return Ok(a.clone());
    }
    if t == 0.0 {
        return Ok(b.clone());
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| y + t * (x - y))
        .collect();
    Tensor::new(a.shape.clone(), data)
}

// ---------------------------------------------------------------------------
// Boolean mask algebra (masks are tensors holding exactly 0.0 or 1.0)
// ---------------------------------------------------------------------------

pub fn mask_check(t: &Tensor, op: &'static str) -> TensorResult<()> {
    for &v in &t.data {
        if v != 0.0 && v != 1.0 {
            return Err(TensorError::NonBinaryMask { op, value: v });
        }
    }
    Ok(())
}

pub fn mask_not(t: &Tensor) -> TensorResult<Tensor> {
    mask_check(t, "mask_not")?;
    Ok(t.map(|v| 1.0 - v))
}

pub fn mask_and(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    mask_check(a, "mask_and")?;
    mask_check(b, "mask_and")?;
    a.mul(b)
}

pub fn mask_or(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    mask_check(a, "mask_or")?;
    mask_check(b, "mask_or")?;
    a.same_shape(b, "mask_or")?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| if x + y > 0.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn mask_xor(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    mask_check(a, "mask_xor")?;
    mask_check(b, "mask_xor")?;
    a.same_shape(b, "mask_xor")?;
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| if x != y { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(a.shape.clone(), data)
}

/// 1 where the two masks agree (both 0 or both 1).
pub fn mask_agree(a: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    mask_not(&mask_xor(a, b)?)
}

/// Number of active (exactly 1.0) cells.
pub fn mask_count(t: &Tensor) -> TensorResult<usize> {
    mask_check(t, "mask_count")?;
    Ok(t.data.iter().filter(|&&v| v == 1.0).count())
}
