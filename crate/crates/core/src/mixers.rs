//! Mixing policies: percentile patch masks, the saliency-guided patch mixer,
//! the linear-interpolation and cut-and-paste baselines, and the appendix
//! strategy variants.
//!
//! All mixing is exact where the contracts demand it: mixing an image with
//! itself returns it bitwise, q = 0 degenerates the patch mixer to plain
//! linear interpolation, and soft-label coefficients always sum to 1.

use std::fmt;
use std::io::{self, Write};

use crate::rng::Rng;
use crate::saliency::{pool_batch, GridMode, SaliencyGrid};
use crate::tensor::{
    convex_blend, mask_agree, mask_count, quantile_cut, upsample_replicate, QuantileMethod,
    Tensor, TensorError,
};

#[derive(Clone, Debug, PartialEq)]
pub enum MixError {
    Tensor(TensorError),
    EmptyBatch,
    /// The policy needs saliency maps but none were provided.
    MissingSaliency,
    /// Grid sides of a mask pair disagree.
    GridMismatch { left: usize, right: usize },
    PolicyInvalid(String),
    LabelOutOfRange { label: usize, num_classes: usize },
}

impl fmt::Display for MixError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixError::Tensor(e) => write!(f, "{e}"),
            MixError::EmptyBatch => write!(f, "cannot mix an empty batch"),
            MixError::MissingSaliency => write!(f, "policy requires saliency maps"),
            MixError::GridMismatch { left, right } => {
                write!(f, "mask grid sides differ: {left} vs {right}")
            }
            MixError::PolicyInvalid(msg) => write!(f, "invalid mix policy: {msg}"),
            MixError::LabelOutOfRange { label, num_classes } => {
                write!(f, "label {label} out of range for {num_classes} classes")
            }
        }
    }
}

impl std::error::Error for MixError {}

impl From<TensorError> for MixError {
    fn from(e: TensorError) -> Self {
        MixError::Tensor(e)
    }
}

pub type MixResult<T> = Result<T, MixError>;

/// Binary top/least split of a saliency grid, kept at both grid and pixel
/// resolution. The pixel mask is the block-replicated up-sample of the grid
/// mask.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchMask {
    pub grid: Tensor,
    pub pixel: Tensor,
    pub q: f64,
    pub p: usize,
}

/// Split a saliency grid at the q-th percentile: cells at or above the
/// threshold are the top-salient region (1), the rest the least-salient (0).
/// Ties at the threshold are all included, so the mask always has at least
/// one active cell.
pub fn build_mask(grid: &SaliencyGrid, q: f64, image_side: usize) -> MixResult<PatchMask> {
    build_mask_with(grid, q, image_side, QuantileMethod::Linear)
}

pub fn build_mask_with(
    grid: &SaliencyGrid,
    q: f64,
    image_side: usize,
    method: QuantileMethod,
) -> MixResult<PatchMask> {
    let p = grid.side;
    if p == 0 || image_side % p != 0 {
        return Err(TensorError::NotDivisible {
            op: "build_mask",
            extent: image_side,
            divisor: p,
        }
        .into());
    }
    let cut = quantile_cut(&grid.grid, q, method)?;
    let mask = grid.grid.map(|v| if v >= cut { 1.0 } else { 0.0 });
    let pixel = upsample_replicate(&mask, image_side / p)?;
    Ok(PatchMask {
        grid: mask,
        pixel,
        q,
        p,
    })
}

/// Pixel-level agreement mask: 1 where the two region assignments coincide
/// (both top or both least), 0 where they disagree.
pub fn intersection_mask(m0: &PatchMask, m1: &PatchMask) -> MixResult<Tensor> {
    if m0.p != m1.p {
        return Err(MixError::GridMismatch {
            left: m0.p,
            right: m1.p,
        });
    }
    Ok(mask_agree(&m0.pixel, &m1.pixel)?)
}

/// Weighted sum of two label vectors: w0·y0 + w1·y1 computed term by term.
fn weighted_labels(y0: &Tensor, y1: &Tensor, w0: f64, w1: f64) -> MixResult<Tensor> {
    if y0.shape() != y1.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_labels",
            left: y0.shape().to_vec(),
            right: y1.shape().to_vec(),
        }
        .into());
    }
    let data = y0
        .data()
        .iter()
        .zip(y1.data())
        .map(|(&a, &b)| w0 * a + w1 * b)
        .collect();
    Ok(Tensor::new(y0.shape().to_vec(), data)?)
}

fn check_pair_shapes(x0: &Tensor, x1: &Tensor, mask_side: Option<usize>) -> MixResult<(usize, usize)> {
    if x0.shape() != x1.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mix pair",
            left: x0.shape().to_vec(),
            right: x1.shape().to_vec(),
        }
        .into());
    }
    if x0.rank() != 3 || x0.shape()[1] != x0.shape()[2] {
        return Err(TensorError::RankMismatch {
            op: "mix pair",
            expected: 3,
            got: x0.rank(),
        }
        .into());
    }
    let w = x0.shape()[1];
    if let Some(side) = mask_side {
        if side != w {
            return Err(TensorError::ShapeMismatch {
                op: "mix pair mask",
                left: vec![side, side],
                right: vec![w, w],
            }
            .into());
        }
    }
    Ok((x0.shape()[0], w))
}

/// Patch mix of a pair: agreement regions are linearly blended with weight
/// `lambda`, disagreement regions take the pixel from whichever image holds
/// the top-salient patch there. The soft label weighs the blend by the
/// agreement area and each source by its exclusive top-patch area.
pub fn rmix_pair(
    x0: &Tensor,
    y0: &Tensor,
    x1: &Tensor,
    y1: &Tensor,
    m0: &PatchMask,
    m1: &PatchMask,
    lambda: f64,
) -> MixResult<(Tensor, Tensor)> {
    patch_mix_pair(x0, y0, x1, y1, m0, m1, lambda, DisagreementRule::SelectTop)
}

/// Appendix variant: as `rmix_pair` but disagreement regions take the pixel
/// from the image whose patch is least-salient there.
pub fn strategy4_pair(
    x0: &Tensor,
    y0: &Tensor,
    x1: &Tensor,
    y1: &Tensor,
    m0: &PatchMask,
    m1: &PatchMask,
    lambda: f64,
) -> MixResult<(Tensor, Tensor)> {
    patch_mix_pair(x0, y0, x1, y1, m0, m1, lambda, DisagreementRule::SelectLeast)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum DisagreementRule {
    SelectTop,
    SelectLeast,
}

#[allow(clippy::too_many_arguments)]
fn patch_mix_pair(
    x0: &Tensor,
    y0: &Tensor,
    x1: &Tensor,
    y1: &Tensor,
    m0: &PatchMask,
    m1: &PatchMask,
    lambda: f64,
    rule: DisagreementRule,
) -> MixResult<(Tensor, Tensor)> {
    let (c, w) = check_pair_shapes(x0, x1, Some(m0.pixel.shape()[0]))?;
    let inter = intersection_mask(m0, m1)?;
    let blended = convex_blend(x0, x1, lambda)?;

    let plane = w * w;
    let mut out = vec![0.0; c * plane];
    for ci in 0..c {
        let b_plane = &blended.data()[ci * plane..(ci + 1) * plane];
        let x0_plane = &x0.data()[ci * plane..(ci + 1) * plane];
        let x1_plane = &x1.data()[ci * plane..(ci + 1) * plane];
        let o_plane = &mut out[ci * plane..(ci + 1) * plane];
        for i in 0..plane {
            o_plane[i] = if inter.data()[i] == 1.0 {
                b_plane[i]
            } else {
                // Disagreement: exactly one mask is 1. SelectTop takes the
                // image whose mask is 1; SelectLeast takes the other.
                let take_x0 = match rule {
                    DisagreementRule::SelectTop => m0.pixel.data()[i] == 1.0,
                    DisagreementRule::SelectLeast => m0.pixel.data()[i] == 0.0,
                };
                if take_x0 {
                    x0_plane[i]
                } else {
                    x1_plane[i]
                }
            };
        }
    }
    let image = Tensor::new(x0.shape().to_vec(), out)?;

    let total = plane as f64;
    let c_inter = mask_count(&inter)?;
    let (c0, c1) = {
        let mut c0 = 0usize;
        let mut c1 = 0usize;
        for i in 0..plane {
            if inter.data()[i] == 0.0 {
                let m0_active = m0.pixel.data()[i] == 1.0;
                let x0_wins = match rule {
                    DisagreementRule::SelectTop => m0_active,
                    DisagreementRule::SelectLeast => !m0_active,
                };
                if x0_wins {
                    c0 += 1;
                } else {
                    c1 += 1;
                }
            }
        }
        (c0, c1)
    };
    debug_assert_eq!(c_inter + c0 + c1, plane);

    let y_blend = convex_blend(y0, y1, lambda)?;
    let w_inter = c_inter as f64 / total;
    let exclusive = weighted_labels(y0, y1, c0 as f64 / total, c1 as f64 / total)?;
    let label_data: Vec<f64> = y_blend
        .data()
        .iter()
        .zip(exclusive.data())
        .map(|(&b, &e)| w_inter * b + e)
        .collect();
    let label = Tensor::new(y0.shape().to_vec(), label_data)?;
    Ok((image, label))
}

/// Plain linear interpolation of a pair: λ·x0 + (1−λ)·x1 and the same for
/// labels.
pub fn input_mixup_pair(
    x0: &Tensor,
    y0: &Tensor,
    x1: &Tensor,
    y1: &Tensor,
    lambda: f64,
) -> MixResult<(Tensor, Tensor)> {
    check_pair_shapes(x0, x1, None)?;
    Ok((convex_blend(x0, x1, lambda)?, convex_blend(y0, y1, lambda)?))
}

/// Cut-and-paste: a square of side ratio √(1−λ) from x1 replaces the same
/// region of x0. The square is shifted (not truncated) to stay in bounds, so
/// the label weight `side²/W²` is the exact pasted-pixel fraction and the
/// λ ∈ {0, 1} boundaries return a source image bitwise.
///
/// Two rng draws per call (row center, column center), made even when the
/// square is degenerate so the stream stays aligned.
pub fn cutmix_pair(
    x0: &Tensor,
    y0: &Tensor,
    x1: &Tensor,
    y1: &Tensor,
    lambda: f64,
    rng: &mut Rng,
) -> MixResult<(Tensor, Tensor)> {
    let (c, w) = check_pair_shapes(x0, x1, None)?;
    if !(0.0..=1.0).contains(&lambda) {
        return Err(MixError::PolicyInvalid(format!("lambda {lambda} outside [0,1]")));
    }
    let side = ((w as f64) * (1.0 - lambda).sqrt()).round() as usize;
    let side = side.min(w);
    let cy = rng.below(w);
    let cx = rng.below(w);
    if side == 0 {
        return Ok((x0.clone(), y0.clone()));
    }
    let top = cy.saturating_sub(side / 2).min(w - side);
    let left = cx.saturating_sub(side / 2).min(w - side);

    let mut out = x0.data().to_vec();
    let plane = w * w;
    for ci in 0..c {
        for i in top..top + side {
            let row = ci * plane + i * w;
            out[row + left..row + left + side]
                .copy_from_slice(&x1.data()[row + left..row + left + side]);
        }
    }
    let image = Tensor::new(x0.shape().to_vec(), out)?;
    let pasted = (side * side) as f64 / plane as f64;
    let label = weighted_labels(y0, y1, 1.0 - pasted, pasted)?;
    Ok((image, label))
}

/// Appendix strategy 1: cut-and-paste the source's top-salient region only.
/// Pixels where the source mask is 1 come from x1; everything else stays x0.
pub fn strategy1_pair(
    x0: &Tensor,
    y0: &Tensor,
    x1: &Tensor,
    y1: &Tensor,
    m1: &PatchMask,
) -> MixResult<(Tensor, Tensor)> {
    let (c, w) = check_pair_shapes(x0, x1, Some(m1.pixel.shape()[0]))?;
    let plane = w * w;
    let mut out = x0.data().to_vec();
    for ci in 0..c {
        for i in 0..plane {
            if m1.pixel.data()[i] == 1.0 {
                out[ci * plane + i] = x1.data()[ci * plane + i];
            }
        }
    }
    let image = Tensor::new(x0.shape().to_vec(), out)?;
    let pasted = mask_count(&m1.pixel)? as f64 / plane as f64;
    let label = weighted_labels(y0, y1, 1.0 - pasted, pasted)?;
    Ok((image, label))
}

/// Appendix strategy 2: cut-and-paste in both agreement regions (top-top and
/// least-least take the source pixel), the disagreement region keeps x0.
pub fn strategy2_pair(
    x0: &Tensor,
    y0: &Tensor,
    x1: &Tensor,
    y1: &Tensor,
    m0: &PatchMask,
    m1: &PatchMask,
) -> MixResult<(Tensor, Tensor)> {
    let (c, w) = check_pair_shapes(x0, x1, Some(m0.pixel.shape()[0]))?;
    let inter = intersection_mask(m0, m1)?;
    let plane = w * w;
    let mut out = x0.data().to_vec();
    for ci in 0..c {
        for i in 0..plane {
            if inter.data()[i] == 1.0 {
                out[ci * plane + i] = x1.data()[ci * plane + i];
            }
        }
    }
    let image = Tensor::new(x0.shape().to_vec(), out)?;
    let pasted = mask_count(&inter)? as f64 / plane as f64;
    let label = weighted_labels(y0, y1, 1.0 - pasted, pasted)?;
    Ok((image, label))
}

// ---------------------------------------------------------------------------
// Batch mixing
// ---------------------------------------------------------------------------

/// Mixing policy family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixVariant {
    RMix,
    InputMixup,
    CutMix,
    Strategy1,
    Strategy2,
    Strategy4,
}

impl MixVariant {
    pub fn needs_saliency(self) -> bool {
        !matches!(self, MixVariant::InputMixup | MixVariant::CutMix)
    }

    pub fn uses_lambda(self) -> bool {
        !matches!(self, MixVariant::Strategy1 | MixVariant::Strategy2)
    }
}

/// Whether (λ, q, p) are drawn once per batch or independently per pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingGranularity {
    PerBatch,
    PerPair,
}

#[derive(Clone, Debug)]
pub struct MixPolicy {
    pub variant: MixVariant,
    pub alpha: f64,
    pub k: usize,
    pub p_set: Vec<usize>,
    pub granularity: SamplingGranularity,
    pub quantile_method: QuantileMethod,
    pub grid_mode: GridMode,
}

impl MixPolicy {
    pub fn new(variant: MixVariant, alpha: f64, k: usize, p_set: Vec<usize>) -> Self {
        MixPolicy {
            variant,
            alpha,
            k,
            p_set,
            granularity: SamplingGranularity::PerBatch,
            quantile_method: QuantileMethod::Linear,
            grid_mode: GridMode::GridSide,
        }
    }

    pub fn validate(&self, image_side: usize) -> MixResult<()> {
        if !(self.alpha > 0.0) {
            return Err(MixError::PolicyInvalid(format!("alpha {} must be > 0", self.alpha)));
        }
        if self.k == 0 {
            return Err(MixError::PolicyInvalid("top-k space must have K ≥ 1".into()));
        }
        if self.variant.needs_saliency() {
            if self.p_set.is_empty() {
                return Err(MixError::PolicyInvalid("empty p set".into()));
            }
            for &p in &self.p_set {
                if p == 0 || image_side % p != 0 {
                    return Err(MixError::PolicyInvalid(format!(
                        "p {p} does not divide image side {image_side}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The K equally spaced candidate percentiles from 0.0 to 0.99.
pub fn q_grid(k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![0.0];
    }
    (0..k).map(|i| 0.99 * i as f64 / (k - 1) as f64).collect()
}

/// Where one mixed item came from.
#[derive(Clone, Debug, PartialEq)]
pub struct MixProvenance {
    pub src0: usize,
    pub src1: usize,
    pub lambda: f64,
    pub q0: f64,
    pub q1: f64,
    pub p: usize,
    pub inter_count: usize,
}

/// A mixed batch: images, soft labels summing to 1 per row, and per-item
/// provenance.
#[derive(Clone, Debug)]
pub struct MixedBatch {
    pub images: Tensor,
    pub soft_labels: Tensor,
    pub provenance: Vec<MixProvenance>,
}

fn image_at(batch: &Tensor, i: usize) -> Tensor {
    let item: usize = batch.shape()[1..].iter().product();
    Tensor::new(
        batch.shape()[1..].to_vec(),
        batch.data()[i * item..(i + 1) * item].to_vec(),
    )
    .expect("slice length matches shape")
}

fn one_hot_row(label: usize, num_classes: usize) -> MixResult<Tensor> {
    if label >= num_classes {
        return Err(MixError::LabelOutOfRange { label, num_classes });
    }
    let mut data = vec![0.0; num_classes];
    data[label] = 1.0;
    Ok(Tensor::new(vec![num_classes], data)?)
}

struct PairParams {
    lambda: f64,
    q0: f64,
    q1: f64,
    p: usize,
}

/// Mix a batch under `policy`: the partner of each image is drawn by a
/// random permutation of the batch, and (λ, q, p) are sampled per batch (or
/// per pair, by configuration).
///
/// Draw order: permutation, then λ / q-index / p-index in that order (per
/// batch or per pair), then two rectangle-center draws per pair for the
/// cut-and-paste policy.
pub fn mix_batch(
    images: &Tensor,
    labels: &[usize],
    num_classes: usize,
    policy: &MixPolicy,
    rng: &mut Rng,
    saliency_maps: Option<&[Tensor]>,
) -> MixResult<MixedBatch> {
    if images.rank() != 4 || images.shape()[0] == 0 {
        return Err(MixError::EmptyBatch);
    }
    let b = images.shape()[0];
    let side = images.shape()[3];
    policy.validate(side)?;
    if labels.len() != b {
        return Err(MixError::PolicyInvalid(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if policy.variant.needs_saliency() {
        match saliency_maps {
            Some(maps) if maps.len() == b => {}
            _ => return Err(MixError::MissingSaliency),
        }
    }

    let perm = rng.permutation(b);
    let qs = q_grid(policy.k);
    let draw = |rng: &mut Rng| -> PairParams {
        let lambda = if policy.variant.uses_lambda() {
            rng.beta_symmetric(policy.alpha)
        } else {
            0.0
        };
        let (q, p) = if policy.variant.needs_saliency() {
            (qs[rng.below(qs.len())], policy.p_set[rng.below(policy.p_set.len())])
        } else {
            (0.0, side)
        };
        PairParams {
            lambda,
            q0: q,
            q1: q,
            p,
        }
    };
    let params: Vec<PairParams> = match policy.granularity {
        SamplingGranularity::PerBatch => {
            let shared = draw(rng);
            (0..b)
                .map(|_| PairParams {
                    lambda: shared.lambda,
                    q0: shared.q0,
                    q1: shared.q1,
                    p: shared.p,
                })
                .collect()
        }
        SamplingGranularity::PerPair => (0..b).map(|_| draw(rng)).collect(),
    };

    mix_with_params(images, labels, num_classes, policy, &perm, &params, saliency_maps, rng)
}

/// Patch mixing with an externally chosen per-image percentile (the
/// controller path): per-image masks at a fixed grid side, one λ for the
/// whole batch, partner by the given permutation.
#[allow(clippy::too_many_arguments)]
pub fn rmix_batch_with_q(
    images: &Tensor,
    labels: &[usize],
    num_classes: usize,
    per_image_q: &[f64],
    p: usize,
    lambda: f64,
    perm: &[usize],
    saliency_maps: &[Tensor],
    quantile_method: QuantileMethod,
    grid_mode: GridMode,
) -> MixResult<MixedBatch> {
    if images.rank() != 4 || images.shape()[0] == 0 {
        return Err(MixError::EmptyBatch);
    }
    let b = images.shape()[0];
    if per_image_q.len() != b || perm.len() != b || saliency_maps.len() != b {
        return Err(MixError::PolicyInvalid(
            "per-image q, permutation and saliency maps must cover the batch".into(),
        ));
    }
    let policy = MixPolicy {
        variant: MixVariant::RMix,
        alpha: 1.0,
        k: 1,
        p_set: vec![p],
        granularity: SamplingGranularity::PerBatch,
        quantile_method,
        grid_mode,
    };
    let params: Vec<PairParams> = (0..b)
        .map(|i| PairParams {
            lambda,
            q0: per_image_q[i],
            q1: per_image_q[perm[i]],
            p,
        })
        .collect();
    // The rng is unused on this path (no cut-and-paste draws).
    let mut unused = Rng::from_seed(0);
    mix_with_params(
        images,
        labels,
        num_classes,
        &policy,
        perm,
        &params,
        Some(saliency_maps),
        &mut unused,
    )
}

#[allow(clippy::too_many_arguments)]
fn mix_with_params(
    images: &Tensor,
    labels: &[usize],
    num_classes: usize,
    policy: &MixPolicy,
    perm: &[usize],
    params: &[PairParams],
    saliency_maps: Option<&[Tensor]>,
    rng: &mut Rng,
) -> MixResult<MixedBatch> {
    let b = images.shape()[0];
    let side = images.shape()[3];

    // Pool saliency grids once per distinct p (they are shared across pairs
    // under per-batch sampling).
    let mut grids_by_p: Vec<(usize, Vec<SaliencyGrid>)> = Vec::new();
    if policy.variant.needs_saliency() {
        let maps = saliency_maps.ok_or(MixError::MissingSaliency)?;
        for pp in params.iter().map(|pr| pr.p) {
            if !grids_by_p.iter().any(|(p, _)| *p == pp) {
                grids_by_p.push((pp, pool_batch(maps, pp, policy.grid_mode)?));
            }
        }
    }
    let grids_for = |p: usize| -> &[SaliencyGrid] {
        &grids_by_p
            .iter()
            .find(|(pp, _)| *pp == p)
            .expect("pooled above")
            .1
    };

    let mut out_images = Vec::with_capacity(images.len());
    let mut out_labels = Vec::with_capacity(b * num_classes);
    let mut provenance = Vec::with_capacity(b);

    for i in 0..b {
        let j = perm[i];
        let x0 = image_at(images, i);
        let x1 = image_at(images, j);
        let y0 = one_hot_row(labels[i], num_classes)?;
        let y1 = one_hot_row(labels[j], num_classes)?;
        let pr = &params[i];

        let (mixed, label, inter_count) = match policy.variant {
            MixVariant::InputMixup => {
                let (img, lab) = input_mixup_pair(&x0, &y0, &x1, &y1, pr.lambda)?;
                (img, lab, side * side)
            }
            MixVariant::CutMix => {
                let (img, lab) = cutmix_pair(&x0, &y0, &x1, &y1, pr.lambda, rng)?;
                (img, lab, side * side)
            }
            MixVariant::RMix | MixVariant::Strategy4 => {
                let grids = grids_for(pr.p);
                let m0 = build_mask_with(&grids[i], pr.q0, side, policy.quantile_method)?;
                let m1 = build_mask_with(&grids[j], pr.q1, side, policy.quantile_method)?;
                let inter = mask_count(&intersection_mask(&m0, &m1)?)?;
                let (img, lab) = if policy.variant == MixVariant::RMix {
                    rmix_pair(&x0, &y0, &x1, &y1, &m0, &m1, pr.lambda)?
                } else {
                    strategy4_pair(&x0, &y0, &x1, &y1, &m0, &m1, pr.lambda)?
                };
                (img, lab, inter)
            }
            MixVariant::Strategy1 => {
                let grids = grids_for(pr.p);
                let m1 = build_mask_with(&grids[j], pr.q1, side, policy.quantile_method)?;
                let (img, lab) = strategy1_pair(&x0, &y0, &x1, &y1, &m1)?;
                (img, lab, 0)
            }
            MixVariant::Strategy2 => {
                let grids = grids_for(pr.p);
                let m0 = build_mask_with(&grids[i], pr.q0, side, policy.quantile_method)?;
                let m1 = build_mask_with(&grids[j], pr.q1, side, policy.quantile_method)?;
                let inter = mask_count(&intersection_mask(&m0, &m1)?)?;
                let (img, lab) = strategy2_pair(&x0, &y0, &x1, &y1, &m0, &m1)?;
                (img, lab, inter)
            }
        };
        out_images.extend_from_slice(mixed.data());
        out_labels.extend_from_slice(label.data());
        provenance.push(MixProvenance {
            src0: i,
            src1: j,
            lambda: pr.lambda,
            q0: pr.q0,
            q1: pr.q1,
            p: pr.p,
            inter_count,
        });
    }

    Ok(MixedBatch {
        images: Tensor::new(images.shape().to_vec(), out_images)?,
        soft_labels: Tensor::new(vec![b, num_classes], out_labels)?,
        provenance,
    })
}

/// Debug dump: one CSV row per mixed item.
pub fn dump_provenance_csv<W: Write>(batch: &MixedBatch, out: &mut W) -> io::Result<()> {
    writeln!(out, "src0,src1,lambda,q0,q1,p,inter_count")?;
    for pr in &batch.provenance {
        writeln!(
            out,
            "{},{},{:.9},{:.4},{:.4},{},{}",
            pr.src0, pr.src1, pr.lambda, pr.q0, pr.q1, pr.p, pr.inter_count
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mask_not, mask_xor, quantile};

    fn grid_from(values: Vec<f64>, side: usize) -> SaliencyGrid {
        let total: f64 = values.iter().sum();
        SaliencyGrid {
            grid: Tensor::new(vec![side, side], values.iter().map(|v| v / total).collect()).unwrap(),
            source: 0,
            side,
        }
    }

    #[test]
    fn q_zero_gives_all_ones_mask() {
        let g = grid_from(vec![0.1, 0.2, 0.3, 0.4], 2);
        let m = build_mask(&g, 0.0, 8).unwrap();
        assert!(m.grid.data().iter().all(|&v| v == 1.0));
        assert!(m.pixel.data().iter().all(|&v| v == 1.0));
        assert_eq!(m.pixel.shape(), &[8, 8]);
    }

    #[test]
    fn median_split_matches_threshold_oracle() {
        // threshold at q=0.5 of [0.1,0.2,0.3,0.4] is 0.25: mask 0,0,1,1
        let g = grid_from(vec![0.1, 0.2, 0.3, 0.4], 2);
        let m = build_mask(&g, 0.5, 4).unwrap();
        let thr = quantile(&g.grid, 0.5).unwrap();
        for (cell, &v) in m.grid.data().iter().zip(g.grid.data()) {
            assert_eq!(*cell == 1.0, v >= thr);
        }
        let sorted_flags: Vec<f64> = {
            let mut idx: Vec<usize> = (0..4).collect();
            idx.sort_by(|&a, &b| g.grid.data()[a].partial_cmp(&g.grid.data()[b]).unwrap());
            idx.iter().map(|&i| m.grid.data()[i]).collect()
        };
        assert_eq!(sorted_flags, vec![0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn uniform_grid_any_q_is_all_ones() {
        let g = grid_from(vec![1.0; 16], 4);
        for q in [0.0, 0.33, 0.77, 0.99] {
            let m = build_mask(&g, q, 8).unwrap();
            assert!(m.grid.data().iter().all(|&v| v == 1.0), "q={q}");
        }
    }

    #[test]
    fn mask_always_has_an_active_cell_and_is_binary() {
        let mut rng = Rng::from_seed(51);
        for _ in 0..200 {
            let vals: Vec<f64> = (0..16).map(|_| rng.uniform()).collect();
            let g = grid_from(vals, 4);
            let q = rng.uniform() * 0.99;
            let m = build_mask(&g, q, 16).unwrap();
            assert!(mask_count(&m.grid).unwrap() >= 1);
            let up = upsample_replicate(&m.grid, 4).unwrap();
            assert_eq!(up, m.pixel);
        }
    }

    #[test]
    fn intersection_truth_table() {
        let mk = |cells: Vec<f64>| PatchMask {
            pixel: upsample_replicate(&Tensor::new(vec![2, 2], cells.clone()).unwrap(), 1).unwrap(),
            grid: Tensor::new(vec![2, 2], cells).unwrap(),
            q: 0.5,
            p: 2,
        };
        let m0 = mk(vec![1.0, 0.0, 1.0, 0.0]);
        let m1 = mk(vec![1.0, 1.0, 0.0, 0.0]);
        let inter = intersection_mask(&m0, &m1).unwrap();
        assert_eq!(inter.data(), &[1.0, 0.0, 0.0, 1.0]);
        // identical masks -> all ones, complementary -> all zeros
        assert_eq!(intersection_mask(&m0, &m0).unwrap().data(), &[1.0; 4]);
        let m0_not = mk(vec![0.0, 1.0, 0.0, 1.0]);
        assert_eq!(intersection_mask(&m0, &m0_not).unwrap().data(), &[0.0; 4]);
        // m_inter == NOT(m0 XOR m1)
        let xor = mask_xor(&m0.pixel, &m1.pixel).unwrap();
        assert_eq!(inter, mask_not(&xor).unwrap());
    }

    #[test]
    fn intersection_rejects_grid_mismatch() {
        let g2 = grid_from(vec![1.0; 4], 2);
        let g4 = grid_from(vec![1.0; 16], 4);
        let m2 = build_mask(&g2, 0.5, 8).unwrap();
        let m4 = build_mask(&g4, 0.5, 8).unwrap();
        assert!(matches!(
            intersection_mask(&m2, &m4),
            Err(MixError::GridMismatch { .. })
        ));
    }

    fn rand_image(rng: &mut Rng, c: usize, w: usize) -> Tensor {
        Tensor::rand_uniform(vec![c, w, w], 0.0, 1.0, rng)
    }

    #[test]
    fn rmix_self_mix_is_bitwise_identity() {
        let mut rng = Rng::from_seed(52);
        let x = rand_image(&mut rng, 3, 8);
        let y = one_hot_row(2, 5).unwrap();
        let g = grid_from((0..16).map(|i| (i + 1) as f64).collect(), 4);
        let m = build_mask(&g, 0.55, 8).unwrap();
        let (img, lab) = rmix_pair(&x, &y, &x, &y, &m, &m, 0.3127).unwrap();
        assert_eq!(img, x);
        assert_eq!(lab, y);
    }

    #[test]
    fn rmix_q_zero_equals_input_mixup() {
        let mut rng = Rng::from_seed(53);
        let x0 = rand_image(&mut rng, 3, 8);
        let x1 = rand_image(&mut rng, 3, 8);
        let y0 = one_hot_row(0, 4).unwrap();
        let y1 = one_hot_row(3, 4).unwrap();
        let g0 = grid_from((0..4).map(|i| (i + 1) as f64).collect(), 2);
        let g1 = grid_from((0..4).rev().map(|i| (i + 1) as f64).collect(), 2);
        let m0 = build_mask(&g0, 0.0, 8).unwrap();
        let m1 = build_mask(&g1, 0.0, 8).unwrap();
        let lambda = 0.37;
        let (img, lab) = rmix_pair(&x0, &y0, &x1, &y1, &m0, &m1, lambda).unwrap();
        let (img_ref, lab_ref) = input_mixup_pair(&x0, &y0, &x1, &y1, lambda).unwrap();
        for (a, b) in img.data().iter().zip(img_ref.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in lab.data().iter().zip(lab_ref.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn rmix_hand_evaluated_label_case() {
        // 2×2 grids, W=4: two agreement cells, one exclusive-top cell per
        // side, λ=0.5 → label is the even blend of the two one-hots.
        let x0 = Tensor::full(vec![1, 4, 4], 0.2);
        let x1 = Tensor::full(vec![1, 4, 4], 0.8);
        let y0 = one_hot_row(0, 2).unwrap();
        let y1 = one_hot_row(1, 2).unwrap();
        // m0 = [1,0,1,0], m1 = [1,1,0,0]: agreement at cells 0 (both top)
        // and 3 (both least); cell 2 exclusive to m0, cell 1 exclusive to m1.
        let mk = |cells: Vec<f64>| PatchMask {
            pixel: upsample_replicate(&Tensor::new(vec![2, 2], cells.clone()).unwrap(), 2).unwrap(),
            grid: Tensor::new(vec![2, 2], cells).unwrap(),
            q: 0.5,
            p: 2,
        };
        let m0 = mk(vec![1.0, 0.0, 1.0, 0.0]);
        let m1 = mk(vec![1.0, 1.0, 0.0, 0.0]);
        let (_, lab) = rmix_pair(&x0, &y0, &x1, &y1, &m0, &m1, 0.5).unwrap();
        // c_inter = 8 px, c0 = c1 = 4 px, W² = 16:
        // label = (8/16)(0.5·y0 + 0.5·y1) + (4·y0 + 4·y1)/16 = 0.5·y0 + 0.5·y1
        assert!((lab.data()[0] - 0.5).abs() < 1e-12);
        assert!((lab.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rmix_disagreement_takes_top_patch() {
        let x0 = Tensor::full(vec![1, 2, 2], 0.0);
        let x1 = Tensor::full(vec![1, 2, 2], 1.0);
        let y0 = one_hot_row(0, 2).unwrap();
        let y1 = one_hot_row(1, 2).unwrap();
        let mk = |cells: Vec<f64>| PatchMask {
            pixel: Tensor::new(vec![2, 2], cells.clone()).unwrap(),
            grid: Tensor::new(vec![2, 2], cells).unwrap(),
            q: 0.5,
            p: 2,
        };
        // cell 1: m0 top, m1 least → take x0; cell 2: m1 top → take x1
        let m0 = mk(vec![1.0, 1.0, 0.0, 0.0]);
        let m1 = mk(vec![1.0, 0.0, 1.0, 0.0]);
        let (img, _) = rmix_pair(&x0, &y0, &x1, &y1, &m0, &m1, 0.25).unwrap();
        assert_eq!(img.data()[1], 0.0); // from x0
        assert_eq!(img.data()[2], 1.0); // from x1
        // strategy 4 flips the disagreement choice
        let (img4, _) = strategy4_pair(&x0, &y0, &x1, &y1, &m0, &m1, 0.25).unwrap();
        assert_eq!(img4.data()[1], 1.0); // least side: x1's patch
        assert_eq!(img4.data()[2], 0.0);
    }

    #[test]
    fn label_simplex_and_pixel_convexity_hold() {
        let mut rng = Rng::from_seed(54);
        for trial in 0..200 {
            let x0 = rand_image(&mut rng, 2, 8);
            let x1 = rand_image(&mut rng, 2, 8);
            let y0 = one_hot_row(rng.below(6), 6).unwrap();
            let y1 = one_hot_row(rng.below(6), 6).unwrap();
            let g0 = grid_from((0..16).map(|_| rng.uniform() + 1e-3).collect(), 4);
            let g1 = grid_from((0..16).map(|_| rng.uniform() + 1e-3).collect(), 4);
            let q = 0.99 * rng.uniform();
            let m0 = build_mask(&g0, q, 8).unwrap();
            let m1 = build_mask(&g1, q, 8).unwrap();
            let lambda = rng.beta_symmetric(1.0);
            let (img, lab) = rmix_pair(&x0, &y0, &x1, &y1, &m0, &m1, lambda).unwrap();

            let sum: f64 = lab.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "trial {trial}: label sum {sum}");
            assert!(lab.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
            for ((a, b), m) in x0.data().iter().zip(x1.data()).zip(img.data()) {
                assert!(*m >= a.min(*b) - 1e-15 && *m <= a.max(*b) + 1e-15);
            }
        }
    }

    #[test]
    fn positive_rescaling_of_grids_leaves_masks_bitwise_unchanged() {
        let mut rng = Rng::from_seed(55);
        for &c in &[0.5, 2.0, 7.3, 1e3, 1e-3] {
            let vals: Vec<f64> = (0..16).map(|_| rng.uniform() + 1e-6).collect();
            let g = grid_from(vals.clone(), 4);
            let scaled = SaliencyGrid {
                grid: g.grid.scale(c),
                source: 0,
                side: 4,
            };
            for q in q_grid(10) {
                let m = build_mask(&g, q, 8).unwrap();
                let ms = build_mask(&scaled, q, 8).unwrap();
                assert_eq!(m.grid, ms.grid, "c={c} q={q}");
                assert_eq!(m.pixel, ms.pixel);
            }
        }
    }

    #[test]
    fn cutmix_boundaries_are_exact() {
        let mut rng = Rng::from_seed(56);
        let x0 = rand_image(&mut rng, 3, 8);
        let x1 = rand_image(&mut rng, 3, 8);
        let y0 = one_hot_row(1, 3).unwrap();
        let y1 = one_hot_row(2, 3).unwrap();
        let (img, lab) = cutmix_pair(&x0, &y0, &x1, &y1, 1.0, &mut rng).unwrap();
        assert_eq!(img, x0);
        assert_eq!(lab, y0);
        let (img, lab) = cutmix_pair(&x0, &y0, &x1, &y1, 0.0, &mut rng).unwrap();
        assert_eq!(img, x1);
        assert_eq!(lab, y1);
    }

    #[test]
    fn cutmix_label_weight_matches_pasted_area_oracle() {
        let x0 = Tensor::zeros(vec![2, 16, 16]);
        let x1 = Tensor::full(vec![2, 16, 16], 1.0);
        let y0 = one_hot_row(0, 2).unwrap();
        let y1 = one_hot_row(1, 2).unwrap();
        let mut rng = Rng::from_seed(57);
        for _ in 0..100 {
            let lambda = rng.uniform();
            let (img, lab) = cutmix_pair(&x0, &y0, &x1, &y1, lambda, &mut rng).unwrap();
            // independent area count: pasted pixels are exactly the 1.0s
            let pasted = img.data()[..256].iter().filter(|&&v| v == 1.0).count();
            let expect = pasted as f64 / 256.0;
            assert!((lab.data()[1] - expect).abs() < 1e-12);
            assert!((lab.data()[0] - (1.0 - expect)).abs() < 1e-12);
        }
    }

    #[test]
    fn strategy1_and_2_paste_semantics() {
        let x0 = Tensor::zeros(vec![1, 4, 4]);
        let x1 = Tensor::full(vec![1, 4, 4], 1.0);
        let y0 = one_hot_row(0, 2).unwrap();
        let y1 = one_hot_row(1, 2).unwrap();
        let mk = |cells: Vec<f64>| PatchMask {
            pixel: upsample_replicate(&Tensor::new(vec![2, 2], cells.clone()).unwrap(), 2).unwrap(),
            grid: Tensor::new(vec![2, 2], cells).unwrap(),
            q: 0.5,
            p: 2,
        };
        let m0 = mk(vec![1.0, 0.0, 1.0, 0.0]);
        let m1 = mk(vec![1.0, 1.0, 0.0, 0.0]);

        // strategy 1: x1's top region (cells 0,1) pasted into x0
        let (img, lab) = strategy1_pair(&x0, &y0, &x1, &y1, &m1).unwrap();
        assert_eq!(img.data()[0], 1.0); // cell 0 pasted
        assert_eq!(img.data()[3], 1.0); // cell 1 pasted (pixel row 0, col 3)
        assert_eq!(img.data()[10], 0.0); // cell 2 kept
        assert!((lab.data()[1] - 0.5).abs() < 1e-12); // 8 of 16 pixels pasted

        // strategy 2: agreement cells (0 and 3) pasted, disagreement kept
        let (img2, lab2) = strategy2_pair(&x0, &y0, &x1, &y1, &m0, &m1).unwrap();
        assert_eq!(img2.data()[0], 1.0); // cell 0 (both top)
        assert_eq!(img2.data()[15], 1.0); // cell 3 (both least)
        assert_eq!(img2.data()[3], 0.0); // cell 1 disagreement: keep x0
        assert!((lab2.data()[1] - 0.5).abs() < 1e-12);

        // self-mix identity and q=0 degeneration for all strategies
        let g = grid_from((1..=4).map(f64::from).collect(), 2);
        let m = build_mask(&g, 0.5, 4).unwrap();
        let (s1, l1) = strategy1_pair(&x0, &y0, &x0, &y0, &m).unwrap();
        assert_eq!(s1, x0);
        assert_eq!(l1, y0);
        let (s2, l2) = strategy2_pair(&x0, &y0, &x0, &y0, &m, &m).unwrap();
        assert_eq!(s2, x0);
        assert_eq!(l2, y0);
        let (s4, l4) = strategy4_pair(&x0, &y0, &x0, &y0, &m, &m, 0.7).unwrap();
        assert_eq!(s4, x0);
        assert_eq!(l4, y0);
        let m_all = build_mask(&g, 0.0, 4).unwrap();
        let (f1, fl1) = strategy1_pair(&x0, &y0, &x1, &y1, &m_all).unwrap();
        assert_eq!(f1, x1);
        assert_eq!(fl1, y1);
    }

    #[test]
    fn mix_batch_of_one_is_identity() {
        let mut rng = Rng::from_seed(58);
        let images = Tensor::rand_uniform(vec![1, 3, 8, 8], 0.0, 1.0, &mut rng);
        let maps = vec![Tensor::rand_uniform(vec![8, 8], 0.0, 1.0, &mut rng)];
        for variant in [
            MixVariant::RMix,
            MixVariant::InputMixup,
            MixVariant::CutMix,
            MixVariant::Strategy1,
            MixVariant::Strategy2,
            MixVariant::Strategy4,
        ] {
            let policy = MixPolicy::new(variant, 1.0, 10, vec![2, 4]);
            let out = mix_batch(&images, &[3], 5, &policy, &mut rng, Some(&maps)).unwrap();
            assert_eq!(out.images, images, "{variant:?}");
            assert_eq!(out.provenance[0].src1, 0);
            let label = &out.soft_labels.data()[..];
            assert_eq!(label[3], 1.0, "{variant:?}");
        }
    }

    #[test]
    fn mix_batch_rejects_empty_and_missing_saliency() {
        let mut rng = Rng::from_seed(59);
        let empty = Tensor::zeros(vec![0, 3, 8, 8]);
        let policy = MixPolicy::new(MixVariant::InputMixup, 1.0, 10, vec![2]);
        assert!(matches!(
            mix_batch(&empty, &[], 5, &policy, &mut rng, None),
            Err(MixError::EmptyBatch)
        ));
        let images = Tensor::zeros(vec![2, 3, 8, 8]);
        let rmix = MixPolicy::new(MixVariant::RMix, 1.0, 10, vec![2]);
        assert!(matches!(
            mix_batch(&images, &[0, 1], 5, &rmix, &mut rng, None),
            Err(MixError::MissingSaliency)
        ));
    }

    #[test]
    fn mix_batch_matches_independent_per_pair_oracle() {
        // Reproduce a 4-image batch mix with a scalar per-pixel
        // reimplementation driven by the recorded provenance.
        let mut rng = Rng::from_seed(60);
        let b = 4;
        let w = 8;
        let images = Tensor::rand_uniform(vec![b, 2, w, w], 0.0, 1.0, &mut rng);
        let maps: Vec<Tensor> = (0..b)
            .map(|_| Tensor::rand_uniform(vec![w, w], 0.001, 1.0, &mut rng))
            .collect();
        let labels = [0usize, 1, 2, 3];
        let policy = MixPolicy::new(MixVariant::RMix, 1.0, 10, vec![2, 4]);
        let out = mix_batch(&images, &labels, 4, &policy, &mut rng, Some(&maps)).unwrap();

        for (i, pr) in out.provenance.iter().enumerate() {
            assert_eq!(pr.src0, i);
            let j = pr.src1;
            let p = pr.p;
            let k = w / p;
            // oracle: grid = block sums of map / total; mask via the
            // interpolated quantile definition
            let grid_of = |m: &Tensor| -> Vec<f64> {
                let total: f64 = m.data().iter().sum();
                let mut cells = vec![0.0; p * p];
                for bi in 0..p {
                    for bj in 0..p {
                        let mut acc = 0.0;
                        for ii in 0..k {
                            for jj in 0..k {
                                acc += m.data()[(bi * k + ii) * w + bj * k + jj];
                            }
                        }
                        cells[bi * p + bj] = acc / total;
                    }
                }
                cells
            };
            let mask_of = |cells: &[f64], q: f64| -> Vec<bool> {
                let mut sorted = cells.to_vec();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                let pos = q * (sorted.len() - 1) as f64;
                let kk = pos.floor() as usize;
                let f = pos - kk as f64;
                let thr = if kk + 1 < sorted.len() {
                    sorted[kk] + f * (sorted[kk + 1] - sorted[kk])
                } else {
                    sorted[kk]
                };
                cells.iter().map(|&v| v >= thr).collect()
            };
            let g0 = grid_of(&maps[i]);
            let g1 = grid_of(&maps[j]);
            let m0 = mask_of(&g0, pr.q0);
            let m1 = mask_of(&g1, pr.q1);

            let plane = w * w;
            let mut c_inter = 0usize;
            let mut c0 = 0usize;
            let mut c1 = 0usize;
            for pix in 0..plane {
                let cell = (pix / w / k) * p + (pix % w) / k;
                if m0[cell] == m1[cell] {
                    c_inter += 1;
                } else if m0[cell] {
                    c0 += 1;
                } else {
                    c1 += 1;
                }
            }
            for ci in 0..2 {
                for pix in 0..plane {
                    let cell = (pix / w / k) * p + (pix % w) / k;
                    let a = images.data()[(i * 2 + ci) * plane + pix];
                    let bb = images.data()[(j * 2 + ci) * plane + pix];
                    let expect = if m0[cell] == m1[cell] {
                        pr.lambda * a + (1.0 - pr.lambda) * bb
                    } else if m0[cell] {
                        a
                    } else {
                        bb
                    };
                    let got = out.images.data()[(i * 2 + ci) * plane + pix];
                    assert!((got - expect).abs() < 1e-10, "item {i} pixel {pix}");
                }
            }
            let mut expect_label = vec![0.0; 4];
            expect_label[labels[i]] += (c_inter as f64 / plane as f64) * pr.lambda;
            expect_label[labels[j]] += (c_inter as f64 / plane as f64) * (1.0 - pr.lambda);
            expect_label[labels[i]] += c0 as f64 / plane as f64;
            expect_label[labels[j]] += c1 as f64 / plane as f64;
            for (a, e) in out.soft_labels.data()[i * 4..(i + 1) * 4].iter().zip(&expect_label) {
                assert!((a - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn q_grid_spacing() {
        let g = q_grid(10);
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.0);
        assert!((g[9] - 0.99).abs() < 1e-15);
        assert!((g[1] - 0.11).abs() < 1e-15);
        assert_eq!(q_grid(1), vec![0.0]);
    }

    #[test]
    fn per_pair_granularity_draws_vary() {
        let mut rng = Rng::from_seed(61);
        let images = Tensor::rand_uniform(vec![8, 1, 8, 8], 0.0, 1.0, &mut rng);
        let maps: Vec<Tensor> = (0..8)
            .map(|_| Tensor::rand_uniform(vec![8, 8], 0.001, 1.0, &mut rng))
            .collect();
        let mut policy = MixPolicy::new(MixVariant::RMix, 1.0, 10, vec![2, 4]);
        policy.granularity = SamplingGranularity::PerPair;
        let out = mix_batch(&images, &[0; 8], 2, &policy, &mut rng, Some(&maps)).unwrap();
        let lambdas: Vec<f64> = out.provenance.iter().map(|p| p.lambda).collect();
        assert!(lambdas.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn provenance_csv_has_header_and_rows() {
        let mut rng = Rng::from_seed(62);
        let images = Tensor::rand_uniform(vec![2, 1, 4, 4], 0.0, 1.0, &mut rng);
        let policy = MixPolicy::new(MixVariant::InputMixup, 1.0, 10, vec![2]);
        let out = mix_batch(&images, &[0, 1], 2, &policy, &mut rng, None).unwrap();
        let mut buf = Vec::new();
        dump_provenance_csv(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("src0,src1,lambda"));
    }
}
