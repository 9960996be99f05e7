//! Dataset ingestion: byte-exact parsers for the CIFAR binary and IDX
//! formats, classical augmentation, channel-wise normalization, and
//! stratified subset selection.
//!
//! Parsers are pure functions of their input bytes. Parse errors carry the
//! byte offset of the offending record so truncated files are easy to
//! diagnose.

use std::fmt;

use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

/// CIFAR images are always 3×32×32 in the binary layout.
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
const CIFAR_PIXELS: usize = CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Debug, PartialEq)]
pub enum DataError {
    /// Input ended in the middle of a record.
    Truncated {
        format: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },
    /// A label byte was out of range for the declared class count.
    BadLabel {
        offset: usize,
        label: usize,
        num_classes: usize,
    },
    /// IDX magic did not decode to a supported dtype/rank combination.
    BadMagic { magic: u32 },
    /// IDX header dimensions disagree with the payload size.
    SizeMismatch {
        declared: usize,
        payload: usize,
    },
    /// A value could not be encoded back into the byte format.
    Unencodable { value: f64 },
    /// Normalization constants are invalid (zero or negative std).
    BadMeta(String),
    Tensor(TensorError),
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Truncated {
                format,
                offset,
                needed,
                available,
            } => write!(
                f,
                "{format}: truncated record at byte offset {offset}: need {needed} bytes, {available} available"
            ),
            DataError::BadLabel {
                offset,
                label,
                num_classes,
            } => write!(
                f,
                "label {label} at byte offset {offset} out of range for {num_classes} classes"
            ),
            DataError::BadMagic { magic } => write!(f, "bad IDX magic 0x{magic:08x}"),
            DataError::SizeMismatch { declared, payload } => write!(
                f,
                "IDX header declares {declared} elements but payload has {payload} bytes"
            ),
            DataError::Unencodable { value } => {
                write!(f, "value {value} cannot be encoded as a u8 sample")
            }
            DataError::BadMeta(msg) => write!(f, "invalid dataset meta: {msg}"),
            DataError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for DataError {}

impl From<TensorError> for DataError {
    fn from(e: TensorError) -> Self {
        DataError::Tensor(e)
    }
}

pub type DataResult<T> = Result<T, DataError>;

/// One training example: pixels in [0,1] (pre-normalization) plus a class
/// index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
}

/// Static facts about a dataset plus its normalization constants.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub num_classes: usize,
    pub image_side: usize,
    pub channels: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DatasetMeta {
    pub fn validate(&self) -> DataResult<()> {
        if self.num_classes == 0 || self.image_side == 0 || self.channels == 0 {
            return Err(DataError::BadMeta(
                "class count, image side and channels must be positive".into(),
            ));
        }
        if self.mean.len() != self.channels || self.std.len() != self.channels {
            return Err(DataError::BadMeta(format!(
                "mean/std must have {} entries",
                self.channels
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(DataError::BadMeta("std components must be > 0".into()));
        }
        Ok(())
    }
}

/// Record layout of a CIFAR binary file.
///
/// The 10-class layout stores one label byte per record; the 100-class
/// layout stores two (coarse then fine) and the fine label is the one used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CifarLayout {
    pub label_bytes: usize,
    pub num_classes: usize,
}

impl CifarLayout {
    pub fn cifar10() -> Self {
        CifarLayout {
            label_bytes: 1,
            num_classes: 10,
        }
    }

    pub fn cifar100() -> Self {
        CifarLayout {
            label_bytes: 2,
            num_classes: 100,
        }
    }

    pub fn record_size(&self) -> usize {
        self.label_bytes + CIFAR_PIXELS
    }
}

/// Parse a CIFAR binary blob into labeled images (pixels mapped to [0,1]).
pub fn parse_cifar_binary(bytes: &[u8], layout: CifarLayout) -> DataResult<Vec<LabeledImage>> {
    let rec = layout.record_size();
    let mut images = Vec::with_capacity(bytes.len() / rec);
    let mut offset = 0;
    while offset < bytes.len() {
        if bytes.len() - offset < rec {
            return Err(DataError::Truncated {
                format: "cifar",
                offset,
                needed: rec,
                available: bytes.len() - offset,
            });
        }
        // fine label is the last label byte in both layouts
        let label = bytes[offset + layout.label_bytes - 1] as usize;
        if label >= layout.num_classes {
            return Err(DataError::BadLabel {
                offset,
                label,
                num_classes: layout.num_classes,
            });
        }
        let pixel_bytes = &bytes[offset + layout.label_bytes..offset + rec];
        let data: Vec<f64> = pixel_bytes.iter().map(|&b| b as f64 / 255.0).collect();
        images.push(LabeledImage {
            pixels: Tensor::new(vec![CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE], data)?,
            label,
        });
        offset += rec;
    }
    Ok(images)
}

/// Serialize labeled images back into the CIFAR binary layout.
///
/// For the two-byte layout the coarse label is written as `fine / 5`,
/// matching the 20-superclass grouping's arity.
pub fn write_cifar_binary(images: &[LabeledImage], layout: CifarLayout) -> DataResult<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * layout.record_size());
    for img in images {
        if layout.label_bytes == 2 {
            out.push((img.label / 5).min(255) as u8);
        }
        out.push(img.label as u8);
        for &v in img.pixels.data() {
            out.push(encode_u8(v * 255.0)?);
        }
    }
    Ok(out)
}

fn encode_u8(v: f64) -> DataResult<u8> {
    let r = v.round();
    if !(0.0..=255.0).contains(&r) || r.is_nan() {
        return Err(DataError::Unencodable { value: v });
    }
    Ok(r as u8)
}

/// Parse an IDX (big-endian, magic-tagged) blob of unsigned bytes into a
/// tensor with the header-declared dimensions. Values are the raw 0..255
/// sample values.
pub fn parse_idx(bytes: &[u8]) -> DataResult<Tensor> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            format: "idx",
            offset: 0,
            needed: 4,
            available: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let dtype = bytes[2];
    let rank = bytes[3] as usize;
    // 0x08 is the unsigned-byte dtype; rank 0 never appears in the format.
    if bytes[0] != 0 || bytes[1] != 0 || dtype != 0x08 || rank == 0 {
        return Err(DataError::BadMagic { magic });
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(DataError::Truncated {
            format: "idx",
            offset: 4,
            needed: header - 4,
            available: bytes.len() - 4,
        });
    }
    let mut dims = Vec::with_capacity(rank);
    for d in 0..rank {
        let off = 4 + 4 * d;
        dims.push(u32::from_be_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]) as usize);
    }
    let declared: usize = dims.iter().product();
    let payload = bytes.len() - header;
    if payload != declared {
        return Err(DataError::SizeMismatch { declared, payload });
    }
    let data: Vec<f64> = bytes[header..].iter().map(|&b| b as f64).collect();
    Ok(Tensor::new(dims, data)?)
}

/// Serialize a tensor of integer values in [0,255] as an IDX u8 blob.
pub fn write_idx(t: &Tensor) -> DataResult<Vec<u8>> {
    let rank = t.rank();
    assert!(rank > 0 && rank <= 255, "idx rank must be in 1..=255");
    let mut out = Vec::with_capacity(4 + 4 * rank + t.len());
    out.extend_from_slice(&[0, 0, 0x08, rank as u8]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in t.data() {
        if v.fract() != 0.0 {
            return Err(DataError::Unencodable { value: v });
        }
        out.push(encode_u8(v)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Augmentation and normalization
// ---------------------------------------------------------------------------

/// Deterministic core of the classic augmentation: optional horizontal flip,
/// then a crop of the zero-padded image starting at (dy, dx).
///
/// Offsets must lie in [0, 2·pad]; (pad, pad) reproduces the original image.
pub fn augment_with(img: &LabeledImage, flip: bool, dy: usize, dx: usize, pad: usize) -> LabeledImage {
    let shape = img.pixels.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    debug_assert!(dy <= 2 * pad && dx <= 2 * pad);
    let src = img.pixels.data();
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for i in 0..h {
            // row i of the crop window reads padded row i + dy, which maps to
            // source row i + dy - pad when it lands inside the image
            let si = (i + dy) as isize - pad as isize;
            if si < 0 || si >= h as isize {
                continue; // zero padding
            }
            let src_row = (ci * h + si as usize) * w;
            let dst_row = (ci * h + i) * w;
            for j in 0..w {
                let sj = (j + dx) as isize - pad as isize;
                if sj < 0 || sj >= w as isize {
                    continue;
                }
                let sj = sj as usize;
                let src_col = if flip { w - 1 - sj } else { sj };
                out[dst_row + j] = src[src_row + src_col];
            }
        }
    }
    LabeledImage {
        pixels: Tensor::new(shape.to_vec(), out).expect("shape preserved"),
        label: img.label,
    }
}

/// Random horizontal flip (p = 0.5) followed by a random crop of the
/// zero-padded image. Draw order: flip, row offset, column offset.
pub fn augment_classic(img: &LabeledImage, rng: &mut Rng, pad: usize) -> LabeledImage {
    let flip = rng.chance(0.5);
    let dy = rng.below(2 * pad + 1);
    let dx = rng.below(2 * pad + 1);
    augment_with(img, flip, dy, dx, pad)
}

/// Subtract the per-channel mean and divide by the per-channel std.
pub fn normalize(pixels: &Tensor, meta: &DatasetMeta) -> DataResult<Tensor> {
    meta.validate()?;
    let shape = pixels.shape();
    if shape.len() != 3 || shape[0] != meta.channels {
        return Err(DataError::Tensor(TensorError::ShapeMismatch {
            op: "normalize",
            left: shape.to_vec(),
            right: vec![meta.channels, meta.image_side, meta.image_side],
        }));
    }
    let plane = shape[1] * shape[2];
    let mut out = pixels.data().to_vec();
    for (c, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let m = meta.mean[c];
        let inv = 1.0 / meta.std[c];
        for v in chunk {
            *v = (*v - m) * inv;
        }
    }
    Ok(Tensor::new(shape.to_vec(), out)?)
}

/// Stack C×H×W images into a B×C×H×W batch tensor.
pub fn stack(images: &[Tensor]) -> DataResult<Tensor> {
    if images.is_empty() {
        return Err(DataError::Tensor(TensorError::EmptyInput("stack")));
    }
    let shape = images[0].shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(DataError::Tensor(TensorError::ShapeMismatch {
                op: "stack",
                left: shape,
                right: img.shape().to_vec(),
            }));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(&shape);
    Ok(Tensor::new(full, data)?)
}

/// Seeded stratified subset: every class contributes an equal share (the
/// remainder goes to the lowest class indices), drawn without replacement.
pub fn stratified_subset(
    images: &[LabeledImage],
    total: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> Vec<LabeledImage> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, img) in images.iter().enumerate() {
        by_class[img.label].push(i);
    }
    let base = total / num_classes;
    let remainder = total % num_classes;
    let mut picked = Vec::with_capacity(total);
    for (c, class_indices) in by_class.iter_mut().enumerate() {
        let want = base + usize::from(c < remainder);
        rng.shuffle(class_indices);
        for &idx in class_indices.iter().take(want) {
            picked.push(idx);
        }
    }
    picked.sort_unstable();
    picked.into_iter().map(|i| images[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// Synthetic dataset generation
// ---------------------------------------------------------------------------

/// Emit a deterministic, learnable synthetic dataset in the CIFAR binary
/// layout: each class is a distinct oriented grating with its own frequency
/// and color balance, jittered per image by phase, amplitude, brightness and
/// pixel noise. Useful for demos, self-tests and benchmark runs when no real
/// dataset file is at hand.
pub fn synthetic_cifar_bytes(
    num_images: usize,
    num_classes: usize,
    seed: u64,
    layout: CifarLayout,
) -> Vec<u8> {
    synthetic_cifar_bytes_with_label_noise(num_images, num_classes, seed, layout, 0.0)
}

/// As [`synthetic_cifar_bytes`], with a fraction of the written labels
/// re-drawn uniformly at random (the image keeps its true class pattern).
pub fn synthetic_cifar_bytes_with_label_noise(
    num_images: usize,
    num_classes: usize,
    seed: u64,
    layout: CifarLayout,
    label_noise: f64,
) -> Vec<u8> {
    synthetic_cifar_bytes_full(num_images, num_classes, seed, layout, label_noise, 0.0)
}

/// Full-control generator. `label_noise` re-draws that fraction of written
/// labels uniformly. `bg_bias` is the probability that an image's background
/// gradient orientation is locked to its class instead of drawn uniformly:
/// a biased train split plus an unbiased test split plants a spurious
/// shortcut that context-sensitive training will inherit and
/// context-breaking augmentation will not.
pub fn synthetic_cifar_bytes_full(
    num_images: usize,
    num_classes: usize,
    seed: u64,
    layout: CifarLayout,
    label_noise: f64,
    bg_bias: f64,
) -> Vec<u8> {
    assert!(num_classes > 0 && num_classes <= layout.num_classes);
    assert!((0.0..=1.0).contains(&label_noise));
    assert!((0.0..=1.0).contains(&bg_bias));
    let mut rng = Rng::from_seed(seed);
    let w = CIFAR_SIDE;
    let mut out = Vec::with_capacity(num_images * layout.record_size());
    for i in 0..num_images {
        let label = i % num_classes;
        // The class signal is a localized "object": an oriented grating with
        // class-specific orientation, frequency and color, stamped into a
        // random window of the image. The rest is label-independent
        // background (brightness, smooth gradient, pixel noise), so the
        // informative evidence is spatially concentrated the way photographic
        // subjects are.
        let theta = std::f64::consts::PI * label as f64 / num_classes as f64
            + 0.12 * (rng.uniform() - 0.5);
        let freq = 2.0 + (label % 4) as f64 + 0.2 * (rng.uniform() - 0.5);
        let phase = std::f64::consts::TAU * rng.uniform();
        let amplitude = 0.35 + 0.15 * rng.uniform();
        let brightness = 0.30 + 0.40 * rng.uniform();
        let (dir_u, dir_v) = (theta.cos(), theta.sin());
        let obj_side = 12 + rng.below(9); // 12..=20 pixels
        let obj_top = rng.below(w - obj_side + 1);
        let obj_left = rng.below(w - obj_side + 1);
        // background gradient: uniform by default, class-locked with
        // probability bg_bias
        let bg_theta = if bg_bias > 0.0 && rng.chance(bg_bias) {
            std::f64::consts::TAU * label as f64 / num_classes as f64
                + 0.2 * (rng.uniform() - 0.5)
        } else {
            std::f64::consts::TAU * rng.uniform()
        };
        let (bg_u, bg_v) = (bg_theta.cos(), bg_theta.sin());
        let bg_amp = 0.20 + 0.15 * rng.uniform();
        let written_label = if label_noise > 0.0 && rng.chance(label_noise) {
            rng.below(num_classes)
        } else {
            label
        };
        if layout.label_bytes == 2 {
            out.push((written_label / 5).min(255) as u8);
        }
        out.push(written_label as u8);
        for c in 0..CIFAR_CHANNELS {
            let color = 0.6
                + 0.4
                    * (std::f64::consts::TAU * (label as f64 / num_classes as f64)
                        + std::f64::consts::TAU * c as f64 / 3.0)
                        .sin();
            for yi in 0..w {
                for xi in 0..w {
                    let u = yi as f64 / w as f64;
                    let v = xi as f64 / w as f64;
                    let inside = yi >= obj_top
                        && yi < obj_top + obj_side
                        && xi >= obj_left
                        && xi < obj_left + obj_side;
                    let wave = if inside {
                        let ou = (yi - obj_top) as f64 / obj_side as f64;
                        let ov = (xi - obj_left) as f64 / obj_side as f64;
                        (std::f64::consts::TAU * freq * (ou * dir_u + ov * dir_v) + phase).sin()
                    } else {
                        0.0
                    };
                    let bg = bg_amp * (u * bg_u + v * bg_v);
                    let noise = 0.18 * rng.normal();
                    let value =
                        (brightness + bg + amplitude * color * wave + noise).clamp(0.0, 1.0);
                    out.push((value * 255.0).round() as u8);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture_bytes() -> Vec<u8> {
        // two records: label 3 with ascending-ish pixels, label 7 constant 128
        let mut bytes = Vec::new();
        bytes.push(3);
        for i in 0..CIFAR_PIXELS {
            bytes.push((i % 251) as u8);
        }
        bytes.push(7);
        bytes.extend(std::iter::repeat(128).take(CIFAR_PIXELS));
        bytes
    }

    #[test]
    fn cifar_fixture_round_trip() {
        let bytes = fixture_bytes();
        let images = parse_cifar_binary(&bytes, CifarLayout::cifar10()).unwrap();
        assert_eq!(images.len(), 2);
        assert_eq!(images[0].label, 3);
        assert_eq!(images[1].label, 7);
        assert_eq!(images[0].pixels.data()[1], 1.0 / 255.0);
        assert_eq!(images[1].pixels.data()[0], 128.0 / 255.0);

        let rewritten = write_cifar_binary(&images, CifarLayout::cifar10()).unwrap();
        assert_eq!(rewritten, bytes);
    }

    #[test]
    fn cifar_empty_input_is_empty_dataset() {
        assert!(parse_cifar_binary(&[], CifarLayout::cifar10())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn cifar_truncated_reports_offset() {
        let mut bytes = fixture_bytes();
        bytes.truncate(bytes.len() - 10);
        let err = parse_cifar_binary(&bytes, CifarLayout::cifar10()).unwrap_err();
        match err {
            DataError::Truncated { offset, .. } => {
                assert_eq!(offset, CifarLayout::cifar10().record_size())
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn cifar_bad_label_rejected() {
        let mut bytes = fixture_bytes();
        bytes[0] = 10; // 10-class layout: labels are 0..=9
        assert!(matches!(
            parse_cifar_binary(&bytes, CifarLayout::cifar10()),
            Err(DataError::BadLabel { label: 10, .. })
        ));
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let mut bytes = Vec::new();
        bytes.push(2); // coarse
        bytes.push(13); // fine
        bytes.extend(std::iter::repeat(0).take(CIFAR_PIXELS));
        let images = parse_cifar_binary(&bytes, CifarLayout::cifar100()).unwrap();
        assert_eq!(images[0].label, 13);
    }

    #[test]
    fn idx_fixture_and_round_trip() {
        // hand-built: one 2x2 image
        let blob: Vec<u8> = vec![
            0, 0, 0x08, 3, // magic: u8, rank 3
            0, 0, 0, 1, // 1 image
            0, 0, 0, 2, // 2 rows
            0, 0, 0, 2, // 2 cols
            10, 20, 30, 40,
        ];
        let t = parse_idx(&blob).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(t.data(), &[10.0, 20.0, 30.0, 40.0]);

        let rewritten = write_idx(&t).unwrap();
        assert_eq!(rewritten, blob);
        assert_eq!(parse_idx(&rewritten).unwrap(), t);
    }

    #[test]
    fn idx_rejects_bad_magic_and_size() {
        assert!(matches!(
            parse_idx(&[0, 0, 0x09, 1, 0, 0, 0, 1, 5]),
            Err(DataError::BadMagic { .. })
        ));
        // declared 3 elements, payload has 2
        assert!(matches!(
            parse_idx(&[0, 0, 0x08, 1, 0, 0, 0, 3, 1, 2]),
            Err(DataError::SizeMismatch {
                declared: 3,
                payload: 2
            })
        ));
    }

    fn tiny_image(label: usize) -> LabeledImage {
        let mut rng = Rng::from_seed(100 + label as u64);
        LabeledImage {
            pixels: Tensor::rand_uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng),
            label,
        }
    }

    #[test]
    fn centered_crop_without_flip_is_identity() {
        let img = tiny_image(0);
        let out = augment_with(&img, false, 2, 2, 2);
        assert_eq!(out.pixels, img.pixels);
        assert_eq!(out.label, img.label);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = tiny_image(1);
        let once = augment_with(&img, true, 2, 2, 2);
        assert_ne!(once.pixels, img.pixels);
        let twice = augment_with(&once, true, 2, 2, 2);
        assert_eq!(twice.pixels, img.pixels);
    }

    #[test]
    fn crop_pixels_come_from_padded_image() {
        // Every augmented pixel is either zero (padding) or present in the
        // source image.
        let img = tiny_image(2);
        let mut rng = Rng::from_seed(7);
        let mut source: Vec<u64> = img.pixels.data().iter().map(|v| v.to_bits()).collect();
        source.sort_unstable();
        for _ in 0..100 {
            let out = augment_classic(&img, &mut rng, 2);
            assert_eq!(out.label, img.label);
            assert_eq!(out.pixels.shape(), img.pixels.shape());
            for &v in out.pixels.data() {
                assert!(
                    v == 0.0 || source.binary_search(&v.to_bits()).is_ok(),
                    "pixel {v} not from source"
                );
            }
        }
    }

    #[test]
    fn fixed_seed_gives_identical_augment_stream() {
        let img = tiny_image(3);
        let run = |seed: u64| -> Vec<Tensor> {
            let mut rng = Rng::from_seed(seed);
            (0..20).map(|_| augment_classic(&img, &mut rng, 2).pixels).collect()
        };
        assert_eq!(run(5), run(5));
    }

    fn meta_3ch() -> DatasetMeta {
        DatasetMeta {
            num_classes: 10,
            image_side: 8,
            channels: 3,
            mean: vec![0.4, 0.5, 0.6],
            std: vec![0.2, 0.25, 0.3],
        }
    }

    #[test]
    fn normalize_constant_at_mean_is_zero() {
        let meta = meta_3ch();
        let mut data = Vec::new();
        for c in 0..3 {
            data.extend(std::iter::repeat(meta.mean[c]).take(64));
        }
        let img = Tensor::new(vec![3, 8, 8], data).unwrap();
        let out = normalize(&img, &meta).unwrap();
        assert!(out.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn normalize_identity_meta_is_identity() {
        let meta = DatasetMeta {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
            ..meta_3ch()
        };
        let img = tiny_image(4);
        assert_eq!(normalize(&img.pixels, &meta).unwrap(), img.pixels);
    }

    #[test]
    fn normalize_batch_statistics_match_oracle() {
        // Per-channel mean and std of the normalized batch must equal the
        // directly transformed raw statistics (the operation is affine).
        let meta = meta_3ch();
        let mut rng = Rng::from_seed(8);
        let mut raw: Vec<Vec<f64>> = vec![Vec::new(); 3];
        let mut norm: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for _ in 0..50 {
            let img = Tensor::rand_uniform(vec![3, 8, 8], 0.0, 1.0, &mut rng);
            let out = normalize(&img, &meta).unwrap();
            for c in 0..3 {
                raw[c].extend_from_slice(&img.data()[c * 64..(c + 1) * 64]);
                norm[c].extend_from_slice(&out.data()[c * 64..(c + 1) * 64]);
            }
        }
        let stats = |vals: &[f64]| -> (f64, f64) {
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            (mean, var.sqrt())
        };
        for c in 0..3 {
            let (raw_mean, raw_std) = stats(&raw[c]);
            let (norm_mean, norm_std) = stats(&norm[c]);
            let expect_mean = (raw_mean - meta.mean[c]) / meta.std[c];
            let expect_std = raw_std / meta.std[c];
            assert!((norm_mean - expect_mean).abs() < 1e-6, "channel {c} mean");
            assert!((norm_std - expect_std).abs() < 1e-6, "channel {c} std");
        }
    }

    #[test]
    fn normalize_rejects_zero_std() {
        let meta = DatasetMeta {
            std: vec![0.2, 0.0, 0.3],
            ..meta_3ch()
        };
        let img = tiny_image(5);
        assert!(matches!(
            normalize(&img.pixels, &meta),
            Err(DataError::BadMeta(_))
        ));
    }

    #[test]
    fn synthetic_dataset_parses_and_is_balanced() {
        let bytes = synthetic_cifar_bytes(40, 10, 0, CifarLayout::cifar10());
        let images = parse_cifar_binary(&bytes, CifarLayout::cifar10()).unwrap();
        assert_eq!(images.len(), 40);
        let mut counts = [0usize; 10];
        for img in &images {
            counts[img.label] += 1;
            assert!(img.pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(counts.iter().all(|&c| c == 4));
        // deterministic in the seed
        assert_eq!(bytes, synthetic_cifar_bytes(40, 10, 0, CifarLayout::cifar10()));
        assert_ne!(bytes, synthetic_cifar_bytes(40, 10, 1, CifarLayout::cifar10()));
    }

    #[test]
    fn stratified_subset_covers_every_class() {
        let mut images = Vec::new();
        for label in 0..5 {
            for _ in 0..20 {
                images.push(tiny_image(label));
            }
        }
        let mut rng = Rng::from_seed(9);
        let subset = stratified_subset(&images, 23, 5, &mut rng);
        assert_eq!(subset.len(), 23);
        let mut counts = [0usize; 5];
        for img in &subset {
            counts[img.label] += 1;
        }
        // 23 = 5*4 + 3: three classes get 5, the rest 4
        assert_eq!(counts.iter().sum::<usize>(), 23);
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
    }
}
