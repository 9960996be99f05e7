//! Measurement protocols: top-1 accuracy, expected calibration error, and
//! single-step adversarial robustness.

use std::fmt;
use std::io::{self, Write};

use crate::autodiff::{grad_wrt_input_batch, one_hot, AutodiffError, LossKind};
use crate::dataio::{normalize, stack, DataError, DatasetMeta, LabeledImage};
use crate::netlib::Model;
use crate::tensor::{softmax_rows, Tensor, TensorError};

#[derive(Debug)]
pub enum EvalError {
    Tensor(TensorError),
    Autodiff(AutodiffError),
    Data(DataError),
    Net(crate::netlib::NetError),
    EmptyRecords,
    BadBins,
    BadEpsilon(f64),
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::Tensor(e) => write!(f, "{e}"),
            EvalError::Autodiff(e) => write!(f, "{e}"),
            EvalError::Data(e) => write!(f, "{e}"),
            EvalError::Net(e) => write!(f, "{e}"),
            EvalError::EmptyRecords => write!(f, "metric over zero records"),
            EvalError::BadBins => write!(f, "bin count must be at least 1"),
            EvalError::BadEpsilon(e) => write!(f, "attack radius {e} must be non-negative"),
        }
    }
}

impl std::error::Error for EvalError {}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Tensor(e)
    }
}
impl From<AutodiffError> for EvalError {
    fn from(e: AutodiffError) -> Self {
        EvalError::Autodiff(e)
    }
}
impl From<DataError> for EvalError {
    fn from(e: DataError) -> Self {
        EvalError::Data(e)
    }
}
impl From<crate::netlib::NetError> for EvalError {
    fn from(e: crate::netlib::NetError) -> Self {
        EvalError::Net(e)
    }
}

pub type EvalResult<T> = Result<T, EvalError>;

/// One model prediction: the max softmax probability, the argmax class, and
/// the true class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub predicted: usize,
    pub actual: usize,
}

/// Fraction of records whose prediction matches the true class.
pub fn top1_accuracy(records: &[PredictionRecord]) -> EvalResult<f64> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let correct = records.iter().filter(|r| r.predicted == r.actual).count();
    Ok(correct as f64 / records.len() as f64)
}

/// Expected calibration error over `bins` equal-width confidence bins:
/// the bin-weighted mean absolute gap between accuracy and confidence.
/// Empty bins contribute nothing.
pub fn ece(records: &[PredictionRecord], bins: usize) -> EvalResult<f64> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    if bins == 0 {
        return Err(EvalError::BadBins);
    }
    let mut count = vec![0usize; bins];
    let mut conf_sum = vec![0.0; bins];
    let mut correct = vec![0usize; bins];
    for r in records {
        let b = ((r.confidence * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf_sum[b] += r.confidence;
        if r.predicted == r.actual {
            correct[b] += 1;
        }
    }
    let n = records.len() as f64;
    let mut total = 0.0;
    for b in 0..bins {
        if count[b] == 0 {
            continue;
        }
        let acc = correct[b] as f64 / count[b] as f64;
        let conf = conf_sum[b] / count[b] as f64;
        total += (count[b] as f64 / n) * (acc - conf).abs();
    }
    Ok(total)
}

/// Run the model over normalized images and collect prediction records.
/// Confidence is the max softmax probability of the logits.
pub fn predict_records(
    model: &Model,
    images: &[LabeledImage],
    meta: &DatasetMeta,
    batch_size: usize,
) -> EvalResult<Vec<PredictionRecord>> {
    let mut records = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let normed: Vec<Tensor> = chunk
            .iter()
            .map(|img| normalize(&img.pixels, meta))
            .collect::<Result<_, _>>()?;
        let batch = stack(&normed)?;
        let logits = model.forward(&batch)?;
        records.extend(records_from_logits(
            &logits,
            chunk.iter().map(|img| img.label),
        )?);
    }
    Ok(records)
}

/// Records from a precomputed logits matrix.
pub fn records_from_logits(
    logits: &Tensor,
    actuals: impl IntoIterator<Item = usize>,
) -> EvalResult<Vec<PredictionRecord>> {
    let probs = softmax_rows(logits)?;
    let n = logits.shape()[1];
    let mut out = Vec::with_capacity(logits.shape()[0]);
    for (row, actual) in probs.data().chunks_exact(n).zip(actuals) {
        let (predicted, &confidence) = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("softmax outputs are finite"))
            .expect("non-empty row");
        out.push(PredictionRecord {
            confidence,
            predicted,
            actual,
        });
    }
    Ok(out)
}

/// Single-step sign attack in raw pixel space.
///
/// Gradients are taken through the normalization, but the perturbation is
/// applied to the raw [0,1] pixels and clamped there, so the ℓ∞ budget is
/// exactly `epsilon` in pixel units. Returns the attacked raw images.
pub fn fgsm_attack_batch(
    model: &Model,
    images: &[LabeledImage],
    meta: &DatasetMeta,
    epsilon: f64,
    loss: LossKind,
) -> EvalResult<Vec<LabeledImage>> {
    if epsilon < 0.0 {
        return Err(EvalError::BadEpsilon(epsilon));
    }
    let normed: Vec<Tensor> = images
        .iter()
        .map(|img| normalize(&img.pixels, meta))
        .collect::<Result<_, _>>()?;
    let batch = stack(&normed)?;
    let labels: Vec<usize> = images.iter().map(|img| img.label).collect();
    let targets = one_hot(&labels, model.num_classes());
    let grads = grad_wrt_input_batch(model, &batch, &targets, loss)?;

    // d/d raw = d/d normalized ÷ std, and std > 0, so the sign carries over.
    let item = images[0].pixels.len();
    let mut out = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let g = &grads.data()[i * item..(i + 1) * item];
        let data: Vec<f64> = img
            .pixels
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &gv)| (x + epsilon * sign(gv)).clamp(0.0, 1.0))
            .collect();
        out.push(LabeledImage {
            pixels: Tensor::new(img.pixels.shape().to_vec(), data)?,
            label: img.label,
        });
    }
    Ok(out)
}

/// Attack a single raw image.
pub fn fgsm_attack(
    model: &Model,
    image: &LabeledImage,
    meta: &DatasetMeta,
    epsilon: f64,
    loss: LossKind,
) -> EvalResult<LabeledImage> {
    Ok(fgsm_attack_batch(model, std::slice::from_ref(image), meta, epsilon, loss)?
        .into_iter()
        .next()
        .expect("one image in, one out"))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Accuracy on adversarially perturbed copies of `images`.
pub fn fgsm_accuracy(
    model: &Model,
    images: &[LabeledImage],
    meta: &DatasetMeta,
    epsilon: f64,
    loss: LossKind,
    batch_size: usize,
) -> EvalResult<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in images.chunks(batch_size.max(1)) {
        let attacked = fgsm_attack_batch(model, chunk, meta, epsilon, loss)?;
        let records = predict_records(model, &attacked, meta, chunk.len())?;
        correct += records.iter().filter(|r| r.predicted == r.actual).count();
        total += records.len();
    }
    if total == 0 {
        return Err(EvalError::EmptyRecords);
    }
    Ok(correct as f64 / total as f64)
}

/// One metrics CSV row in the `run_id,epoch,metric,value` schema.
pub fn write_metric_row<W: Write>(
    out: &mut W,
    run_id: &str,
    epoch: usize,
    metric: &str,
    value: f64,
) -> io::Result<()> {
    writeln!(out, "{run_id},{epoch},{metric},{value:.6}")
}
