//! End-to-end runs: training (with or without the percentile controller),
//! evaluation, and hyperparameter sweeps.
//!
//! A run is fully determined by (config text, seed): every emitted byte
//! except the sidecar log is reproducible. Wall-clock timestamps only ever
//! go to `run.log`. Output directories are never overwritten; a run owns its
//! directory exclusively.
//!
//! Run directory layout:
//!
//! - `config.txt`     — the config text, embedded verbatim
//! - `metrics.csv`    — one row per epoch: `epoch,loss,lr,train_acc,val_acc`
//! - `latest.ckpt`    — resumable state, refreshed after every epoch
//! - `final.ckpt`     — written once the run completes
//! - `run.log`        — timestamped progress lines (not reproducible)
//! - `transitions.csv` — controller runs only: `epoch,action,reward`

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;

use crate::autodiff::{loss_node, one_hot, Tape};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, DataFormat, RunConfig};
use crate::dataio::{
    augment_classic, normalize, parse_cifar_binary, parse_idx, stack, stratified_subset,
    CifarLayout, DataError, DatasetMeta, LabeledImage,
};
use crate::evalsuite::{
    ece, fgsm_accuracy, predict_records, top1_accuracy, write_metric_row, EvalError,
};
use crate::mixers::{dump_provenance_csv, mix_batch, rmix_batch_with_q, MixError};
use crate::netlib::{small_cnn, Model, NetError, SgdConfig, SgdState, SmallCnnConfig};
use crate::rlmix::{
    build_observations, dump_transitions_csv, policy_update, rewards_batch, select_actions,
    PolicyNet, PolicyState, RlError, Transition,
};
use crate::rng::Rng;
use crate::saliency::{pool_batch, saliency_maps_batch};
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum HarnessError {
    Config(ConfigError),
    Data(DataError),
    Net(NetError),
    Mix(MixError),
    Eval(EvalError),
    Rl(RlError),
    Checkpoint(CheckpointError),
    Io { path: PathBuf, error: std::io::Error },
    /// The output directory already exists.
    Collision(PathBuf),
    Resume(String),
}

impl fmt::Display for HarnessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HarnessError::Config(e) => write!(f, "{e}"),
            HarnessError::Data(e) => write!(f, "{e}"),
            HarnessError::Net(e) => write!(f, "{e}"),
            HarnessError::Mix(e) => write!(f, "{e}"),
            HarnessError::Eval(e) => write!(f, "{e}"),
            HarnessError::Rl(e) => write!(f, "{e}"),
            HarnessError::Checkpoint(e) => write!(f, "{e}"),
            HarnessError::Io { path, error } => write!(f, "{}: {error}", path.display()),
            HarnessError::Collision(path) => {
                write!(f, "output directory {} already exists", path.display())
            }
            HarnessError::Resume(msg) => write!(f, "cannot resume: {msg}"),
        }
    }
}

impl std::error::Error for HarnessError {}

macro_rules! from_err {
    ($from:ty, $variant:ident) => {
        impl From<$from> for HarnessError {
            fn from(e: $from) -> Self {
                HarnessError::$variant(e)
            }
        }
    };
}
from_err!(ConfigError, Config);
from_err!(DataError, Data);
from_err!(NetError, Net);
from_err!(MixError, Mix);
from_err!(EvalError, Eval);
from_err!(RlError, Rl);
from_err!(CheckpointError, Checkpoint);

impl From<crate::autodiff::AutodiffError> for HarnessError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        HarnessError::Net(NetError::Autodiff(e.to_string()))
    }
}

impl From<crate::tensor::TensorError> for HarnessError {
    fn from(e: crate::tensor::TensorError) -> Self {
        HarnessError::Net(NetError::Tensor(e))
    }
}

pub type HarnessResult<T> = Result<T, HarnessError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> HarnessError + '_ {
    move |error| HarnessError::Io {
        path: path.to_path_buf(),
        error,
    }
}

// rng sub-stream labels
const STREAM_INIT: u64 = 1;
const STREAM_SUBSET: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_AUGMENT: u64 = 4;
const STREAM_MIX: u64 = 5;
const STREAM_POLICY_INIT: u64 = 6;
const STREAM_POLICY_ACTIONS: u64 = 7;

/// Outcome of a completed (or partially completed) training run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub run_dir: PathBuf,
    pub run_id: String,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub final_train_acc: f64,
    pub final_val_acc: f64,
}

/// Metrics produced by an evaluation pass.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub top1: f64,
    pub ece: f64,
    pub fgsm_acc: Option<f64>,
}

struct LoadedData {
    train: Vec<LabeledImage>,
    test: Vec<LabeledImage>,
    meta: DatasetMeta,
}

fn load_split(
    config: &RunConfig,
    path: &str,
    labels_path: Option<&str>,
) -> HarnessResult<(Vec<LabeledImage>, usize, usize)> {
    let path = config.resolve_path(path);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    match config.format {
        DataFormat::Cifar10 | DataFormat::Cifar100 => {
            let base = config.format.cifar_layout().expect("cifar formats");
            let layout = CifarLayout {
                label_bytes: base.label_bytes,
                num_classes: config.num_classes,
            };
            let images = parse_cifar_binary(&bytes, layout)?;
            Ok((images, 3, 32))
        }
        DataFormat::Idx => {
            let labels_path =
                config.resolve_path(labels_path.expect("validated: idx needs label paths"));
            let label_bytes = fs::read(&labels_path).map_err(io_err(&labels_path))?;
            let images_t = parse_idx(&bytes)?;
            let labels_t = parse_idx(&label_bytes)?;
            if images_t.rank() != 3 || labels_t.rank() != 1 {
                return Err(DataError::SizeMismatch {
                    declared: images_t.shape()[0],
                    payload: labels_t.len(),
                }
                .into());
            }
            let (n, h, w) = (images_t.shape()[0], images_t.shape()[1], images_t.shape()[2]);
            if labels_t.len() != n || h != w {
                return Err(DataError::SizeMismatch {
                    declared: n,
                    payload: labels_t.len(),
                }
                .into());
            }
            let mut images = Vec::with_capacity(n);
            for i in 0..n {
                let data: Vec<f64> = images_t.data()[i * h * w..(i + 1) * h * w]
                    .iter()
                    .map(|&v| v / 255.0)
                    .collect();
                let label = labels_t.data()[i] as usize;
                if label >= config.num_classes {
                    return Err(DataError::BadLabel {
                        offset: i,
                        label,
                        num_classes: config.num_classes,
                    }
                    .into());
                }
                images.push(LabeledImage {
                    pixels: Tensor::new(vec![1, h, w], data)?,
                    label,
                });
            }
            Ok((images, 1, h))
        }
    }
}

fn load_data(config: &RunConfig, master: &Rng) -> HarnessResult<LoadedData> {
    let (mut train, channels, side) =
        load_split(config, &config.train_path, config.train_labels_path.as_deref())?;
    let (mut test, _, _) = load_split(config, &config.test_path, config.test_labels_path.as_deref())?;
    let mut subset_rng = master.derive(STREAM_SUBSET);
    if config.subset_train > 0 && config.subset_train < train.len() {
        train = stratified_subset(&train, config.subset_train, config.num_classes, &mut subset_rng);
    }
    if config.subset_test > 0 && config.subset_test < test.len() {
        test = stratified_subset(&test, config.subset_test, config.num_classes, &mut subset_rng);
    }
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::Resume("dataset split is empty".into()));
    }
    let meta = DatasetMeta {
        num_classes: config.num_classes,
        image_side: side,
        channels,
        mean: config.mean.clone(),
        std: config.std.clone(),
    };
    meta.validate()?;
    Ok(LoadedData { train, test, meta })
}

fn build_model(config: &RunConfig, meta: &DatasetMeta, rng: &mut Rng) -> HarnessResult<Model> {
    Ok(small_cnn(
        &SmallCnnConfig {
            in_channels: meta.channels,
            image_side: meta.image_side,
            num_classes: meta.num_classes,
            conv_channels: config.conv_channels.clone(),
            hidden: config.hidden,
        },
        rng,
    )?)
}

struct RunFiles {
    metrics: PathBuf,
    latest: PathBuf,
    final_ckpt: PathBuf,
    log: PathBuf,
    transitions: PathBuf,
    provenance: PathBuf,
}

impl RunFiles {
    fn new(dir: &Path) -> Self {
        RunFiles {
            metrics: dir.join("metrics.csv"),
            latest: dir.join("latest.ckpt"),
            final_ckpt: dir.join("final.ckpt"),
            log: dir.join("run.log"),
            transitions: dir.join("transitions.csv"),
            provenance: dir.join("provenance.csv"),
        }
    }
}

fn log_line(path: &Path, message: &str) {
    // best-effort sidecar log; timestamps live only here
    if let Ok(mut f) = fs::OpenOptions::new().create(true).append(true).open(path) {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let _ = writeln!(f, "[{ts}] {message}");
    }
}

fn append_line(path: &Path, line: &str) -> HarnessResult<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(line.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

/// Train to completion.
pub fn run_train(config: &RunConfig, out_dir: &Path, resume: bool) -> HarnessResult<RunReport> {
    run_train_partial(config, out_dir, resume, None)
}

/// Train, optionally stopping after `stop_after` epochs (the state on disk
/// is then exactly what an interrupted run would leave behind).
pub fn run_train_partial(
    config: &RunConfig,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
) -> HarnessResult<RunReport> {
    run_training(config, out_dir, resume, stop_after, false)
}

/// Train the classifier jointly with the percentile controller.
pub fn run_rlmix(config: &RunConfig, out_dir: &Path, resume: bool) -> HarnessResult<RunReport> {
    run_training(config, out_dir, resume, None, true)
}

fn run_training(
    config: &RunConfig,
    out_dir: &Path,
    resume: bool,
    stop_after: Option<usize>,
    use_controller: bool,
) -> HarnessResult<RunReport> {
    config.validate()?;
    let files = RunFiles::new(out_dir);

    if resume {
        if !files.latest.exists() {
            return Err(HarnessError::Resume(format!(
                "{} has no latest.ckpt",
                out_dir.display()
            )));
        }
        let stored = fs::read_to_string(out_dir.join("config.txt"))
            .map_err(io_err(&out_dir.join("config.txt")))?;
        if stored != config.embedded_text() {
            return Err(HarnessError::Resume(
                "config does not match the one stored in the run directory".into(),
            ));
        }
    } else {
        if out_dir.exists() {
            return Err(HarnessError::Collision(out_dir.to_path_buf()));
        }
        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        fs::write(out_dir.join("config.txt"), config.embedded_text())
            .map_err(io_err(&out_dir.join("config.txt")))?;
        append_line(&files.metrics, "epoch,loss,lr,train_acc,val_acc\n")?;
        if use_controller && config.rl_log_transitions {
            append_line(&files.transitions, "epoch,action,reward\n")?;
        }
    }

    let master = Rng::from_seed(config.seed);
    let data = load_data(config, &master)?;
    let mut model = build_model(config, &data.meta, &mut master.derive(STREAM_INIT))?;

    let batches_per_epoch = data.train.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let schedule = config.schedule(total_steps, batches_per_epoch);
    schedule.validate()?;

    let mut sgd = SgdState::new(
        SgdConfig {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            nesterov: config.nesterov,
        },
        &model.parameters(),
    );

    let mut shuffle_rng = master.derive(STREAM_SHUFFLE);
    let mut augment_rng = master.derive(STREAM_AUGMENT);
    let mut mix_rng = master.derive(STREAM_MIX);
    let mut action_rng = master.derive(STREAM_POLICY_ACTIONS);

    let mix_policy = config.mix.as_ref().map(|m| m.to_policy());
    if let Some(policy) = &mix_policy {
        policy.validate(data.meta.image_side)?;
    }

    let (grid_mode, quantile_method, mix_alpha, mix_k) = match &config.mix {
        Some(m) => (m.grid_mode, m.quantile_method, m.alpha, m.k),
        None => (
            crate::saliency::GridMode::GridSide,
            crate::tensor::QuantileMethod::Linear,
            1.0,
            10,
        ),
    };

    let mut controller = if use_controller {
        let obs_dim = config.rl_p * config.rl_p + data.meta.num_classes;
        let net = PolicyNet::new(
            obs_dim,
            Some(config.rl_hidden),
            mix_k,
            &mut master.derive(STREAM_POLICY_INIT),
        );
        Some(PolicyState::new(net, config.rl_lr))
    } else {
        None
    };

    let mut start_epoch = 0usize;
    let mut global_step = 0u64;
    if resume {
        let ckpt = Checkpoint::load(&files.latest)?;
        let params = ckpt
            .group("params")
            .ok_or_else(|| HarnessError::Resume("checkpoint has no params group".into()))?;
        model.load_parameters(params)?;
        let velocities = ckpt
            .group("velocity")
            .ok_or_else(|| HarnessError::Resume("checkpoint has no velocity group".into()))?;
        sgd.load_velocities(velocities.to_vec())?;
        if ckpt.rng_states.len() < 4 {
            return Err(HarnessError::Resume("checkpoint has too few rng states".into()));
        }
        shuffle_rng = Rng::restore(ckpt.rng_states[0]);
        augment_rng = Rng::restore(ckpt.rng_states[1]);
        mix_rng = Rng::restore(ckpt.rng_states[2]);
        action_rng = Rng::restore(ckpt.rng_states[3]);
        if let Some(ctrl) = &mut controller {
            let policy_params = ckpt
                .group("policy")
                .ok_or_else(|| HarnessError::Resume("checkpoint has no policy group".into()))?;
            ctrl.net.load_parameters(policy_params)?;
            if let Some(b) = ckpt.group("policy_baseline").and_then(|g| g.first()) {
                ctrl.baseline = b.data()[0];
            }
        }
        start_epoch = ckpt.epoch as usize;
        global_step = ckpt.sched_step;
        log_line(&files.log, &format!("resumed at epoch {start_epoch}"));
    } else {
        log_line(
            &files.log,
            &format!(
                "run {} starting: {} train / {} test images, {} steps",
                config.run_id(),
                data.train.len(),
                data.test.len(),
                total_steps
            ),
        );
    }

    let end_epoch = stop_after.map_or(config.epochs, |s| s.min(config.epochs));
    let mut last = (0.0f64, 0.0f64, 0.0f64); // loss, train_acc, val_acc

    for epoch in start_epoch..end_epoch {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        shuffle_rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut last_lr = 0.0;
        let mut epoch_transitions: Vec<Transition> = Vec::new();

        for batch_indices in order.chunks(config.batch_size) {
            let mut normed = Vec::with_capacity(batch_indices.len());
            let mut labels = Vec::with_capacity(batch_indices.len());
            for &idx in batch_indices {
                let img = &data.train[idx];
                let aug = if config.augment {
                    augment_classic(img, &mut augment_rng, config.pad)
                } else {
                    img.clone()
                };
                normed.push(normalize(&aug.pixels, &data.meta)?);
                labels.push(aug.label);
            }
            let batch = stack(&normed)?;

            // Targets: soft labels from the mixing policy, or plain one-hots.
            let (train_images, targets) = if let Some(ctrl) = &mut controller {
                let maps = saliency_maps_batch(&model, &batch, &labels, config.loss)?;
                let grids = pool_batch(&maps, config.rl_p, grid_mode)?;
                let logits = model.forward(&batch)?;
                let observations = build_observations(&grids, &logits)?;
                let actions = select_actions(ctrl, &observations, &mut action_rng)?;
                let qs: Vec<f64> = actions.iter().map(|&(_, q)| q).collect();
                let lambda = mix_rng.beta_symmetric(mix_alpha);
                let perm = mix_rng.permutation(batch_indices.len());
                let mixed = rmix_batch_with_q(
                    &batch,
                    &labels,
                    data.meta.num_classes,
                    &qs,
                    config.rl_p,
                    lambda,
                    &perm,
                    &maps,
                    quantile_method,
                    grid_mode,
                )?;
                // Reward against the pre-step model so the clean saliency
                // pass is shared between observation and reward.
                let rewards =
                    rewards_batch(&model, &batch, &mixed.images, &labels, config.loss)?;
                let obs_dim = observations.shape()[1];
                for (i, ((action, _), reward)) in actions.iter().zip(&rewards).enumerate() {
                    epoch_transitions.push(Transition {
                        observation: Tensor::new(
                            vec![obs_dim],
                            observations.data()[i * obs_dim..(i + 1) * obs_dim].to_vec(),
                        )?,
                        action: *action,
                        reward: *reward,
                    });
                }
                (mixed.images, mixed.soft_labels)
            } else if let Some(policy) = &mix_policy {
                let maps = if policy.variant.needs_saliency() {
                    Some(saliency_maps_batch(&model, &batch, &labels, config.loss)?)
                } else {
                    None
                };
                let mixed = mix_batch(
                    &batch,
                    &labels,
                    data.meta.num_classes,
                    policy,
                    &mut mix_rng,
                    maps.as_deref(),
                )?;
                if epoch == 0 && seen == 0 {
                    // one provenance dump per run for inspection
                    let mut buf = Vec::new();
                    dump_provenance_csv(&mixed, &mut buf)
                        .map_err(io_err(&files.provenance))?;
                    fs::write(&files.provenance, buf).map_err(io_err(&files.provenance))?;
                }
                (mixed.images, mixed.soft_labels)
            } else {
                (batch, one_hot(&labels, data.meta.num_classes))
            };

            let mut tape = Tape::new();
            let x = tape.leaf(train_images, false);
            let (logits, param_nodes) = model.forward_train(&mut tape, x)?;
            let loss = loss_node(&mut tape, logits, targets, config.loss)?;
            let loss_value = tape.value(loss).data()[0];
            tape.backward(loss)?;
            let grads: Vec<Tensor> = param_nodes
                .iter()
                .map(|&id| tape.take_grad(id).expect("parameters require grad"))
                .collect();
            drop(tape);

            last_lr = schedule.lr_at((global_step as usize).min(schedule.total_steps()))?;
            let mut params = model.parameters_mut();
            sgd.step(&mut params, &grads, last_lr)?;
            global_step += 1;

            loss_sum += loss_value * batch_indices.len() as f64;
            seen += batch_indices.len();
        }

        // One controller episode per classifier epoch.
        if let Some(ctrl) = &mut controller {
            if !epoch_transitions.is_empty() {
                policy_update(ctrl, &epoch_transitions)?;
                if config.rl_log_transitions {
                    let mut buf = Vec::new();
                    dump_transitions_csv(&epoch_transitions, epoch + 1, &mut buf)
                        .map_err(io_err(&files.transitions))?;
                    append_line(&files.transitions, &String::from_utf8_lossy(&buf))?;
                }
            }
        }

        let mean_loss = loss_sum / seen as f64;
        // Train accuracy is measured on a fixed leading slice of the split;
        // capping it keeps the per-epoch evaluation cost bounded.
        let train_eval = &data.train[..data.train.len().min(2000)];
        let train_records = predict_records(&model, train_eval, &data.meta, config.batch_size)?;
        let train_acc = top1_accuracy(&train_records)?;
        let val_records = predict_records(&model, &data.test, &data.meta, config.batch_size)?;
        let val_acc = top1_accuracy(&val_records)?;
        last = (mean_loss, train_acc, val_acc);

        append_line(
            &files.metrics,
            &format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                epoch + 1,
                mean_loss,
                last_lr,
                train_acc,
                val_acc
            ),
        )?;
        log_line(
            &files.log,
            &format!("epoch {} loss {mean_loss:.4} val_acc {val_acc:.4}", epoch + 1),
        );

        let mut groups = vec![
            (
                "params".to_string(),
                model.parameters().into_iter().cloned().collect::<Vec<_>>(),
            ),
            ("velocity".to_string(), sgd.velocities().to_vec()),
        ];
        if let Some(ctrl) = &controller {
            groups.push((
                "policy".to_string(),
                ctrl.net.parameters().into_iter().cloned().collect(),
            ));
            groups.push((
                "policy_baseline".to_string(),
                vec![Tensor::scalar(ctrl.baseline)],
            ));
        }
        Checkpoint {
            epoch: (epoch + 1) as u64,
            sched_step: global_step,
            rng_states: vec![
                shuffle_rng.state(),
                augment_rng.state(),
                mix_rng.state(),
                action_rng.state(),
            ],
            groups,
        }
        .save(&files.latest)?;
    }

    if end_epoch == config.epochs {
        fs::copy(&files.latest, &files.final_ckpt).map_err(io_err(&files.final_ckpt))?;
        log_line(&files.log, "run complete");
    } else {
        log_line(&files.log, &format!("stopped after epoch {end_epoch}"));
    }

    Ok(RunReport {
        run_dir: out_dir.to_path_buf(),
        run_id: config.run_id(),
        epochs_run: end_epoch,
        final_loss: last.0,
        final_train_acc: last.1,
        final_val_acc: last.2,
    })
}

/// Evaluate a checkpoint on the config's test split: accuracy, calibration
/// error, and (for a positive attack radius) adversarial accuracy. Appends
/// `run_id,epoch,metric,value` rows to `eval.csv` next to the checkpoint, or
/// to `out_csv` when given.
pub fn run_eval(
    config: &RunConfig,
    checkpoint_path: &Path,
    out_csv: Option<&Path>,
    with_fgsm: bool,
) -> HarnessResult<EvalReport> {
    config.validate()?;
    let master = Rng::from_seed(config.seed);
    let data = load_data(config, &master)?;
    let mut model = build_model(config, &data.meta, &mut master.derive(STREAM_INIT))?;
    let ckpt = Checkpoint::load(checkpoint_path)?;
    let params = ckpt
        .group("params")
        .ok_or_else(|| HarnessError::Resume("checkpoint has no params group".into()))?;
    model.load_parameters(params)?;

    let records = predict_records(&model, &data.test, &data.meta, config.batch_size)?;
    let top1 = top1_accuracy(&records)?;
    let ece_value = ece(&records, config.ece_bins)?;
    let fgsm_acc = if with_fgsm {
        Some(fgsm_accuracy(
            &model,
            &data.test,
            &data.meta,
            config.fgsm_eps,
            config.loss,
            config.batch_size,
        )?)
    } else {
        None
    };

    let csv_path = match out_csv {
        Some(p) => p.to_path_buf(),
        None => checkpoint_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("eval.csv"),
    };
    let mut buf = Vec::new();
    let run_id = config.run_id();
    let epoch = ckpt.epoch as usize;
    write_metric_row(&mut buf, &run_id, epoch, "top1_acc", top1).map_err(io_err(&csv_path))?;
    write_metric_row(&mut buf, &run_id, epoch, "ece", ece_value).map_err(io_err(&csv_path))?;
    if let Some(acc) = fgsm_acc {
        write_metric_row(&mut buf, &run_id, epoch, "fgsm_acc", acc).map_err(io_err(&csv_path))?;
        write_metric_row(&mut buf, &run_id, epoch, "fgsm_error", 1.0 - acc)
            .map_err(io_err(&csv_path))?;
    }
    append_line(&csv_path, &String::from_utf8_lossy(&buf))?;

    Ok(EvalReport {
        top1,
        ece: ece_value,
        fgsm_acc,
    })
}

/// One sweep cell and its outcome.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub p_set: Vec<usize>,
    pub k: usize,
    pub alpha: f64,
    pub final_val_acc: f64,
    pub run_dir: PathBuf,
}

/// Sequential (or optionally parallel) grid of training runs over
/// (p set × K × α). Every cell trains with the master seed and the base
/// config, so a 1×1×1 grid reproduces a plain training run exactly.
/// Emits one `summary.csv` row per cell.
pub fn run_sweep(config: &RunConfig, out_dir: &Path) -> HarnessResult<Vec<SweepRow>> {
    config.validate()?;
    let mix = config
        .mix
        .as_ref()
        .ok_or_else(|| HarnessError::Config(ConfigError::Invalid("sweep requires a mix policy".into())))?;
    if out_dir.exists() {
        return Err(HarnessError::Collision(out_dir.to_path_buf()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    struct Cell {
        index: usize,
        p_set: Vec<usize>,
        k: usize,
        alpha: f64,
        dir: PathBuf,
        config: RunConfig,
    }
    let mut cells = Vec::new();
    let mut index = 0usize;
    for p_set in &config.sweep_p_sets {
        for &k in &config.sweep_k_values {
            for &alpha in &config.sweep_alpha_values {
                let mut cell_cfg = config.clone();
                let mut cell_mix = mix.clone();
                cell_mix.p_set = p_set.clone();
                cell_mix.k = k;
                cell_mix.alpha = alpha;
                cell_cfg.mix = Some(cell_mix);
                let name = format!(
                    "cell_{index:03}_p{}_k{k}_a{alpha}",
                    p_set.iter().map(|p| p.to_string()).collect::<Vec<_>>().join("-")
                );
                cells.push(Cell {
                    index,
                    p_set: p_set.clone(),
                    k,
                    alpha,
                    dir: out_dir.join(name),
                    config: cell_cfg,
                });
                index += 1;
            }
        }
    }

    let run_cell = |cell: &Cell| -> HarnessResult<SweepRow> {
        let report = run_train(&cell.config, &cell.dir, false)?;
        Ok(SweepRow {
            p_set: cell.p_set.clone(),
            k: cell.k,
            alpha: cell.alpha,
            final_val_acc: report.final_val_acc,
            run_dir: cell.dir.clone(),
        })
    };

    let mut results: Vec<(usize, HarnessResult<SweepRow>)> = if config.sweep_parallel {
        cells.par_iter().map(|c| (c.index, run_cell(c))).collect()
    } else {
        cells.iter().map(|c| (c.index, run_cell(c))).collect()
    };
    results.sort_by_key(|(i, _)| *i);

    let summary_path = out_dir.join("summary.csv");
    append_line(&summary_path, "cell,p_set,k,alpha,final_val_acc\n")?;
    let mut rows = Vec::with_capacity(results.len());
    for (i, result) in results {
        let row = result?;
        append_line(
            &summary_path,
            &format!(
                "{},{},{},{},{:.6}\n",
                i,
                row.p_set
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join("-"),
                row.k,
                row.alpha,
                row.final_val_acc
            ),
        )?;
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synthetic_cifar_bytes;

    fn write_tiny_dataset(dir: &Path) -> (PathBuf, PathBuf) {
        let train = dir.join("train.bin");
        let test = dir.join("test.bin");
        fs::write(&train, synthetic_cifar_bytes(80, 4, 7, CifarLayout::cifar10())).unwrap();
        fs::write(&test, synthetic_cifar_bytes(40, 4, 8, CifarLayout::cifar10())).unwrap();
        (train, test)
    }

    fn tiny_config_epochs(train: &Path, test: &Path, epochs: usize, extra: &str) -> RunConfig {
        let text = format!(
            "data.train = {}\ndata.test = {}\ndata.classes = 4\n\
             model.conv_channels = 4,8\nmodel.hidden = 16\n\
             train.epochs = {epochs}\ntrain.batch_size = 20\n\
             sched.initial = 0.003\nsched.max = 0.05\nsched.final = 0.0005\n{extra}",
            train.display(),
            test.display()
        );
        RunConfig::parse(&text).unwrap()
    }

    fn tiny_config(train: &Path, test: &Path, extra: &str) -> RunConfig {
        tiny_config_epochs(train, test, 2, extra)
    }

    #[test]
    fn train_smoke_and_collision() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_tiny_dataset(dir.path());
        let config = tiny_config(&train, &test, "");
        let out = dir.path().join("run1");
        let report = run_train(&config, &out, false).unwrap();
        assert_eq!(report.epochs_run, 2);
        assert!(out.join("metrics.csv").exists());
        assert!(out.join("final.ckpt").exists());
        assert!(out.join("config.txt").exists());
        let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 3); // header + 2 epochs

        // rerunning into the same directory collides
        assert!(matches!(
            run_train(&config, &out, false),
            Err(HarnessError::Collision(_))
        ));
    }

    #[test]
    fn identical_config_and_seed_give_byte_identical_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_tiny_dataset(dir.path());
        let config = tiny_config(&train, &test, "mix.variant = rmix\nmix.p_set = 2,4\n");
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        run_train(&config, &a, false).unwrap();
        run_train(&config, &b, false).unwrap();
        let ma = fs::read(a.join("metrics.csv")).unwrap();
        let mb = fs::read(b.join("metrics.csv")).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(
            fs::read(a.join("final.ckpt")).unwrap(),
            fs::read(b.join("final.ckpt")).unwrap()
        );
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_tiny_dataset(dir.path());
        let config = tiny_config(&train, &test, "mix.variant = cutmix\n");
        let full = dir.path().join("full");
        let parts = dir.path().join("parts");
        let report_full = run_train(&config, &full, false).unwrap();
        run_train_partial(&config, &parts, false, Some(1)).unwrap();
        let report_resumed = run_train(&config, &parts, true).unwrap();
        assert_eq!(
            fs::read(full.join("metrics.csv")).unwrap(),
            fs::read(parts.join("metrics.csv")).unwrap()
        );
        assert!((report_full.final_val_acc - report_resumed.final_val_acc).abs() < 1e-6);
        assert!((report_full.final_loss - report_resumed.final_loss).abs() < 1e-6);
    }

    #[test]
    fn resume_rejects_config_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_tiny_dataset(dir.path());
        let config = tiny_config(&train, &test, "");
        let out = dir.path().join("run");
        run_train_partial(&config, &out, false, Some(1)).unwrap();
        let other = tiny_config_epochs(&train, &test, 3, "");
        assert!(matches!(
            run_train(&other, &out, true),
            Err(HarnessError::Resume(_))
        ));
    }

    #[test]
    fn eval_reports_metrics_and_writes_csv() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_tiny_dataset(dir.path());
        let config = tiny_config(&train, &test, "");
        let out = dir.path().join("run");
        run_train(&config, &out, false).unwrap();
        let report = run_eval(&config, &out.join("final.ckpt"), None, true).unwrap();
        assert!((0.0..=1.0).contains(&report.top1));
        assert!((0.0..=1.0).contains(&report.ece));
        assert!(report.fgsm_acc.is_some());
        let csv = fs::read_to_string(out.join("eval.csv")).unwrap();
        assert!(csv.contains("top1_acc"));
        assert!(csv.contains("fgsm_error"));
    }

    #[test]
    fn single_cell_sweep_equals_standalone_run() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_tiny_dataset(dir.path());
        let config = tiny_config(
            &train,
            &test,
            "mix.variant = rmix\nmix.p_set = 2,4\nmix.k = 10\nmix.alpha = 1.0\n\
             sweep.p_sets = 2,4\nsweep.k_values = 10\nsweep.alpha_values = 1.0\n",
        );
        let sweep_dir = dir.path().join("sweep");
        let rows = run_sweep(&config, &sweep_dir).unwrap();
        assert_eq!(rows.len(), 1);
        let standalone = dir.path().join("standalone");
        let report = run_train(&config, &standalone, false).unwrap();
        assert!((rows[0].final_val_acc - report.final_val_acc).abs() < 1e-12);
        let summary = fs::read_to_string(sweep_dir.join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 2);
    }

    #[test]
    fn four_cell_sweep_emits_four_rows() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_tiny_dataset(dir.path());
        let mut config = tiny_config(
            &train,
            &test,
            "mix.variant = rmix\nsweep.p_sets = 2|4\nsweep.k_values = 5,10\n",
        );
        config.epochs = 1;
        let sweep_dir = dir.path().join("sweep");
        let rows = run_sweep(&config, &sweep_dir).unwrap();
        assert_eq!(rows.len(), 4);
        let summary = fs::read_to_string(sweep_dir.join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 5);
    }

    #[test]
    fn rlmix_smoke_run_writes_transitions() {
        let dir = tempfile::tempdir().unwrap();
        let (train, test) = write_tiny_dataset(dir.path());
        let config = tiny_config_epochs(
            &train,
            &test,
            1,
            "mix.variant = rmix\nrl.p = 8\nrl.hidden = 8\n",
        );
        let out = dir.path().join("rl");
        let report = run_rlmix(&config, &out, false).unwrap();
        assert_eq!(report.epochs_run, 1);
        let transitions = fs::read_to_string(out.join("transitions.csv")).unwrap();
        assert_eq!(transitions.lines().count(), 81); // header + 80 decisions
        for line in transitions.lines().skip(1) {
            let reward: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert!((-1.0..=1.0).contains(&reward));
        }
    }
}
