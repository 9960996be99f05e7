//! Run configuration: a flat, typed `key = value` text format.
//!
//! The format is line-oriented so config files diff cleanly and sweeps can
//! generate variants by string substitution. `#` starts a comment; keys are
//! dotted for grouping but the file has no nesting. Every field is validated
//! before a run starts, and the exact text of the file is embedded in the
//! run directory for provenance.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::autodiff::LossKind;
use crate::dataio::CifarLayout;
use crate::mixers::{MixPolicy, MixVariant, SamplingGranularity};
use crate::netlib::{AnnealStrategy, LrSchedule};
use crate::saliency::GridMode;
use crate::tensor::QuantileMethod;

/// Environment variable used as the default root for relative dataset paths.
pub const DATA_ROOT_ENV: &str = "RMIX_DATA_ROOT";

#[derive(Clone, Debug, PartialEq)]
pub enum ConfigError {
    Syntax { line: usize, text: String },
    UnknownKey { line: usize, key: String },
    DuplicateKey { line: usize, key: String },
    BadValue { key: String, value: String, expected: &'static str },
    MissingKey { key: &'static str },
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Syntax { line, text } => {
                write!(f, "line {line}: expected `key = value`, got `{text}`")
            }
            ConfigError::UnknownKey { line, key } => write!(f, "line {line}: unknown key `{key}`"),
            ConfigError::DuplicateKey { line, key } => {
                write!(f, "line {line}: key `{key}` set twice")
            }
            ConfigError::BadValue { key, value, expected } => {
                write!(f, "key `{key}`: cannot parse `{value}` as {expected}")
            }
            ConfigError::MissingKey { key } => write!(f, "missing required key `{key}`"),
            ConfigError::Invalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for ConfigError {}

pub type ConfigResult<T> = Result<T, ConfigError>;

/// Source dataset format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Cifar10,
    Cifar100,
    /// IDX image/label file pairs (single-channel).
    Idx,
}

impl DataFormat {
    pub fn cifar_layout(self) -> Option<CifarLayout> {
        match self {
            DataFormat::Cifar10 => Some(CifarLayout::cifar10()),
            DataFormat::Cifar100 => Some(CifarLayout::cifar100()),
            DataFormat::Idx => None,
        }
    }
}

/// Mixing section of the run config; `None` trains without mixing.
#[derive(Clone, Debug)]
pub struct MixConfig {
    pub variant: MixVariant,
    pub alpha: f64,
    pub k: usize,
    pub p_set: Vec<usize>,
    pub granularity: SamplingGranularity,
    pub quantile_method: QuantileMethod,
    pub grid_mode: GridMode,
}

impl MixConfig {
    pub fn to_policy(&self) -> MixPolicy {
        MixPolicy {
            variant: self.variant,
            alpha: self.alpha,
            k: self.k,
            p_set: self.p_set.clone(),
            granularity: self.granularity,
            quantile_method: self.quantile_method,
            grid_mode: self.grid_mode,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SchedKind {
    OneCycle,
    MultiStep,
}

/// Complete, seedable description of one training/evaluation run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Verbatim text this config was parsed from (embedded in run outputs).
    pub raw: String,

    pub seed: u64,
    pub train_path: String,
    pub test_path: String,
    pub train_labels_path: Option<String>,
    pub test_labels_path: Option<String>,
    pub format: DataFormat,
    pub num_classes: usize,
    pub subset_train: usize,
    pub subset_test: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub pad: usize,
    pub augment: bool,

    pub conv_channels: Vec<usize>,
    pub hidden: usize,

    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub loss: LossKind,

    pub sched_kind: SchedKind,
    pub sched_initial: f64,
    pub sched_max: f64,
    pub sched_final: f64,
    pub sched_pct_up: f64,
    pub sched_anneal: AnnealStrategy,
    pub sched_base: f64,
    pub sched_gamma: f64,
    pub sched_milestones: Vec<usize>,

    pub mix: Option<MixConfig>,

    pub ece_bins: usize,
    pub fgsm_eps: f64,

    pub rl_p: usize,
    pub rl_lr: f64,
    pub rl_hidden: usize,
    pub rl_log_transitions: bool,

    pub sweep_p_sets: Vec<Vec<usize>>,
    pub sweep_k_values: Vec<usize>,
    pub sweep_alpha_values: Vec<f64>,
    pub sweep_parallel: bool,
}

impl RunConfig {
    /// Parse and validate. The input text is kept verbatim in `raw`.
    pub fn parse(text: &str) -> ConfigResult<RunConfig> {
        let mut seen: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line_no_comment = match line.find('#') {
                Some(i) => &line[..i],
                None => line,
            };
            let trimmed = line_no_comment.trim();
            if trimmed.is_empty() {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or(ConfigError::Syntax {
                line: lineno + 1,
                text: trimmed.to_string(),
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.contains_key(&key) {
                return Err(ConfigError::DuplicateKey {
                    line: lineno + 1,
                    key,
                });
            }
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey {
                    line: lineno + 1,
                    key,
                });
            }
            seen.insert(key, (lineno + 1, value));
        }

        let get = |key: &'static str| seen.get(key).map(|(_, v)| v.clone());
        let require = |key: &'static str| get(key).ok_or(ConfigError::MissingKey { key });

        let format = match get("data.format").as_deref() {
            None | Some("cifar10") => DataFormat::Cifar10,
            Some("cifar100") => DataFormat::Cifar100,
            Some("idx") => DataFormat::Idx,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "data.format".into(),
                    value: other.into(),
                    expected: "cifar10 | cifar100 | idx",
                })
            }
        };

        let mix = match get("mix.variant").as_deref() {
            None | Some("none") => None,
            Some(name) => {
                let variant = match name {
                    "rmix" => MixVariant::RMix,
                    "input_mixup" => MixVariant::InputMixup,
                    "cutmix" => MixVariant::CutMix,
                    "strategy1" => MixVariant::Strategy1,
                    "strategy2" => MixVariant::Strategy2,
                    "strategy4" => MixVariant::Strategy4,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: "mix.variant".into(),
                            value: other.into(),
                            expected:
                                "none | rmix | input_mixup | cutmix | strategy1 | strategy2 | strategy4",
                        })
                    }
                };
                Some(MixConfig {
                    variant,
                    alpha: parse_f64_or(&get("mix.alpha"), 1.0, "mix.alpha")?,
                    k: parse_usize_or(&get("mix.k"), 10, "mix.k")?,
                    p_set: parse_usize_list_or(&get("mix.p_set"), vec![2, 4], "mix.p_set")?,
                    granularity: match get("mix.granularity").as_deref() {
                        None | Some("per_batch") => SamplingGranularity::PerBatch,
                        Some("per_pair") => SamplingGranularity::PerPair,
                        Some(other) => {
                            return Err(ConfigError::BadValue {
                                key: "mix.granularity".into(),
                                value: other.into(),
                                expected: "per_batch | per_pair",
                            })
                        }
                    },
                    quantile_method: match get("mix.quantile").as_deref() {
                        None | Some("linear") => QuantileMethod::Linear,
                        Some("nearest_rank") => QuantileMethod::NearestRank,
                        Some(other) => {
                            return Err(ConfigError::BadValue {
                                key: "mix.quantile".into(),
                                value: other.into(),
                                expected: "linear | nearest_rank",
                            })
                        }
                    },
                    grid_mode: match get("mix.grid_mode").as_deref() {
                        None | Some("grid_side") => GridMode::GridSide,
                        Some("kernel_size") => GridMode::KernelSize,
                        Some(other) => {
                            return Err(ConfigError::BadValue {
                                key: "mix.grid_mode".into(),
                                value: other.into(),
                                expected: "grid_side | kernel_size",
                            })
                        }
                    },
                })
            }
        };

        let sched_kind = match get("sched.kind").as_deref() {
            None | Some("one_cycle") => SchedKind::OneCycle,
            Some("multi_step") => SchedKind::MultiStep,
            Some(other) => {
                return Err(ConfigError::BadValue {
                    key: "sched.kind".into(),
                    value: other.into(),
                    expected: "one_cycle | multi_step",
                })
            }
        };

        let config = RunConfig {
            raw: text.to_string(),
            seed: parse_u64_or(&get("seed"), 0, "seed")?,
            train_path: require("data.train")?,
            test_path: require("data.test")?,
            train_labels_path: get("data.train_labels"),
            test_labels_path: get("data.test_labels"),
            format,
            num_classes: parse_usize_or(&get("data.classes"), 10, "data.classes")?,
            subset_train: parse_usize_or(&get("data.subset_train"), 0, "data.subset_train")?,
            subset_test: parse_usize_or(&get("data.subset_test"), 0, "data.subset_test")?,
            mean: parse_f64_list_or(&get("data.mean"), vec![0.5, 0.5, 0.5], "data.mean")?,
            std: parse_f64_list_or(&get("data.std"), vec![0.25, 0.25, 0.25], "data.std")?,
            pad: parse_usize_or(&get("data.pad"), 2, "data.pad")?,
            augment: parse_bool_or(&get("data.augment"), true, "data.augment")?,
            conv_channels: parse_usize_list_or(
                &get("model.conv_channels"),
                vec![8, 16],
                "model.conv_channels",
            )?,
            hidden: parse_usize_or(&get("model.hidden"), 64, "model.hidden")?,
            epochs: parse_usize_or(&get("train.epochs"), 30, "train.epochs")?,
            batch_size: parse_usize_or(&get("train.batch_size"), 100, "train.batch_size")?,
            momentum: parse_f64_or(&get("opt.momentum"), 0.9, "opt.momentum")?,
            weight_decay: parse_f64_or(&get("opt.weight_decay"), 1e-4, "opt.weight_decay")?,
            nesterov: parse_bool_or(&get("opt.nesterov"), true, "opt.nesterov")?,
            loss: match get("loss").as_deref() {
                None | Some("sigmoid_bce") => LossKind::SigmoidBce,
                Some("soft_ce") => LossKind::SoftCrossEntropy,
                Some(other) => {
                    return Err(ConfigError::BadValue {
                        key: "loss".into(),
                        value: other.into(),
                        expected: "sigmoid_bce | soft_ce",
                    })
                }
            },
            sched_kind,
            sched_initial: parse_f64_or(&get("sched.initial"), 3e-3, "sched.initial")?,
            sched_max: parse_f64_or(&get("sched.max"), 0.3, "sched.max")?,
            sched_final: parse_f64_or(&get("sched.final"), 3e-5, "sched.final")?,
            sched_pct_up: parse_f64_or(&get("sched.pct_up"), 0.3, "sched.pct_up")?,
            sched_anneal: match get("sched.anneal").as_deref() {
                None | Some("cosine") => AnnealStrategy::Cosine,
                Some("linear") => AnnealStrategy::Linear,
                Some(other) => {
                    return Err(ConfigError::BadValue {
                        key: "sched.anneal".into(),
                        value: other.into(),
                        expected: "cosine | linear",
                    })
                }
            },
            sched_base: parse_f64_or(&get("sched.base"), 0.1, "sched.base")?,
            sched_gamma: parse_f64_or(&get("sched.gamma"), 0.1, "sched.gamma")?,
            sched_milestones: parse_usize_list_or(
                &get("sched.milestones"),
                vec![],
                "sched.milestones",
            )?,
            mix,
            ece_bins: parse_usize_or(&get("eval.ece_bins"), 15, "eval.ece_bins")?,
            fgsm_eps: parse_f64_or(&get("eval.fgsm_eps"), 8.0 / 255.0, "eval.fgsm_eps")?,
            rl_p: parse_usize_or(&get("rl.p"), 8, "rl.p")?,
            rl_lr: parse_f64_or(&get("rl.lr"), 1e-3, "rl.lr")?,
            rl_hidden: parse_usize_or(&get("rl.hidden"), 64, "rl.hidden")?,
            rl_log_transitions: parse_bool_or(&get("rl.log_transitions"), true, "rl.log_transitions")?,
            sweep_p_sets: parse_p_sets_or(&get("sweep.p_sets"), vec![vec![2, 4]], "sweep.p_sets")?,
            sweep_k_values: parse_usize_list_or(&get("sweep.k_values"), vec![10], "sweep.k_values")?,
            sweep_alpha_values: parse_f64_list_or(
                &get("sweep.alpha_values"),
                vec![1.0],
                "sweep.alpha_values",
            )?,
            sweep_parallel: parse_bool_or(&get("sweep.parallel"), false, "sweep.parallel")?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> ConfigResult<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ConfigError::Invalid("epochs and batch size must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(ConfigError::Invalid("class count must be positive".into()));
        }
        if self.mean.len() != self.std.len() {
            return Err(ConfigError::Invalid("mean and std must have equal lengths".into()));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(ConfigError::Invalid("std components must be > 0".into()));
        }
        if self.conv_channels.is_empty() {
            return Err(ConfigError::Invalid("model needs at least one conv block".into()));
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return Err(ConfigError::Invalid("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(ConfigError::Invalid("weight decay must be non-negative".into()));
        }
        if self.fgsm_eps < 0.0 {
            return Err(ConfigError::Invalid("fgsm epsilon must be non-negative".into()));
        }
        if self.ece_bins == 0 {
            return Err(ConfigError::Invalid("ece bins must be positive".into()));
        }
        if let Some(mix) = &self.mix {
            if !(mix.alpha > 0.0) {
                return Err(ConfigError::Invalid("mix.alpha must be > 0".into()));
            }
            if mix.k == 0 {
                return Err(ConfigError::Invalid("mix.k must be ≥ 1".into()));
            }
        }
        if self.format == DataFormat::Idx
            && (self.train_labels_path.is_none() || self.test_labels_path.is_none())
        {
            return Err(ConfigError::Invalid(
                "idx format needs data.train_labels and data.test_labels".into(),
            ));
        }
        match self.sched_kind {
            SchedKind::OneCycle => {
                if !(self.sched_pct_up > 0.0 && self.sched_pct_up < 1.0) {
                    return Err(ConfigError::Invalid("sched.pct_up must lie in (0, 1)".into()));
                }
                if !(self.sched_initial > 0.0 && self.sched_max > 0.0 && self.sched_final > 0.0) {
                    return Err(ConfigError::Invalid("learning rates must be positive".into()));
                }
            }
            SchedKind::MultiStep => {
                if !(self.sched_base > 0.0 && self.sched_gamma > 0.0) {
                    return Err(ConfigError::Invalid(
                        "sched.base and sched.gamma must be positive".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Build the learning-rate schedule for a run of `total_steps`.
    /// Milestones are given in epochs and converted to steps here.
    pub fn schedule(&self, total_steps: usize, steps_per_epoch: usize) -> LrSchedule {
        match self.sched_kind {
            SchedKind::OneCycle => LrSchedule::OneCycle {
                initial: self.sched_initial,
                max: self.sched_max,
                final_lr: self.sched_final,
                pct_up: self.sched_pct_up,
                total_steps,
                strategy: self.sched_anneal,
            },
            SchedKind::MultiStep => LrSchedule::MultiStep {
                base: self.sched_base,
                gamma: self.sched_gamma,
                milestones: self
                    .sched_milestones
                    .iter()
                    .map(|&e| e * steps_per_epoch)
                    .collect(),
                total_steps,
            },
        }
    }

    /// Resolve a dataset path against the dataset-root environment variable.
    pub fn resolve_path(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            return p.to_path_buf();
        }
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => Path::new(&root).join(p),
            None => p.to_path_buf(),
        }
    }

    /// Stable identifier derived from the config text and seed: equal
    /// configs and seeds give equal run ids on every platform.
    pub fn run_id(&self) -> String {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV-1a
        for b in self.raw.bytes().chain(self.seed.to_le_bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        format!("{h:016x}")
    }

    /// The config text to embed in run outputs: the original text, plus an
    /// override trailer when the seed was replaced on the command line.
    pub fn embedded_text(&self) -> String {
        let parsed_seed = RunConfig::parse_seed_only(&self.raw);
        if parsed_seed == Some(self.seed) {
            self.raw.clone()
        } else {
            format!(
                "{}\n# seed overridden on the command line\nseed = {}\n",
                self.raw.trim_end(),
                self.seed
            )
        }
    }

    fn parse_seed_only(text: &str) -> Option<u64> {
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if let Some((k, v)) = line.split_once('=') {
                if k.trim() == "seed" {
                    return v.trim().parse().ok();
                }
            }
        }
        Some(0) // absent seed defaults to 0
    }
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "data.train",
    "data.test",
    "data.train_labels",
    "data.test_labels",
    "data.format",
    "data.classes",
    "data.subset_train",
    "data.subset_test",
    "data.mean",
    "data.std",
    "data.pad",
    "data.augment",
    "model.conv_channels",
    "model.hidden",
    "train.epochs",
    "train.batch_size",
    "opt.momentum",
    "opt.weight_decay",
    "opt.nesterov",
    "loss",
    "sched.kind",
    "sched.initial",
    "sched.max",
    "sched.final",
    "sched.pct_up",
    "sched.anneal",
    "sched.base",
    "sched.gamma",
    "sched.milestones",
    "mix.variant",
    "mix.alpha",
    "mix.k",
    "mix.p_set",
    "mix.granularity",
    "mix.quantile",
    "mix.grid_mode",
    "eval.ece_bins",
    "eval.fgsm_eps",
    "rl.p",
    "rl.lr",
    "rl.hidden",
    "rl.log_transitions",
    "sweep.p_sets",
    "sweep.k_values",
    "sweep.alpha_values",
    "sweep.parallel",
];

fn parse_f64_or(v: &Option<String>, default: f64, key: &str) -> ConfigResult<f64> {
    match v {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: s.clone(),
            expected: "number",
        }),
    }
}

fn parse_u64_or(v: &Option<String>, default: u64, key: &str) -> ConfigResult<u64> {
    match v {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: s.clone(),
            expected: "unsigned integer",
        }),
    }
}

fn parse_usize_or(v: &Option<String>, default: usize, key: &str) -> ConfigResult<usize> {
    match v {
        None => Ok(default),
        Some(s) => s.parse().map_err(|_| ConfigError::BadValue {
            key: key.into(),
            value: s.clone(),
            expected: "unsigned integer",
        }),
    }
}

fn parse_bool_or(v: &Option<String>, default: bool, key: &str) -> ConfigResult<bool> {
    match v.as_deref() {
        None => Ok(default),
        Some("true") => Ok(true),
        Some("false") => Ok(false),
        Some(s) => Err(ConfigError::BadValue {
            key: key.into(),
            value: s.into(),
            expected: "true | false",
        }),
    }
}

fn parse_usize_list_or(v: &Option<String>, default: Vec<usize>, key: &str) -> ConfigResult<Vec<usize>> {
    match v {
        None => Ok(default),
        Some(s) if s.trim().is_empty() => Ok(vec![]),
        Some(s) => s
            .split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: s.clone(),
                    expected: "comma-separated unsigned integers",
                })
            })
            .collect(),
    }
}

fn parse_f64_list_or(v: &Option<String>, default: Vec<f64>, key: &str) -> ConfigResult<Vec<f64>> {
    match v {
        None => Ok(default),
        Some(s) => s
            .split(',')
            .map(|part| {
                part.trim().parse().map_err(|_| ConfigError::BadValue {
                    key: key.into(),
                    value: s.clone(),
                    expected: "comma-separated numbers",
                })
            })
            .collect(),
    }
}

/// Pipe-separated list of comma-separated sets: `2,4|4,8`.
fn parse_p_sets_or(
    v: &Option<String>,
    default: Vec<Vec<usize>>,
    key: &str,
) -> ConfigResult<Vec<Vec<usize>>> {
    match v {
        None => Ok(default),
        Some(s) => s
            .split('|')
            .map(|set| {
                set.split(',')
                    .map(|part| {
                        part.trim().parse().map_err(|_| ConfigError::BadValue {
                            key: key.into(),
                            value: s.clone(),
                            expected: "pipe-separated sets of comma-separated integers",
                        })
                    })
                    .collect()
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "data.train = train.bin\ndata.test = test.bin\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 0);
        assert_eq!(cfg.batch_size, 100);
        assert_eq!(cfg.epochs, 30);
        assert_eq!(cfg.sched_kind, SchedKind::OneCycle);
        assert_eq!(cfg.sched_initial, 3e-3);
        assert_eq!(cfg.sched_max, 0.3);
        assert_eq!(cfg.sched_final, 3e-5);
        assert_eq!(cfg.ece_bins, 15);
        assert!((cfg.fgsm_eps - 8.0 / 255.0).abs() < 1e-15);
        assert!(cfg.mix.is_none());
        assert_eq!(cfg.momentum, 0.9);
        assert_eq!(cfg.weight_decay, 1e-4);
        assert!(cfg.nesterov);
    }

    #[test]
    fn full_mix_section_parses() {
        let text = format!(
            "{MINIMAL}mix.variant = rmix\nmix.alpha = 0.5\nmix.k = 5\nmix.p_set = 2,4,8\nmix.granularity = per_pair\nmix.quantile = nearest_rank\nmix.grid_mode = kernel_size\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        let mix = cfg.mix.unwrap();
        assert_eq!(mix.variant, MixVariant::RMix);
        assert_eq!(mix.alpha, 0.5);
        assert_eq!(mix.k, 5);
        assert_eq!(mix.p_set, vec![2, 4, 8]);
        assert_eq!(mix.granularity, SamplingGranularity::PerPair);
        assert_eq!(mix.quantile_method, QuantileMethod::NearestRank);
        assert_eq!(mix.grid_mode, GridMode::KernelSize);
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_keys() {
        assert!(matches!(
            RunConfig::parse("data.train = a\ndata.test = b\nnonsense.key = 1\n"),
            Err(ConfigError::UnknownKey { line: 3, .. })
        ));
        assert!(matches!(
            RunConfig::parse("data.train = a\ndata.train = b\ndata.test = c\n"),
            Err(ConfigError::DuplicateKey { line: 2, .. })
        ));
        assert!(matches!(
            RunConfig::parse("data.train a\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RunConfig::parse(&format!("{MINIMAL}train.epochs = many\n")),
            Err(ConfigError::BadValue { .. })
        ));
    }

    #[test]
    fn validation_catches_bad_ranges() {
        assert!(RunConfig::parse(&format!("{MINIMAL}train.epochs = 0\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}data.std = 0.2,0.0,0.3\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}mix.variant = rmix\nmix.alpha = 0\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}sched.pct_up = 1.5\n")).is_err());
        assert!(RunConfig::parse(&format!("{MINIMAL}data.format = idx\n")).is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "# a comment\n\ndata.train = a.bin # trailing comment\ndata.test = b.bin\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train_path, "a.bin");
    }

    #[test]
    fn run_id_is_stable_and_seed_sensitive() {
        let a = RunConfig::parse(MINIMAL).unwrap();
        let b = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(a.run_id(), b.run_id());
        let mut c = RunConfig::parse(MINIMAL).unwrap();
        c.seed = 1;
        assert_ne!(a.run_id(), c.run_id());
    }

    #[test]
    fn embedded_text_round_trips_and_records_overrides() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.embedded_text(), MINIMAL);
        let mut overridden = cfg.clone();
        overridden.seed = 5;
        let text = overridden.embedded_text();
        assert!(text.contains("seed = 5"));
        // the embedded text parses back to the same effective config
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back.seed, 5);
    }

    #[test]
    fn sweep_grid_parses_pipe_sets() {
        let text = format!(
            "{MINIMAL}sweep.p_sets = 2,4|8,16|2,4,8\nsweep.k_values = 5,10\nsweep.alpha_values = 0.2,1.0\n"
        );
        let cfg = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg.sweep_p_sets, vec![vec![2, 4], vec![8, 16], vec![2, 4, 8]]);
        assert_eq!(cfg.sweep_k_values, vec![5, 10]);
        assert_eq!(cfg.sweep_alpha_values, vec![0.2, 1.0]);
    }

    #[test]
    fn schedule_construction_converts_milestones() {
        let text = format!("{MINIMAL}sched.kind = multi_step\nsched.milestones = 2,4\n");
        let cfg = RunConfig::parse(&text).unwrap();
        let sched = cfg.schedule(300, 50);
        match sched {
            LrSchedule::MultiStep { milestones, .. } => assert_eq!(milestones, vec![100, 200]),
            _ => panic!("expected multi-step"),
        }
    }
}
