//! Command-line front end: reproducible training, evaluation, sweep, and
//! controller runs driven by flat key-value config files.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rmix::config::RunConfig;
use rmix::dataio::{synthetic_cifar_bytes_full, CifarLayout};
use rmix::harness::{run_eval, run_rlmix, run_sweep, run_train};

#[derive(Parser)]
#[command(
    name = "rmix",
    about = "Saliency-guided patch mix-up training and evaluation harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model as described by a config file.
    Train {
        /// Config file (flat `key = value` text).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output run directory (must not exist unless resuming).
        #[arg(long)]
        out: PathBuf,
        /// Resume from the directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint: accuracy, calibration error, attack robustness.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint file (e.g. RUN_DIR/final.ckpt).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics CSV destination (defaults to eval.csv next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Skip the adversarial-attack metric.
        #[arg(long)]
        no_fgsm: bool,
    },
    /// Run the config's (p set × K × α) grid of training runs.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the classifier jointly with the percentile controller.
    Rlmix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: bool,
    },
    /// Generate a synthetic dataset file in the CIFAR binary layout.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5000)]
        images: usize,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Record layout: cifar10 (1 label byte) or cifar100 (2 label bytes).
        #[arg(long, default_value = "cifar10")]
        format: String,
        /// Fraction of labels re-drawn uniformly at random.
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
        /// Probability that an image's background gradient is class-locked.
        #[arg(long, default_value_t = 0.0)]
        bg_bias: f64,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<RunConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut config = RunConfig::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    Ok(config)
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => {
            let config = load_config(&config, seed)?;
            let report = run_train(&config, &out, resume).map_err(|e| e.to_string())?;
            println!(
                "run {} finished: {} epochs, loss {:.4}, train_acc {:.4}, val_acc {:.4}",
                report.run_id,
                report.epochs_run,
                report.final_loss,
                report.final_train_acc,
                report.final_val_acc
            );
            println!("outputs in {}", report.run_dir.display());
            Ok(())
        }
        Command::Eval {
            config,
            seed,
            checkpoint,
            out,
            no_fgsm,
        } => {
            let config = load_config(&config, seed)?;
            let report = run_eval(&config, &checkpoint, out.as_deref(), !no_fgsm)
                .map_err(|e| e.to_string())?;
            println!("top1_acc {:.4}", report.top1);
            println!("ece {:.4}", report.ece);
            if let Some(acc) = report.fgsm_acc {
                println!("fgsm_acc {:.4} (error {:.4})", acc, 1.0 - acc);
            }
            Ok(())
        }
        Command::Sweep { config, seed, out } => {
            let config = load_config(&config, seed)?;
            let rows = run_sweep(&config, &out).map_err(|e| e.to_string())?;
            println!("{} cells complete; summary in {}", rows.len(), out.join("summary.csv").display());
            for row in rows {
                println!(
                    "p={:?} k={} alpha={} -> val_acc {:.4}",
                    row.p_set, row.k, row.alpha, row.final_val_acc
                );
            }
            Ok(())
        }
        Command::Rlmix {
            config,
            seed,
            out,
            resume,
        } => {
            let config = load_config(&config, seed)?;
            let report = run_rlmix(&config, &out, resume).map_err(|e| e.to_string())?;
            println!(
                "controller run {} finished: {} epochs, val_acc {:.4}",
                report.run_id, report.epochs_run, report.final_val_acc
            );
            println!("outputs in {}", report.run_dir.display());
            Ok(())
        }
        Command::GenData {
            out,
            images,
            classes,
            seed,
            format,
            label_noise,
            bg_bias,
        } => {
            let layout = match format.as_str() {
                "cifar10" => CifarLayout::cifar10(),
                "cifar100" => CifarLayout::cifar100(),
                other => return Err(format!("unknown format `{other}`")),
            };
            if classes > layout.num_classes {
                return Err(format!(
                    "{classes} classes exceed the {} layout",
                    layout.num_classes
                ));
            }
            if !(0.0..=1.0).contains(&label_noise) {
                return Err(format!("label noise {label_noise} outside [0, 1]"));
            }
            if !(0.0..=1.0).contains(&bg_bias) {
                return Err(format!("bg bias {bg_bias} outside [0, 1]"));
            }
            let bytes =
                synthetic_cifar_bytes_full(images, classes, seed, layout, label_noise, bg_bias);
            fs::write(&out, &bytes).map_err(|e| format!("{}: {e}", out.display()))?;
            println!(
                "wrote {} images ({} classes, seed {seed}) to {}",
                images,
                classes,
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
