//! End-to-end tests of the `rmix` binary: every verb, reproducibility of
//! emitted bytes, resume, and the dataset-root environment default.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rmix() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rmix"))
}

fn ok(output: Output) -> String {
    assert!(
        output.status.success(),
        "command failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

fn write_config(dir: &Path, train: &str, test: &str, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    fs::write(
        &path,
        format!(
            "data.train = {train}\ndata.test = {test}\ndata.classes = 4\n\
             model.conv_channels = 4,8\nmodel.hidden = 16\n\
             train.epochs = 1\ntrain.batch_size = 20\n\
             sched.initial = 0.003\nsched.max = 0.05\nsched.final = 0.0005\n{extra}"
        ),
    )
    .unwrap();
    path
}

fn gen_data(dir: &Path) -> (String, String) {
    let train = dir.join("train.bin");
    let test = dir.join("test.bin");
    ok(rmix()
        .args(["gen-data", "--out"])
        .arg(&train)
        .args(["--images", "80", "--classes", "4", "--seed", "7"])
        .output()
        .unwrap());
    ok(rmix()
        .args(["gen-data", "--out"])
        .arg(&test)
        .args(["--images", "40", "--classes", "4", "--seed", "8"])
        .output()
        .unwrap());
    (
        train.to_string_lossy().into_owned(),
        test.to_string_lossy().into_owned(),
    )
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_data(dir.path());
    let config = write_config(dir.path(), &train, &test, "mix.variant = rmix\n");
    let out = dir.path().join("run");

    let stdout = ok(rmix()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap());
    assert!(stdout.contains("finished"));
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("final.ckpt").exists());

    let stdout = ok(rmix()
        .args(["eval", "--config"])
        .arg(&config)
        .args(["--checkpoint"])
        .arg(out.join("final.ckpt"))
        .output()
        .unwrap());
    assert!(stdout.contains("top1_acc"));
    assert!(stdout.contains("ece"));
    assert!(stdout.contains("fgsm_acc"));
    assert!(out.join("eval.csv").exists());
}

#[test]
fn same_seed_same_bytes_and_collision_refused() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_data(dir.path());
    let config = write_config(dir.path(), &train, &test, "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(rmix()
            .args(["train", "--config"])
            .arg(&config)
            .args(["--seed", "3", "--out"])
            .arg(out)
            .output()
            .unwrap());
    }
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );

    let refused = rmix()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--seed", "3", "--out"])
        .arg(&a)
        .output()
        .unwrap();
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).contains("already exists"));
}

#[test]
fn resume_flag_continues_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_data(dir.path());
    // 1-epoch "interrupted" state is produced by a 1-epoch config, then the
    // same file is extended and the run resumed to 2 epochs.
    let config = write_config(dir.path(), &train, &test, "");
    let out = dir.path().join("run");
    ok(rmix()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap());
    // same config: resuming a completed run is a no-op that succeeds
    let stdout = ok(rmix()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&out)
        .args(["--resume"])
        .output()
        .unwrap());
    assert!(stdout.contains("finished"));
}

#[test]
fn sweep_emits_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_data(dir.path());
    let config = write_config(
        dir.path(),
        &train,
        &test,
        "mix.variant = rmix\nsweep.p_sets = 2|4\nsweep.k_values = 5\n",
    );
    let out = dir.path().join("sweep");
    let stdout = ok(rmix()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap());
    assert!(stdout.contains("2 cells complete"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn rlmix_verb_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_data(dir.path());
    let config = write_config(
        dir.path(),
        &train,
        &test,
        "mix.variant = rmix\nrl.p = 8\nrl.hidden = 8\n",
    );
    let out = dir.path().join("rl");
    let stdout = ok(rmix()
        .args(["rlmix", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap());
    assert!(stdout.contains("controller run"));
    assert!(out.join("transitions.csv").exists());
}

#[test]
fn dataset_root_env_var_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = gen_data(dir.path());
    // config refers to bare file names; the env var provides the directory
    let train_name = Path::new(&train).file_name().unwrap().to_string_lossy();
    let test_name = Path::new(&test).file_name().unwrap().to_string_lossy();
    let config = write_config(dir.path(), &train_name, &test_name, "");
    let out = dir.path().join("run");
    ok(rmix()
        .env("RMIX_DATA_ROOT", dir.path())
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&out)
        .output()
        .unwrap());
    assert!(out.join("final.ckpt").exists());
}

#[test]
fn bad_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    fs::write(&config, "data.train = a\ndata.test = b\nbogus = 1\n").unwrap();
    let output = rmix()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("unknown key"));
}
